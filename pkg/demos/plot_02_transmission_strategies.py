"""
How many bytes reach the client
===============================

Three ways to hand the pre-trained model to a client, compared on the same
seeded run.
"""

from fedacross.harness import compare_strategies, parse_config

# A client that never saw the model needs the whole thing. A client holding
# the pre-installed copy needs nothing, or only the bits that changed since.
cfg = parse_config("", ["experiment.repetitions=1"])
report = compare_strategies(cfg, rounds=2)

for name, entry in report["strategies"].items():
    per_round = [r["param_bytes"] for r in entry["rounds"]]
    print(f"{name:18s} first contact {entry['first_contact_bytes']:8d} B   per round {per_round}")

# The bytes differ but the client ends up with the same weights, so the
# accuracies are identical.
print("same accuracy under every strategy:", report["identical_first_round_accuracy"])
