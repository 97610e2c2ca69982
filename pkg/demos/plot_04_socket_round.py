"""
One federated round over TCP
============================

The same round as the in-process simulation, but every message crosses a
real socket on localhost.
"""

from fedacross.harness import parse_config, prepare_run, run_clients

cfg = parse_config("", ["experiment.k=5"])
run = prepare_run(cfg, rep=0)

local = run_clients(cfg, run)
wired = run_clients(cfg, run, transport="socket")

for row in wired:
    print(f"{row['client']}  accuracy {row['accuracy']:.3f}  "
          f"model {row['param_bytes']} B down, {row['upload_bytes']} B up")

# Seeds fix everything, so the transport must not matter.
print("identical to the in-process run:", local == wired)
