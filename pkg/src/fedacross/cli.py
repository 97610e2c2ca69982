"""Command-line entry point: ``python -m fedacross <command> --config run.ini``.

Every command accepts ``--set section.key=value`` to override config keys.
Exit status is 0 on success; configuration, data-scarcity, divergence,
transport and protocol failures each have their own nonzero code.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

from .codec import Reader, Writer
from .errors import FedAcrossError
from .harness.config import ExperimentConfig, dump_config, load_config, parse_config

log = logging.getLogger("fedacross")

MODEL_FILE = "model.famp"
PROTO_FILE = "source_prototypes.bin"


def _config(args) -> ExperimentConfig:
    if args.config:
        return load_config(args.config, args.set)
    return parse_config("", args.set)


def save_source(out_dir, params, protos):
    from .model import save_params
    from .prototypes import export_prototypes_csv, write_prototypes

    os.makedirs(out_dir, exist_ok=True)
    save_params(params, os.path.join(out_dir, MODEL_FILE))
    w = Writer()
    write_prototypes(w, protos)
    with open(os.path.join(out_dir, PROTO_FILE), "wb") as fh:
        fh.write(w.getvalue())
    export_prototypes_csv(protos, os.path.join(out_dir, "source_prototypes.csv"))


def load_source(model_dir):
    from .model import load_params
    from .prototypes import read_prototypes

    params = load_params(os.path.join(model_dir, MODEL_FILE))
    with open(os.path.join(model_dir, PROTO_FILE), "rb") as fh:
        r = Reader(fh.read())
    protos = read_prototypes(r)
    r.expect_done()
    return params, protos


def cmd_pretrain(args):
    from .harness.experiment import build_data, pretrain_config, run_seed
    from .federation.server import server_pretrain

    cfg = _config(args)
    source, _ = build_data(cfg, args.rep)
    curve: list[float] = []
    params, protos = server_pretrain(source, pretrain_config(cfg, run_seed(cfg, args.rep)), curve)
    save_source(args.out, params, protos)
    with open(os.path.join(args.out, "server_loss.csv"), "w") as fh:
        fh.write("epoch,loss\n")
        for e, v in enumerate(curve):
            fh.write(f"{e},{v!r}\n")
    print(f"pre-trained on {len(source)} source samples; final loss {curve[-1] if curve else float('nan'):.4f}")
    print(f"wrote {os.path.join(args.out, MODEL_FILE)}")


def cmd_serve(args):
    from .federation.messages import RoundConfig
    from .federation.server import ServerState
    from .federation.transport import SocketServer
    from .harness.experiment import round_classes, run_seed

    cfg = _config(args)
    params, protos = load_source(args.model)
    state = ServerState.from_pretrained(params, protos, cfg.strategy)
    srv = SocketServer(state, cfg.host, cfg.port).start()
    host, port = srv.address
    print(f"serving on {host}:{port} strategy={cfg.strategy}", flush=True)
    s = run_seed(cfg, 0)
    classes = round_classes(cfg, 0)
    epochs = max(1, cfg.client_epochs // cfg.rounds)
    try:
        for r in range(cfg.rounds):
            state.round_cfg = RoundConfig(cfg.k, classes, epochs, cfg.client_lr, 100 * s + r)
            deadline = time.monotonic() + args.round_timeout
            while len(state.pending_uploads) < args.clients and time.monotonic() < deadline:
                time.sleep(0.05)
            # barrier reached: stop handing out this round's config, then aggregate
            state.round_cfg = None
            got = len(state.pending_uploads)
            changed = state.close_round()
            print(f"round {r}: {got} uploads, version {state.version}{' (updated)' if changed else ''}", flush=True)
    finally:
        srv.close()
    if args.out:
        save_source(args.out, state.global_params, state.fused_protos or protos)


def cmd_client(args):
    from .federation.client import ClientState, RetryLater, client_session
    from .federation.transport import SocketChannel
    from .harness.experiment import build_data, client_config
    from .model import load_params

    cfg = _config(args)
    _, client_data = build_data(cfg, 0)
    if not 0 <= args.index < len(client_data):
        raise FedAcrossError(f"client index {args.index} out of range (config has {len(client_data)} clients)")
    train, test = client_data[args.index]
    c = ClientState(f"client-{args.index}", args.index, train, test, client_config(cfg))
    if args.baseline:
        c.baseline, c.baseline_version = load_params(args.baseline), 1
    results = []
    for r in range(cfg.rounds):
        deadline = time.monotonic() + args.wait
        while True:
            try:
                with SocketChannel(args.host or cfg.host, args.port or cfg.port) as ch:
                    res = client_session(c, ch)
                break
            except RetryLater:
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.2)
        results.append(res)
        print(f"round {r}: accuracy {res['accuracy']:.4f} param bytes {res['param_bytes']}", flush=True)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)


def cmd_simulate(args):
    from .harness.experiment import run_experiment

    cfg = _config(args)
    m = run_experiment(cfg, args.out or cfg.out_dir, workers=args.workers)
    for row in m.summary["clients"]:
        print(f"{row['client']}: accuracy {row['accuracy_mean']:.4f} +- {row['accuracy_std']:.4f} "
              f"(zero-shot {row['zero_shot_mean']:.4f})")


def cmd_sweep_k(args):
    from .harness.experiment import sweep_k

    cfg = _config(args)
    table = sweep_k(cfg, args.out or cfg.out_dir)
    for row in table:
        print(f"k={row['k']:>2}: accuracy {row['accuracy_mean']:.4f} +- {row['accuracy_std']:.4f}")


def cmd_compare(args):
    from .harness.experiment import compare_strategies

    cfg = _config(args)
    report = compare_strategies(cfg, args.out or cfg.out_dir, rounds=args.rounds)
    for name, rep in report["strategies"].items():
        per_round = ", ".join(str(r["param_bytes"]) for r in rep["rounds"])
        print(f"{name:>18}: parameter bytes per round [{per_round}]")
    print(f"identical first-round accuracy: {report['identical_first_round_accuracy']}")


def cmd_export(args):
    from .harness.experiment import export_stages

    cfg = _config(args)
    for path in export_stages(cfg, args.out, client=args.index):
        print(f"wrote {path}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedacross", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="sectioned key-value config file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        sp.set_defaults(fn=fn)
        return sp

    sp = command("pretrain", cmd_pretrain, "train on the source domain and save the model")
    sp.add_argument("--out", required=True)
    sp.add_argument("--rep", type=int, default=0)

    sp = command("serve", cmd_serve, "run the round server over TCP")
    sp.add_argument("--model", required=True, help="directory written by pretrain")
    sp.add_argument("--clients", type=int, default=1, help="uploads that close a round")
    sp.add_argument("--round-timeout", type=float, default=600.0)
    sp.add_argument("--out", help="save the aggregated model here")

    sp = command("client", cmd_client, "run one client against a server")
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--host")
    sp.add_argument("--port", type=int)
    sp.add_argument("--baseline", help="pre-installed model file")
    sp.add_argument("--wait", type=float, default=600.0)
    sp.add_argument("--out", help="write per-round metrics JSON")

    sp = command("simulate", cmd_simulate, "all repetitions in one process")
    sp.add_argument("--out")
    sp.add_argument("--workers", type=int, default=1)

    sp = command("sweep-k", cmd_sweep_k, "accuracy for each k in experiment.k_values")
    sp.add_argument("--out")

    sp = command("compare-strategies", cmd_compare, "bytes on the wire per transmission strategy")
    sp.add_argument("--out")
    sp.add_argument("--rounds", type=int, default=2)

    sp = command("export-embeddings", cmd_export, "embedding CSVs before and after each training stage")
    sp.add_argument("--out", required=True)
    sp.add_argument("--index", type=int, default=0)

    sp = sub.add_parser("show-config", help="print the effective configuration")
    sp.add_argument("--config")
    sp.add_argument("--set", action="append", default=[])
    sp.set_defaults(fn=lambda a: print(dump_config(_config(a)), end=""))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except FedAcrossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0
