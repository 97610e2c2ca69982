"""Seeded end-to-end runs: data, pre-training, federated rounds, metrics files."""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ..data import Dataset, generate_domain, make_glyph_bank, select_classes, split, transform_eval
from ..federation.client import ClientConfig, ClientState
from ..federation.messages import RoundConfig
from ..federation.rounds import run_round
from ..federation.server import PretrainConfig, ServerState, server_pretrain
from ..federation.transport import InProcessTransport, SocketTransport
from ..model import ModelConfig, ModelParams, embed, init_params
from ..numerics import make_rng
from ..prototypes import PrototypeSet, nearest_prototype_batch
from ..training import TrainConfig
from .config import ExperimentConfig, load_config


def run_seed(cfg: ExperimentConfig, rep: int) -> int:
    return cfg.seed + rep


def model_config(cfg: ExperimentConfig) -> ModelConfig:
    return ModelConfig(cfg.in_dim, tuple(cfg.hidden), cfg.embed_dim, cfg.n_classes,
                       cfg.linear_std, cfg.bn_momentum)


def pretrain_config(cfg: ExperimentConfig, seed: int) -> PretrainConfig:
    train = TrainConfig(cfg.server_epochs, cfg.server_batch, cfg.server_lr, cfg.momentum, cfg.weight_decay,
                        cfg.label_smoothing, patience=cfg.patience)
    return PretrainConfig(model_config(cfg), train, seed)


def client_config(cfg: ExperimentConfig) -> ClientConfig:
    return ClientConfig(batch_size=cfg.client_batch, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                        label_smoothing=cfg.label_smoothing, sampling=cfg.sampling_enabled,
                        sampler_budget=cfg.sampler_budget, upstream=cfg.upstream)


@dataclass
class PreparedRun:
    rep: int
    seed: int
    params: ModelParams
    source_protos: PrototypeSet
    source: Dataset
    client_data: list[tuple[Dataset, Dataset]]
    classes: tuple[int, ...]
    loss_curve: list[float] = field(default_factory=list)


def build_data(cfg: ExperimentConfig, rep: int):
    """Source dataset and per-client (train, test) splits for one repetition."""
    s = run_seed(cfg, rep)
    bank = make_glyph_bank(cfg.n_classes, cfg.image_size, seed=s)
    src_cfg = replace(cfg.source, seed=cfg.source.seed + s)
    source = generate_domain(bank, src_cfg, cfg.source_per_class, instance_seed=1000 * s + 1, domain_id="source")
    client_data = []
    for i, target in enumerate(cfg.targets):
        dom = generate_domain(bank, replace(target, seed=target.seed + s), cfg.target_per_class,
                              instance_seed=1000 * s + 10 + i, domain_id=f"target-{i}")
        client_data.append(split(dom, (1 - cfg.test_fraction, cfg.test_fraction), make_rng([s, 31, i])))
    return source, client_data


def round_classes(cfg: ExperimentConfig, rep: int) -> tuple[int, ...]:
    if cfg.class_subset >= cfg.n_classes:
        return tuple(range(cfg.n_classes))
    return select_classes(cfg.n_classes, cfg.class_subset, make_rng([run_seed(cfg, rep), 21]))


def prepare_run(cfg: ExperimentConfig, rep: int) -> PreparedRun:
    s = run_seed(cfg, rep)
    source, client_data = build_data(cfg, rep)
    curve: list[float] = []
    params, protos = server_pretrain(source, pretrain_config(cfg, s), curve)
    return PreparedRun(rep, s, params, protos, source, client_data, round_classes(cfg, rep), curve)


def make_clients(cfg: ExperimentConfig, prepared: PreparedRun, strategy: str) -> list[ClientState]:
    out = []
    for i, (train, test) in enumerate(prepared.client_data):
        c = ClientState(f"client-{i}", i, train, test, client_config(cfg))
        if strategy != "on_demand":
            # pre-installed copy of the pre-trained model
            c.baseline, c.baseline_version = prepared.params.copy(), 1
        out.append(c)
    return out


def make_transport(kind: str, server: ServerState, cfg: ExperimentConfig):
    if kind == "socket":
        return SocketTransport(server, cfg.host, cfg.port)
    return InProcessTransport(server)


def zero_shot_accuracy(params: ModelParams, protos: PrototypeSet, data: Dataset, classes) -> float:
    """Accuracy of the pre-trained model with source prototypes on ``data``."""
    data = data.subset(np.flatnonzero(np.isin(data.labels, list(classes))))
    z = embed(params, transform_eval(data.images).reshape(len(data), -1))
    pred, _ = nearest_prototype_batch(z, protos.restrict(classes))
    return float((pred == data.labels).mean())


def run_clients(cfg: ExperimentConfig, prepared: PreparedRun, k: int | None = None,
                strategy: str | None = None, transport: str | None = None,
                rounds: int | None = None, telemetry: list | None = None) -> list[dict]:
    """Federated rounds on a pre-trained model; one row per (round, client).

    Sampler decisions are appended to ``telemetry`` when it is given and the
    clients stream their support sets.
    """
    k = cfg.k if k is None else k
    strategy = strategy or cfg.strategy
    rounds = rounds or cfg.rounds
    server = ServerState.from_pretrained(prepared.params, prepared.source_protos, strategy)
    clients = make_clients(cfg, prepared, strategy)
    tr = make_transport(transport or cfg.transport, server, cfg)
    epochs = max(1, cfg.client_epochs // rounds)
    support_seed = prepared.seed if cfg.redraw_support else cfg.seed
    rows = []
    try:
        for r in range(rounds):
            rc = RoundConfig(k, prepared.classes, epochs, cfg.client_lr, 100 * support_seed + r)
            m = run_round(server, clients, tr, rc)
            for c in clients:
                row = {"rep": prepared.rep, "seed": prepared.seed, "round": r, "client": c.client_id,
                       "k": k, "strategy": strategy}
                res = m.clients.get(c.client_id)
                if res is None:
                    row.update(accuracy=float("nan"), failure=m.failures.get(c.client_id, ""))
                else:
                    row.update({key: res[key] for key in ("accuracy", "param_bytes", "upload_bytes",
                                                          "pre_loss", "post_loss", "labels_requested")})
                row["zero_shot_accuracy"] = zero_shot_accuracy(prepared.params, prepared.source_protos,
                                                               c.test_data, prepared.classes)
                row["version"] = m.version_after
                rows.append(row)
                if telemetry is not None and c.telemetry is not None and res is not None:
                    for t, sel, q, p, keep in c.telemetry.rows:
                        telemetry.append({"rep": prepared.rep, "round": r, "client": c.client_id, "t": t,
                                          "selected": sel, "q_t": q, "p_t": p, "keep": keep})
    finally:
        tr.close()
    return rows


@dataclass
class RunMetrics:
    rows: list[dict]
    summary: dict
    loss_curves: dict[int, list[float]]
    timings: dict[str, float]
    telemetry: list[dict] = field(default_factory=list)


def _mean_std(values) -> tuple[float, float]:
    v = np.array([x for x in values if not math.isnan(x)], dtype=np.float64)
    if not len(v):
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std())


def summarise(rows: list[dict], group=("client",)) -> list[dict]:
    """Mean and (population) std of the final-round accuracy per group."""
    last = max(r["round"] for r in rows)
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        if r["round"] == last:
            groups.setdefault(tuple(r[g] for g in group), []).append(r)
    out = []
    for key in sorted(groups):
        rs = groups[key]
        acc_m, acc_s = _mean_std(r["accuracy"] for r in rs)
        zs_m, zs_s = _mean_std(r["zero_shot_accuracy"] for r in rs)
        out.append({**dict(zip(group, key)), "runs": len(rs), "accuracy_mean": acc_m, "accuracy_std": acc_s,
                    "zero_shot_mean": zs_m, "zero_shot_std": zs_s})
    return out


ROW_FIELDS = ("rep", "seed", "round", "client", "k", "strategy", "accuracy", "zero_shot_accuracy",
              "param_bytes", "upload_bytes", "pre_loss", "post_loss", "labels_requested", "version", "failure")


def write_rows(rows, path, fields=ROW_FIELDS):
    with open(path, "w", newline="") as fh:
        out = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore", lineterminator="\n")
        out.writeheader()
        for r in rows:
            out.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _run_one(args):
    cfg, rep = args
    t0 = time.perf_counter()
    prepared = prepare_run(cfg, rep)
    t1 = time.perf_counter()
    telemetry: list[dict] = []
    rows = run_clients(cfg, prepared, telemetry=telemetry)
    return rows, prepared.loss_curve, {"pretrain": t1 - t0, "clients": time.perf_counter() - t1}, telemetry


def run_experiment(config, out_dir=None, overrides=(), workers: int = 1) -> RunMetrics:
    """Run every repetition and write metrics.csv, summary.json, server_loss.csv, timings.json."""
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config, overrides)
    jobs = [(cfg, rep) for rep in range(cfg.repetitions)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    rows = [r for res in results for r in res[0]]
    curves = {rep: res[1] for rep, res in enumerate(results)}
    timings = {f"rep{rep}.{k}": v for rep, res in enumerate(results) for k, v in res[2].items()}
    summary = {"k": cfg.k, "strategy": cfg.strategy, "repetitions": cfg.repetitions,
               "clients": summarise(rows)}
    metrics = RunMetrics(rows, summary, curves, timings, [r for res in results for r in res[3]])
    if out_dir is not None:
        write_metrics(metrics, out_dir)
    return metrics


def write_metrics(metrics: RunMetrics, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    write_rows(metrics.rows, os.path.join(out_dir, "metrics.csv"))
    _write_json(metrics.summary, os.path.join(out_dir, "summary.json"))
    with open(os.path.join(out_dir, "server_loss.csv"), "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["rep", "epoch", "loss"])
        for rep, curve in metrics.loss_curves.items():
            for e, v in enumerate(curve):
                out.writerow([rep, e, repr(v)])
    if metrics.telemetry:
        write_rows(metrics.telemetry, os.path.join(out_dir, "sampler_telemetry.csv"), TELEMETRY_FIELDS)
    # wall-clock numbers are kept apart so the other files stay reproducible
    _write_json(metrics.timings, os.path.join(out_dir, "timings.json"))


TELEMETRY_FIELDS = ("rep", "round", "client", "t", "selected", "q_t", "p_t", "keep")
SWEEP_FIELDS = ("k", "runs", "accuracy_mean", "accuracy_std", "zero_shot_mean", "zero_shot_std")


def sweep_k(cfg: ExperimentConfig, out_dir=None, k_values=None) -> list[dict]:
    """One row per k, averaged over repetitions and clients. Pre-training is shared across k."""
    k_values = tuple(cfg.k_values if k_values is None else k_values)
    rows = []
    for rep in range(cfg.repetitions):
        prepared = prepare_run(cfg, rep)
        for k in k_values:
            rows.extend(run_clients(cfg, prepared, k=k))
    table = summarise(rows, group=("k",))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_rows(rows, os.path.join(out_dir, "sweep_runs.csv"))
        write_rows(table, os.path.join(out_dir, "sweep_k.csv"), SWEEP_FIELDS)
    return table


def compare_strategies(cfg: ExperimentConfig, out_dir=None, rounds: int = 2, rep: int = 0) -> dict:
    """Same seeded run under each transmission strategy; reports message bytes per round."""
    from ..federation.server import STRATEGIES

    prepared = prepare_run(cfg, rep)
    per_strategy = {}
    for strategy in STRATEGIES:
        per_strategy[strategy] = run_clients(cfg, prepared, strategy=strategy, rounds=rounds)
    report = {"rounds": rounds, "strategies": {}}
    for strategy, rows in per_strategy.items():
        by_round = {}
        for r in rows:
            b = by_round.setdefault(r["round"], {"param_bytes": 0, "upload_bytes": 0, "accuracy": []})
            b["param_bytes"] += r.get("param_bytes", 0)
            b["upload_bytes"] += r.get("upload_bytes", 0)
            b["accuracy"].append(r["accuracy"])
        report["strategies"][strategy] = {
            "first_contact_bytes": by_round[0]["param_bytes"],
            "rounds": [by_round[i] for i in sorted(by_round)],
        }
    first = [report["strategies"][s]["rounds"][0]["accuracy"] for s in STRATEGIES]
    report["identical_first_round_accuracy"] = all(a == first[0] for a in first)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _write_json(report, os.path.join(out_dir, "strategies.json"))
        write_rows([r for rows in per_strategy.values() for r in rows], os.path.join(out_dir, "strategy_runs.csv"))
    return report


def export_embeddings(model: ModelParams, dataset: Dataset, out_path, stage: str = "pretrained"):
    """CSV of eval-mode embeddings: e0..e{m-1}, label, stage."""
    m = model.embed_dim
    with open(out_path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow([f"e{i}" for i in range(m)] + ["label", "stage"])
        if len(dataset):
            z = embed(model, transform_eval(dataset.images).reshape(len(dataset), -1))
            for row, y in zip(z, dataset.labels):
                out.writerow([repr(float(v)) for v in row] + [int(y), stage])
    return out_path


def export_stages(cfg: ExperimentConfig, out_dir, rep: int = 0, client: int = 0) -> list[str]:
    """Target test embeddings before training, after pre-training and after adaptation."""
    from ..federation.client import client_adapt, prepare_support

    prepared = prepare_run(cfg, rep)
    untrained = init_params(model_config(cfg), make_rng([prepared.seed, 11]))
    train, test = prepared.client_data[client]
    c = ClientState(f"client-{client}", client, train, test, client_config(cfg))
    c.install(prepared.params)
    rc = RoundConfig(cfg.k, prepared.classes, cfg.client_epochs, cfg.client_lr, 100 * prepared.seed)
    prepare_support(c, rc)
    client_adapt(c, rc, prepared.source_protos)
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for stage, model in (("baseline", untrained), ("pretrained", prepared.params), ("fine-tuned", c.model)):
        paths.append(export_embeddings(model, test, os.path.join(out_dir, f"embeddings_{stage}.csv"), stage))
    return paths
