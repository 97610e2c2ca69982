"""Determinantal stream sampling for filling a k-shot support set.

An observed embedding ``tau`` is kept with probability::

    p_t = q_t * tau' S^-1 tau / tr(S^-1 * (1/t) sum_j tau_j tau_j')

``S`` is a ridge-regularised covariance over the samples already kept; its
inverse is maintained with rank-one updates. The sum in the normaliser runs
over every observed sample. ``q_t`` is steered towards a target labelling rate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from .data import Dataset, Sample, SupportSet, augment_batch, load_dataset
from .errors import DegenerateUpdateError, ExhaustionError, ShapeError
from .model import ModelParams, embed
from .numerics import make_rng, sherman_morrison_update


class DegenerateStreamError(DegenerateUpdateError):
    pass


@dataclass
class SamplerState:
    inv_cov: np.ndarray
    sum_outer: np.ndarray
    budget: float
    q: float
    t: int = 0
    selected: int = 0
    q_min: float = 1e-3
    q_max: float = 1.0
    rate_floor: float = 1e-3

    @property
    def dim(self) -> int:
        return self.inv_cov.shape[0]

    @property
    def rate(self) -> float:
        return self.selected / self.t if self.t else 0.0


def new_sampler_state(dim: int, budget: float = 0.1, q0: float | None = None, ridge: float = 1.0,
                      q_min: float = 1e-3, q_max: float = 1.0, rate_floor: float | None = None) -> SamplerState:
    if not 0.0 < budget <= 1.0:
        raise ValueError("budget must lie in (0, 1]")
    return SamplerState(
        inv_cov=np.eye(dim) / ridge,
        sum_outer=np.zeros((dim, dim)),
        budget=budget,
        q=budget if q0 is None else q0,
        q_min=q_min,
        q_max=q_max,
        rate_floor=budget / 10 if rate_floor is None else rate_floor,
    )


@dataclass
class StreamDecision:
    keep: bool
    probability: float
    embedding: np.ndarray


def selection_probability(state: SamplerState, tau) -> float:
    tau = np.asarray(tau, dtype=np.float64)
    if tau.shape != (state.dim,):
        raise ShapeError(f"embedding must have shape ({state.dim},)")
    if state.t < 1:
        raise DegenerateStreamError("no observation yet; the normaliser is undefined")
    # both factors are symmetric: tr(A B) = sum(A * B)
    trace = float((state.inv_cov * state.sum_outer).sum()) / state.t
    if trace <= 1e-12:
        raise DegenerateStreamError(f"normaliser trace {trace:.3e}")
    p = state.q * float(tau @ state.inv_cov @ tau) / trace
    return min(max(p, 0.0), 1.0)


def observe_embedding(state: SamplerState, tau, rng: np.random.Generator) -> StreamDecision:
    """Count the observation, draw the keep decision, update the inverse on keep."""
    tau = np.asarray(tau, dtype=np.float64)
    state.t += 1
    state.sum_outer = state.sum_outer + np.outer(tau, tau)
    p = selection_probability(state, tau)
    keep = bool(rng.random() < p)
    if keep:
        state.inv_cov = sherman_morrison_update(state.inv_cov, tau)
        state.selected += 1
    return StreamDecision(keep, p, tau)


def observe(state: SamplerState, x_t: Sample, model: ModelParams, rng: np.random.Generator):
    x_tilde = augment_batch(x_t.pixels[None], rng)[0]
    tau = embed(model, x_tilde.reshape(-1))
    return observe_embedding(state, tau, rng), state


def update_label_frequency(state: SamplerState) -> float:
    """Multiplicative correction of q towards the budget; returns the new q."""
    if state.t < 1:
        return state.q
    rate = max(state.rate, state.rate_floor)
    state.q = min(max(state.q * state.budget / rate, state.q_min), state.q_max)
    return state.q


@dataclass
class SamplerTelemetry:
    rows: list[tuple[int, int, float, float, int]] = field(default_factory=list)
    labels_requested: int = 0
    discarded: int = 0

    def record(self, state: SamplerState, decision: StreamDecision):
        self.rows.append((state.t, state.selected, state.q, decision.probability, int(decision.keep)))

    def write_csv(self, path, append: bool = False):
        with open(path, "a" if append else "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            if not append or fh.tell() == 0:
                out.writerow(["t", "selected", "q_t", "p_t", "keep"])
            for t, sel, q, p, keep in self.rows:
                out.writerow([t, sel, repr(q), repr(p), keep])


def run_stream(state: SamplerState, embeddings: Iterable, rng: np.random.Generator,
               telemetry: SamplerTelemetry | None = None) -> list[StreamDecision]:
    """Feed raw embeddings through the sampler, adapting q after every step."""
    out = []
    for tau in embeddings:
        d = observe_embedding(state, tau, rng)
        update_label_frequency(state)
        if telemetry is not None:
            telemetry.record(state, d)
        out.append(d)
    return out


def stream_from_dataset(ds: Dataset, rng: np.random.Generator, passes: int = 1) -> Iterator[Sample]:
    """Samples in random order; each extra pass is a fresh shuffle of the same pool."""
    for _ in range(passes):
        for i in rng.permutation(len(ds)):
            yield ds[int(i)]


def stream_from_file(path) -> Iterator[Sample]:
    ds = load_dataset(path)
    for i in range(len(ds)):
        yield ds[i]


def populate_support(stream: Iterable[Sample], model: ModelParams, k: int, classes,
                     label_oracle: Callable[[Sample], int], state: SamplerState | None = None,
                     rng: np.random.Generator | None = None,
                     telemetry: SamplerTelemetry | None = None, budget: float = 0.3) -> SupportSet:
    """Sample from ``stream`` until each class in ``classes`` holds ``k`` labelled items.

    Kept items are labelled by ``label_oracle``; an item whose class is already
    full (or not requested) still costs a label and is discarded.
    """
    classes = tuple(sorted(classes))
    if k == 0:
        return SupportSet(0, classes, {n: np.zeros((0, 0, 0)) for n in classes},
                          {n: np.zeros(0, dtype=np.int64) for n in classes})
    rng = rng if rng is not None else make_rng(0)
    state = state if state is not None else new_sampler_state(model.embed_dim, budget)
    telemetry = telemetry if telemetry is not None else SamplerTelemetry()
    filled: dict[int, list[Sample]] = {n: [] for n in classes}
    kept_ids: set[int] = set()

    def done():
        return all(len(v) >= k for v in filled.values())

    for x in stream:
        if x.id in kept_ids:
            # a repeat of something already in the support set; its label is known
            continue
        decision, _ = observe(state, x, model, rng)
        update_label_frequency(state)
        telemetry.record(state, decision)
        if not decision.keep:
            continue
        y = int(label_oracle(x))
        telemetry.labels_requested += 1
        if y in filled and len(filled[y]) < k:
            filled[y].append(x)
            kept_ids.add(x.id)
            if done():
                break
        else:
            telemetry.discarded += 1
    if not done():
        fill = {n: len(v) for n, v in filled.items()}
        raise ExhaustionError(f"stream exhausted before every class reached k={k}: {fill}", fill)
    return SupportSet(
        k, classes,
        {n: np.stack([s.pixels for s in v]) for n, v in filled.items()},
        {n: np.array([s.id for s in v], dtype=np.int64) for n, v in filled.items()},
    )
