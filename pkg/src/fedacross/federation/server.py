"""Server side: pre-training, parameter transmission and aggregation."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field

import numpy as np

from ..data import Dataset
from ..errors import ConfigError, ProtocolError, WeightingError
from ..model import AdaptationParams, ModelConfig, ModelParams, PSI_FIELDS, embed, init_params
from ..numerics import make_rng
from ..prototypes import PrototypeSet, compute_prototypes, fuse_prototypes
from ..training import TrainConfig, train
from .messages import (ACK_BASELINE, ACK_NEED_SOURCE, ACK_OK, ACK_READY, ACK_WAIT, Ack,
                       AdaptedUpload, ClientHello, ModelFull, RoundConfig,
                       SourcePrototypes, compute_delta)

log = logging.getLogger(__name__)

STRATEGIES = ("on_demand", "pre_configured", "differential_sync")


@dataclass
class PretrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=300, batch_size=128, lr=0.01))
    seed: int = 0


def server_pretrain(source: Dataset, config: PretrainConfig, history: list | None = None):
    """Train every group on the source data, then build source prototypes.

    Returns ``(params, source_prototypes)``.
    """
    present = set(np.unique(source.labels).tolist())
    missing = set(range(config.model.n_classes)) - present
    if missing:
        raise ConfigError(f"source data lacks classes {sorted(missing)}")
    rng = make_rng([config.seed, 11])
    params = init_params(config.model, rng)
    params = train(params, source.images, source.labels, config.train, rng, history)
    z = embed(params, source.flat)
    return params, compute_prototypes(z, source.labels)


def fedavg_psi(uploads, weights=None) -> AdaptationParams:
    """Weighted mean of every adaptation-layer array across uploads."""
    uploads = list(uploads)
    if not uploads:
        raise WeightingError("no uploads to aggregate")
    w = np.array([u.total_support for u in uploads] if weights is None else weights, dtype=np.float64)
    if len(w) != len(uploads) or (w < 0).any():
        raise WeightingError("one non-negative weight per upload required")
    total = w.sum()
    if total <= 0:
        raise WeightingError("total aggregation weight is zero")
    out = {}
    for name in PSI_FIELDS:
        acc = np.zeros_like(np.asarray(getattr(uploads[0].psi, name), dtype=np.float64))
        for wi, u in zip(w, uploads):
            acc = acc + wi * getattr(u.psi, name)
        out[name] = acc / total
    first = uploads[0].psi
    return AdaptationParams(**out, bn_momentum=first.bn_momentum, bn_eps=first.bn_eps)


@dataclass
class ServerState:
    global_params: ModelParams
    baseline: ModelParams
    source_protos: PrototypeSet
    version: int = 1
    baseline_version: int = 1
    strategy: str = "on_demand"
    round_cfg: RoundConfig | None = None
    fused_protos: PrototypeSet | None = None
    registry: dict[str, int] = field(default_factory=dict)
    pending_uploads: list[AdaptedUpload] = field(default_factory=list)
    round_index: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @classmethod
    def from_pretrained(cls, params: ModelParams, source_protos: PrototypeSet, strategy: str = "on_demand"):
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {strategy!r}")
        return cls(params.copy(), params.copy(), source_protos, strategy=strategy)

    def submit(self, upload: AdaptedUpload):
        with self._lock:
            self.pending_uploads.append(upload)

    def close_round(self) -> bool:
        """Aggregate collected uploads; returns whether the global model changed."""
        with self._lock:
            uploads = sorted(self.pending_uploads, key=lambda u: u.client_id)
            self.pending_uploads = []
            self.round_index += 1
        if not uploads:
            return False
        self.fused_protos = fuse_prototypes([self.source_protos] + [u.prototypes for u in uploads])
        if sum(u.total_support for u in uploads) == 0:
            # k = 0 everywhere: nothing was adapted
            return False
        new = self.global_params.copy()
        new.psi = fedavg_psi(uploads)
        self.global_params = new
        self.version += 1
        return True


def transmit_params(server: ServerState, hello: ClientHello, strategy: str | None = None):
    strategy = strategy or server.strategy
    if strategy == "on_demand":
        return ModelFull(server.version, server.global_params)
    if strategy == "pre_configured":
        if not hello.has_baseline:
            raise ProtocolError(f"{hello.client_id} has no pre-configured model")
        return Ack(ACK_BASELINE)
    if strategy == "differential_sync":
        if not hello.has_baseline or hello.baseline_version != server.baseline_version:
            log.info("client %s: baseline %s unknown, sending full model",
                     hello.client_id, hello.baseline_version if hello.has_baseline else None)
            return ModelFull(server.version, server.global_params)
        return compute_delta(server.baseline, server.global_params, server.baseline_version, server.version)
    raise ConfigError(f"unknown strategy {strategy!r}")


class ServerSession:
    """Per-connection request handler. ``handle`` maps one request to one reply."""

    def __init__(self, server: ServerState):
        self.server = server
        self.client_id: str | None = None

    def handle(self, msg):
        s = self.server
        if isinstance(msg, ClientHello):
            self.client_id = msg.client_id
            reply = transmit_params(s, msg)
            with s._lock:
                s.registry[msg.client_id] = s.version
            return reply
        if self.client_id is None:
            raise ProtocolError("session must start with a hello")
        if isinstance(msg, Ack) and msg.code == ACK_READY:
            with s._lock:
                busy = s.round_cfg is None or any(u.client_id == self.client_id for u in s.pending_uploads)
            # already uploaded this round, or between rounds: come back later
            return Ack(ACK_WAIT) if busy else s.round_cfg
        if isinstance(msg, Ack) and msg.code == ACK_NEED_SOURCE:
            return SourcePrototypes(s.source_protos)
        if isinstance(msg, AdaptedUpload):
            if msg.client_id != self.client_id:
                raise ProtocolError("upload does not belong to this session")
            s.submit(msg)
            return Ack(ACK_OK)
        raise ProtocolError(f"unexpected {type(msg).__name__} from {self.client_id}")
