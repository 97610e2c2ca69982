"""Client side: adaptation of the adaptation layer, prototypes and inference."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..data import Dataset, SupportSet, build_support_set, transform_eval
from ..errors import FedAcrossError, NotReadyError, ProtocolError, ScarcityError
from ..model import ModelParams, embed, freeze, model_loss
from ..numerics import make_rng
from ..prototypes import PrototypeSet, compute_prototypes, nearest_prototype, nearest_prototype_batch
from ..sampler import (SamplerState, SamplerTelemetry, new_sampler_state, populate_support,
                       stream_from_dataset)
from ..training import TrainConfig, train
from .messages import (ACK_BASELINE, ACK_NEED_SOURCE, ACK_READY, ACK_WAIT, Ack, AdaptedUpload, ClientHello, ModelDelta,
                       ModelFull, RoundConfig, SourcePrototypes, apply_delta)


class RetryLater(FedAcrossError):
    """The server is between rounds; reconnect after a pause."""


@dataclass
class ClientConfig:
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 1e-3
    label_smoothing: float = 0.1
    sampling: bool = False
    sampler_budget: float = 0.3
    stream_passes: int = 5
    upstream: bool = True


@dataclass
class ClientState:
    client_id: str
    index: int
    train_data: Dataset
    test_data: Dataset
    config: ClientConfig = field(default_factory=ClientConfig)
    baseline: ModelParams | None = None
    baseline_version: int = 0
    model: ModelParams | None = None
    support: SupportSet | None = None
    protos: PrototypeSet | None = None
    sampler: SamplerState | None = None
    telemetry: SamplerTelemetry | None = None
    loss_history: list = field(default_factory=list)

    def install(self, params: ModelParams):
        """Initialise from received parameters and freeze extractor and classifier."""
        self.model = freeze(params, {"phi", "nu"})

    def rng(self, cfg: RoundConfig, purpose: int) -> np.random.Generator:
        return make_rng([cfg.seed, self.index, purpose])


def prepare_support(client: ClientState, cfg: RoundConfig) -> SupportSet:
    """Static k-shot draw, or stream sampling when the client has it enabled."""
    if cfg.k == 0:
        client.support = SupportSet(0, tuple(cfg.classes), {n: np.zeros((0, 0, 0)) for n in cfg.classes})
    elif client.config.sampling:
        if client.model is None:
            raise NotReadyError("sampling needs an installed model")
        client.sampler = new_sampler_state(client.model.embed_dim, client.config.sampler_budget)
        client.telemetry = SamplerTelemetry()
        stream = stream_from_dataset(client.train_data, client.rng(cfg, 2), client.config.stream_passes)
        client.support = populate_support(
            stream, client.model, cfg.k, cfg.classes, lambda s: s.label,
            state=client.sampler, rng=client.rng(cfg, 3), telemetry=client.telemetry)
    else:
        client.support = build_support_set(client.train_data, cfg.k, cfg.classes, client.rng(cfg, 1))
    return client.support


def support_loss(model: ModelParams, support: SupportSet, epsilon: float = 0.1) -> float:
    """Eval-mode loss on the un-augmented support set."""
    images, labels = support.arrays()
    return model_loss(model, images.reshape(len(labels), -1), labels, epsilon, mode="eval")


def client_adapt(client: ClientState, cfg: RoundConfig, source_protos: PrototypeSet | None = None) -> AdaptedUpload:
    """Fine-tune the adaptation layer on the support set, then build prototypes.

    With ``k = 0`` nothing is trained and the source prototypes are adopted.
    """
    if client.model is None:
        raise NotReadyError("no model installed")
    if not (client.model.frozen_phi and client.model.frozen_nu):
        raise ProtocolError("extractor and classifier must be frozen before adaptation")
    if cfg.k == 0:
        if source_protos is None:
            raise NotReadyError("k = 0 needs the server's source prototypes")
        client.protos = source_protos.restrict(cfg.classes)
        return AdaptedUpload(client.client_id, client.model.psi.copy(), client.protos, {})
    support = client.support
    if support is None or len(support) == 0:
        raise ScarcityError(f"{client.client_id}: empty support set with k={cfg.k}")
    images, labels = support.arrays()
    c = client.config
    tcfg = TrainConfig(epochs=cfg.epochs, batch_size=c.batch_size, lr=cfg.lr, momentum=c.momentum,
                       weight_decay=c.weight_decay, label_smoothing=c.label_smoothing)
    client.loss_history = []
    client.model = train(client.model, images, labels, tcfg, client.rng(cfg, 4), client.loss_history)
    z = embed(client.model, transform_eval(images).reshape(len(labels), -1))
    client.protos = compute_prototypes(z, labels)
    return AdaptedUpload(client.client_id, client.model.psi.copy(), client.protos, support.counts())


def client_infer(client: ClientState, x) -> int:
    if client.protos is None or client.model is None:
        raise NotReadyError(f"{client.client_id} has no prototypes yet")
    x = transform_eval(x).reshape(-1)
    pred, _ = nearest_prototype(embed(client.model, x), client.protos)
    return pred


def client_predict(client: ClientState, images) -> np.ndarray:
    """Batch form of ``client_infer``."""
    if client.protos is None or client.model is None:
        raise NotReadyError(f"{client.client_id} has no prototypes yet")
    x = transform_eval(images)
    pred, _ = nearest_prototype_batch(embed(client.model, x.reshape(len(x), -1)), client.protos)
    return pred


def evaluate(client: ClientState, data: Dataset | None = None, classes=None) -> float:
    """Accuracy on the hold-back set, restricted to ``classes`` when given."""
    data = client.test_data if data is None else data
    if classes is not None:
        data = data.subset(np.flatnonzero(np.isin(data.labels, list(classes))))
    if not len(data):
        return float("nan")
    return float((client_predict(client, data.images) == data.labels).mean())


def client_session(client: ClientState, channel) -> dict:
    """Run one protocol round trip over ``channel`` and return local metrics."""
    hello = ClientHello(client.client_id, client.baseline is not None, client.baseline_version)
    reply = channel.request(hello)
    param_bytes = channel.last_reply_bytes
    if isinstance(reply, ModelFull):
        client.install(reply.params)
    elif isinstance(reply, ModelDelta):
        if client.baseline is None or reply.base_version != client.baseline_version:
            raise ProtocolError("delta against a baseline this client does not hold")
        client.install(apply_delta(client.baseline, reply))
    elif isinstance(reply, Ack) and reply.code == ACK_BASELINE:
        if client.baseline is None:
            raise ProtocolError("server assumed a pre-configured model")
        client.install(client.baseline)
    else:
        raise ProtocolError(f"unexpected reply {type(reply).__name__} to hello")

    cfg = channel.request(Ack(ACK_READY))
    if isinstance(cfg, Ack) and cfg.code == ACK_WAIT:
        raise RetryLater(client.client_id)
    if not isinstance(cfg, RoundConfig):
        raise ProtocolError("server did not send a round configuration")
    source = None
    if cfg.k == 0:
        msg = channel.request(Ack(ACK_NEED_SOURCE))
        if not isinstance(msg, SourcePrototypes):
            raise ProtocolError("server did not send source prototypes")
        source = msg.prototypes
    prepare_support(client, cfg)
    pre_loss = support_loss(client.model, client.support) if cfg.k else float("nan")
    upload = client_adapt(client, cfg, source)
    upload_bytes = 0
    if client.config.upstream:
        channel.request(upload)
        upload_bytes = channel.last_request_bytes
    return {
        "client_id": client.client_id,
        "accuracy": evaluate(client, classes=cfg.classes),
        "param_bytes": param_bytes,
        "upload_bytes": upload_bytes,
        "pre_loss": pre_loss,
        "post_loss": support_loss(client.model, client.support) if cfg.k else float("nan"),
        "labels_requested": client.telemetry.labels_requested if client.telemetry else cfg.k * len(cfg.classes),
    }
