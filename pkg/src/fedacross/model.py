"""Extractor -> domain-adaptive linear layer -> linear classifier.

The extractor is a fully connected rectifier stack. The adaptation layer is a
linear map with a scalar bias followed by batch normalisation::

    z = ((W x + b) - mu) / sigma * gamma + beta

Gradients are derived by hand; ``model_backward`` returns them keyed by the
same names that ``ModelParams.arrays`` uses.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass

import numpy as np

from .codec import Reader, Writer
from .errors import (NoTrainableParametersError, ProtocolError, ShapeError,
                     StatisticsError, UnsupportedError)
from .numerics import DTYPE, batch_label_smoothed_ce

FORMAT_MAGIC = b"FAMP"
FORMAT_VERSION = 1
GROUPS = ("phi", "psi", "nu")
PSI_TRAINABLE = ("W", "b", "gamma", "beta")
PSI_FIELDS = ("W", "b", "gamma", "beta", "mu", "sigma")


@dataclass
class Layer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray     # (out,)


@dataclass
class ExtractorParams:
    layers: list[Layer]

    @property
    def in_dim(self) -> int:
        return self.layers[0].weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weights.shape[0]


@dataclass
class AdaptationParams:
    W: np.ndarray
    b: np.ndarray  # 0-d: one scalar broadcast over every output dimension
    gamma: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray  # running standard deviation, eps already folded in
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    @property
    def dim(self) -> int:
        return self.W.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PSI_FIELDS}

    def copy(self) -> "AdaptationParams":
        return copy.deepcopy(self)


@dataclass
class ClassifierParams:
    weights: np.ndarray  # (L, m)
    bias: np.ndarray     # (L,)

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]


@dataclass
class ModelParams:
    phi: ExtractorParams
    psi: AdaptationParams
    nu: ClassifierParams
    frozen_phi: bool = False
    frozen_nu: bool = False

    @property
    def embed_dim(self) -> int:
        return self.psi.dim

    @property
    def in_dim(self) -> int:
        return self.phi.in_dim

    @property
    def n_classes(self) -> int:
        return self.nu.n_classes

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def arrays(self) -> dict[str, np.ndarray]:
        """Every stored array in canonical order, keyed ``group.field``."""
        out: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.phi.layers):
            out[f"phi.{i}.weights"] = layer.weights
            out[f"phi.{i}.bias"] = layer.bias
        for name in PSI_FIELDS:
            out[f"psi.{name}"] = getattr(self.psi, name)
        out["nu.weights"] = self.nu.weights
        out["nu.bias"] = self.nu.bias
        return out

    def with_arrays(self, updates: dict[str, np.ndarray]) -> "ModelParams":
        """Copy with the named arrays replaced."""
        new = self.copy()
        for name, value in updates.items():
            group, *rest = name.split(".")
            value = np.array(value, dtype=DTYPE)
            if group == "phi":
                layer = new.phi.layers[int(rest[0])]
                old = getattr(layer, rest[1])
                target, attr = layer, rest[1]
            elif group == "psi":
                old = getattr(new.psi, rest[0])
                target, attr = new.psi, rest[0]
            elif group == "nu":
                old = getattr(new.nu, rest[0])
                target, attr = new.nu, rest[0]
            else:
                raise KeyError(name)
            if old.shape != value.shape:
                raise ShapeError(f"{name}: expected {old.shape}, got {value.shape}")
            setattr(target, attr, value)
        return new


@dataclass
class ModelConfig:
    in_dim: int = 256
    hidden: tuple[int, ...] = (128,)
    embed_dim: int = 32
    n_classes: int = 10
    linear_std: float = 0.01
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5


def _xavier(rng, fan_out, fan_in, shape=None):
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=shape or (fan_out, fan_in))


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Xavier-normal extractor and gamma; N(0, linear_std) for W and the classifier."""
    dims = (config.in_dim, *config.hidden, config.embed_dim)
    layers = [Layer(_xavier(rng, o, i), np.zeros(o)) for i, o in zip(dims[:-1], dims[1:])]
    m = config.embed_dim
    psi = AdaptationParams(
        W=rng.normal(0.0, config.linear_std, size=(m, m)),
        b=np.array(0.0),
        # gamma viewed as a (1, m) weight
        gamma=_xavier(rng, m, 1, shape=(m,)),
        beta=np.zeros(m),
        mu=np.zeros(m),
        sigma=np.ones(m),
        bn_momentum=config.bn_momentum,
        bn_eps=config.bn_eps,
    )
    nu = ClassifierParams(rng.normal(0.0, config.linear_std, size=(config.n_classes, m)),
                          np.zeros(config.n_classes))
    return ModelParams(ExtractorParams(layers), psi, nu)


# -- forward ---------------------------------------------------------------

def extractor_forward(phi: ExtractorParams, x):
    """Returns ``(embedding, cache)``; accepts one vector or a (B, d) batch."""
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != phi.in_dim:
        raise ShapeError(f"extractor expects dim {phi.in_dim}, got {x.shape[-1]}")
    cache = [x]
    h = x
    last = len(phi.layers) - 1
    for i, layer in enumerate(phi.layers):
        h = h @ layer.weights.T + layer.bias
        if i < last:
            h = np.maximum(h, 0.0)
        cache.append(h)
    return h, cache


def _standardise(a, mu, sigma):
    return (a - mu) / sigma


def adaptation_forward(psi: AdaptationParams, x_ring, mode: str = "eval", update_running: bool = True):
    """Apply the adaptation layer.

    In ``train`` mode ``x_ring`` must be a batch of at least two embeddings; batch
    statistics are used and, if ``update_running``, the running ``mu``/``sigma`` of
    ``psi`` are moved towards them in place. Returns ``(z, cache)``.
    """
    x = np.asarray(x_ring, dtype=DTYPE)
    if x.shape[-1] != psi.dim:
        raise ShapeError(f"adaptation expects dim {psi.dim}, got {x.shape[-1]}")
    a = x @ psi.W.T + psi.b
    if mode == "train":
        if x.ndim != 2 or x.shape[0] < 2:
            raise StatisticsError("train mode needs a batch of at least 2 embeddings")
        mu = a.mean(axis=0)
        var = ((a - mu) ** 2).mean(axis=0)
        sigma = np.sqrt(var + psi.bn_eps)
        if update_running:
            r = psi.bn_momentum
            psi.mu = (1.0 - r) * psi.mu + r * mu
            psi.sigma = (1.0 - r) * psi.sigma + r * sigma
    elif mode == "eval":
        mu, sigma = psi.mu, psi.sigma
    else:
        raise ValueError(f"unknown mode {mode!r}")
    xhat = _standardise(a, mu, sigma)
    z = xhat * psi.gamma + psi.beta
    return z, (x, xhat, sigma)


def classifier_forward(nu: ClassifierParams, z):
    z = np.asarray(z, dtype=DTYPE)
    if z.shape[-1] != nu.weights.shape[1]:
        raise ShapeError(f"classifier expects dim {nu.weights.shape[1]}, got {z.shape[-1]}")
    return z @ nu.weights.T + nu.bias


def embed(params: ModelParams, x_tilde) -> np.ndarray:
    """tau(x) = A(f(x)) with stored batch-norm statistics."""
    h, _ = extractor_forward(params.phi, x_tilde)
    z, _ = adaptation_forward(params.psi, h, mode="eval")
    return z


def forward(params: ModelParams, x, mode: str = "eval", update_running: bool = False):
    h, _ = extractor_forward(params.phi, x)
    z, _ = adaptation_forward(params.psi, h, mode=mode, update_running=update_running)
    return classifier_forward(params.nu, z)


# -- backward --------------------------------------------------------------

def trainable_groups(params: ModelParams) -> tuple[str, ...]:
    out = []
    if not params.frozen_phi:
        out.append("phi")
    out.append("psi")
    if not params.frozen_nu:
        out.append("nu")
    return tuple(out)


def model_backward(params: ModelParams, batch, labels, epsilon: float = 0.1,
                   groups=None, mode: str = "train", update_running: bool = False):
    """Mean label-smoothed CE and its analytic gradients.

    ``groups`` restricts differentiation further than the freezing flags; the
    result never contains entries for frozen groups. Running statistics move
    only when ``update_running`` is set. Returns ``(loss, grads)``.
    """
    allowed = set(trainable_groups(params))
    wanted = allowed if groups is None else allowed & set(groups)
    if not wanted:
        raise NoTrainableParametersError("no trainable parameter group selected")
    x = np.asarray(batch, dtype=DTYPE)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ShapeError("batch must be a non-empty (B, d) array")
    labels = np.asarray(labels)

    h, ext_cache = extractor_forward(params.phi, x)
    psi = params.psi
    z, (h_in, xhat, sigma) = adaptation_forward(psi, h, mode=mode, update_running=update_running)
    logits = classifier_forward(params.nu, z)
    loss, dlogits = batch_label_smoothed_ce(logits, labels, epsilon)

    grads: dict[str, np.ndarray] = {}
    if "nu" in wanted:
        grads["nu.weights"] = dlogits.T @ z
        grads["nu.bias"] = dlogits.sum(axis=0)
    if not ({"psi", "phi"} & wanted):
        return loss, grads

    dz = dlogits @ params.nu.weights
    dxhat = dz * psi.gamma
    if mode == "train":
        n = x.shape[0]
        da = (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)) / (n * sigma)
    else:
        da = dxhat / sigma
    if "psi" in wanted:
        grads["psi.W"] = da.T @ h_in
        grads["psi.b"] = np.array(da.sum())
        grads["psi.gamma"] = (dz * xhat).sum(axis=0)
        grads["psi.beta"] = dz.sum(axis=0)
    if "phi" in wanted:
        dh = da @ psi.W
        layers = params.phi.layers
        for i in range(len(layers) - 1, -1, -1):
            if i < len(layers) - 1:
                dh = dh * (ext_cache[i + 1] > 0)
            grads[f"phi.{i}.weights"] = dh.T @ ext_cache[i]
            grads[f"phi.{i}.bias"] = dh.sum(axis=0)
            if i:
                dh = dh @ layers[i].weights
    return loss, grads


def model_loss(params: ModelParams, batch, labels, epsilon: float = 0.1, mode: str = "train") -> float:
    """Side-effect free loss; what ``model_backward`` differentiates."""
    logits = forward(params, batch, mode=mode, update_running=False)
    loss, _ = batch_label_smoothed_ce(logits, labels, epsilon)
    return loss


def freeze(params: ModelParams, groups) -> ModelParams:
    groups = set(groups)
    if "psi" in groups:
        raise UnsupportedError("the adaptation layer is the trainable group and cannot be frozen")
    unknown = groups - {"phi", "nu"}
    if unknown:
        raise UnsupportedError(f"unknown groups {sorted(unknown)}")
    new = params.copy()
    new.frozen_phi = "phi" in groups
    new.frozen_nu = "nu" in groups
    return new


# -- serialization ---------------------------------------------------------

def write_params(w: Writer, params: ModelParams):
    w.u8(int(params.frozen_phi))
    w.u8(int(params.frozen_nu))
    w.f64(params.psi.bn_momentum)
    w.f64(params.psi.bn_eps)
    w.u32(len(params.phi.layers))
    for a in params.arrays().values():
        w.array(a)


def read_params(r: Reader) -> ModelParams:
    frozen_phi, frozen_nu = bool(r.u8()), bool(r.u8())
    bn_momentum, bn_eps = r.f64(), r.f64()
    n_layers = r.u32()
    layers = [Layer(r.array(), r.array()) for _ in range(n_layers)]
    psi_arrays = {name: r.array() for name in PSI_FIELDS}
    psi = AdaptationParams(**psi_arrays, bn_momentum=bn_momentum, bn_eps=bn_eps)
    nu = ClassifierParams(r.array(), r.array())
    return ModelParams(ExtractorParams(layers), psi, nu, frozen_phi, frozen_nu)


def params_to_bytes(params: ModelParams) -> bytes:
    w = Writer()
    w.raw(FORMAT_MAGIC)
    w.u32(FORMAT_VERSION)
    write_params(w, params)
    return w.getvalue()


def params_from_bytes(data: bytes) -> ModelParams:
    r = Reader(data)
    if r.raw() != FORMAT_MAGIC:
        raise ProtocolError("not a model parameter file")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise ProtocolError(f"unsupported parameter format version {version}")
    params = read_params(r)
    r.expect_done()
    return params


def group_bytes(params: ModelParams, group: str) -> bytes:
    """Serialized arrays of one group; used to check freezing byte-for-byte."""
    w = Writer()
    for name, a in params.arrays().items():
        if name.startswith(group + "."):
            w.array(a)
    return w.getvalue()


def save_params(params: ModelParams, path):
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params))


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())


def params_to_json(params: ModelParams, indent: int = 1) -> str:
    """Readable dump for debugging; not meant to round-trip bit-exactly."""
    doc = {
        "frozen": {"phi": params.frozen_phi, "nu": params.frozen_nu},
        "bn_momentum": params.psi.bn_momentum,
        "bn_eps": params.psi.bn_eps,
        "arrays": {k: np.asarray(v).tolist() for k, v in params.arrays().items()},
    }
    return json.dumps(doc, indent=indent)
