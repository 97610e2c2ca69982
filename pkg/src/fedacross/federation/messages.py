"""Protocol messages and their wire format.

A frame is a 4-byte big-endian length, then a 1-byte type tag, then the
payload. Every payload starts with a format version byte. The length counts
the tag and the payload.

Only ``ModelFull`` and ``ModelDelta`` carry weight tensors, and no message
type has a field that can hold sample pixels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from ..codec import Reader, Writer
from ..errors import ProtocolError
from ..model import (AdaptationParams, ModelParams, PSI_FIELDS, read_params,
                     write_params)
from ..prototypes import PrototypeSet, read_prototypes, write_prototypes

WIRE_VERSION = 1
HEADER = struct.Struct(">IB")
MAX_FRAME = 1 << 30

ACK_OK = 0
ACK_READY = 1
ACK_NEED_SOURCE = 2
ACK_BASELINE = 3
ACK_WAIT = 4
ACK_ERROR = 255


@dataclass
class ClientHello:
    client_id: str
    has_baseline: bool = False
    baseline_version: int = 0


@dataclass
class ModelFull:
    version: int
    params: ModelParams


@dataclass
class ModelDelta:
    """Bitwise XOR of each array's IEEE-754 words against the baseline.

    All-zero arrays are left out of ``deltas``. XOR makes reconstruction
    exact, which an arithmetic difference cannot guarantee in floating point.
    """

    base_version: int
    version: int
    shapes: dict[str, tuple[int, ...]]
    deltas: dict[str, np.ndarray] = field(default_factory=dict)  # uint64
    frozen_phi: bool = False
    frozen_nu: bool = False
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5


@dataclass
class RoundConfig:
    k: int
    classes: tuple[int, ...]
    epochs: int
    lr: float
    seed: int


@dataclass
class AdaptedUpload:
    client_id: str
    psi: AdaptationParams
    prototypes: PrototypeSet
    support_counts: dict[int, int] = field(default_factory=dict)

    @property
    def total_support(self) -> int:
        return int(sum(self.support_counts.values()))


@dataclass
class SourcePrototypes:
    prototypes: PrototypeSet


@dataclass
class Ack:
    code: int = ACK_OK


MESSAGE_TYPES = (ClientHello, ModelFull, ModelDelta, RoundConfig, AdaptedUpload, SourcePrototypes, Ack)
TAGS = {cls: i + 1 for i, cls in enumerate(MESSAGE_TYPES)}
BY_TAG = {v: k for k, v in TAGS.items()}


# -- deltas ----------------------------------------------------------------

def _bits(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64).view(np.uint64)


def compute_delta(baseline: ModelParams, current: ModelParams, base_version: int, version: int) -> ModelDelta:
    base, cur = baseline.arrays(), current.arrays()
    if base.keys() != cur.keys():
        raise ProtocolError("baseline and current model have different layouts")
    shapes, deltas = {}, {}
    for name, a in cur.items():
        if base[name].shape != a.shape:
            raise ProtocolError(f"{name}: shape changed since baseline")
        shapes[name] = a.shape
        x = _bits(base[name]) ^ _bits(a)
        if x.any():
            deltas[name] = x
    return ModelDelta(base_version, version, shapes, deltas, current.frozen_phi,
                      current.frozen_nu, current.psi.bn_momentum, current.psi.bn_eps)


def apply_delta(baseline: ModelParams, delta: ModelDelta) -> ModelParams:
    base = baseline.arrays()
    if set(base) != set(delta.shapes):
        raise ProtocolError("delta does not match the baseline layout")
    updates = {}
    for name, x in delta.deltas.items():
        updates[name] = (_bits(base[name]) ^ x).view(np.float64).reshape(base[name].shape)
    out = baseline.with_arrays(updates)
    out.frozen_phi, out.frozen_nu = delta.frozen_phi, delta.frozen_nu
    out.psi.bn_momentum, out.psi.bn_eps = delta.bn_momentum, delta.bn_eps
    return out


# -- payload codecs --------------------------------------------------------

def _write_psi(w: Writer, psi: AdaptationParams):
    w.f64(psi.bn_momentum)
    w.f64(psi.bn_eps)
    for name in PSI_FIELDS:
        w.array(getattr(psi, name))


def _read_psi(r: Reader) -> AdaptationParams:
    mom, eps = r.f64(), r.f64()
    arrays = {name: r.array() for name in PSI_FIELDS}
    return AdaptationParams(**arrays, bn_momentum=mom, bn_eps=eps)


def _encode_payload(msg, w: Writer):
    if isinstance(msg, ClientHello):
        w.text(msg.client_id)
        w.u8(int(msg.has_baseline))
        w.u64(msg.baseline_version)
    elif isinstance(msg, ModelFull):
        w.u64(msg.version)
        write_params(w, msg.params)
    elif isinstance(msg, ModelDelta):
        w.u64(msg.base_version)
        w.u64(msg.version)
        w.u8(int(msg.frozen_phi))
        w.u8(int(msg.frozen_nu))
        w.f64(msg.bn_momentum)
        w.f64(msg.bn_eps)
        w.u32(len(msg.shapes))
        for name, shape in msg.shapes.items():
            w.text(name)
            x = msg.deltas.get(name)
            if x is None:
                w.u8(0)
                w.u8(len(shape))
                for n in shape:
                    w.u32(n)
            else:
                w.u8(1)
                w.array(x, dtype=">u8")
    elif isinstance(msg, RoundConfig):
        w.u32(msg.k)
        w.u32(len(msg.classes))
        for n in msg.classes:
            w.u32(n)
        w.u32(msg.epochs)
        w.f64(msg.lr)
        w.u64(msg.seed)
    elif isinstance(msg, AdaptedUpload):
        w.text(msg.client_id)
        _write_psi(w, msg.psi)
        write_prototypes(w, msg.prototypes)
        w.u32(len(msg.support_counts))
        for n in sorted(msg.support_counts):
            w.u32(n)
            w.u64(msg.support_counts[n])
    elif isinstance(msg, SourcePrototypes):
        write_prototypes(w, msg.prototypes)
    elif isinstance(msg, Ack):
        w.u8(msg.code)
    else:
        raise ProtocolError(f"not a protocol message: {type(msg).__name__}")


def _decode_payload(cls, r: Reader):
    if cls is ClientHello:
        return ClientHello(r.text(), bool(r.u8()), r.u64())
    if cls is ModelFull:
        return ModelFull(r.u64(), read_params(r))
    if cls is ModelDelta:
        base_version, version = r.u64(), r.u64()
        frozen_phi, frozen_nu = bool(r.u8()), bool(r.u8())
        mom, eps = r.f64(), r.f64()
        shapes, deltas = {}, {}
        for _ in range(r.u32()):
            name = r.text()
            if r.u8():
                x = r.array(">u8", np.uint64)
                deltas[name] = x
                shapes[name] = x.shape
            else:
                shapes[name] = tuple(r.u32() for _ in range(r.u8()))
        return ModelDelta(base_version, version, shapes, deltas, frozen_phi, frozen_nu, mom, eps)
    if cls is RoundConfig:
        k = r.u32()
        classes = tuple(r.u32() for _ in range(r.u32()))
        return RoundConfig(k, classes, r.u32(), r.f64(), r.u64())
    if cls is AdaptedUpload:
        client_id = r.text()
        psi = _read_psi(r)
        protos = read_prototypes(r)
        counts = {}
        for _ in range(r.u32()):
            n = r.u32()
            counts[n] = r.u64()
        return AdaptedUpload(client_id, psi, protos, counts)
    if cls is SourcePrototypes:
        return SourcePrototypes(read_prototypes(r))
    if cls is Ack:
        return Ack(r.u8())
    raise ProtocolError(f"no decoder for {cls.__name__}")


def encode(msg) -> bytes:
    """Full frame: length, tag, versioned payload."""
    tag = TAGS.get(type(msg))
    if tag is None:
        raise ProtocolError(f"not a protocol message: {type(msg).__name__}")
    w = Writer()
    w.u8(WIRE_VERSION)
    _encode_payload(msg, w)
    body = w.getvalue()
    return HEADER.pack(len(body) + 1, tag) + body


def decode(frame: bytes):
    if len(frame) < HEADER.size:
        raise ProtocolError("frame shorter than its header")
    length, tag = HEADER.unpack_from(frame)
    if length != len(frame) - 4:
        raise ProtocolError(f"frame length {length} does not match {len(frame) - 4} bytes")
    return decode_body(tag, frame[HEADER.size:])


def decode_body(tag: int, body: bytes):
    cls = BY_TAG.get(tag)
    if cls is None:
        raise ProtocolError(f"unknown message tag {tag}")
    r = Reader(body)
    version = r.u8()
    if version != WIRE_VERSION:
        raise ProtocolError(f"unsupported wire version {version}")
    msg = _decode_payload(cls, r)
    r.expect_done()
    return msg
