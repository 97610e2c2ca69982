"""Class prototypes (mean embeddings), nearest-prototype inference and fusion."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .codec import Reader, Writer
from .errors import EmptySupportError, NotReadyError, ShapeError


@dataclass(frozen=True)
class Prototype:
    class_id: int
    vector: np.ndarray
    support_count: int


@dataclass
class PrototypeSet:
    embedding_dim: int
    prototypes: dict[int, Prototype] = field(default_factory=dict)

    def __len__(self):
        return len(self.prototypes)

    def __contains__(self, n):
        return n in self.prototypes

    def __getitem__(self, n) -> Prototype:
        return self.prototypes[n]

    @property
    def classes(self) -> list[int]:
        return sorted(self.prototypes)

    def restrict(self, classes) -> "PrototypeSet":
        keep = set(classes)
        return PrototypeSet(self.embedding_dim, {n: p for n, p in self.prototypes.items() if n in keep})

    def matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """(class ids ascending, (C, m) stacked vectors)."""
        ids = np.array(self.classes, dtype=np.int64)
        if not len(ids):
            return ids, np.zeros((0, self.embedding_dim))
        return ids, np.stack([self.prototypes[n].vector for n in ids])


def compute_prototypes(embeddings, labels=None) -> PrototypeSet:
    """Per-class mean embedding.

    Accepts either a list of ``(embedding, label)`` pairs or an ``(N, m)`` array
    together with ``labels``.
    """
    if labels is None:
        pairs = list(embeddings)
        if not pairs:
            raise EmptySupportError("no embeddings to average")
        emb = np.stack([np.asarray(e, dtype=np.float64) for e, _ in pairs])
        labels = np.array([int(y) for _, y in pairs])
    else:
        emb = np.asarray(embeddings, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
    if emb.ndim != 2 or len(emb) == 0:
        raise EmptySupportError("no embeddings to average")
    if len(labels) != len(emb):
        raise ShapeError("one label per embedding required")
    protos = {}
    for n in np.unique(labels):
        rows = emb[labels == n]
        protos[int(n)] = Prototype(int(n), rows.mean(axis=0), len(rows))
    return PrototypeSet(emb.shape[1], protos)


def nearest_prototype(query, protos: PrototypeSet):
    """Returns ``(predicted class, {class: L2 distance})``; ties go to the lowest class id."""
    pred, dist = nearest_prototype_batch(np.asarray(query, dtype=np.float64)[None], protos)
    return int(pred[0]), {int(n): float(d) for n, d in zip(protos.classes, dist[0])}


def nearest_prototype_batch(queries, protos: PrototypeSet):
    """Vectorised form: ``(predictions (N,), distances (N, C))``."""
    if not len(protos):
        raise NotReadyError("prototype set is empty")
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != protos.embedding_dim:
        raise ShapeError(f"queries must be (N, {protos.embedding_dim})")
    ids, P = protos.matrix()
    d2 = ((q[:, None, :] - P[None, :, :]) ** 2).sum(-1)
    # argmin returns the first minimum, and ids are ascending
    pred = ids[np.argmin(d2, axis=1)]
    return pred, np.sqrt(d2)


def fuse_prototypes(sets) -> PrototypeSet:
    """Support-count weighted mean per class; counts add up."""
    sets = list(sets)
    if not sets:
        raise EmptySupportError("nothing to fuse")
    dim = sets[0].embedding_dim
    if any(s.embedding_dim != dim for s in sets):
        raise ShapeError("prototype sets disagree on embedding dimension")
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for s in sets:
        for n in s.classes:
            p = s[n]
            sums[n] = sums.get(n, np.zeros(dim)) + p.support_count * p.vector
            counts[n] = counts.get(n, 0) + p.support_count
    return PrototypeSet(dim, {n: Prototype(n, sums[n] / counts[n], counts[n]) for n in sorted(sums)})


def write_prototypes(w: Writer, protos: PrototypeSet):
    w.u32(protos.embedding_dim)
    w.u32(len(protos))
    for n in protos.classes:
        p = protos[n]
        w.u32(p.class_id)
        w.u64(p.support_count)
        w.array(p.vector)


def read_prototypes(r: Reader) -> PrototypeSet:
    dim = r.u32()
    out = {}
    for _ in range(r.u32()):
        n, count = r.u32(), r.u64()
        vec = r.array()
        if vec.shape != (dim,):
            raise ShapeError("prototype vector does not match embedding dimension")
        out[n] = Prototype(n, vec, count)
    return PrototypeSet(dim, out)


def export_prototypes_csv(protos: PrototypeSet, path):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["class_id", "support_count"] + [f"e{i}" for i in range(protos.embedding_dim)])
        for n in protos.classes:
            p = protos[n]
            out.writerow([n, p.support_count] + [repr(float(v)) for v in p.vector])
