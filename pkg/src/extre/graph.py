"""Tripartite group/user/item graph: relation files, degrees and splits."""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class GraphError(ValueError):
    """Raised for malformed relation input or inconsistent graph state."""


class StageError(GraphError):
    """Raised when a stage is missing a relation it depends on."""


class NodeKind(str, enum.Enum):
    GROUP = "group"
    USER = "user"
    ITEM = "item"


class Stage(str, enum.Enum):
    PRETRAIN = "pretrain"
    FINETUNE = "finetune"


_KIND_PAIRS = {
    frozenset((NodeKind.GROUP, NodeKind.USER)),
    frozenset((NodeKind.USER, NodeKind.ITEM)),
    frozenset((NodeKind.GROUP, NodeKind.ITEM)),
}


@dataclass
class NodeSpace:
    """Dense indexing of one node type; ids are numbered in first-seen order."""

    kind: NodeKind
    id_map: dict[str, int] = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.id_map)

    def index(self, external_id: str) -> int:
        idx = self.id_map.get(external_id)
        if idx is None:
            idx = len(self.id_map)
            self.id_map[external_id] = idx
        return idx

    def ids(self) -> list[str]:
        out = [""] * len(self.id_map)
        for ext, idx in self.id_map.items():
            out[idx] = ext
        return out


class RelationMatrix:
    """Sparse binary adjacency between two node spaces.

    Edges are kept sorted and unique; ``csr`` and ``csc`` are two views of
    the same edge set.
    """

    def __init__(self, head: NodeKind, tail: NodeKind, edges, shape: tuple[int, int]):
        self.head = NodeKind(head)
        self.tail = NodeKind(tail)
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        n_head, n_tail = int(shape[0]), int(shape[1])
        if len(edges):
            if edges.min() < 0 or edges[:, 0].max() >= n_head or edges[:, 1].max() >= n_tail:
                raise GraphError(f"edge index out of bounds for shape {shape}")
            edges = np.unique(edges, axis=0)
        self.edges = edges
        self.shape = (n_head, n_tail)
        data = np.ones(len(edges), dtype=np.float64)
        self.csr = sp.csr_matrix((data, (edges[:, 0], edges[:, 1])), shape=self.shape)
        self.csr.sort_indices()
        self.csc = self.csr.tocsc()
        self.csc.sort_indices()

    @property
    def nnz(self) -> int:
        return len(self.edges)

    def transpose(self) -> "RelationMatrix":
        return RelationMatrix(self.tail, self.head, self.edges[:, ::-1], self.shape[::-1])

    def resized(self, shape: tuple[int, int]) -> "RelationMatrix":
        return RelationMatrix(self.head, self.tail, self.edges, shape)

    def head_degrees(self) -> np.ndarray:
        return np.diff(self.csr.indptr)

    def tail_degrees(self) -> np.ndarray:
        return np.diff(self.csc.indptr)

    def neighbors(self, head_index: int) -> np.ndarray:
        lo, hi = self.csr.indptr[head_index], self.csr.indptr[head_index + 1]
        return self.csr.indices[lo:hi]

    def __repr__(self) -> str:
        return f"RelationMatrix({self.head.value}->{self.tail.value}, shape={self.shape}, nnz={self.nnz})"


def _check_kinds(head_kind, tail_kind) -> tuple[NodeKind, NodeKind]:
    try:
        head, tail = NodeKind(head_kind), NodeKind(tail_kind)
    except ValueError as exc:
        raise GraphError(f"unknown node kind: {exc}") from None
    if frozenset((head, tail)) not in _KIND_PAIRS:
        raise GraphError(f"unsupported relation kind pair {head.value}-{tail.value}")
    return head, tail


def load_relation(
    path: str | os.PathLike,
    head_kind,
    tail_kind,
    spaces: dict[NodeKind, NodeSpace] | None = None,
) -> RelationMatrix:
    """Read a ``head<TAB>tail`` edge file.

    ``spaces`` is extended in place so several files share one id numbering.
    Blank lines and lines starting with ``#`` are skipped.
    """
    head, tail = _check_kinds(head_kind, tail_kind)
    if spaces is None:
        spaces = {}
    head_space = spaces.setdefault(head, NodeSpace(head))
    tail_space = spaces.setdefault(tail, NodeSpace(tail))

    edges = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise GraphError(f"{path}:{lineno}: expected 'head<TAB>tail', got {line!r}")
            edges.append((head_space.index(parts[0]), tail_space.index(parts[1])))
    return RelationMatrix(head, tail, edges, (head_space.count, tail_space.count))


def write_relation(rel: RelationMatrix, path, head_ids: list[str], tail_ids: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for h, t in rel.edges:
            fh.write(f"{head_ids[h]}\t{tail_ids[t]}\n")


class TripartiteGraph:
    """Group–user affiliations ``z``, user–item interactions ``x`` and
    optional group–item interactions ``y``.

    Relations are padded to the final size of each node space.
    """

    def __init__(self, spaces: dict[NodeKind, NodeSpace], z=None, x=None, y=None):
        self.spaces = spaces
        for kind in NodeKind:
            self.spaces.setdefault(kind, NodeSpace(kind))
        n = {k: s.count for k, s in self.spaces.items()}
        self.z = self._fit(z, NodeKind.GROUP, NodeKind.USER, n)
        self.x = self._fit(x, NodeKind.USER, NodeKind.ITEM, n)
        self.y = self._fit(y, NodeKind.GROUP, NodeKind.ITEM, n)

    @staticmethod
    def _fit(rel, head, tail, n):
        if rel is None:
            return None
        if rel.head == tail and rel.tail == head:
            rel = rel.transpose()
        if rel.head != head or rel.tail != tail:
            raise GraphError(f"expected {head.value}-{tail.value} relation, got {rel!r}")
        return rel.resized((n[head], n[tail]))

    @property
    def n_groups(self) -> int:
        return self.spaces[NodeKind.GROUP].count

    @property
    def n_users(self) -> int:
        return self.spaces[NodeKind.USER].count

    @property
    def n_items(self) -> int:
        return self.spaces[NodeKind.ITEM].count

    def relation(self, head: NodeKind, tail: NodeKind) -> RelationMatrix:
        """The relation oriented ``head -> tail`` (transposed if needed)."""
        for rel in (self.z, self.x, self.y):
            if rel is None:
                continue
            if (rel.head, rel.tail) == (head, tail):
                return rel
            if (rel.tail, rel.head) == (head, tail):
                return rel.transpose()
        raise StageError(f"graph has no {head.value}-{tail.value} relation")

    def with_y(self, y: RelationMatrix | None) -> "TripartiteGraph":
        return TripartiteGraph(self.spaces, self.z, self.x, y)


@dataclass
class Degrees:
    group: np.ndarray
    item: np.ndarray
    user: np.ndarray | None = None

    def of(self, kind: NodeKind) -> np.ndarray:
        arr = {NodeKind.GROUP: self.group, NodeKind.ITEM: self.item, NodeKind.USER: self.user}[kind]
        if arr is None:
            raise StageError(f"no {kind.value} degrees at this stage")
        return arr


def total_degrees(graph: TripartiteGraph, stage: Stage) -> Degrees:
    """Per-node degrees in the propagation graph of ``stage``.

    Pretrain counts edges of z and x, fine-tune counts edges of y only.
    """
    stage = Stage(stage)
    if stage is Stage.PRETRAIN:
        if graph.z is None or graph.x is None:
            raise StageError("pretrain stage requires group-user and user-item relations")
        user = graph.z.tail_degrees() + graph.x.head_degrees()
        return Degrees(group=graph.z.head_degrees(), item=graph.x.tail_degrees(), user=user)
    if graph.y is None or graph.y.nnz == 0:
        raise StageError("stage requires group-item relation")
    return Degrees(group=graph.y.head_degrees(), item=graph.y.tail_degrees())


@dataclass(frozen=True)
class SplitSpec:
    train_ratio: float = 0.05
    valid_ratio: float = 0.75
    test_ratio: float = 0.20
    seed: int = 0

    def __post_init__(self):
        ratios = (self.train_ratio, self.valid_ratio, self.test_ratio)
        if any(not 0.0 <= r <= 1.0 for r in ratios):
            raise GraphError(f"split ratios must lie in [0, 1], got {ratios}")
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise GraphError(f"split ratios must sum to 1, got {sum(ratios)!r}")


def split_interactions(y: RelationMatrix, spec: SplitSpec):
    """Shuffle the edges of ``y`` once and cut them into train/valid/test."""
    n = y.nnz
    if n == 0:
        raise GraphError("cannot split an empty relation")
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(n)
    n_train = min(n, int(round(spec.train_ratio * n)))
    n_test = min(n - n_train, int(round(spec.test_ratio * n)))
    cuts = (order[:n_train], order[n_train : n - n_test], order[n - n_test :])
    return tuple(RelationMatrix(y.head, y.tail, y.edges[idx], y.shape) for idx in cuts)
