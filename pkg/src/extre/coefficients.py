"""Consistency (alpha) and discrepancy (beta) coefficients over meta-paths.

For a two-hop path head -> middle -> tail::

    alpha[v1, v2] = sum_{m in N(v1) & N(v2)} delta(d_m, d_v2)
    beta[v1, v2]  = sum_{m not in N(v1), m in N(v2)} delta(d_m, d_v2)

so ``alpha + beta`` depends on the tail only. Beta is kept implicit: as the
per-tail sum ``S`` for two-hop blocks, or as an outer product for one-hop
(direct group-item) blocks.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .graph import GraphError, NodeKind, Stage, TripartiteGraph, total_degrees

TAILSUM = "tailsum"
SEPARABLE = "separable"

TASK_LETTERS = {
    "group": {NodeKind.GROUP: "G", NodeKind.USER: "U", NodeKind.ITEM: "I"},
    # Youshu-style data: users play the group role, items the user role,
    # bundles the item role.
    "bundle": {NodeKind.GROUP: "U", NodeKind.USER: "I", NodeKind.ITEM: "B"},
    "general": {NodeKind.GROUP: "G", NodeKind.USER: "U", NodeKind.ITEM: "I"},
}

_G, _U, _I = NodeKind.GROUP, NodeKind.USER, NodeKind.ITEM
_PRESET_KINDS = {
    Stage.PRETRAIN: [(_G, _U, _G), (_G, _U, _I), (_I, _U, _G), (_I, _U, _I)],
    Stage.FINETUNE: [(_G, _I, _G), (_G, None, _I), (_I, None, _G), (_I, _G, _I)],
}


def delta_weight(d_mid, d_tail):
    """Degree term ``(1/d_mid) * sqrt((d_mid + 1) / (d_tail + 1))``; 0 where d_mid == 0.

    Works on scalars and numpy arrays.
    """
    d_mid = np.asarray(d_mid, dtype=np.float64)
    d_tail = np.asarray(d_tail, dtype=np.float64)
    safe = np.where(d_mid > 0, d_mid, 1.0)
    out = np.where(d_mid > 0, np.sqrt((safe + 1.0) / (d_tail + 1.0)) / safe, 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class MetaPathSpec:
    head: NodeKind
    middle: NodeKind | None
    tail: NodeKind
    label: str

    def __post_init__(self):
        if self.head == _U or self.tail == _U:
            raise GraphError(f"{self.label}: head and tail must be group or item nodes")
        if self.middle is None:
            if self.head == self.tail:
                raise GraphError(f"{self.label}: one-hop path needs distinct end types")
        elif self.middle in (self.head, self.tail):
            raise GraphError(f"{self.label}: middle type must differ from both ends")

    @property
    def two_hop(self) -> bool:
        return self.middle is not None

    @property
    def stage(self) -> Stage:
        return Stage.PRETRAIN if self.middle == _U else Stage.FINETUNE


def make_spec(head: NodeKind, middle: NodeKind | None, tail: NodeKind, task: str = "group") -> MetaPathSpec:
    letters = TASK_LETTERS[task]
    label = "".join(letters[k] for k in (head, middle, tail) if k is not None)
    return MetaPathSpec(head, middle, tail, label)


def default_presets(stage: Stage, task: str = "group") -> list[MetaPathSpec]:
    if task not in TASK_LETTERS:
        raise GraphError(f"unknown task preset {task!r}")
    return [make_spec(*kinds, task=task) for kinds in _PRESET_KINDS[Stage(stage)]]


class CoefficientBlock:
    """Alpha as a sparse head x tail matrix plus an implicit beta."""

    def __init__(self, spec: MetaPathSpec, alpha: sp.csr_matrix, form: str, *, tail_sum=None, head_vec=None, tail_vec=None):
        self.spec = spec
        self.alpha = sp.csr_matrix(alpha, dtype=np.float64)
        self.alpha.sort_indices()
        self.form = form
        if form == TAILSUM:
            self.tail_sum = np.asarray(tail_sum, dtype=np.float64)
        elif form == SEPARABLE:
            self.head_vec = np.asarray(head_vec, dtype=np.float64)
            self.tail_vec = np.asarray(tail_vec, dtype=np.float64)
        else:
            raise GraphError(f"unknown beta form {form!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.alpha.shape

    def alpha_at(self, v1: int, v2: int) -> float:
        return float(self.alpha[v1, v2])

    def beta_at(self, v1: int, v2: int) -> float:
        if self.form == TAILSUM:
            return float(self.tail_sum[v2] - self.alpha[v1, v2])
        return float(self.head_vec[v1] * self.tail_vec[v2])

    def beta_rows(self, rows) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.int64)
        if self.form == TAILSUM:
            out = np.broadcast_to(self.tail_sum, (len(rows), self.shape[1])).copy()
            out -= self.alpha[rows].toarray()
            # Cancellation can leave -1e-17 where alpha == S.
            np.maximum(out, 0.0, out=out)
            return out
        return np.outer(self.head_vec[rows], self.tail_vec)

    def beta_dense(self) -> np.ndarray:
        return self.beta_rows(np.arange(self.shape[0]))

    def __repr__(self) -> str:
        return f"CoefficientBlock({self.spec.label}, shape={self.shape}, nnz={self.alpha.nnz}, form={self.form})"


def _check_stage(spec: MetaPathSpec, degrees) -> None:
    if spec.stage is Stage.PRETRAIN and degrees.user is None:
        raise GraphError(f"{spec.label}: needs pretrain-stage degrees")


def extract_two_hop(spec: MetaPathSpec, graph: TripartiteGraph, degrees) -> CoefficientBlock:
    if not spec.two_hop:
        raise GraphError(f"{spec.label} is not a two-hop path")
    _check_stage(spec, degrees)
    r1 = graph.relation(spec.head, spec.middle).csr
    r2 = graph.relation(spec.middle, spec.tail).csr.tocoo()
    d_mid = degrees.of(spec.middle)
    d_tail = degrees.of(spec.tail)
    w = sp.csr_matrix(
        (delta_weight(d_mid[r2.row], d_tail[r2.col]), (r2.row, r2.col)), shape=r2.shape
    )
    alpha = (r1 @ w).tocsr()
    alpha.eliminate_zeros()
    tail_sum = np.asarray(w.sum(axis=0)).ravel()
    return CoefficientBlock(spec, alpha, TAILSUM, tail_sum=tail_sum)


def _one_hop_vectors(d_head: np.ndarray, d_tail: np.ndarray):
    d_head = d_head.astype(np.float64)
    d_tail = d_tail.astype(np.float64)
    safe = np.where(d_head > 0, d_head, 1.0)
    a = np.where(d_head > 0, np.sqrt(d_head + 1.0) / safe, 0.0)
    b = np.where(d_tail > 0, 1.0 / np.sqrt(d_tail + 1.0), 0.0)
    return a, b


def _one_hop_block(spec: MetaPathSpec, graph: TripartiteGraph, degrees) -> CoefficientBlock:
    rel = graph.relation(spec.head, spec.tail).csr.tocoo()
    a, b = _one_hop_vectors(degrees.of(spec.head), degrees.of(spec.tail))
    alpha = sp.csr_matrix((a[rel.row] * b[rel.col], (rel.row, rel.col)), shape=rel.shape)
    alpha.eliminate_zeros()
    return CoefficientBlock(spec, alpha, SEPARABLE, head_vec=a, tail_vec=b)


def extract_one_hop(graph: TripartiteGraph, degrees, task: str = "group"):
    """Direct group->item and item->group blocks from the group-item relation."""
    if graph.y is None:
        raise GraphError("stage requires group-item relation")
    gi = _one_hop_block(make_spec(_G, None, _I, task), graph, degrees)
    ig = _one_hop_block(make_spec(_I, None, _G, task), graph, degrees)
    return gi, ig


class BlockMatrix:
    """Four coefficient blocks over the joint node space (groups, then items)."""

    def __init__(self, stage: Stage, blocks: dict[tuple[NodeKind, NodeKind], CoefficientBlock]):
        self.stage = Stage(stage)
        pairs = {(_G, _G), (_G, _I), (_I, _G), (_I, _I)}
        if set(blocks) != pairs:
            raise GraphError(f"block matrix needs exactly the pairs {sorted(p[0].value + '-' + p[1].value for p in pairs)}")
        self.blocks = blocks
        self.n_groups = blocks[(_G, _I)].shape[0]
        self.n_items = blocks[(_G, _I)].shape[1]
        for (h, t), blk in blocks.items():
            want = (self._size(h), self._size(t))
            if blk.shape != want:
                raise GraphError(f"{blk.spec.label}: shape {blk.shape}, expected {want}")
        self._alpha = None

    def _size(self, kind: NodeKind) -> int:
        return self.n_groups if kind == _G else self.n_items

    @property
    def n_nodes(self) -> int:
        return self.n_groups + self.n_items

    @property
    def labels(self) -> list[str]:
        return [self.blocks[p].spec.label for p in ((_G, _G), (_G, _I), (_I, _G), (_I, _I))]

    def alpha(self) -> sp.csr_matrix:
        if self._alpha is None:
            b = self.blocks
            self._alpha = sp.bmat(
                [[b[(_G, _G)].alpha, b[(_G, _I)].alpha], [b[(_I, _G)].alpha, b[(_I, _I)].alpha]],
                format="csr",
            )
            self._alpha.sort_indices()
        return self._alpha

    def beta_rows(self, rows) -> np.ndarray:
        """Dense beta for the given joint-space anchor rows against every node."""
        rows = np.asarray(rows, dtype=np.int64)
        out = np.empty((len(rows), self.n_nodes))
        is_group = rows < self.n_groups
        for mask, kind, local in ((is_group, _G, rows), (~is_group, _I, rows - self.n_groups)):
            if not mask.any():
                continue
            out[mask, : self.n_groups] = self.blocks[(kind, _G)].beta_rows(local[mask])
            out[mask, self.n_groups :] = self.blocks[(kind, _I)].beta_rows(local[mask])
        return out

    def positive_pairs(self) -> np.ndarray:
        """Ordered pairs with alpha > 0, self-pairs dropped, sorted by (head, tail)."""
        a = self.alpha().tocoo()
        keep = (a.data > 0) & (a.row != a.col)
        pairs = np.stack([a.row[keep], a.col[keep]], axis=1).astype(np.int64)
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        return pairs[order]


def assemble_blocks(stage, graph: TripartiteGraph, presets: list[MetaPathSpec] | None = None, task: str = "group") -> BlockMatrix:
    stage = Stage(stage)
    if presets is None:
        presets = default_presets(stage, task)
    seen = {}
    for spec in presets:
        key = (spec.head, spec.tail)
        if key in seen:
            raise GraphError(f"duplicate type pair {key[0].value}-{key[1].value} ({seen[key]}, {spec.label})")
        seen[key] = spec.label
    degrees = total_degrees(graph, stage)
    blocks = {}
    for spec in presets:
        if spec.two_hop:
            blocks[(spec.head, spec.tail)] = extract_two_hop(spec, graph, degrees)
        else:
            blocks[(spec.head, spec.tail)] = _one_hop_block(spec, graph, degrees)
    return BlockMatrix(stage, blocks)


class PairOracle:
    """Brute-force (alpha, beta) for single ordered pairs.

    Degrees and neighbourhoods are recounted from raw edge lists and every
    middle node is visited; nothing is shared with the sparse extraction.
    Building the oracle once per graph and stage keeps repeated queries cheap.
    """

    def __init__(self, graph: TripartiteGraph, stage: Stage):
        self.graph = graph
        self.stage = Stage(stage)
        rels = [graph.z, graph.x] if self.stage is Stage.PRETRAIN else [graph.y]
        if any(r is None for r in rels):
            raise GraphError("stage requires group-item relation" if self.stage is Stage.FINETUNE else "stage requires z and x")
        self.deg: dict[tuple[NodeKind, int], int] = {}
        self.adj: set[tuple[NodeKind, int, NodeKind, int]] = set()
        for rel in rels:
            for h, t in rel.edges.tolist():
                self.deg[(rel.head, h)] = self.deg.get((rel.head, h), 0) + 1
                self.deg[(rel.tail, t)] = self.deg.get((rel.tail, t), 0) + 1
                self.adj.add((rel.head, h, rel.tail, t))
                self.adj.add((rel.tail, t, rel.head, h))

    @staticmethod
    def _delta(dm: int, dt: int) -> float:
        if dm == 0:
            return 0.0
        return (1.0 / dm) * math.sqrt((dm + 1) / (dt + 1))

    def pair(self, spec: MetaPathSpec, v1: int, v2: int) -> tuple[float, float]:
        if spec.stage is not self.stage:
            raise GraphError(f"{spec.label} belongs to the {spec.stage.value} stage")
        deg, adj = self.deg, self.adj
        d1 = deg.get((spec.head, v1), 0)
        d2 = deg.get((spec.tail, v2), 0)
        if not spec.two_hop:
            if d1 == 0 or d2 == 0:
                return 0.0, 0.0
            w = self._delta(d1, d2)
            return (w if (spec.head, v1, spec.tail, v2) in adj else 0.0), w

        alpha = beta = 0.0
        for m in range(self.graph.spaces[spec.middle].count):
            if (spec.middle, m, spec.tail, v2) not in adj:
                continue
            w = self._delta(deg.get((spec.middle, m), 0), d2)
            if (spec.head, v1, spec.middle, m) in adj:
                alpha += w
            else:
                beta += w
        return alpha, beta


def oracle_pair(graph: TripartiteGraph, spec: MetaPathSpec, v1: int, v2: int) -> tuple[float, float]:
    """One-off brute-force (alpha, beta); see :class:`PairOracle`."""
    return PairOracle(graph, spec.stage).pair(spec, v1, v2)


# -- persistence -------------------------------------------------------------

_HEADER = "# extre coefficient block v1"


def save_block(block: CoefficientBlock, path, stage: Stage) -> None:
    spec = block.spec
    a = block.alpha.tocoo()
    order = np.lexsort((a.col, a.row))
    lines = [
        _HEADER,
        f"stage\t{Stage(stage).value}",
        f"label\t{spec.label}",
        f"kinds\t{spec.head.value}\t{spec.middle.value if spec.middle else '-'}\t{spec.tail.value}",
        f"shape\t{block.shape[0]}\t{block.shape[1]}",
        f"form\t{block.form}",
        f"nnz\t{a.nnz}",
    ]
    lines += [f"{a.row[k]}\t{a.col[k]}\t{a.data[k]:.17g}" for k in order]
    vectors = [block.tail_sum] if block.form == TAILSUM else [block.head_vec, block.tail_vec]
    for vec in vectors:
        lines += [f"{v:.17g}" for v in vec]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_block(path) -> tuple[Stage, CoefficientBlock]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _HEADER:
        raise GraphError(f"{path}: not a coefficient block file")
    meta = {}
    for line in lines[1:7]:
        key, *vals = line.split("\t")
        meta[key] = vals
    head, middle, tail = meta["kinds"]
    spec = MetaPathSpec(NodeKind(head), None if middle == "-" else NodeKind(middle), NodeKind(tail), meta["label"][0])
    n_head, n_tail = map(int, meta["shape"])
    nnz = int(meta["nnz"][0])
    body = lines[7:]
    if nnz:
        trip = np.array([ln.split("\t") for ln in body[:nnz]], dtype=np.float64)
        rows, cols, vals = trip[:, 0].astype(np.int64), trip[:, 1].astype(np.int64), trip[:, 2]
    else:
        rows = cols = np.zeros(0, dtype=np.int64)
        vals = np.zeros(0)
    alpha = sp.csr_matrix((vals, (rows, cols)), shape=(n_head, n_tail))
    rest = np.array(body[nnz:], dtype=np.float64)
    form = meta["form"][0]
    if form == TAILSUM:
        block = CoefficientBlock(spec, alpha, TAILSUM, tail_sum=rest[:n_tail])
    else:
        block = CoefficientBlock(spec, alpha, SEPARABLE, head_vec=rest[:n_head], tail_vec=rest[n_head : n_head + n_tail])
    return Stage(meta["stage"][0]), block


def save_block_matrix(bm: BlockMatrix, directory) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for key in ((_G, _G), (_G, _I), (_I, _G), (_I, _I)):
        blk = bm.blocks[key]
        path = os.path.join(directory, f"{blk.spec.label}.blk")
        save_block(blk, path, bm.stage)
        paths.append(path)
    return paths


def load_block_matrix(directory) -> BlockMatrix:
    blocks = {}
    stage = None
    for name in sorted(os.listdir(directory)):
        if not name.endswith(".blk"):
            continue
        st, blk = load_block(os.path.join(directory, name))
        if stage is not None and st != stage:
            raise GraphError(f"{directory}: blocks from different stages")
        stage = st
        key = (blk.spec.head, blk.spec.tail)
        if key in blocks:
            raise GraphError(f"{directory}: duplicate type pair in {name}")
        blocks[key] = blk
    if stage is None:
        raise GraphError(f"{directory}: no block files")
    return BlockMatrix(stage, blocks)
