"""Embedding tables and the two-stage (pretrain, finetune) training loop."""

from __future__ import annotations

import enum
import logging
import struct
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .coefficients import BlockMatrix
from .losses import AlphaMode, Binarize, LossVariant, loss_and_grad
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


class TrainError(ValueError):
    pass


class Role(enum.IntEnum):
    PRETRAIN = 0
    FINETUNE = 1
    CONCAT = 2


@dataclass
class EmbeddingTable:
    """Rows over the joint node space: groups first, then items.

    For a CONCAT table the first ``trainable_dim`` columns are the finetune
    embedding and the rest is the frozen pretrain embedding.
    """

    rows: np.ndarray
    role: Role
    trainable_dim: int | None = None

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def finetune_part(self) -> np.ndarray:
        return self.rows[:, : self.trainable_dim]

    def pretrain_part(self) -> np.ndarray:
        return self.rows[:, self.trainable_dim :]


def init_embeddings(n: int, dim: int, seed: int, std: float = 0.1) -> EmbeddingTable:
    if n < 1 or dim < 1:
        raise TrainError("embedding table needs n >= 1 and dim >= 1")
    rng = np.random.default_rng(seed)
    return EmbeddingTable(rng.normal(0.0, std, size=(n, dim)), Role.PRETRAIN)


def concat(finetune: np.ndarray, pretrain: np.ndarray) -> EmbeddingTable:
    return EmbeddingTable(np.hstack([finetune, pretrain]), Role.CONCAT, trainable_dim=finetune.shape[1])


_MAGIC = b"EXTREEMB"
_VERSION = 1


def save_embeddings(table: EmbeddingTable, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIB", _VERSION, table.n, table.dim, int(table.role)))
        fh.write(np.ascontiguousarray(table.rows, dtype="<f4").tobytes())


def load_embeddings(path) -> EmbeddingTable:
    with open(path, "rb") as fh:
        head = fh.read(len(_MAGIC) + 13)
        if head[: len(_MAGIC)] != _MAGIC:
            raise TrainError(f"{path}: not an embedding file")
        version, n, dim, role = struct.unpack("<IIIB", head[len(_MAGIC) :])
        if version != _VERSION:
            raise TrainError(f"{path}: unsupported embedding file version {version}")
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != n * dim:
        raise TrainError(f"{path}: expected {n * dim} values, found {data.size}")
    return EmbeddingTable(data.reshape(n, dim).astype(np.float64), Role(role))


@dataclass
class TrainConfig:
    dim: int = 64
    lr: float = 0.001
    tau: float = 1.0
    loss_variant: LossVariant = LossVariant.CONTRASTIVE
    alpha_mode: AlphaMode = AlphaMode.WEIGHT
    binarize: Binarize = Binarize.NONE
    batch_size: int = 1024
    # None = every node in the denominator, otherwise a uniform sample of this size
    negative_pool: int | None = None
    patience: int = 10
    max_epochs: int = 200
    seed: int = 0
    init_std: float = 0.1

    def __post_init__(self):
        self.loss_variant = LossVariant(self.loss_variant)
        self.alpha_mode = AlphaMode(self.alpha_mode)
        self.binarize = Binarize(self.binarize)
        for name in ("dim", "batch_size", "patience", "max_epochs"):
            if getattr(self, name) < 1:
                raise TrainError(f"{name} must be positive")
        if self.lr <= 0 or self.tau <= 0 or self.init_std <= 0:
            raise TrainError("lr, tau and init_std must be positive")
        if self.negative_pool is not None and self.negative_pool < 1:
            raise TrainError("negative pool sample size must be >= 1")


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    valid: list[float] = field(default_factory=list)
    stop_epoch: int = 0
    best_epoch: int = 0
    seconds: float = 0.0

    def to_text(self) -> str:
        # Wall-clock is left out so identical runs give identical logs.
        lines = [f"stop_epoch\t{self.stop_epoch}", f"best_epoch\t{self.best_epoch}"]
        for e, loss in enumerate(self.losses, start=1):
            v = f"{self.valid[e - 1]:.10g}" if e <= len(self.valid) else "-"
            lines.append(f"epoch\t{e}\tloss\t{loss:.10g}\tvalid\t{v}")
        return "\n".join(lines) + "\n"


class EarlyStopper:
    """Stop once the metric has not improved for ``patience`` epochs in a row."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = 0
        self.bad = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record ``value``; return True if it is a new best."""
        if value > self.best:
            self.best, self.best_epoch, self.bad = value, epoch, 0
            return True
        self.bad += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad >= self.patience


def training_units(blocks: BlockMatrix, variant: LossVariant) -> np.ndarray:
    pairs = blocks.positive_pairs()
    if len(pairs) == 0:
        raise TrainError("no positive-consistency pairs")
    if variant is LossVariant.CONTRASTIVE:
        return pairs
    return np.arange(blocks.n_nodes)


def train_stage(
    stage: str,
    blocks: BlockMatrix,
    cfg: TrainConfig,
    init: EmbeddingTable | None = None,
    validate: Callable[[EmbeddingTable], float] | None = None,
    full_batch: bool = False,
) -> tuple[EmbeddingTable, TrainReport]:
    """Train one stage.

    ``stage == "pretrain"`` starts from a random table. ``"finetune"`` copies
    ``init`` into a trainable half and concatenates the frozen original;
    without ``init`` it trains a random table alone. ``validate`` maps a
    table to a score (higher is better) and drives early stopping; the
    best-scoring table is returned.
    """
    t0 = time.perf_counter()
    units = training_units(blocks, cfg.loss_variant)
    if stage == "pretrain":
        table = init_embeddings(blocks.n_nodes, cfg.dim, cfg.seed, cfg.init_std)
    elif stage == "finetune":
        if init is None:
            table = init_embeddings(blocks.n_nodes, cfg.dim, cfg.seed, cfg.init_std)
            table.role = Role.FINETUNE
        else:
            if init.n != blocks.n_nodes:
                raise TrainError(f"init table has {init.n} rows, blocks cover {blocks.n_nodes} nodes")
            if init.dim != cfg.dim:
                raise TrainError(f"init table dim {init.dim} does not match configured dim {cfg.dim}")
            table = concat(init.rows.copy(), init.rows.copy())
    else:
        raise TrainError(f"unknown stage {stage!r}")

    rng = np.random.default_rng(cfg.seed)
    # Only the finetune half of a concatenated table is a parameter.
    k = table.dim if table.trainable_dim is None else table.trainable_dim
    params = table.rows[:, :k]
    state = AdamState(params.shape)
    stopper = EarlyStopper(cfg.patience)
    report = TrainReport()
    best_rows = table.rows.copy()
    batch_size = len(units) if full_batch else cfg.batch_size

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(units))
        total, seen = 0.0, 0
        for lo in range(0, len(units), batch_size):
            batch = units[order[lo : lo + batch_size]]
            pool = None
            if cfg.negative_pool is not None and cfg.negative_pool < blocks.n_nodes:
                pool = np.sort(rng.choice(blocks.n_nodes, size=cfg.negative_pool, replace=False))
            loss, grad = loss_and_grad(
                cfg.loss_variant,
                batch,
                blocks,
                table.rows,
                tau=cfg.tau,
                alpha_mode=cfg.alpha_mode,
                pool=pool,
                binarize=cfg.binarize,
                trainable_dim=table.trainable_dim,
            )
            adam_step(params, grad[:, :k], state, cfg.lr)
            if not np.all(np.isfinite(params)):
                raise TrainError(f"non-finite embeddings at epoch {epoch}")
            total += loss * len(batch)
            seen += len(batch)
        report.losses.append(total / seen)
        report.stop_epoch = epoch
        if validate is not None:
            score = float(validate(table))
            report.valid.append(score)
            if stopper.update(epoch, score):
                best_rows = table.rows.copy()
            log.info("%s epoch %d loss %.6f valid %.5f", stage, epoch, report.losses[-1], score)
            if stopper.should_stop:
                break
        else:
            log.info("%s epoch %d loss %.6f", stage, epoch, report.losses[-1])

    if validate is not None:
        table.rows[...] = best_rows
        report.best_epoch = stopper.best_epoch
    else:
        report.best_epoch = report.stop_epoch
    report.seconds = time.perf_counter() - t0
    log.info("%s finished at epoch %d in %.1fs", stage, report.stop_epoch, report.seconds)
    return table, report


def cosine_scores(rows: np.ndarray, n_groups: int, groups=None) -> np.ndarray:
    """Group x item cosine similarity matrix; zero-norm rows score 0."""
    norms = np.linalg.norm(rows, axis=1)
    unit = rows / np.where(norms == 0, 1.0, norms)[:, None]
    g = unit[:n_groups] if groups is None else unit[np.asarray(groups)]
    return g @ unit[n_groups:].T


def dot_scores(rows: np.ndarray, n_groups: int, groups=None) -> np.ndarray:
    g = rows[:n_groups] if groups is None else rows[np.asarray(groups)]
    return g @ rows[n_groups:].T


def score(E: EmbeddingTable | np.ndarray, g: int, i: int, n_groups: int) -> float:
    """Cosine similarity between group ``g`` and item ``i`` (item index local)."""
    rows = E.rows if isinstance(E, EmbeddingTable) else E
    a, b = rows[g], rows[n_groups + i]
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))
