"""Configuration and the end-to-end subcommands (split, extract, train, evaluate)."""

from __future__ import annotations

import configparser
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import coefficients as coef
from .evaluate import MetricsReport, evaluate, rank_topk, recall_at
from .graph import NodeKind, NodeSpace, RelationMatrix, SplitSpec, Stage, TripartiteGraph, load_relation, split_interactions, write_relation
from .trainer import EmbeddingTable, Role, TrainConfig, cosine_scores, dot_scores, load_embeddings, save_embeddings, train_stage

log = logging.getLogger(__name__)

VARIANTS = ("EXTRE", "EXTRE_P", "EXTRE_F", "EXTRE_R")

# Per-dataset settings reported for the public Mafengwo and Youshu dumps.
DATASET_PRESETS = {
    "mafengwo": {"task": "group", "pretrain.tau": 3.8, "finetune.tau": 1.0},
    "youshu": {"task": "bundle", "pretrain.tau": 1.0, "finetune.tau": 0.3},
}


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    z: str | None = None
    x: str | None = None
    y: str | None = None
    swap: dict[str, bool] = field(default_factory=lambda: {"z": False, "x": False, "y": False})
    task: str = "group"
    split: SplitSpec = field(default_factory=SplitSpec)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(tau=1.0))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(tau=1.0))
    ks: tuple[int, ...] = (10, 20, 30)
    diversity_k: int = 20
    early_stop_k: int = 20
    mask: bool = True
    similarity: str = "cosine"
    output_dir: str = "out"
    seed: int = 0
    variant: str = "EXTRE"

    def with_overrides(self, seed: int | None = None, variant: str | None = None, no_mask: bool = False) -> "PipelineConfig":
        cfg = replace(self)
        if seed is not None:
            cfg.seed = seed
            cfg.split = replace(cfg.split, seed=seed)
            cfg.pretrain = replace(cfg.pretrain, seed=seed)
            cfg.finetune = replace(cfg.finetune, seed=seed)
        if variant is not None:
            if variant not in VARIANTS:
                raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
            cfg.variant = variant
        if no_mask:
            cfg.mask = False
        return cfg

    # -- derived paths --------------------------------------------------------

    def split_path(self, part: str) -> str:
        return os.path.join(self.output_dir, f"y.{part}")

    def blocks_dir(self, stage: Stage) -> str:
        return os.path.join(self.output_dir, "blocks", Stage(stage).value)

    def variant_dir(self) -> str:
        return os.path.join(self.output_dir, self.variant)


def _bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def _train_config(section, base: TrainConfig) -> TrainConfig:
    kw = {}
    casts = {"dim": int, "lr": float, "tau": float, "batch_size": int, "patience": int, "max_epochs": int, "seed": int, "init_std": float}
    for key, cast in casts.items():
        if key in section:
            kw[key] = cast(section[key])
    if "loss" in section:
        kw["loss_variant"] = section["loss"].strip().lower()
    if "alpha_mode" in section:
        kw["alpha_mode"] = section["alpha_mode"].strip().lower()
    if "binarize" in section:
        kw["binarize"] = section["binarize"].strip().lower()
    if "negative_pool" in section:
        pool = section["negative_pool"].strip().lower()
        kw["negative_pool"] = None if pool == "all" else int(pool)
    return replace(base, **kw)


def load_config(path: str) -> PipelineConfig:
    """Parse an INI-style ``key = value`` file with one section per stage.

    Relative paths resolve against the config file's directory.
    """
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.normpath(os.path.join(base, p))

    try:
        cfg = PipelineConfig()
        run = parser["run"] if parser.has_section("run") else {}
        seed = int(run.get("seed", 0))
        cfg.seed = seed
        if "variant" in run:
            cfg = cfg.with_overrides(variant=run["variant"].strip())

        preset = {}
        if "preset" in run:
            name = run["preset"].strip().lower()
            if name not in DATASET_PRESETS:
                raise ConfigError(f"unknown dataset preset {name!r}")
            preset = DATASET_PRESETS[name]
        cfg.task = preset.get("task", cfg.task)
        cfg.pretrain = replace(cfg.pretrain, tau=preset.get("pretrain.tau", cfg.pretrain.tau), seed=seed)
        cfg.finetune = replace(cfg.finetune, tau=preset.get("finetune.tau", cfg.finetune.tau), seed=seed)

        if parser.has_section("data"):
            data = parser["data"]
            for rel in ("z", "x", "y"):
                if rel in data:
                    setattr(cfg, rel, resolve(data[rel].strip()))
                cfg.swap[rel] = _bool(data.get(f"{rel}_swap", "false"))
            cfg.task = data.get("task", cfg.task).strip().lower()
        if cfg.task not in coef.TASK_LETTERS:
            raise ConfigError(f"unknown task preset {cfg.task!r}")

        if parser.has_section("split"):
            s = parser["split"]
            cfg.split = SplitSpec(float(s.get("train", 0.05)), float(s.get("valid", 0.75)), float(s.get("test", 0.20)), int(s.get("seed", seed)))
        else:
            cfg.split = SplitSpec(seed=seed)
        for stage in ("pretrain", "finetune"):
            if parser.has_section(stage):
                setattr(cfg, stage, _train_config(parser[stage], getattr(cfg, stage)))
        if parser.has_section("eval"):
            e = parser["eval"]
            if "k" in e:
                cfg.ks = tuple(int(k) for k in e["k"].replace(",", " ").split())
            cfg.diversity_k = int(e.get("diversity_k", cfg.diversity_k))
            cfg.early_stop_k = int(e.get("early_stop_k", cfg.early_stop_k))
            cfg.mask = _bool(e.get("mask", "true"))
            cfg.similarity = e.get("similarity", cfg.similarity).strip().lower()
        if parser.has_section("output"):
            cfg.output_dir = resolve(parser["output"].get("dir", "out").strip())
        else:
            cfg.output_dir = resolve("out")
    except ConfigError:
        raise
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not cfg.ks or min(cfg.ks) < 1:
        raise ConfigError("eval k values must be positive")
    return cfg


# -- data loading ---------------------------------------------------------------

_KINDS = {
    "z": (NodeKind.GROUP, NodeKind.USER),
    "x": (NodeKind.USER, NodeKind.ITEM),
    "y": (NodeKind.GROUP, NodeKind.ITEM),
}


def _require(path: str | None, what: str) -> str:
    if not path:
        raise ConfigError(f"config has no {what} file")
    if not os.path.isfile(path):
        raise ConfigError(f"{what} file not found: {path}")
    return path


def _load(cfg: PipelineConfig, rel: str, path: str, spaces) -> RelationMatrix:
    head, tail = _KINDS[rel]
    if cfg.swap.get(rel, False):
        return load_relation(path, tail, head, spaces)
    return load_relation(path, head, tail, spaces)


@dataclass
class LoadedData:
    graph: TripartiteGraph
    train: RelationMatrix | None
    valid: RelationMatrix | None
    test: RelationMatrix | None


def load_data(cfg: PipelineConfig, need_affiliations: bool = True) -> LoadedData:
    """Load z and x, then whichever split files exist.

    Node ids are numbered in this fixed file order so every subcommand sees
    the same indexing. The unsplit y file is never read here.
    """
    spaces = {k: NodeSpace(k) for k in NodeKind}
    z = x = None
    if need_affiliations or (cfg.z and os.path.isfile(cfg.z)):
        z = _load(cfg, "z", _require(cfg.z, "group-user (z)"), spaces)
    if need_affiliations or (cfg.x and os.path.isfile(cfg.x)):
        x = _load(cfg, "x", _require(cfg.x, "user-item (x)"), spaces)
    parts = {}
    for part in ("train", "valid", "test"):
        path = cfg.split_path(part)
        if os.path.isfile(path):
            parts[part] = load_relation(path, NodeKind.GROUP, NodeKind.ITEM, spaces)
    graph = TripartiteGraph(spaces, z, x, parts.get("train"))
    fit = {p: TripartiteGraph._fit(r, NodeKind.GROUP, NodeKind.ITEM, {k: s.count for k, s in spaces.items()}) for p, r in parts.items()}
    return LoadedData(graph, graph.y, fit.get("valid"), fit.get("test"))


# -- subcommands --------------------------------------------------------------


def cmd_split(cfg: PipelineConfig) -> list[str]:
    spaces = {}
    y = _load(cfg, "y", _require(cfg.y, "group-item (y)"), spaces)
    parts = split_interactions(y, cfg.split)
    os.makedirs(cfg.output_dir, exist_ok=True)
    group_ids = spaces[NodeKind.GROUP].ids()
    item_ids = spaces[NodeKind.ITEM].ids()
    paths = []
    for name, rel in zip(("train", "valid", "test"), parts):
        path = cfg.split_path(name)
        write_relation(rel, path, group_ids, item_ids)
        paths.append(path)
    log.info("split %d group-item edges into %s", y.nnz, "/".join(str(p.nnz) for p in parts))
    return paths


def _stage_graph(cfg: PipelineConfig, stage: Stage) -> TripartiteGraph:
    data = load_data(cfg, need_affiliations=stage is Stage.PRETRAIN)
    if stage is Stage.FINETUNE and (data.train is None or data.train.nnz == 0):
        raise ConfigError("stage requires group-item relation (run split first)")
    return data.graph


def cmd_extract(cfg: PipelineConfig, stage) -> list[str]:
    stage = Stage(stage)
    graph = _stage_graph(cfg, stage)
    bm = coef.assemble_blocks(stage, graph, task=cfg.task)
    return coef.save_block_matrix(bm, cfg.blocks_dir(stage))


def _load_blocks(cfg: PipelineConfig, stage: Stage) -> coef.BlockMatrix:
    directory = cfg.blocks_dir(stage)
    if not os.path.isdir(directory):
        raise ConfigError(f"no {stage.value} blocks at {directory} (run extract --stage {stage.value})")
    return coef.load_block_matrix(directory)


def _block_stages(variant: str) -> tuple[Stage, Stage]:
    if variant == "EXTRE_R":
        return Stage.FINETUNE, Stage.PRETRAIN
    return Stage.PRETRAIN, Stage.FINETUNE


def _validator(cfg: PipelineConfig, data: LoadedData):
    if data.valid is None or data.valid.nnz == 0:
        return None
    n_groups = data.graph.n_groups

    def validate(table: EmbeddingTable) -> float:
        return recall_at(table.rows, n_groups, data.valid, cfg.early_stop_k, data.train, cfg.mask)

    return validate


def _write_report(report, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_text())


def cmd_pretrain(cfg: PipelineConfig) -> str:
    if cfg.variant == "EXTRE_F":
        raise ConfigError("variant EXTRE_F has no pretrain stage")
    first, _ = _block_stages(cfg.variant)
    blocks = _load_blocks(cfg, first)
    data = load_data(cfg, need_affiliations=False)
    _check_nodes(blocks, data)
    table, report = train_stage("pretrain", blocks, cfg.pretrain, validate=_validator(cfg, data))
    out = cfg.variant_dir()
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "ep.emb")
    save_embeddings(table, path)
    _write_report(report, os.path.join(out, "pretrain.log"))
    return path


def _check_nodes(blocks: coef.BlockMatrix, data: LoadedData) -> None:
    g = data.graph
    if (blocks.n_groups, blocks.n_items) != (g.n_groups, g.n_items):
        raise ConfigError(
            f"blocks cover {blocks.n_groups} groups/{blocks.n_items} items but the data has "
            f"{g.n_groups}/{g.n_items}; re-run extract"
        )


def cmd_finetune(cfg: PipelineConfig) -> str:
    if cfg.variant == "EXTRE_P":
        raise ConfigError("variant EXTRE_P has no finetune stage")
    _, second = _block_stages(cfg.variant)
    blocks = _load_blocks(cfg, second)
    data = load_data(cfg, need_affiliations=False)
    _check_nodes(blocks, data)
    init = None
    if cfg.variant != "EXTRE_F":
        ep_path = os.path.join(cfg.variant_dir(), "ep.emb")
        if not os.path.isfile(ep_path):
            raise ConfigError(f"pretrained embeddings not found: {ep_path} (run pretrain)")
        init = load_embeddings(ep_path)
        if init.dim != cfg.finetune.dim:
            raise ConfigError(f"pretrained embedding dim {init.dim} does not match finetune dim {cfg.finetune.dim}")
    table, report = train_stage("finetune", blocks, cfg.finetune, init=init, validate=_validator(cfg, data))
    out = cfg.variant_dir()
    os.makedirs(out, exist_ok=True)
    if table.role == Role.CONCAT:
        save_embeddings(EmbeddingTable(table.finetune_part().copy(), Role.FINETUNE), os.path.join(out, "ef.emb"))
    else:
        save_embeddings(table, os.path.join(out, "ef.emb"))
    path = os.path.join(out, "e.emb")
    save_embeddings(table, path)
    _write_report(report, os.path.join(out, "finetune.log"))
    return path


def final_embedding_path(cfg: PipelineConfig) -> str:
    name = "ep.emb" if cfg.variant == "EXTRE_P" else "e.emb"
    path = os.path.join(cfg.variant_dir(), name)
    if not os.path.isfile(path):
        raise ConfigError(f"embeddings not found: {path}")
    return path


def cmd_evaluate(cfg: PipelineConfig) -> MetricsReport:
    data = load_data(cfg, need_affiliations=False)
    if data.test is None:
        raise ConfigError(f"test split not found: {cfg.split_path('test')} (run split)")
    table = load_embeddings(final_embedding_path(cfg))
    if table.n != data.graph.n_groups + data.graph.n_items:
        raise ConfigError(f"embedding table has {table.n} rows, data has {data.graph.n_groups + data.graph.n_items} nodes")
    report = evaluate(
        table.rows, data.graph.n_groups, data.test, cfg.ks, data.train, cfg.mask, cfg.diversity_k, similarity=cfg.similarity
    )
    out = cfg.variant_dir()
    with open(os.path.join(out, "metrics.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_table())
    with open(os.path.join(out, "metrics.tsv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_tsv())
    return report


def cmd_recommend(cfg: PipelineConfig, group_ids: list[str], k: int) -> list[tuple[str, int, str, float]]:
    data = load_data(cfg, need_affiliations=False)
    spaces = data.graph.spaces
    gmap = spaces[NodeKind.GROUP].id_map
    unknown = [g for g in group_ids if g not in gmap]
    if unknown:
        raise ConfigError(f"unknown group id(s): {', '.join(unknown)}")
    table = load_embeddings(final_embedding_path(cfg))
    n_groups = data.graph.n_groups
    idx = np.array([gmap[g] for g in group_ids], dtype=np.int64)
    ranking = rank_topk(table.rows, n_groups, idx, k, data.train, cfg.mask, cfg.similarity)
    scorer = cosine_scores if cfg.similarity == "cosine" else dot_scores
    scores = scorer(table.rows, n_groups, idx)
    item_ids = spaces[NodeKind.ITEM].ids()
    rows = []
    for r, (g, items) in enumerate(zip(group_ids, ranking.lists)):
        for rank, i in enumerate(items, start=1):
            rows.append((g, rank, item_ids[i], float(scores[r, i])))
    return rows


def run_all(cfg: PipelineConfig) -> MetricsReport:
    """Split (if needed), extract, train and evaluate one variant."""
    if cfg.y and os.path.isfile(cfg.y):
        cmd_split(cfg)
    first, second = _block_stages(cfg.variant)
    if cfg.variant != "EXTRE_F":
        cmd_extract(cfg, first)
        cmd_pretrain(cfg)
    if cfg.variant != "EXTRE_P":
        cmd_extract(cfg, second)
        cmd_finetune(cfg)
    return cmd_evaluate(cfg)
