"""Extreme cold-start group recommendation with consistency/discrepancy
coefficients and two-stage contrastive embedding training."""

from .coefficients import (
    BlockMatrix,
    CoefficientBlock,
    MetaPathSpec,
    PairOracle,
    assemble_blocks,
    default_presets,
    delta_weight,
    extract_one_hop,
    extract_two_hop,
    oracle_pair,
)
from .evaluate import accuracy_metrics, diversity_metrics, evaluate, rank_topk
from .graph import (
    NodeKind,
    NodeSpace,
    RelationMatrix,
    SplitSpec,
    Stage,
    TripartiteGraph,
    load_relation,
    split_interactions,
    total_degrees,
)
from .trainer import EmbeddingTable, TrainConfig, init_embeddings, score, train_stage

__version__ = "0.1.0"
