"""Training objectives over coefficient blocks, with analytic gradients.

All functions take the full embedding table ``E`` (joint node space,
groups first) and return gradients with the same shape as ``E``.
"""

from __future__ import annotations

import enum
import logging

import numpy as np
import scipy.sparse as sp

from .coefficients import BlockMatrix

log = logging.getLogger(__name__)

EPS_FLOOR = 1e-12


class LossVariant(str, enum.Enum):
    CONTRASTIVE = "contrastive"
    ORIGIN = "origin"
    MSE = "mse"
    CE = "ce"


class AlphaMode(str, enum.Enum):
    WEIGHT = "weight"
    LITERAL = "literal"


class Binarize(str, enum.Enum):
    NONE = "none"
    ALPHA = "alpha"
    BETA = "beta"
    BOTH = "both"


class LossError(ValueError):
    pass


def _normalize(E: np.ndarray):
    norms = np.linalg.norm(E, axis=1)
    zero = norms == 0
    safe = np.where(zero, 1.0, norms)
    return E / safe[:, None] * (~zero)[:, None], safe, zero


def _normalize_backward(g_hat: np.ndarray, n_hat: np.ndarray, norms: np.ndarray, zero: np.ndarray) -> np.ndarray:
    radial = np.sum(g_hat * n_hat, axis=1, keepdims=True)
    g = (g_hat - radial * n_hat) / norms[:, None]
    g[zero] = 0.0
    return g


def _coef(values: np.ndarray, binarize: Binarize, which: str) -> np.ndarray:
    if binarize is Binarize.BOTH or binarize.value == which:
        return (values > 0).astype(np.float64)
    return values


def _scatter(rows: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """Sum ``values`` into an (n, d) array at ``rows`` (duplicates add up)."""
    onehot = sp.csr_matrix((np.ones(len(rows)), (rows, np.arange(len(rows)))), shape=(n, len(rows)))
    return np.asarray(onehot @ values)


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def contrastive(
    pairs,
    blocks: BlockMatrix,
    E: np.ndarray,
    tau: float,
    alpha_mode: AlphaMode = AlphaMode.WEIGHT,
    pool=None,
    binarize: Binarize = Binarize.NONE,
    need_grad: bool = True,
):
    """Weighted InfoNCE over consistency-positive pairs.

    Per pair (v1, v2) with cosine similarity s::

        D = sum_{c in pool, c != v1} beta[v1, c] * exp(s(v1, c) / tau) + EPS_FLOOR
        weight: alpha * (-s(v1, v2) / tau + log D)
        literal: -log(alpha * exp(s(v1, v2) / tau) / D)

    The loss is the batch mean. Returns ``(loss, grad)``; grad is None when
    ``need_grad`` is false.
    """
    if tau <= 0:
        raise LossError("tau must be positive")
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise LossError("empty batch")
    alpha_mode = AlphaMode(alpha_mode)
    binarize = Binarize(binarize)
    anchors, partners = pairs[:, 0], pairs[:, 1]
    alpha = np.asarray(blocks.alpha()[anchors, partners]).ravel()
    if np.any(alpha <= 0):
        raise LossError("every batch pair needs alpha > 0")
    alpha = _coef(alpha, binarize, "alpha")

    cand = np.arange(blocks.n_nodes) if pool is None else np.asarray(pool, dtype=np.int64)
    if len(cand) == 0:
        raise LossError("empty candidate pool")

    n_hat, norms, zero = _normalize(E)
    if zero.any():
        log.warning("%d zero-norm embedding rows; their cosine is taken as 0", int(zero.sum()))

    beta = blocks.beta_rows(anchors)
    if pool is not None:
        beta = beta[:, cand]
    beta = _coef(beta, binarize, "beta")
    if pool is None:
        beta[np.arange(len(anchors)), anchors] = 0.0
    else:
        beta[cand[None, :] == anchors[:, None]] = 0.0

    sims = n_hat[anchors] @ n_hat[cand].T
    # cosine <= 1, so 1/tau bounds every exponent
    shift = 1.0 / tau
    w = sims
    w -= 1.0
    w /= tau
    np.exp(w, out=w)
    w *= beta
    denom = w.sum(axis=1) + EPS_FLOOR * np.exp(-shift)
    log_d = shift + np.log(denom)
    pos = np.sum(n_hat[anchors] * n_hat[partners], axis=1) / tau

    if alpha_mode is AlphaMode.WEIGHT:
        c = alpha
        per_pair = alpha * (log_d - pos)
    else:
        c = np.ones_like(alpha)
        per_pair = log_d - pos - np.log(alpha)
    loss = float(per_pair.mean())
    if not need_grad:
        return loss, None

    b = len(pairs)
    k = c / (b * tau)
    kp = w
    kp *= (k / denom)[:, None]
    n_nodes = E.shape[0]
    g_hat = _scatter(anchors, kp @ n_hat[cand] - k[:, None] * n_hat[partners], n_nodes)
    g_hat += _scatter(partners, -k[:, None] * n_hat[anchors], n_nodes)
    g_hat[cand] += kp.T @ n_hat[anchors]
    return loss, _normalize_backward(g_hat, n_hat, norms, zero)


def _ablation_terms(blocks: BlockMatrix, anchors: np.ndarray, binarize: Binarize):
    alpha = blocks.alpha()[anchors].toarray()
    beta = blocks.beta_rows(anchors)
    alpha = _coef(alpha, binarize, "alpha")
    beta = _coef(beta, binarize, "beta")
    mask = (alpha != 0) | (beta != 0)
    mask[np.arange(len(anchors)), anchors] = False
    return alpha, beta, mask


def ablation(
    variant: LossVariant,
    anchors,
    blocks: BlockMatrix,
    E: np.ndarray,
    binarize: Binarize = Binarize.NONE,
    need_grad: bool = True,
):
    """Pairwise objectives on raw dot products ``x = e_v1 . e_v2``.

    Pairs are (anchor, any other node) where alpha or beta is nonzero.

    - origin: ``sum (beta - alpha) * sigmoid(x)``
    - mse: ``mean (x - (alpha - beta))**2``
    - ce: ``mean -alpha*log(sigmoid(x)) - beta*log(1 - sigmoid(x))``
    """
    try:
        variant = LossVariant(variant)
    except ValueError:
        raise LossError(f"unknown loss variant {variant!r}") from None
    if variant is LossVariant.CONTRASTIVE:
        raise LossError("contrastive is not an ablation variant")
    anchors = np.asarray(anchors, dtype=np.int64).ravel()
    if len(anchors) == 0:
        raise LossError("empty batch")
    alpha, beta, mask = _ablation_terms(blocks, anchors, Binarize(binarize))
    x = E[anchors] @ E.T
    count = max(int(mask.sum()), 1)

    if variant is LossVariant.ORIGIN:
        s = _sigmoid(x)
        loss = float(np.sum(mask * (beta - alpha) * s))
        dx = mask * (beta - alpha) * s * (1.0 - s)
    elif variant is LossVariant.MSE:
        r = x - (alpha - beta)
        loss = float(np.sum(mask * r * r) / count)
        dx = mask * 2.0 * r / count
    else:
        log_s = -np.logaddexp(0.0, -x)
        log_1ms = -np.logaddexp(0.0, x)
        loss = float(np.sum(mask * (-alpha * log_s - beta * log_1ms)) / count)
        s = _sigmoid(x)
        dx = mask * (-alpha * (1.0 - s) + beta * s) / count
    if not need_grad:
        return loss, None

    grad = dx.T @ E[anchors]
    grad += _scatter(anchors, dx @ E, E.shape[0])
    return loss, grad


def loss_and_grad(variant, batch, blocks, E, tau=1.0, alpha_mode=AlphaMode.WEIGHT, pool=None, binarize=Binarize.NONE, need_grad=True, trainable_dim=None):
    """Dispatch to the contrastive or an ablation objective.

    ``batch`` holds pairs for the contrastive loss and anchor rows for the
    ablations. With ``trainable_dim`` set, gradient columns from that index
    on are zeroed (frozen half of a concatenated table).
    """
    variant = LossVariant(variant)
    if variant is LossVariant.CONTRASTIVE:
        loss, grad = contrastive(batch, blocks, E, tau, alpha_mode, pool, binarize, need_grad)
    else:
        loss, grad = ablation(variant, batch, blocks, E, binarize, need_grad)
    if grad is not None and trainable_dim is not None:
        grad[:, trainable_dim:] = 0.0
    return loss, grad
