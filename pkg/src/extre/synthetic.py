"""Seeded synthetic tripartite graphs with planted community structure."""

from __future__ import annotations

import os

import numpy as np


def community_edges(rng, n_head, n_tail, density, head_comm, tail_comm, affinity):
    """Bernoulli edges whose rate is ``affinity`` times higher inside a community.

    Rates are scaled so the expected edge count is ``density * n_head * n_tail``.
    """
    same = head_comm[:, None] == tail_comm[None, :]
    weight = np.where(same, affinity, 1.0)
    prob = np.clip(weight * density * weight.size / weight.sum(), 0.0, 1.0)
    return np.argwhere(rng.random((n_head, n_tail)) < prob)


def make_graph(n_groups=200, n_users=500, n_items=300, density=0.02, n_communities=8, affinity=8.0, seed=0):
    """Return ``(z, x, y)`` edge arrays over dense indices."""
    rng = np.random.default_rng(seed)
    gc = rng.integers(n_communities, size=n_groups)
    uc = rng.integers(n_communities, size=n_users)
    ic = rng.integers(n_communities, size=n_items)
    z = community_edges(rng, n_groups, n_users, density, gc, uc, affinity)
    x = community_edges(rng, n_users, n_items, density, uc, ic, affinity)
    y = community_edges(rng, n_groups, n_items, density, gc, ic, affinity)
    return z, x, y


def write_dataset(directory, n_groups=200, n_users=500, n_items=300, density=0.02, seed=0, **kw) -> dict[str, str]:
    """Write ``z.tsv``, ``x.tsv`` and ``y.tsv`` with ids like ``g12``/``u3``/``i40``."""
    os.makedirs(directory, exist_ok=True)
    z, x, y = make_graph(n_groups, n_users, n_items, density, seed=seed, **kw)
    paths = {}
    for name, edges, (hp, tp) in (("z", z, "gu"), ("x", x, "ui"), ("y", y, "gi")):
        path = os.path.join(directory, f"{name}.tsv")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for h, t in edges:
                fh.write(f"{hp}{h}\t{tp}{t}\n")
        paths[name] = path
    return paths
