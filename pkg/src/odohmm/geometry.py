"""Planar frame transforms, spanning trees and state embeddings."""
from __future__ import annotations

from collections import deque

import numpy as np

from .circular import wrap_angle
from .model import AugmentedHmm, CoordinateRegime, rotate


def transform_relative(p, heading_change):
    """Rotate ``p = (x, y)`` by ``heading_change``: (x cos - y sin, x sin + y cos).

    This is the map T_ab taking a vector in the frame of state a to the frame
    of state b when ``heading_change`` is the mean heading change mu_theta(a, b).
    Heading changes are measured clockwise-positive (previous heading minus new
    heading), which is what makes the map a plain rotation by mu_theta.
    """
    out = rotate(p, heading_change)
    return tuple(out) if out.ndim == 1 else out


def max_weight_spanning_forest(weights: np.ndarray,
                               include_zero: bool = False) -> list[tuple[int, int]]:
    """Kruskal over the upper triangle of a symmetric weight matrix.

    Only strictly positive weights are eligible unless ``include_zero``, in
    which case zero-weight pairs join last and the result is a spanning tree.
    Ties go to the lexicographically smallest (i, j).
    """
    n = weights.shape[0]
    iu, ju = np.triu_indices(n, 1)
    w = weights[iu, ju]
    keep = w >= 0 if include_zero else w > 0
    iu, ju, w = iu[keep], ju[keep], w[keep]
    order = np.lexsort((ju, iu, -w))
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    edges = []
    for k in order:
        a, b = int(iu[k]), int(ju[k])
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
            edges.append((a, b))
            if len(edges) == n - 1:
                break
    return edges


def tree_components(n: int, edges) -> tuple[np.ndarray, list[list[tuple[int, int]]]]:
    """Component labels and BFS orders (parent, child) rooted at each lowest index."""
    adj: list[list[int]] = [[] for _ in range(n)]
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    label = np.full(n, -1, dtype=int)
    orders = []
    for root in range(n):
        if label[root] >= 0:
            continue
        comp = len(orders)
        label[root] = comp
        order = []
        queue = deque([root])
        while queue:
            a = queue.popleft()
            for b in sorted(adj[a]):
                if label[b] < 0:
                    label[b] = comp
                    order.append((a, b))
                    queue.append(b)
        orders.append(order)
    return label, orders


def state_frames(model: AugmentedHmm) -> np.ndarray:
    """Frame rotation of each state relative to the initial state's frame.

    Heading potentials are read off the first row of the (additive) heading
    matrix; in the global regime all frames are the identity.
    """
    if model.coordinate_regime is CoordinateRegime.GLOBAL:
        return np.zeros(model.n_states)
    return np.asarray(model.mu[model.initial_state, :, 2], dtype=float)


def embed_along_tree(mu: np.ndarray, edges, regime: CoordinateRegime,
                     root_positions=None) -> tuple[np.ndarray, np.ndarray]:
    """Integrate relation means along tree edges into positions and headings.

    Returns ``(positions, thetas)`` with positions in the root frame. For the
    relative regime, position of b is ``P_a + Rot(-theta_a) mu(a, b)`` and
    ``theta_b = theta_a + mu_theta(a, b)`` (thetas unwrapped along the tree).
    """
    n = mu.shape[0]
    pos = np.zeros((n, 2))
    theta = np.zeros(n)
    label, orders = tree_components(n, edges)
    for order in orders:
        for a, b in order:
            step = mu[a, b, :2]
            if regime is CoordinateRegime.RELATIVE:
                step = rotate(step, -theta[a])
            pos[b] = pos[a] + step
            theta[b] = theta[a] + mu[a, b, 2]
    if root_positions is not None:
        pos = pos + np.asarray(root_positions)[label]
    return pos, theta


def relation_means_from_embedding(pos: np.ndarray, theta: np.ndarray,
                                  regime: CoordinateRegime) -> np.ndarray:
    """Means ``mu(a, b) = F_a (P_b - P_a)``, heading ``theta_b - theta_a`` (wrapped)."""
    diff = pos[None, :, :] - pos[:, None, :]
    mu = np.empty(diff.shape[:2] + (3,))
    if regime is CoordinateRegime.RELATIVE:
        mu[:, :, :2] = rotate(diff, theta[:, None])
    else:
        mu[:, :, :2] = diff
    mu[:, :, 2] = wrap_angle(theta[None, :] - theta[:, None])
    idx = np.arange(pos.shape[0])
    mu[idx, idx] = 0.0
    return mu
