"""Sampled KL divergence and essential-map extraction."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import embed_along_tree, max_weight_spanning_forest
from .inference import ImpossibleSequenceError, forward
from .model import AugmentedHmm, InputError, fmt
from .simulation import sample_experience

__all__ = ["KlReport", "sampled_kl", "observation_log_likelihood", "EssentialMap",
           "extract_essential_map"]

LOG2 = math.log(2.0)


@dataclass
class KlReport:
    """Per-observation log-likelihood gap between a true and a learned model."""

    nats: float
    k: int
    t: int
    seed: int
    pairs: list = field(default_factory=list)
    infinite: bool = False

    @property
    def bits(self) -> float:
        return self.nats / LOG2

    CSV_HEADER = ("k", "t", "seed", "d_nats", "d_bits", "infinite")

    def csv_row(self) -> list[str]:
        return [str(self.k), str(self.t), str(self.seed), fmt(self.nats), fmt(self.bits),
                str(int(self.infinite))]


def observation_log_likelihood(model: AugmentedHmm, e) -> float:
    """Log-likelihood of the observations alone (relation densities left out)."""
    return float(forward(model, e, odometry=False)[1].sum())


def sampled_kl(true_model: AugmentedHmm, learned_model: AugmentedHmm, k: int = 5,
               t: int = 1000, seed: int = 0) -> KlReport:
    """Average over ``k`` sampled sequences of length ``t`` of
    ``(log P(S | true) - log P(S | learned)) / t``, in nats.

    Sequences are drawn with odometry from the true model and scored on their
    observations only.
    """
    if k < 1 or t < 2:
        raise InputError("need k >= 1 and t >= 2")
    if true_model.obs_dims != learned_model.obs_dims:
        raise InputError("models have different observation alphabets")
    seeds = np.random.SeedSequence(seed).generate_state(k)
    pairs = []
    infinite = False
    for s in seeds:
        e, _ = sample_experience(true_model, t, int(s))
        ll_true = observation_log_likelihood(true_model, e)
        try:
            ll_learned = observation_log_likelihood(learned_model, e)
        except ImpossibleSequenceError:
            ll_learned = -math.inf
            infinite = True
        pairs.append((ll_true, ll_learned))
    total = sum(a - b for a, b in pairs)
    return KlReport(nats=total / (k * t), k=k, t=t, seed=seed, pairs=pairs, infinite=infinite)


# ---------------------------------------------------------------------------
# essential map

@dataclass
class EssentialMap:
    positions: np.ndarray
    headings: np.ndarray
    solid: list
    dashed: list
    probabilities: np.ndarray
    initial_state: int
    threshold: float

    def to_dot(self) -> str:
        lines = ["digraph essential_map {", "  node [shape=circle];"]
        for i, (x, y) in enumerate(self.positions):
            shape = ", shape=doublecircle" if i == self.initial_state else ""
            lines.append(f'  s{i} [label="{i}", pos="{x:.3f},{y:.3f}!"{shape}];')
        for style, edges in (("solid", self.solid), ("dashed", self.dashed)):
            for i, j in edges:
                lines.append(f'  s{i} -> s{j} [style={style}, '
                             f'label="{self.probabilities[i, j]:.3f}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"

    def to_svg(self, size: float = 480.0, margin: float = 30.0) -> str:
        pos = self.positions
        lo = pos.min(axis=0) if len(pos) else np.zeros(2)
        span = float(np.max(np.ptp(pos, axis=0))) if len(pos) > 1 else 0.0
        scale = (size - 2 * margin) / span if span > 0 else 1.0

        def px(p):
            return margin + (p[0] - lo[0]) * scale, size - margin - (p[1] - lo[1]) * scale

        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size:.0f}" '
               f'height="{size:.0f}" viewBox="0 0 {size:.0f} {size:.0f}">',
               '<defs><marker id="arrow" markerWidth="8" markerHeight="8" refX="8" refY="4" '
               'orient="auto"><path d="M0,0 L8,4 L0,8 z"/></marker></defs>']
        for style, edges in (("", self.solid), (' stroke-dasharray="4,3"', self.dashed)):
            for i, j in edges:
                (x1, y1), (x2, y2) = px(pos[i]), px(pos[j])
                out.append(f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
                           f'stroke="black"{style} marker-end="url(#arrow)"/>')
        for i, p in enumerate(pos):
            x, y = px(p)
            width = 2 if i == self.initial_state else 1
            out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="6" fill="white" '
                       f'stroke="black" stroke-width="{width}"/>')
            out.append(f'<text x="{x + 8:.2f}" y="{y - 8:.2f}" font-size="10">{i}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"

    def write(self, stem) -> tuple[Path, Path]:
        stem = Path(stem)
        dot, svg = stem.with_suffix(".dot"), stem.with_suffix(".svg")
        dot.write_text(self.to_dot(), encoding="utf-8")
        svg.write_text(self.to_svg(), encoding="utf-8")
        return dot, svg


def extract_essential_map(model: AugmentedHmm, dash_threshold: float = 0.2) -> EssentialMap:
    """States placed by integrating relation means along the most probable tree.

    Each state's most likely transition to another state is solid (ties go to
    the lower index); other transitions with probability at least
    ``dash_threshold`` are dashed.
    """
    a = np.asarray(model.transition)
    n = model.n_states
    sym = np.maximum(a, a.T)
    np.fill_diagonal(sym, 0.0)
    edges = max_weight_spanning_forest(sym)
    pos, theta = embed_along_tree(np.asarray(model.mu), edges, model.coordinate_regime)
    solid, dashed = [], []
    for i in range(n):
        row = a[i].copy()
        row[i] = -np.inf
        if n == 1 or not np.max(row) > 0:
            continue
        j = int(np.argmax(row))
        solid.append((i, j))
        for k in range(n):
            if k not in (i, j) and a[i, k] >= dash_threshold:
                dashed.append((i, k))
    return EssentialMap(positions=pos, headings=theta, solid=solid, dashed=dashed,
                        probabilities=a.copy(), initial_state=model.initial_state,
                        threshold=dash_threshold)
