"""In-network feature augmentation driven by cosine-similarity pair mining.

Per anchor, four partners are mined from a batch: the least similar sample of
the same class (inner-hard), the most similar sample of another class
(inter-hard), and their complements (inner-easy, inter-easy). Hard pairs are
mixed into virtual features; the easy pairs set an anchor-specific margin for
a hinge loss on the hard pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .extractor import FeatureBatch
from .tensor import Tensor

ABSENT = -1
PROB_FLOOR = 1e-12
MIX_BETA = 0.1


@dataclass
class PairAssignment:
    """Mined partners for every anchor of a batch.

    Index arrays hold ``ABSENT`` where the candidate set is empty; the matching
    similarity arrays hold NaN there. ``sim`` is the similarity tensor the
    pairs were mined from, kept so losses can differentiate through it.
    """

    inner_hard: np.ndarray
    inter_hard: np.ndarray
    inner_easy: np.ndarray
    inter_easy: np.ndarray
    s_inner_hard: np.ndarray
    s_inter_hard: np.ndarray
    s_inner_easy: np.ndarray
    s_inter_easy: np.ndarray
    sim: Tensor | None = None

    def __len__(self):
        return len(self.inner_hard)


@dataclass
class VirtualFeature:
    map: Tensor
    label_a: int
    label_b: int
    alpha: float
    anchor: int
    partner: int
    kind: str


@dataclass
class LossBreakdown:
    l_reg: Tensor
    l_ada: Tensor
    l_total: Tensor
    lambda1: float
    lambda2: float
    rho: float = 1.0

    def values(self) -> tuple[float, float, float]:
        return self.l_reg.item(), self.l_ada.item(), self.l_total.item()


def similarity_matrix(embeddings: Tensor) -> Tensor:
    return T.matmul(embeddings, T.transpose(embeddings))


def _pick(s: np.ndarray, cand: np.ndarray, hardest_low: bool):
    n = s.shape[0]
    fill = np.inf if hardest_low else -np.inf
    masked = np.where(cand, s, fill)
    # argmin/argmax return the first extreme, which is the smallest index on ties
    idx = np.argmin(masked, axis=1) if hardest_low else np.argmax(masked, axis=1)
    has = cand.any(axis=1)
    idx = np.where(has, idx, ABSENT)
    val = np.where(has, s[np.arange(n), np.where(has, idx, 0)], np.nan)
    return idx, val


def search_pairs(sim: Tensor, labels) -> PairAssignment:
    s = sim.data
    labels = np.asarray(labels)
    n = s.shape[0]
    if s.shape != (n, n) or labels.shape != (n,):
        raise T.ShapeError(f"similarity {s.shape} does not match {labels.shape[0]} labels")
    if n < 2:
        raise ValueError("pair search needs at least two samples")
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    other = labels[:, None] != labels[None, :]

    inner_hard, s_ih = _pick(s, same, hardest_low=True)
    inner_easy, s_ie = _pick(s, same, hardest_low=False)
    inter_hard, s_xh = _pick(s, other, hardest_low=False)
    inter_easy, s_xe = _pick(s, other, hardest_low=True)
    return PairAssignment(inner_hard, inter_hard, inner_easy, inter_easy, s_ih, s_xh, s_ie, s_xe, sim)


def synthesize_virtual(
    batch: FeatureBatch,
    pairs: PairAssignment,
    rng: np.random.Generator,
    alpha: float | None = None,
    beta: float = MIX_BETA,
) -> list[VirtualFeature]:
    """Mix each anchor's map with its inner-hard and inter-hard partner maps.

    ``alpha`` pins the mixing weight; otherwise one weight is drawn per virtual
    feature from Beta(beta, beta). Unordered (anchor, partner, kind) duplicates
    are emitted once.
    """
    maps, labels = batch.maps, batch.labels
    seen = set()
    out = []
    for a in range(len(pairs)):
        for kind, partners in (("inner", pairs.inner_hard), ("inter", pairs.inter_hard)):
            p = int(partners[a])
            if p == ABSENT:
                continue
            key = (min(a, p), max(a, p), kind)
            if key in seen:
                continue
            seen.add(key)
            w = float(rng.beta(beta, beta)) if alpha is None else float(alpha)
            mixed = T.add(T.scalar_mul(maps[a], w), T.scalar_mul(maps[p], 1.0 - w))
            out.append(VirtualFeature(mixed, int(labels[a]), int(labels[p]), w, a, p, kind))
    return out


def _nll(probs: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    picked = T.take(probs, (rows, cols))
    return T.log(T.clamp_min(picked, PROB_FLOOR))


def recognition_loss(
    probs_real: Tensor,
    labels,
    probs_virtual: Tensor | None = None,
    virtuals: list[VirtualFeature] | None = None,
) -> Tensor:
    """Mean cross-entropy over real rows plus mean label-mixed cross-entropy over virtual rows."""
    labels = np.asarray(labels, dtype=np.int64)
    n = probs_real.shape[0]
    loss = T.scalar_mul(T.reduce_mean(_nll(probs_real, np.arange(n), labels)), -1.0)
    virtuals = virtuals or []
    m = 0 if probs_virtual is None else probs_virtual.shape[0]
    if m != len(virtuals):
        raise ValueError(f"{m} virtual probability rows for {len(virtuals)} virtual features")
    if m:
        rows = np.arange(m)
        alpha = Tensor(np.array([v.alpha for v in virtuals]))
        la = _nll(probs_virtual, rows, np.array([v.label_a for v in virtuals]))
        lb = _nll(probs_virtual, rows, np.array([v.label_b for v in virtuals]))
        mixed = T.add(T.hadamard(alpha, la), T.hadamard(T.sub(Tensor(1.0), alpha), lb))
        loss = T.sub(loss, T.reduce_mean(mixed))
    return loss


def benchmark_distance(pairs: PairAssignment) -> np.ndarray:
    """Inter-easy minus inner-easy similarity; NaN where either partner is absent."""
    return pairs.s_inter_easy - pairs.s_inner_easy


def intensity_base(s_inner_hard, s_inter_hard):
    return 1.0 - (np.asarray(s_inner_hard) - np.asarray(s_inter_hard) + 2.0) / 4.0


def dynamic_intensity(pairs: PairAssignment, d_bm: np.ndarray, rho: float = 1.0) -> np.ndarray:
    """Adaptive margin per anchor. A plain array, so no gradient flows through it."""
    if not rho >= 0:
        raise ValueError(f"rho must be nonnegative, got {rho}")
    base = intensity_base(pairs.s_inner_hard, pairs.s_inter_hard)
    return np.power(base, rho) * np.asarray(d_bm)


def eligible_anchors(pairs: PairAssignment, psi: np.ndarray) -> np.ndarray:
    return np.flatnonzero(
        (pairs.inner_hard != ABSENT) & (pairs.inter_hard != ABSENT) & np.isfinite(psi)
    )


def adaptive_loss(pairs: PairAssignment, psi: np.ndarray) -> Tensor:
    """Mean over eligible anchors of ``max(s_inter_hard + psi - s_inner_hard, 0)``."""
    psi = np.asarray(psi, dtype=np.float64)
    idx = eligible_anchors(pairs, psi)
    if idx.size == 0:
        return Tensor(0.0)
    if pairs.sim is None:
        # hand-built assignment: similarities are constants
        s_inter = Tensor(pairs.s_inter_hard[idx])
        s_inner = Tensor(pairs.s_inner_hard[idx])
    else:
        s_inter = T.take(pairs.sim, (idx, pairs.inter_hard[idx]))
        s_inner = T.take(pairs.sim, (idx, pairs.inner_hard[idx]))
    margin = T.add(T.sub(s_inter, s_inner), Tensor(psi[idx]))
    return T.reduce_mean(T.max_with_zero(margin))


def total_loss(l_reg: Tensor, l_ada: Tensor, lambda1: float = 1.0, lambda2: float = 0.8, rho: float = 1.0) -> LossBreakdown:
    for name, v in (("l_reg", l_reg), ("l_ada", l_ada)):
        if not math.isfinite(v.item()):
            raise T.NonFiniteError(f"{name} is not finite: {v.item()}")
    total = T.add(T.scalar_mul(l_reg, lambda1), T.scalar_mul(l_ada, lambda2))
    return LossBreakdown(l_reg, l_ada, total, lambda1, lambda2, rho)
