"""First-match-first-out assignment and matched MAE losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["MatchRelation", "greedy_match", "match_all", "mae_losses", "cascade_total_loss", "joint_match"]

DIMS = ("phi", "r", "v")


@dataclass(frozen=True)
class MatchRelation:
    """Per-dimension pairings ``(truth index, estimate index)``, 0-based."""

    phi: tuple
    r: tuple
    v: tuple

    def __getitem__(self, dim: str) -> tuple:
        return getattr(self, dim)


def greedy_match(truth, est) -> tuple[tuple[int, int], ...]:
    """Pair the globally closest remaining (truth, estimate) until both are empty.

    Ties go to the smallest truth index, then the smallest estimate index.
    """
    truth = np.asarray(truth, dtype=float).ravel()
    est = np.asarray(est, dtype=float).ravel()
    if truth.size != est.size:
        raise ValueError(f"length mismatch: {truth.size} truths vs {est.size} estimates")
    dist = np.abs(truth[:, None] - est[None, :])
    pairs = []
    for _ in range(truth.size):
        # argmin over a row-major array already honours the (i, then j) tie order
        i, j = np.unravel_index(int(np.argmin(dist)), dist.shape)
        pairs.append((int(i), int(j)))
        dist[i, :] = np.inf
        dist[:, j] = np.inf
    return tuple(pairs)


def match_all(truth_triples, est_triples) -> MatchRelation:
    """Independent greedy matching per dimension; inputs are ``(M, 3)`` arrays."""
    t = np.asarray(truth_triples, dtype=float).reshape(-1, 3)
    e = np.asarray(est_triples, dtype=float).reshape(-1, 3)
    return MatchRelation(*(greedy_match(t[:, d], e[:, d]) for d in range(3)))


def _dim_loss(truth, est, pairs, xp=np):
    M = len(pairs)
    if M == 0:
        return 0.0
    ti = [p[0] for p in pairs]
    ej = [p[1] for p in pairs]
    return xp.abs(truth[ti] - est[ej]).sum() / M


def mae_losses(truth_triples, est_triples, relation: MatchRelation | None = None):
    """Return ``(l_phi, l_r, l_v, total)`` with ``total = l_phi + l_r + l_v``."""
    t = np.asarray(truth_triples, dtype=float).reshape(-1, 3)
    e = np.asarray(est_triples, dtype=float).reshape(-1, 3)
    relation = match_all(t, e) if relation is None else relation
    parts = [float(_dim_loss(t[:, d], e[:, d], relation[DIMS[d]])) for d in range(3)]
    return parts[0], parts[1], parts[2], sum(parts)


def cascade_total_loss(stage1_losses, stage2_est, truth_triples, relation: MatchRelation) -> float:
    """Half the sum of stage-1 and stage-2 MAEs, stage 2 reusing stage-1 pairings."""
    l2 = mae_losses(truth_triples, stage2_est, relation)
    return 0.5 * (sum(stage1_losses[:3]) + l2[3])


def joint_match(truth_triples, est_triples, scale=(1.0, 1.0, 1.0)) -> tuple[tuple[int, int], ...]:
    """Greedy matching on the scaled joint (phi, r, v) distance; reports only."""
    t = np.asarray(truth_triples, dtype=float).reshape(-1, 3) / np.asarray(scale)
    e = np.asarray(est_triples, dtype=float).reshape(-1, 3) / np.asarray(scale)
    dist = np.linalg.norm(t[:, None, :] - e[None, :, :], axis=-1)
    pairs = []
    for _ in range(t.shape[0]):
        i, j = np.unravel_index(int(np.argmin(dist)), dist.shape)
        pairs.append((int(i), int(j)))
        dist[i, :] = np.inf
        dist[:, j] = np.inf
    return tuple(pairs)
