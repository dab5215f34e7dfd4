"""Cascaded refinement stage: per-target blocks on small dynamic grids.

Each C-block takes the query and attention marginals of one first-stage
block, generates a narrow window around that block's estimate, builds the
matching dictionaries on the fly and attends once more on the same query.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Param
from .matching import DIMS, mae_losses, match_all
from .scenario import C_LIGHT, ScenarioConfig, TargetSet
from .transformer import (
    BlockParams,
    OmpTransformer,
    _uniform,
    attention_forward,
    fcn_forward,
    init_fcn,
    mae_loss,
    readout,
)

__all__ = [
    "CascadeTrace",
    "base_grid",
    "dictionary_from_grid",
    "dynamic_grid",
    "adapt_weights",
    "init_cascade_params",
    "cascade_block_forward",
    "CascadeModel",
]

# small scale on the last FCN layer keeps the initial window close to the bias
_OUT_SCALE = 0.1


def base_grid(n: int) -> np.ndarray:
    return np.linspace(-0.5, 0.5, n)


def _phase_terms(dim: str, config: ScenarioConfig):
    """``(index vector, coefficient, uses_sin)`` such that the phase is ``coef * idx * f(x)``."""
    if dim == "phi":
        return np.arange(1, config.K + 1), -2.0 * np.pi * config.d / config.wavelength, True
    if dim == "r":
        return np.arange(1, config.S + 1), -2.0 * np.pi * config.delta_f * 2.0 / C_LIGHT, False
    if dim == "v":
        return np.arange(1, config.T + 1), 2.0 * np.pi * config.delta_T * 2.0 * config.fc / C_LIGHT, False
    raise ValueError(f"unknown dimension {dim!r}")


def dictionary_from_grid(dim: str, grid, config: ScenarioConfig):
    """Dictionary columns over ``grid`` (a Var or array), differentiable in the grid."""
    idx, coef, use_sin = _phase_terms(dim, config)
    x = ad.sin(grid) if use_sin else grid
    phase = ad.mul(coef * idx[:, None].astype(float), ad.reshape(x, (1, -1)))
    return ad.expj(phase)


def dynamic_grid(bounds, center, base, dim: str, config: ScenarioConfig):
    """Refined grid ``(g_max - g_min) * a + g_min + center`` and its dictionary.

    ``bounds`` is the 2-vector ``(g_min, g_max)`` produced by the grid FCN.
    Returns ``(grid, dictionary, degenerate)``; ``degenerate`` is set when
    ``g_max <= g_min`` (zero-width or reversed window).
    """
    g_min = ad.take(bounds, 0)
    g_max = ad.take(bounds, 1)
    grid = ad.add(ad.add(ad.mul(ad.sub(g_max, g_min), np.asarray(base, float)), g_min), center)
    b = np.asarray(ad._data(bounds), float)
    return grid, dictionary_from_grid(dim, grid, config), bool(b[1] <= b[0])


def adapt_weights(W_v1, W_v2, W_k, v1_bounds, center, gh_v2, gh_k):
    """Re-scaled, offset and exponentiated small learnable matrices.

    ``W~_V1 = (g~max - g~min) W + g~min + center``; ``W~_V2 = h * W^g`` with
    ``h`` broadcast over rows; ``W~_K = h * W^g`` with ``h`` broadcast over
    columns. ``gh_*`` are ``(g, h)`` pairs, ``h`` complex of length ``L``.
    """
    lo = ad.take(v1_bounds, 0)
    hi = ad.take(v1_bounds, 1)
    w1 = ad.add(ad.add(ad.mul(ad.sub(hi, lo), W_v1), lo), center)
    g2, h2 = gh_v2
    g_k, h_k = gh_k
    L = ad._data(h2).shape[0]
    w2 = ad.mul(ad.reshape(h2, (L, 1)), ad.cpow(W_v2, g2))
    wk = ad.mul(ad.reshape(h_k, (1, L)), ad.cpow(W_k, g_k))
    return w1, w2, wk


def _phase_only(rng, shape):
    theta = rng.uniform(-np.pi, np.pi, size=shape)
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def init_cascade_params(config: ScenarioConfig, seed: int, M: int, stage1_sizes, sizes=None) -> list[BlockParams]:
    """``M`` C-blocks with lambda=1, mu=0.

    Grid FCNs output ``(g_min, g_max)`` in units of the first-stage spacing
    and start near ``(0, 2)``, i.e. one stage-1 cell either side of the
    centre. ``(g, h)`` FCNs start near ``g = 1``, ``h = 1``; the sigma FCN
    starts near 0 so that ``sigma = exp(0) = 1``.
    """
    n1 = dict(zip(DIMS, stage1_sizes))
    n2 = dict(zip(DIMS, sizes if sizes is not None else (config.n_phi_c, config.n_r_c, config.n_v_c)))
    for d in DIMS:
        if n2[d] >= n1[d]:
            raise ValueError(f"cascade grid for {d} ({n2[d]}) must be smaller than the first stage ({n1[d]})")
    L = {"phi": config.K, "r": config.S, "v": config.T}
    rng = np.random.default_rng(seed)
    blocks = []
    for b in range(M):
        bp = BlockParams(f"cblock{b}.")
        for kind in ("K", "V1", "V2"):
            for dim in DIMS:
                bp.add(f"lam_{kind}_{dim}", 1.0)
                bp.add(f"mu_{kind}_{dim}", 0.0)
        for dim in DIMS:
            n = n2[dim]
            bp.add(f"W_K_{dim}", _phase_only(rng, (n, L[dim])))
            bp.add(f"W_V1_{dim}", _uniform(rng, (n,), 1))
            bp.add(f"W_V2_{dim}", _phase_only(rng, (L[dim], n)))
            gh_bias = np.zeros(1 + 2 * L[dim])
            gh_bias[0] = 1.0
            gh_bias[1 : 1 + L[dim]] = 1.0
            init_fcn(bp, f"fcn_grid_{dim}", n1[dim], 2, rng, out_bias=[0.0, 2.0], out_scale=_OUT_SCALE)
            init_fcn(bp, f"fcn_V1_{dim}", n1[dim], 2, rng, out_bias=[0.0, 2.0], out_scale=_OUT_SCALE)
            init_fcn(bp, f"fcn_V2_{dim}", n1[dim], 1 + 2 * L[dim], rng, out_bias=gh_bias, out_scale=_OUT_SCALE)
            init_fcn(bp, f"fcn_K_{dim}", n1[dim], 1 + 2 * L[dim], rng, out_bias=gh_bias, out_scale=_OUT_SCALE)
        init_fcn(bp, "fcn_sigma", sum(n1.values()), 1, rng, out_bias=[0.0], out_scale=_OUT_SCALE)
        blocks.append(bp)
    return blocks


def _gh(out, L):
    g = ad.take(out, 0)
    h = ad.complex_from(ad.take(out, slice(1, 1 + L)), ad.take(out, slice(1 + L, 1 + 2 * L)))
    return g, h


@dataclass
class CascadeTrace:
    est: list = field(default_factory=list)
    atoms: list = field(default_factory=list)
    grids: list = field(default_factory=list)
    A: list = field(default_factory=list)
    sigma: list = field(default_factory=list)
    degenerate: bool = False

    def estimates(self) -> np.ndarray:
        return np.array([[float(ad._data(x)) for x in e] for e in self.est]).reshape(-1, 3)

    def targets(self) -> TargetSet:
        e = self.estimates()
        return TargetSet(e[:, 0], e[:, 1], e[:, 2])

    def window(self, m: int) -> np.ndarray:
        """``(3, 2)`` array of the lowest and highest refined grid value per dimension."""
        return np.array([[np.min(ad._data(g)), np.max(ad._data(g))] for g in self.grids[m]])


def cascade_block_forward(bp: BlockParams, Q, marginals, center, spacing, config: ScenarioConfig):
    """One C-block on the query ``Q`` of its first-stage block.

    ``marginals`` are the stage-1 ``(A_i, A_j, A_k)``, ``center`` the stage-1
    estimate triple and ``spacing`` the stage-1 grid spacings, which set the
    unit of every window the FCNs produce. Returns ``(estimate, atom, grids,
    A, sigma, degenerate)``; the refined atom is reported but not consumed.
    """
    keys = {}
    grids = []
    degenerate = False
    for d, dim in enumerate(DIMS):
        a_marg, c, unit = marginals[d], center[d], spacing[d]
        n = bp[f"W_V1_{dim}"].value.shape[0]
        L = bp[f"W_K_{dim}"].value.shape[1]
        bounds = ad.mul(unit, fcn_forward(bp, f"fcn_grid_{dim}", a_marg))
        grid, phi, flag = dynamic_grid(bounds, c, base_grid(n), dim, config)
        degenerate |= flag
        grids.append(grid)
        v1_bounds = ad.mul(unit, fcn_forward(bp, f"fcn_V1_{dim}", a_marg))
        w1, w2, wk = adapt_weights(
            bp.v(f"W_V1_{dim}"),
            ad.as_complex(bp.v(f"W_V2_{dim}")),
            ad.as_complex(bp.v(f"W_K_{dim}")),
            v1_bounds,
            c,
            _gh(fcn_forward(bp, f"fcn_V2_{dim}", a_marg), L),
            _gh(fcn_forward(bp, f"fcn_K_{dim}", a_marg), L),
        )
        keys[f"K_{dim}"] = ad.add(
            ad.mul(bp.v(f"lam_K_{dim}"), ad.conj(_transpose(phi))),
            ad.mul(bp.v(f"mu_K_{dim}"), wk),
        )
        keys[f"V1_{dim}"] = ad.add(ad.mul(bp.v(f"lam_V1_{dim}"), grid), ad.mul(bp.v(f"mu_V1_{dim}"), w1))
        keys[f"V2_{dim}"] = ad.add(ad.mul(bp.v(f"lam_V2_{dim}"), phi), ad.mul(bp.v(f"mu_V2_{dim}"), w2))
    sigma = ad.exp(fcn_forward(bp, "fcn_sigma", ad.concat(list(marginals))))
    sigma = ad.reshape(sigma, ())
    A, a_i, a_j, a_k = attention_forward(Q, keys, sigma)
    est, atom = readout(a_i, a_j, a_k, keys)
    return est, atom, grids, A, sigma, degenerate


def _transpose(x):
    return ad.einsum("ab->ba", x)


class CascadeModel:
    """First-stage transformer followed by one C-block per target."""

    def __init__(self, config: ScenarioConfig, M: int | None = None, seed: int = 0, sizes=None, cascade_sizes=None, stage1=None):
        self.config = config
        self.stage1 = stage1 if stage1 is not None else OmpTransformer(config, M, seed, sizes)
        self.M = self.stage1.M
        self.cascade_sizes = tuple(cascade_sizes) if cascade_sizes is not None else (config.n_phi_c, config.n_r_c, config.n_v_c)
        self.cblocks = init_cascade_params(config, seed + 1, self.M, self.stage1.sizes, self.cascade_sizes)

    def params(self) -> list[Param]:
        return self.stage1.params() + [p for bp in self.cblocks for p in bp.values()]

    def forward(self, z_hat, phi_min: float):
        """Returns ``(stage-2 TargetSet, stage-1 trace, cascade trace)``."""
        grids, _ = self.stage1.grids_and_dicts(phi_min)
        _, trace1 = self.stage1.forward(z_hat, phi_min)
        spacing = grids.spacing
        ctrace = CascadeTrace()
        for m in range(self.M):
            marg = (trace1.A_i[m], trace1.A_j[m], trace1.A_k[m])
            est, atom, g, A, sigma, flag = cascade_block_forward(
                self.cblocks[m], trace1.Q[m], marg, trace1.est[m], spacing, self.config
            )
            ctrace.est.append(est)
            ctrace.atoms.append(atom)
            ctrace.grids.append(g)
            ctrace.A.append(A)
            ctrace.sigma.append(sigma)
            ctrace.degenerate |= flag
        return ctrace.targets(), trace1, ctrace

    def detect(self, z_hat, phi_min: float) -> TargetSet:
        return self.forward(z_hat, phi_min)[0]

    def loss(self, sample):
        """Half the sum of both stage losses; stage 2 reuses the stage-1 pairings."""
        _, trace1, ctrace = self.forward(sample.z_hat, sample.phi_min)
        truth = sample.truth.triples()
        l1, _, relation = mae_loss(trace1.est, truth)
        l2, _, _ = mae_loss(ctrace.est, truth, relation)
        return ad.mul(0.5, ad.add(l1, l2))

    def stage_losses(self, sample):
        """Plain-number ``(stage-1 MAE parts, stage-2 MAE parts)`` with shared pairings."""
        _, trace1, ctrace = self.forward(sample.z_hat, sample.phi_min)
        truth = sample.truth.triples()
        e1 = trace1.estimates()
        rel = match_all(truth, e1)
        return mae_losses(truth, e1, rel), mae_losses(truth, ctrace.estimates(), rel)
