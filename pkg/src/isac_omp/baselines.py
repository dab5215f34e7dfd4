"""Subspace baselines: 1D-MUSIC and spatially smoothed 2D-MUSIC, each followed
by a matched filter for the remaining parameters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .omp3d import DictionarySet, GridSet
from .scenario import ScenarioConfig, TargetSet, basis_vector
from .tensor_core import PreconditionError, hermitian_eig

__all__ = [
    "MusicConfig",
    "ConfigurationError",
    "local_maxima",
    "music1d_spectrum",
    "music1d",
    "matched_filter_rv",
    "snapshot_matrix",
    "music2d_spectrum",
    "music2d",
    "music1d_mf",
    "music2d_mf",
]


class ConfigurationError(ValueError):
    """Raised when a baseline configuration cannot produce a usable covariance."""


@dataclass(frozen=True)
class MusicConfig:
    """Scan density (relative to the OMP grid), smoothing ratios and peak rules.

    Eigenvalues below ``rank_tol`` times the largest do not count towards the
    signal subspace, and at most that many distinct peaks are taken. A local
    maximum below ``peak_floor`` times the spectrum median is ignored (off by
    default).
    """

    density: int = 4
    k_ratio: float = 1.0
    s_ratio: float = 0.6
    radius: int = 1
    overlapping: bool = False
    eig_method: str = "jacobi"
    peak_floor: float = 0.0
    rank_tol: float = 1e-9

    def sub_sizes(self, K: int, S: int) -> tuple[int, int]:
        k_hat = int(np.floor(self.k_ratio * K))
        s_hat = int(np.floor(self.s_ratio * S))
        if not (1 <= k_hat <= K and 1 <= s_hat <= S):
            raise ConfigurationError(f"sub-array sizes ({k_hat}, {s_hat}) outside [1, K] x [1, S]")
        return k_hat, s_hat


def local_maxima(spec: np.ndarray, radius: int = 1) -> list[tuple]:
    """Strict local maxima over a ``(2 radius + 1)``-wide neighbourhood, largest first.

    Cells beyond the border are ignored. Ties in value keep index order.
    """
    spec = np.asarray(spec, dtype=float)
    pad = np.pad(spec, radius, mode="constant", constant_values=-np.inf)
    is_max = np.ones(spec.shape, dtype=bool)
    for offset in np.ndindex(*(2 * radius + 1,) * spec.ndim):
        if all(o == radius for o in offset):
            continue
        sl = tuple(slice(o, o + n) for o, n in zip(offset, spec.shape))
        is_max &= spec > pad[sl]
    idx = np.argwhere(is_max)
    order = np.argsort(-spec[tuple(idx.T)], kind="stable")
    return [tuple(int(x) for x in idx[o]) for o in order]


def _pick(spec: np.ndarray, M: int, mc: "MusicConfig", distinct: int | None = None) -> list:
    """First ``M`` peaks; when fewer were found (or allowed), they are reused in order."""
    floor = mc.peak_floor * float(np.median(spec))
    peaks = [p for p in local_maxima(spec, mc.radius) if spec[p] >= floor][: distinct or M]
    if not peaks:
        peaks = [tuple(int(i) for i in np.unravel_index(int(np.argmax(spec)), spec.shape))]
    return [peaks[m % len(peaks)] for m in range(M)]


def _signal_dim(w: np.ndarray, M: int, tol: float) -> int:
    """``M`` capped by the numerical rank (at least 1)."""
    if w[0] <= 0:
        return 1
    return max(1, min(M, int(np.sum(w > tol * w[0]))))


def _scan(lo: float, hi: float, n: int, density: int) -> np.ndarray:
    return np.linspace(lo, hi, density * (n - 1) + 1)


def _angle_window(config: ScenarioConfig, phi_min: float | None) -> tuple[float, float]:
    if phi_min is None:
        return -np.pi / 2, np.pi / 2
    return phi_min, phi_min + config.angle_window


def music1d_spectrum(z_hat, M: int, config: ScenarioConfig, angles, method: str = "jacobi", rank_tol: float = 1e-9) -> np.ndarray:
    """``1 / ||F_n^H a(phi)||`` over ``angles`` from the spatial covariance."""
    return _music1d(z_hat, M, config, angles, method, rank_tol)[0]


def _music1d(z_hat, M, config, angles, method, rank_tol):
    z_hat = np.asarray(z_hat, dtype=complex)
    K = z_hat.shape[0]
    if M >= K:
        raise PreconditionError(f"1D-MUSIC needs M < K (got M={M}, K={K})")
    A = z_hat.reshape(K, -1)
    w, V = hermitian_eig(A @ A.conj().T, method=method)
    m = _signal_dim(w, M, rank_tol)
    proj = V[:, m:].conj().T @ basis_vector("steering", np.asarray(angles, float), config)
    return 1.0 / np.maximum(np.linalg.norm(proj, axis=0), 1e-300), m


def music1d(z_hat, M: int, config: ScenarioConfig, phi_min: float | None = None, mc: MusicConfig = MusicConfig()):
    """``M`` angle estimates from the largest spectrum peaks.

    The scan covers the sensing window when ``phi_min`` is given, otherwise
    the full half-plane, at ``mc.density`` times the OMP angle-grid density.
    """
    lo, hi = _angle_window(config, phi_min)
    n = config.n_phi if phi_min is not None else int(np.ceil(config.n_phi * np.pi / config.angle_window))
    angles = _scan(lo, hi, n, mc.density)
    spec, m = _music1d(z_hat, M, config, angles, mc.eig_method, mc.rank_tol)
    return np.array([angles[p[0]] for p in _pick(spec, M, mc, m)])


def matched_filter_rv(z_hat, angle_estimates, dicts: DictionarySet, grids: GridSet, config: ScenarioConfig):
    """Per angle: combine the array with ``conj(a(phi))`` and pick the range-velocity peak."""
    z_hat = np.asarray(z_hat, dtype=complex)
    r_est, v_est = [], []
    for phi in np.atleast_1d(angle_estimates):
        y = np.tensordot(basis_vector("steering", float(phi), config).conj(), z_hat, axes=([0], [0]))
        rv = np.abs(dicts.r_dict.conj().T @ y @ dicts.v_dict.conj())
        j, k = np.unravel_index(int(np.argmax(rv)), rv.shape)
        r_est.append(grids.g_r[j])
        v_est.append(grids.g_v[k])
    return np.array(r_est), np.array(v_est)


def snapshot_matrix(z_hat, k_hat: int, s_hat: int, overlapping: bool = False) -> np.ndarray:
    """Sub-block snapshots of shape ``(k_hat * s_hat, n)``.

    Non-overlapping mode tiles the array with ``floor(K/k_hat) * floor(S/s_hat)``
    blocks per symbol; overlapping mode slides the block by one element.
    Columns are ordered by (angle block, range block, symbol).
    """
    z_hat = np.asarray(z_hat, dtype=complex)
    K, S, T = z_hat.shape
    if overlapping:
        ks, ss = range(K - k_hat + 1), range(S - s_hat + 1)
    else:
        ks = range(0, (K // k_hat) * k_hat, k_hat)
        ss = range(0, (S // s_hat) * s_hat, s_hat)
    cols = [z_hat[p : p + k_hat, q : q + s_hat, :].reshape(k_hat * s_hat, T) for p in ks for q in ss]
    return np.concatenate(cols, axis=1)


def _signal_subspace(X: np.ndarray, M: int, method: str, rank_tol: float = 1e-9) -> np.ndarray:
    """Leading left singular vectors of ``X`` (at most ``M``, at most the
    numerical rank) via the smaller Gram matrix."""
    rows, cols = X.shape
    if cols < rows:
        w, U = hermitian_eig(X.conj().T @ X, method=method)
        m = _signal_dim(w, M, rank_tol)
        return (X @ U[:, :m]) / np.sqrt(np.maximum(w[:m], 1e-300))
    w, V = hermitian_eig(X @ X.conj().T, method=method)
    return V[:, : _signal_dim(w, M, rank_tol)]


def music2d_spectrum(z_hat, M: int, config: ScenarioConfig, angles, ranges, mc: MusicConfig = MusicConfig()):
    """Spatially smoothed angle-range spectrum ``1 / ||F_n^H (a(phi) kron rho(r))||``.

    Uses ``||F_n^H x||^2 = ||x||^2 - ||F_s^H x||^2`` with separable contractions.
    """
    return _music2d(z_hat, M, config, angles, ranges, mc)[0]


def _music2d(z_hat, M, config, angles, ranges, mc):
    z_hat = np.asarray(z_hat, dtype=complex)
    K, S, _ = z_hat.shape
    k_hat, s_hat = mc.sub_sizes(K, S)
    if M >= k_hat * s_hat:
        raise PreconditionError(f"2D-MUSIC needs M < K_hat * S_hat = {k_hat * s_hat}")
    X = snapshot_matrix(z_hat, k_hat, s_hat, mc.overlapping)
    if X.shape[1] < 2:
        raise ConfigurationError(
            f"only {X.shape[1]} snapshot(s) for a {X.shape[0]}-dim covariance; "
            "lower the smoothing ratios or enable overlapping windows"
        )
    if M >= X.shape[1]:
        raise ConfigurationError(
            f"{X.shape[1]} snapshots cannot separate {M} signals from noise; "
            "lower the smoothing ratios or enable overlapping windows"
        )
    Fs = _signal_subspace(X, M, mc.eig_method, mc.rank_tol)
    Fs = Fs.reshape(k_hat, s_hat, Fs.shape[1])
    a = basis_vector("steering", np.asarray(angles, float), config)[:k_hat]
    rho = basis_vector("delay", np.asarray(ranges, float), config)[:s_hat]
    proj = np.einsum("ksm,ka,sb->mab", Fs.conj(), a, rho, optimize=True)
    noise = k_hat * s_hat - np.sum(np.abs(proj) ** 2, axis=0)
    return 1.0 / np.sqrt(np.maximum(noise, 1e-300)), Fs.shape[2]


def music2d(z_hat, M: int, config: ScenarioConfig, phi_min: float | None = None, mc: MusicConfig = MusicConfig()):
    """``M`` (angle, range) pairs from the largest 2D spectrum peaks."""
    lo, hi = _angle_window(config, phi_min)
    n = config.n_phi if phi_min is not None else int(np.ceil(config.n_phi * np.pi / config.angle_window))
    angles = _scan(lo, hi, n, mc.density)
    ranges = _scan(config.r_min, config.r_max, config.n_r, mc.density)
    spec, m = _music2d(z_hat, M, config, angles, ranges, mc)
    peaks = _pick(spec, M, mc, m)
    return np.array([angles[i] for i, _ in peaks]), np.array([ranges[j] for _, j in peaks])


def _velocity_mf(z_hat, phi, r, dicts: DictionarySet, grids: GridSet, config: ScenarioConfig) -> float:
    a = basis_vector("steering", float(phi), config)
    rho = basis_vector("delay", float(r), config)
    y = np.einsum("k,s,kst->t", a.conj(), rho.conj(), z_hat, optimize=True)
    return float(grids.g_v[int(np.argmax(np.abs(dicts.v_dict.conj().T @ y)))])


def music1d_mf(z_hat, M, config, phi_min, dicts, grids, mc: MusicConfig = MusicConfig()) -> TargetSet:
    """1D-MUSIC angles, then matched-filter range and velocity per angle."""
    phi = music1d(z_hat, M, config, phi_min, mc)
    r, v = matched_filter_rv(z_hat, phi, dicts, grids, config)
    return TargetSet(phi, r, v)


def music2d_mf(z_hat, M, config, phi_min, dicts, grids, mc: MusicConfig = MusicConfig()) -> TargetSet:
    """2D-MUSIC angles and ranges, then matched-filter velocity per pair."""
    z_hat = np.asarray(z_hat, dtype=complex)
    phi, r = music2d(z_hat, M, config, phi_min, mc)
    v = np.array([_velocity_mf(z_hat, p, q, dicts, grids, config) for p, q in zip(phi, r)])
    return TargetSet(phi, r, v)
