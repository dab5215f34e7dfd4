"""Grid dictionaries, hard 3D-OMP and its softmax-relaxed reference pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scenario import ScenarioConfig, TargetSet, basis_vector
from .tensor_core import DimensionError, contract_first, lstsq, magnitude, outer3

__all__ = [
    "GridSet",
    "DictionarySet",
    "OmpState",
    "SoftTrace",
    "build_grids_and_dicts",
    "adm_map",
    "run_omp",
    "projection_residual",
    "softmax3",
    "soft_omp_forward",
]


@dataclass
class GridSet:
    g_phi: np.ndarray
    g_r: np.ndarray
    g_v: np.ndarray

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.g_phi.size, self.g_r.size, self.g_v.size)

    @property
    def spacing(self) -> tuple[float, float, float]:
        return tuple(float(g[1] - g[0]) if g.size > 1 else 0.0 for g in (self.g_phi, self.g_r, self.g_v))


@dataclass
class DictionarySet:
    phi_dict: np.ndarray  # (K, N_phi)
    r_dict: np.ndarray  # (S, N_r)
    v_dict: np.ndarray  # (T, N_v)

    def atom(self, i: int, j: int, k: int) -> np.ndarray:
        return outer3(self.phi_dict[:, i], self.r_dict[:, j], self.v_dict[:, k])


@dataclass
class OmpState:
    residual: np.ndarray
    atoms: list = field(default_factory=list)
    indices: list = field(default_factory=list)
    gains: np.ndarray = field(default_factory=lambda: np.zeros(0, complex))
    residual_norms: list = field(default_factory=list)
    flagged: bool = False


def build_grids_and_dicts(config: ScenarioConfig, phi_min: float, sizes=None) -> tuple[GridSet, DictionarySet]:
    """Uniform inclusive-endpoint grids and their dictionaries.

    ``sizes`` overrides ``(n_phi, n_r, n_v)`` from the config.
    """
    n_phi, n_r, n_v = sizes if sizes is not None else (config.n_phi, config.n_r, config.n_v)
    if min(n_phi, n_r, n_v) < 2:
        raise ValueError("every grid needs at least 2 points")
    grids = GridSet(
        np.linspace(phi_min, phi_min + config.angle_window, n_phi),
        np.linspace(config.r_min, config.r_max, n_r),
        np.linspace(config.v_min, config.v_max, n_v),
    )
    dicts = DictionarySet(
        basis_vector("steering", grids.g_phi, config),
        basis_vector("delay", grids.g_r, config),
        basis_vector("doppler", grids.g_v, config),
    )
    return grids, dicts


def _correlate(z, dicts: DictionarySet) -> np.ndarray:
    if z.shape != (dicts.phi_dict.shape[0], dicts.r_dict.shape[0], dicts.v_dict.shape[0]):
        raise DimensionError(
            f"tensor shape {z.shape} does not match dictionaries "
            f"({dicts.phi_dict.shape[0]}, {dicts.r_dict.shape[0]}, {dicts.v_dict.shape[0]})"
        )
    out = contract_first(z, dicts.phi_dict.conj())
    out = contract_first(out, dicts.r_dict.conj())
    return contract_first(out, dicts.v_dict.conj())


def adm_map(z_hat, dicts: DictionarySet) -> np.ndarray:
    """Angle-delay-Doppler map ``|Z x1 conj(Phi_phi) x2 conj(Phi_r) x3 conj(Phi_v)|``."""
    return magnitude(_correlate(np.asarray(z_hat), dicts))


def projection_residual(z, atoms) -> tuple[np.ndarray, np.ndarray, bool]:
    """Residual of ``z`` after orthogonal projection onto ``span(atoms)``.

    Returns ``(residual, gains, flagged)``; an empty atom list leaves ``z`` as is.
    """
    z = np.asarray(z)
    if not len(atoms):
        return z.copy(), np.zeros(0, complex), False
    Mm = np.stack([np.asarray(a).ravel() for a in atoms], axis=1)
    gains, flagged = lstsq(Mm, z.ravel())
    return (z.ravel() - Mm @ gains).reshape(z.shape), gains, flagged


def run_omp(z_hat, dicts: DictionarySet, grids: GridSet, M: int | None = None, delta: float | None = None):
    """Hard 3D-OMP.

    Stops after ``M`` iterations, or, in threshold mode (``M=None``), as soon
    as the map maximum drops to ``delta`` or below. Ties in the argmax go to
    the first index in (i, j, k) lexicographic order.
    """
    z_hat = np.asarray(z_hat, dtype=complex)
    n_total = int(np.prod(grids.shape))
    if M is None and delta is None:
        raise ValueError("give a fixed iteration count M or a threshold delta")
    if M is not None and M > n_total:
        raise ValueError(f"M={M} exceeds the dictionary size {n_total}")
    limit = M if M is not None else n_total
    state = OmpState(residual=z_hat.copy())
    est = []
    while len(est) < limit:
        L = adm_map(state.residual, dicts)
        peak = L.max()
        if delta is not None and peak <= delta:
            break
        i, j, k = np.unravel_index(int(np.argmax(L)), L.shape)
        est.append((grids.g_phi[i], grids.g_r[j], grids.g_v[k]))
        state.indices.append((int(i), int(j), int(k)))
        state.atoms.append(dicts.atom(i, j, k))
        state.residual, state.gains, flagged = projection_residual(z_hat, state.atoms)
        state.flagged |= flagged
        state.residual_norms.append(float(np.linalg.norm(state.residual)))
    if est:
        arr = np.array(est)
        targets = TargetSet(arr[:, 0], arr[:, 1], arr[:, 2], gamma=state.gains)
    else:
        targets = TargetSet.empty()
    return targets, state


def softmax3(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


@dataclass
class SoftTrace:
    A: list = field(default_factory=list)
    A_i: list = field(default_factory=list)
    A_j: list = field(default_factory=list)
    A_k: list = field(default_factory=list)
    atoms: list = field(default_factory=list)
    queries: list = field(default_factory=list)


def soft_omp_forward(z_hat, dicts: DictionarySet, grids: GridSet, sigma: float = 1.0, iterations: int = 1):
    """Transformer form of 3D-OMP with softmax attention in place of argmax.

    The attention map is ``softmax(sigma * |Q x K_phi^T x K_r^T x K_v^T|)``
    with keys equal to the Hermitian dictionaries; estimates are marginal
    expectations over the grids and atoms are marginal-weighted dictionary
    columns, removed from the observation by exact orthogonal projection.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    z_hat = np.asarray(z_hat, dtype=complex)
    q = z_hat
    trace = SoftTrace()
    est = []
    for _ in range(iterations):
        trace.queries.append(q)
        A = softmax3(sigma * adm_map(q, dicts))
        a_i, a_j, a_k = A.sum(axis=(1, 2)), A.sum(axis=(0, 2)), A.sum(axis=(0, 1))
        est.append((a_i @ grids.g_phi, a_j @ grids.g_r, a_k @ grids.g_v))
        atom = outer3(dicts.phi_dict @ a_i, dicts.r_dict @ a_j, dicts.v_dict @ a_k)
        trace.A.append(A)
        trace.A_i.append(a_i)
        trace.A_j.append(a_j)
        trace.A_k.append(a_k)
        trace.atoms.append(atom)
        q, _, _ = projection_residual(z_hat, trace.atoms)
    arr = np.array(est).reshape(-1, 3)
    return TargetSet(arr[:, 0], arr[:, 1], arr[:, 2]), trace
