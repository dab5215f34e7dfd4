"""OFDM-MIMO ISAC scene generation: basis vectors, beamformer, echoes, datasets."""

from __future__ import annotations

import dataclasses
import io
import json
import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor_core import PreconditionError, lstsq

C_LIGHT = 299_792_458.0
DATASET_MAGIC = b"ISACDS\x00\x01"
DATASET_VERSION = 1

__all__ = [
    "C_LIGHT",
    "ScenarioConfig",
    "TargetSet",
    "EchoSample",
    "desk_config",
    "paper_config",
    "basis_vector",
    "steering_matrix",
    "design_beamformer",
    "gen_symbols",
    "synth_echo",
    "remove_symbols",
    "splitmix64",
    "sample_seed",
    "draw_sample",
    "sample_dataset",
    "write_dataset",
    "read_dataset",
]


@dataclass(frozen=True)
class ScenarioConfig:
    """Physical, grid and target-distribution settings of one ISAC scene.

    Angles are radians. ``delta_T`` defaults to ``1/delta_f + 1.5 us`` (cyclic
    prefix included) when left as ``None``.
    """

    K: int = 16
    S: int = 128
    T: int = 10
    fc: float = 60e9
    delta_f: float = 120e3
    delta_T: float | None = None
    sigma_s2: float = 1.0
    snr_db: float = 10.0
    r_min: float = 0.0
    r_max: float = 200.0
    v_min: float = 0.0
    v_max: float = 42.0
    angle_window: float = math.radians(40.0)
    phi_min_range: tuple[float, float] = (math.radians(-90.0), math.radians(50.0))
    M: int = 1
    master_seed: int = 0
    n_phi: int = 360
    n_r: int = 300
    n_v: int = 60
    n_phi_c: int = 100
    n_r_c: int = 100
    n_v_c: int = 40
    beam_grid: int = 181

    def __post_init__(self):
        if self.delta_T is None:
            object.__setattr__(self, "delta_T", 1.0 / self.delta_f + 1.5e-6)
        problems = self.problems()
        if problems:
            raise ValueError("invalid scenario config: " + "; ".join(problems))
        if self.r_max >= C_LIGHT / (2.0 * self.delta_f):
            warnings.warn("r_max exceeds the unambiguous delay range c/(2*delta_f)")

    def problems(self) -> list[str]:
        out = []
        for name in ("K", "S", "T", "M", "n_phi", "n_r", "n_v", "n_phi_c", "n_r_c", "n_v_c", "beam_grid"):
            if int(getattr(self, name)) < 1:
                out.append(f"{name} must be >= 1")
        if self.delta_T < 1.0 / self.delta_f - 1e-15:
            out.append("delta_T must be >= 1/delta_f (non-negative cyclic prefix)")
        if self.r_max < self.r_min:
            out.append("r_max < r_min")
        if self.v_max < self.v_min:
            out.append("v_max < v_min")
        if self.angle_window < 0:
            out.append("angle_window must be >= 0")
        if self.phi_min_range[1] < self.phi_min_range[0]:
            out.append("phi_min_range is reversed")
        if self.fc <= 0 or self.delta_f <= 0:
            out.append("fc and delta_f must be positive")
        if self.sigma_s2 <= 0:
            out.append("sigma_s2 must be positive")
        return out

    @property
    def wavelength(self) -> float:
        return C_LIGHT / self.fc

    @property
    def d(self) -> float:
        return self.wavelength / 2.0

    @property
    def noise_power(self) -> float:
        """N0 such that 10 log10(K sigma_s^2 / N0) equals ``snr_db``."""
        if math.isinf(self.snr_db) and self.snr_db > 0:
            return 0.0
        return self.K * self.sigma_s2 * 10.0 ** (-self.snr_db / 10.0)

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["phi_min_range"] = list(self.phi_min_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        if "phi_min_range" in d:
            d["phi_min_range"] = tuple(d["phi_min_range"])
        return cls(**d)


def paper_config(**overrides) -> ScenarioConfig:
    return ScenarioConfig(**overrides)


def desk_config(**overrides) -> ScenarioConfig:
    base = dict(K=8, S=32, T=8, n_phi=90, n_r=60, n_v=20, n_phi_c=30, n_r_c=30, n_v_c=10, M=2)
    base.update(overrides)
    return ScenarioConfig(**base)


@dataclass
class TargetSet:
    """Targets as parallel arrays; ``alpha`` is the channel gain, ``gamma`` the
    effective gain after transmit beamforming."""

    phi: np.ndarray
    r: np.ndarray
    v: np.ndarray
    alpha: np.ndarray | None = None
    gamma: np.ndarray | None = None

    def __post_init__(self):
        self.phi = np.atleast_1d(np.asarray(self.phi, dtype=float))
        self.r = np.atleast_1d(np.asarray(self.r, dtype=float))
        self.v = np.atleast_1d(np.asarray(self.v, dtype=float))
        if not (self.phi.shape == self.r.shape == self.v.shape):
            raise ValueError("phi, r, v must have equal lengths")
        if self.alpha is not None:
            self.alpha = np.atleast_1d(np.asarray(self.alpha, dtype=complex))
        if self.gamma is not None:
            self.gamma = np.atleast_1d(np.asarray(self.gamma, dtype=complex))

    def __len__(self) -> int:
        return self.phi.size

    def triples(self) -> np.ndarray:
        return np.stack([self.phi, self.r, self.v], axis=1)

    @classmethod
    def empty(cls) -> "TargetSet":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0, complex), np.zeros(0, complex))


@dataclass
class EchoSample:
    z_hat: np.ndarray
    truth: TargetSet
    phi_min: float
    sample_seed: int
    index: int = -1


# --------------------------------------------------------------------------
# basis vectors


def basis_vector(kind: str, param, config: ScenarioConfig) -> np.ndarray:
    """Unit-modulus phase vector for one angle / range / velocity value.

    ``param`` may be an array, in which case columns are returned (one per
    value), which is how dictionaries are assembled.
    """
    p = np.asarray(param, dtype=float)
    scalar = p.ndim == 0
    p = np.atleast_1d(p)
    if kind in ("steering_tx", "steering_rx", "steering"):
        k = np.arange(1, config.K + 1)[:, None]
        phase = -2.0 * np.pi * k * config.d * np.sin(p)[None, :] / config.wavelength
    elif kind == "delay":
        i = np.arange(1, config.S + 1)[:, None]
        tau = 2.0 * p / C_LIGHT
        phase = -2.0 * np.pi * i * config.delta_f * tau[None, :]
    elif kind == "doppler":
        k = np.arange(1, config.T + 1)[:, None]
        fd = 2.0 * p * config.fc / C_LIGHT
        phase = 2.0 * np.pi * k * config.delta_T * fd[None, :]
    else:
        raise ValueError(f"unknown basis kind {kind!r}")
    out = np.exp(1j * phase)
    return out[:, 0] if scalar else out


def steering_matrix(angles, config: ScenarioConfig) -> np.ndarray:
    return basis_vector("steering", np.asarray(angles, dtype=float).ravel(), config)


def design_beamformer(phi_min: float, phi_max: float, config: ScenarioConfig, n_grid: int | None = None) -> np.ndarray:
    """Least-squares transmit beamformer matching a 0/1 pattern over the window."""
    n_grid = config.beam_grid if n_grid is None else n_grid
    if n_grid < config.K:
        raise PreconditionError(f"n_grid ({n_grid}) must be >= K ({config.K})")
    grid = np.linspace(-np.pi / 2, np.pi / 2, n_grid)
    lo, hi = min(phi_min, phi_max), max(phi_min, phi_max)
    b = ((grid >= lo - 1e-12) & (grid <= hi + 1e-12)).astype(float)
    if not b.any():
        b[np.argmin(np.abs(grid - 0.5 * (lo + hi)))] = 1.0
    A = steering_matrix(grid, config)
    p, _ = lstsq(A.T, b)
    return p


def gen_symbols(config: ScenarioConfig, seed) -> np.ndarray:
    """Unit-modulus 4-QAM symbols ``(+-1 +-j)/sqrt(2)``, shape ``(S, T)``."""
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, size=(2, config.S, config.T))
    return ((2 * bits[0] - 1) + 1j * (2 * bits[1] - 1)) / np.sqrt(2.0)


def _complex_normal(rng: np.random.Generator, var: float, shape) -> np.ndarray:
    if var == 0:
        return np.zeros(shape, dtype=complex)
    return np.sqrt(var / 2.0) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def synth_echo(config: ScenarioConfig, targets: TargetSet, Y, p, seed) -> np.ndarray:
    """Received echo ``Z`` of shape ``(K, S, T)`` including CN(0, N0) noise."""
    Y = np.asarray(Y, dtype=complex)
    p = np.asarray(p, dtype=complex)
    Z = np.zeros((config.K, config.S, config.T), dtype=complex)
    if len(targets):
        if targets.alpha is None:
            raise ValueError("targets need channel gains alpha to synthesize an echo")
        a = basis_vector("steering", targets.phi, config)
        rho = basis_vector("delay", targets.r, config)
        beta = basis_vector("doppler", targets.v, config)
        tx_gain = a.T @ p
        for m in range(len(targets)):
            inner = tx_gain[m] * (Y * np.outer(rho[:, m], beta[:, m]))
            Z += targets.alpha[m] * a[:, m][:, None, None] * inner[None, :, :]
    rng = np.random.default_rng(seed)
    Z += _complex_normal(rng, config.noise_power, Z.shape)
    return Z


def remove_symbols(Z, Y) -> np.ndarray:
    Y = np.asarray(Y)
    if np.any(np.abs(Y) == 0):
        raise PreconditionError("symbol matrix contains zeros; cannot divide them out")
    return np.asarray(Z) / Y[None, :, :]


# --------------------------------------------------------------------------
# seeded datasets

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def sample_seed(master_seed: int, index: int) -> int:
    return splitmix64((splitmix64(master_seed & _MASK64) + index) & _MASK64)


def draw_sample(config: ScenarioConfig, index: int, M: int | None = None) -> EchoSample:
    """Generate sample ``index`` of the stream defined by ``config.master_seed``."""
    M = config.M if M is None else M
    seed = sample_seed(config.master_seed, index)
    rng = np.random.default_rng(seed)
    lo, hi = config.phi_min_range
    phi_min = float(rng.uniform(lo, hi))
    phi = rng.uniform(phi_min, phi_min + config.angle_window, size=M)
    r = rng.uniform(config.r_min, config.r_max, size=M)
    v = rng.uniform(config.v_min, config.v_max, size=M)
    alpha = _complex_normal(rng, config.sigma_s2, M)
    sym_seed, noise_seed = rng.integers(0, 2**63 - 1, size=2)
    p = design_beamformer(phi_min, phi_min + config.angle_window, config)
    Y = gen_symbols(config, int(sym_seed))
    truth = TargetSet(phi, r, v, alpha=alpha)
    Z = synth_echo(config, truth, Y, p, int(noise_seed))
    truth.gamma = alpha * (steering_matrix(phi, config).T @ p)
    return EchoSample(remove_symbols(Z, Y), truth, phi_min, seed, index)


def sample_dataset(config: ScenarioConfig, n: int, start: int = 0, M: int | None = None) -> list[EchoSample]:
    if n < 1:
        raise ValueError("n must be >= 1")
    return [draw_sample(config, start + i, M=M) for i in range(n)]


def write_dataset(path, config: ScenarioConfig, samples: Sequence[EchoSample], extra: dict | None = None) -> None:
    """Binary dataset: magic, JSON header (config echo, version, count), then
    one little-endian record per sample."""
    header = {"version": DATASET_VERSION, "count": len(samples), "config": config.to_dict()}
    if extra:
        header.update(extra)
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<Q", len(hbytes)))
    buf.write(hbytes)
    shape = (config.K, config.S, config.T)
    for s in samples:
        if s.z_hat.shape != shape:
            raise ValueError(f"sample shape {s.z_hat.shape} does not match config {shape}")
        t = s.truth
        m = len(t)
        gamma = t.gamma if t.gamma is not None else np.zeros(m, complex)
        buf.write(struct.pack("<QqdI", s.sample_seed, s.index, s.phi_min, m))
        rows = np.stack([t.phi, t.r, t.v, gamma.real, gamma.imag], axis=1).astype("<f8")
        buf.write(rows.tobytes())
        buf.write(np.ascontiguousarray(s.z_hat).astype("<c16").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_dataset(path) -> tuple[ScenarioConfig, list[EchoSample], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != DATASET_MAGIC:
        raise ValueError(f"{path}: not an ISAC dataset file")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    if header.get("version") != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {header.get('version')}")
    config = ScenarioConfig.from_dict(header["config"])
    off = 16 + hlen
    n_entries = config.K * config.S * config.T
    rec = struct.Struct("<QqdI")
    samples = []
    for _ in range(header["count"]):
        if off + rec.size > len(raw):
            raise ValueError(f"{path}: truncated dataset")
        seed, index, phi_min, m = rec.unpack_from(raw, off)
        off += rec.size
        rows = np.frombuffer(raw, dtype="<f8", count=5 * m, offset=off).reshape(m, 5)
        off += 40 * m
        if off + 16 * n_entries > len(raw):
            raise ValueError(f"{path}: truncated dataset")
        z = np.frombuffer(raw, dtype="<c16", count=n_entries, offset=off).reshape(config.K, config.S, config.T)
        off += 16 * n_entries
        truth = TargetSet(rows[:, 0], rows[:, 1], rows[:, 2], gamma=rows[:, 3] + 1j * rows[:, 4])
        samples.append(EchoSample(z.astype(complex), truth, phi_min, seed, index))
    return config, samples, header
