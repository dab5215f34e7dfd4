import numpy as np
import pytest

from isac_omp.baselines import (
    ConfigurationError,
    MusicConfig,
    _signal_subspace,
    local_maxima,
    matched_filter_rv,
    music1d,
    music1d_mf,
    music1d_spectrum,
    music2d,
    music2d_mf,
    snapshot_matrix,
)
from isac_omp.omp3d import build_grids_and_dicts
from isac_omp.scenario import desk_config, draw_sample, paper_config
from isac_omp.tensor_core import PreconditionError

CFG = desk_config(snr_db=float("inf"))
PHI_MIN = np.radians(-20.0)


@pytest.fixture(scope="module")
def gd():
    return build_grids_and_dicts(CFG, PHI_MIN)


def _scene(dicts, cells, gains, noise=0.0, seed=0):
    Z = sum(g * dicts.atom(*c) for g, c in zip(gains, cells))
    rng = np.random.default_rng(seed)
    return Z + noise * (rng.normal(size=Z.shape) + 1j * rng.normal(size=Z.shape))


def test_local_maxima_1d_and_2d():
    assert local_maxima(np.array([0, 3, 1, 5, 5, 2, 4])) == [(6,), (1,)]
    spec = np.zeros((4, 4))
    spec[1, 1], spec[3, 3], spec[0, 3] = 5, 7, 1
    assert local_maxima(spec) == [(3, 3), (1, 1), (0, 3)]


def test_music1d_single_target_within_one_scan_cell(gd):
    grids, dicts = gd
    Z = _scene(dicts, [(40, 10, 5)], [1.0])
    phi = music1d(Z, 1, CFG, PHI_MIN)
    scan_step = (grids.g_phi[1] - grids.g_phi[0]) / MusicConfig().density
    assert abs(phi[0] - grids.g_phi[40]) <= scan_step + 1e-12


def test_music1d_coincident_angles_reuse_peak(gd):
    grids, dicts = gd
    Z = _scene(dicts, [(40, 10, 5), (40, 45, 15)], [1.0, 0.7j])
    phi = music1d(Z, 2, CFG, PHI_MIN)
    assert phi[0] == phi[1]


def test_music1d_global_phase_invariance(gd):
    grids, dicts = gd
    Z = _scene(dicts, [(20, 10, 5), (60, 30, 9)], [1.0, 0.5], noise=0.1)
    angles = np.linspace(-0.3, 0.3, 50)
    np.testing.assert_allclose(
        music1d_spectrum(Z, 2, CFG, angles), music1d_spectrum(np.exp(0.7j) * Z, 2, CFG, angles), rtol=1e-8
    )


def test_music1d_precondition():
    with pytest.raises(PreconditionError):
        music1d(np.zeros((8, 32, 8), complex), 8, CFG)


def test_noise_subspace_orthogonal_to_true_steering(gd):
    grids, dicts = gd
    Z = _scene(dicts, [(30, 10, 5), (70, 40, 12)], [1.0, 0.8])
    spec = music1d_spectrum(Z, 2, CFG, grids.g_phi[[30, 70]])
    # spectrum = 1 / ||F_n^H a||; a has norm sqrt(K)
    assert np.all(1.0 / spec <= 1e-6 * np.sqrt(CFG.K))


def test_matched_filter_exact_on_grid(gd):
    grids, dicts = gd
    Z = _scene(dicts, [(40, 17, 0)], [2.0])
    r, v = matched_filter_rv(Z, [grids.g_phi[40]], dicts, grids, CFG)
    assert r[0] == grids.g_r[17] and v[0] == grids.g_v[0] == 0.0
    r2, v2 = matched_filter_rv(5.0 * Z, [grids.g_phi[40]], dicts, grids, CFG)
    assert (r2[0], v2[0]) == (r[0], v[0])


def test_snapshot_shape_paper_example():
    cfg = paper_config()
    mc = MusicConfig()
    k_hat, s_hat = mc.sub_sizes(cfg.K, cfg.S)
    assert (k_hat, s_hat) == (16, 76)
    X = snapshot_matrix(np.zeros((16, 128, 10), complex), k_hat, s_hat)
    assert X.shape == (1216, 10)


def test_snapshot_blocks_and_overlap():
    Z = np.arange(4 * 6 * 2).reshape(4, 6, 2).astype(complex)
    X = snapshot_matrix(Z, 2, 3)
    assert X.shape == (6, 2 * 2 * 2)
    np.testing.assert_array_equal(X[:, 0], Z[0:2, 0:3, 0].ravel())
    Xo = snapshot_matrix(Z, 2, 3, overlapping=True)
    assert Xo.shape == (6, 3 * 4 * 2)


def test_gram_trick_spans_the_same_subspace():
    rng = np.random.default_rng(0)
    X = (rng.normal(size=(40, 6)) + 1j * rng.normal(size=(40, 6))) @ np.diag([9, 5, 3, 1, 0.5, 0.1])
    Fs = _signal_subspace(X, 3, "jacobi")
    U = np.linalg.svd(X)[0][:, :3]
    np.testing.assert_allclose(Fs.conj().T @ Fs, np.eye(3), atol=1e-10)
    np.testing.assert_allclose(np.abs(np.linalg.svd(U.conj().T @ Fs)[1]), 1.0, atol=1e-10)


def test_music2d_single_target_within_one_scan_cell(gd):
    grids, dicts = gd
    Z = _scene(dicts, [(40, 20, 5)], [1.0])
    phi, r = music2d(Z, 1, CFG, PHI_MIN)
    d = MusicConfig().density
    assert abs(phi[0] - grids.g_phi[40]) <= grids.spacing[0] / d + 1e-12
    assert abs(r[0] - grids.g_r[20]) <= grids.spacing[1] / d + 1e-9


def test_music2d_separates_equal_angle_targets_50m_apart(gd):
    grids, dicts = gd
    r_a = grids.g_r[10]
    j_b = int(np.argmin(np.abs(grids.g_r - (r_a + 50))))
    Z = _scene(dicts, [(40, 10, 5), (40, j_b, 12)], [1.0, 0.9j])
    phi, r = music2d(Z, 2, CFG, PHI_MIN)
    assert abs(r[0] - r[1]) > 30
    assert sorted(np.round(r)) == pytest.approx(sorted(np.round([r_a, grids.g_r[j_b]])), abs=2)


def test_music2d_configuration_errors():
    with pytest.raises(ConfigurationError):
        music2d(np.ones((8, 32, 1), complex), 1, CFG.replace(T=1), PHI_MIN)
    with pytest.raises(ConfigurationError):
        MusicConfig(s_ratio=0.0).sub_sizes(8, 32)
    # too few snapshots to separate M signals: guidance points to overlapping mode
    with pytest.raises(ConfigurationError, match="overlapping"):
        music2d(np.ones((8, 32, 8), complex), 8, CFG, PHI_MIN)
    phi, r = music2d(draw_sample(CFG.replace(snr_db=10.0), 0).z_hat, 8, CFG, PHI_MIN, MusicConfig(overlapping=True))
    assert len(phi) == 8


def test_pipelines_return_m_targets():
    cfg = desk_config(M=3, snr_db=10.0)
    s = draw_sample(cfg, 2)
    grids, dicts = build_grids_and_dicts(cfg, s.phi_min)
    for fn in (music1d_mf, music2d_mf):
        est = fn(s.z_hat, 3, cfg, s.phi_min, dicts, grids)
        assert len(est) == 3
        assert np.all((est.r >= 0) & (est.r <= 200))
