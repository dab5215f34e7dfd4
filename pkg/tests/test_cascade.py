import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from isac_omp import autodiff as ad
from isac_omp.autodiff import Tape, backward
from isac_omp.cascade import (
    CascadeModel,
    adapt_weights,
    base_grid,
    dictionary_from_grid,
    dynamic_grid,
    init_cascade_params,
)
from isac_omp.omp3d import build_grids_and_dicts
from isac_omp.scenario import EchoSample, TargetSet, basis_vector, desk_config, draw_sample

CFG = desk_config(K=4, S=8, T=4, M=2, snr_db=10.0)
SIZES = (12, 10, 6)
CSIZES = (5, 5, 5)  # odd sizes keep the window centre on the refined grid


def test_dynamic_grid_worked_example():
    grid, _, flag = dynamic_grid(np.array([-1.0, 1.0]), 10.0, base_grid(5), "phi", CFG)
    np.testing.assert_allclose(ad._data(grid), np.linspace(8, 10, 5))
    assert not flag


def test_dynamic_grid_collapse_and_reversal():
    grid, phi, flag = dynamic_grid(np.array([0.0, 0.0]), 0.3, base_grid(4), "phi", CFG)
    np.testing.assert_allclose(ad._data(grid), 0.3)
    assert flag
    np.testing.assert_allclose(ad._data(phi), np.repeat(basis_vector("steering", 0.3, CFG)[:, None], 4, 1))
    _, _, flag = dynamic_grid(np.array([1.0, -1.0]), 0.0, base_grid(4), "r", CFG)
    assert flag


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 5), st.integers(3, 40))
def test_refined_spacing(width, n):
    grid, _, _ = dynamic_grid(np.array([0.0, width]), 50.0, base_grid(n), "r", CFG)
    np.testing.assert_allclose(np.diff(ad._data(grid)), width / (n - 1))


@pytest.mark.parametrize("dim,kind", [("phi", "steering"), ("r", "delay"), ("v", "doppler")])
def test_dictionary_from_grid_matches_basis_vectors(dim, kind):
    g = np.array([0.1, 0.4, 0.9]) if dim == "phi" else np.array([1.0, 17.0, 33.0])
    np.testing.assert_allclose(ad._data(dictionary_from_grid(dim, g, CFG)), basis_vector(kind, g, CFG), atol=1e-12)


def test_adapt_weights_identity_and_zero_scale():
    rng = np.random.default_rng(0)
    W1 = rng.normal(size=5)
    W2 = np.exp(1j * rng.uniform(-3, 3, size=(4, 5)))
    Wk = np.exp(1j * rng.uniform(-3, 3, size=(5, 4)))
    ones = np.ones(4, complex)
    w1, w2, wk = adapt_weights(W1, W2, Wk, np.array([0.0, 1.0]), 0.0, (np.array(1.0), ones), (np.array(1.0), ones))
    np.testing.assert_allclose(ad._data(w1), W1)
    np.testing.assert_allclose(ad._data(w2), W2)
    np.testing.assert_allclose(ad._data(wk), Wk)
    w1, _, _ = adapt_weights(W1, W2, Wk, np.array([0.0, 0.0]), 7.5, (np.array(1.0), ones), (np.array(1.0), ones))
    np.testing.assert_allclose(ad._data(w1), 7.5)


def test_adapt_weights_doubles_phase():
    theta = np.random.default_rng(1).uniform(-1.5, 1.5, size=(4, 5))
    W = np.exp(1j * theta)
    _, w2, wk = adapt_weights(np.zeros(5), W, W.T, np.zeros(2), 0.0, (np.array(2.0), np.ones(4)), (np.array(2.0), np.ones(4)))
    np.testing.assert_allclose(ad._data(w2), np.exp(2j * theta), atol=1e-12)
    np.testing.assert_allclose(np.abs(ad._data(wk)), 1.0)


def test_cascade_grid_sizes_must_shrink():
    with pytest.raises(ValueError):
        init_cascade_params(CFG, 0, 1, SIZES, (12, 5, 4))


@pytest.fixture(scope="module")
def cmodel():
    return CascadeModel(CFG, seed=0, sizes=SIZES, cascade_sizes=CSIZES)


def test_init_window_is_one_stage1_cell_each_side(cmodel):
    s = draw_sample(CFG, 3)
    est2, trace1, ct = cmodel.forward(s.z_hat, s.phi_min)
    grids, _ = cmodel.stage1.grids_and_dicts(s.phi_min)
    e1 = trace1.estimates()
    for m in range(2):
        win = ct.window(m)
        for d in range(3):
            half = 0.5 * (win[d, 1] - win[d, 0])
            assert half == pytest.approx(grids.spacing[d], rel=0.3)
            assert 0.5 * (win[d, 0] + win[d, 1]) == pytest.approx(e1[m, d], abs=0.3 * grids.spacing[d])
    assert not ct.degenerate


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_refined_estimates_inside_window(index):
    m = CascadeModel(CFG, seed=index % 3, sizes=SIZES, cascade_sizes=CSIZES)
    s = draw_sample(CFG, index)
    est2, _, ct = m.forward(s.z_hat, s.phi_min)
    e = est2.triples()
    for k in range(2):
        win = ct.window(k)
        assert np.all(e[k] >= win[:, 0] - 1e-9) and np.all(e[k] <= win[:, 1] + 1e-9)


def test_zero_width_window_returns_stage1_estimate():
    m = CascadeModel(CFG, seed=0, sizes=SIZES, cascade_sizes=CSIZES)
    for bp in m.cblocks:
        for dim in ("phi", "r", "v"):
            bp[f"fcn_grid_{dim}.l2.W"].value[...] = 0
            bp[f"fcn_grid_{dim}.l2.b"].value[...] = 0
    s = draw_sample(CFG, 5)
    est2, trace1, ct = m.forward(s.z_hat, s.phi_min)
    np.testing.assert_allclose(est2.triples(), trace1.estimates(), atol=1e-12)
    assert ct.degenerate


def test_refinement_helps_on_noiseless_on_grid_target():
    cfg = CFG.replace(snr_db=float("inf"), M=1)
    m = CascadeModel(cfg, seed=0, sizes=SIZES, cascade_sizes=CSIZES)
    for bp in m.cblocks:
        bp["fcn_sigma.l2.b"].value[...] = np.log(1e3)
        for dim in ("phi", "r", "v"):
            # window exactly one stage-1 cell either side of the stage-1 estimate
            bp[f"fcn_grid_{dim}.l2.W"].value[...] = 0.0
            bp[f"fcn_grid_{dim}.l2.b"].value[...] = [0.0, 2.0]
    phi_min = 0.1
    grids, dicts = build_grids_and_dicts(cfg, phi_min, SIZES)
    for idx in [(3, 4, 2), (7, 2, 4), (5, 8, 1)]:
        z = dicts.atom(*idx)
        truth = TargetSet([grids.g_phi[idx[0]]], [grids.g_r[idx[1]]], [grids.g_v[idx[2]]])
        s = EchoSample(z, truth, phi_min, 0)
        l1, l2 = m.stage_losses(s)
        assert l2[3] <= l1[3] + 1e-9


def _generic(seed=0):
    m = CascadeModel(CFG, seed=seed, sizes=SIZES, cascade_sizes=CSIZES)
    for bp in m.cblocks + m.stage1.blocks:
        for name, p in bp.items():
            if name.startswith("mu_"):
                p.value[...] = 0.2
    return m


def test_gradients_reach_every_used_cascade_fcn():
    m = _generic()
    s = draw_sample(CFG, 1)
    with Tape() as tape:
        g = backward(tape, m.loss(s))
    for dim in ("phi", "r", "v"):
        for fcn in ("grid", "V1", "K"):
            for layer in range(3):
                assert np.linalg.norm(g[f"cblock0.fcn_{fcn}_{dim}.l{layer}.W"]) > 0, (fcn, dim, layer)
    assert np.linalg.norm(g["cblock1.fcn_sigma.l0.W"]) > 0
    # the refined atom is not consumed, so the V2 adaptation stays inert
    assert np.linalg.norm(g["cblock0.fcn_V2_r.l0.W"]) == 0


def test_stage1_receives_gradient_from_both_halves():
    m = _generic()
    s = draw_sample(CFG, 1)
    from isac_omp.transformer import mae_loss

    def stage_grads(which):
        with Tape() as tape:
            _, t1, ct = m.forward(s.z_hat, s.phi_min)
            l1, _, rel = mae_loss(t1.est, s.truth.triples())
            l2, _, _ = mae_loss(ct.est, s.truth.triples(), rel)
            return backward(tape, l1 if which == 1 else l2)

    g1, g2 = stage_grads(1), stage_grads(2)
    assert np.linalg.norm(g1["block0.mu_K_r"]) > 0
    assert np.linalg.norm(g2["block0.mu_K_r"]) > 0
    with Tape() as tape:
        gt = backward(tape, m.loss(s))
    np.testing.assert_allclose(gt["block0.mu_K_r"], 0.5 * (g1["block0.mu_K_r"] + g2["block0.mu_K_r"]), rtol=1e-10)


def test_cascade_gradient_finite_differences():
    m = _generic(1)
    s = draw_sample(CFG, 6)
    with Tape() as tape:
        g = backward(tape, m.loss(s))
    h = 1e-6
    for name in ("cblock0.fcn_grid_r.l2.b", "cblock1.fcn_sigma.l2.b", "cblock0.fcn_K_phi.l2.b"):
        p = next(p for p in m.params() if p.name == name)
        idx = (0,)
        old = p.value[idx]
        p.value[idx] = old + h
        up = float(ad._data(m.loss(s)))
        p.value[idx] = old - h
        dn = float(ad._data(m.loss(s)))
        p.value[idx] = old
        assert g[name][idx] == pytest.approx((up - dn) / (2 * h), rel=1e-4, abs=1e-7), name
