import numpy as np
import pytest

from isac_omp import autodiff as ad
from isac_omp.autodiff import Tape, backward
from isac_omp.omp3d import build_grids_and_dicts, run_omp, soft_omp_forward
from isac_omp.scenario import desk_config, draw_sample
from isac_omp.training import default_lr_scale, evaluate_loss, heldout_indices, is_heldout, train, train_indices
from isac_omp.transformer import (
    OmpTransformer,
    assemble_keys_values,
    attention_forward,
    mae_loss,
    model_forward,
)

CFG = desk_config(K=4, S=8, T=4, M=2, snr_db=10.0)
SIZES = (12, 10, 6)


@pytest.fixture(scope="module")
def model():
    return OmpTransformer(CFG, seed=3, sizes=SIZES)


def test_param_inventory(model):
    names = {p.name for p in model.params()}
    for b in range(2):
        pre = f"block{b}."
        assert pre + "sigma" in names and pre + "lam_F" in names and pre + "mu_F" in names
        for kind in ("K", "V1", "V2"):
            for dim in ("phi", "r", "v"):
                assert pre + f"lam_{kind}_{dim}" in names and pre + f"mu_{kind}_{dim}" in names
    b0 = model.blocks[0]
    assert b0["W_K_phi"].value.shape == (12, 4, 2)
    assert b0["W_V1_r"].value.shape == (10,)
    assert b0["W_V2_v"].value.shape == (4, 6, 2)
    assert b0["ffn.c0.w"].value.shape == (8, 16, 1, 1)
    assert b0["ffn.c1.w"].value.shape == (8, 8, 3, 3)
    assert b0["ffn.c2.w"].value.shape == (16, 8, 1, 1)
    assert float(b0["sigma"].value) == 1.0 and float(b0["mu_K_phi"].value) == 0.0


def test_init_equals_soft_reference(model):
    for i in range(5):
        s = draw_sample(CFG, i)
        grids, dicts = build_grids_and_dicts(CFG, s.phi_min, SIZES)
        est, trace = model_forward(s.z_hat, s.phi_min, model.blocks, grids, dicts)
        ref, rtrace = soft_omp_forward(s.z_hat, dicts, grids, 1.0, 2)
        np.testing.assert_allclose(est.triples(), ref.triples(), atol=1e-10)
        for A, R in zip(trace.A, rtrace.A):
            np.testing.assert_allclose(ad._data(A), R, atol=1e-10)


def test_keys_values_at_init_are_dictionaries(model):
    grids, dicts = build_grids_and_dicts(CFG, 0.2, SIZES)
    kv = assemble_keys_values(model.blocks[0], dicts, grids, 0.2)
    np.testing.assert_allclose(ad._data(kv["K_r"]), dicts.r_dict.conj().T)
    np.testing.assert_allclose(ad._data(kv["V1_phi"]), grids.g_phi)
    np.testing.assert_allclose(ad._data(kv["V2_v"]), dicts.v_dict)


def test_sharp_sigma_block_one_matches_hard_omp():
    m = OmpTransformer(CFG, seed=0, sizes=SIZES)
    for bp in m.blocks:
        bp["sigma"].value[...] = 1e6
    for i in range(5):
        s = draw_sample(CFG, 100 + i)
        grids, dicts = build_grids_and_dicts(CFG, s.phi_min, SIZES)
        est, _ = model_forward(s.z_hat, s.phi_min, m.blocks, grids, dicts, M=1)
        hard, _ = run_omp(s.z_hat, dicts, grids, M=1)
        np.testing.assert_allclose(est.triples(), hard.triples(), atol=1e-9)


def test_attention_sums_to_one_and_rejects_bad_map(model):
    grids, dicts = build_grids_and_dicts(CFG, 0.0, SIZES)
    s = draw_sample(CFG, 0)
    kv = assemble_keys_values(model.blocks[0], dicts, grids, 0.0)
    A, ai, aj, ak = attention_forward(s.z_hat, kv, 5.0)
    assert abs(ad._data(A).sum() - 1) <= 1e-12
    np.testing.assert_allclose(ad._data(ai).sum(), 1)


def test_hard_atoms_reproduce_omp_sequence():
    m = OmpTransformer(CFG, seed=0, sizes=SIZES)
    for bp in m.blocks:
        bp["sigma"].value[...] = 1e6
    s = draw_sample(CFG, 7)
    grids, dicts = build_grids_and_dicts(CFG, s.phi_min, SIZES)
    est, _ = model_forward(s.z_hat, s.phi_min, m.blocks, grids, dicts, hard_atoms=True)
    hard, _ = run_omp(s.z_hat, dicts, grids, M=2)
    np.testing.assert_allclose(est.triples(), hard.triples(), atol=1e-9)


def test_too_many_blocks_requested(model):
    grids, dicts = build_grids_and_dicts(CFG, 0.0, SIZES)
    with pytest.raises(ValueError):
        model_forward(np.zeros((4, 8, 4), complex), 0.0, model.blocks, grids, dicts, M=3)


def test_mae_loss_matches_plain_matching(model):
    from isac_omp.matching import mae_losses

    s = draw_sample(CFG, 4)
    _, trace = model.forward(s.z_hat, s.phi_min)
    loss, parts, _ = mae_loss(trace.est, s.truth.triples())
    ref = mae_losses(s.truth.triples(), trace.estimates())
    assert float(ad._data(loss)) == pytest.approx(ref[3])
    assert [float(ad._data(p)) for p in parts] == pytest.approx(list(ref[:3]))


def _perturbed(seed=11):
    m = OmpTransformer(CFG, seed=seed, sizes=SIZES)
    rng = np.random.default_rng(seed)
    for bp in m.blocks:
        for name, p in bp.items():
            if name.startswith(("mu_", "lam_")) or name == "mu_F":
                p.value[...] = p.value + rng.uniform(0.05, 0.2)
    return m


def test_every_parameter_class_receives_gradient():
    m = _perturbed()
    s = draw_sample(CFG, 2)
    with Tape() as tape:
        loss = m.loss(s)
        g = backward(tape, loss)
    for key in ("sigma", "lam_K_phi", "mu_V1_r", "W_K_v", "W_V2_phi", "ffn.c1.w", "fcn_K.l0.W", "fcn_V1.l2.b"):
        assert np.linalg.norm(g["block0." + key]) > 0, key


def test_gradient_matches_finite_differences_spot_check():
    m = _perturbed()
    s = draw_sample(CFG, 2)
    with Tape() as tape:
        g = backward(tape, m.loss(s))
    h = 1e-6
    for name in ("block0.sigma", "block1.mu_F", "block0.mu_K_r"):
        p = next(p for p in m.params() if p.name == name)
        old = p.value.copy()
        p.value[...] = old + h
        up = float(ad._data(m.loss(s)))
        p.value[...] = old - h
        dn = float(ad._data(m.loss(s)))
        p.value[...] = old
        num = (up - dn) / (2 * h)
        assert g[name] == pytest.approx(num, rel=1e-4, abs=1e-7), name


def test_split_and_streams():
    assert is_heldout(9) and not is_heldout(8)
    assert heldout_indices(3) == [9, 19, 29]
    gen = train_indices()
    assert [next(gen) for _ in range(10)] == [0, 1, 2, 3, 4, 5, 6, 7, 8, 10]


def test_short_training_run_is_deterministic():
    def run():
        m = OmpTransformer(CFG, seed=1, sizes=SIZES)
        held = [draw_sample(CFG, i) for i in heldout_indices(3)]
        res = train(m, CFG, 3, 2, 1e-3, held, eval_every=1, clip=1.0, cosine=True, keep_best=True)
        return res, [p.value.copy() for p in m.params()], m, held

    r1, v1, m1, held = run()
    r2, v2, _, _ = run()
    assert r1.heldout_loss == r2.heldout_loss
    assert all(np.array_equal(a, b) for a, b in zip(v1, v2))
    assert len(r1.rows()) == 4
    # keep_best restores the parameters of the best evaluation
    assert evaluate_loss(m1, held) == pytest.approx(min(r1.heldout_loss))


def test_default_lr_scale_targets_grid_multipliers(model):
    scale = default_lr_scale(model.params())
    assert "block0.lam_V1_r" in scale and "block0.mu_V1_r" not in scale and "block0.sigma" not in scale
    assert scale["block0.lam_V1_r"] == 1e-2 and "block1.mu_K_phi" not in scale
