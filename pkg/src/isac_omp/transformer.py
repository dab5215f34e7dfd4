"""3D-OMP-Transformer: stacked blocks whose attention equals one OMP iteration
at initialization and whose keys, values and FFN are learnable."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Param, param_var
from .matching import DIMS, match_all
from .omp3d import DictionarySet, GridSet, build_grids_and_dicts
from .scenario import ScenarioConfig, TargetSet

__all__ = [
    "FCN_WIDTH",
    "BlockParams",
    "ForwardTrace",
    "init_block_params",
    "init_fcn",
    "fcn_forward",
    "assemble_keys_values",
    "attention_forward",
    "readout",
    "ffn_op_forward",
    "model_forward",
    "mae_loss",
    "OmpTransformer",
]

FCN_WIDTH = 64
_DIMS = DIMS


class BlockParams(dict):
    """Mapping ``short name -> Param`` for one block; Param names carry the block prefix."""

    def __init__(self, prefix: str):
        super().__init__()
        self.prefix = prefix

    def add(self, short: str, value) -> Param:
        p = Param(self.prefix + short, value)
        self[short] = p
        return p

    def v(self, short: str):
        return param_var(self[short])


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def init_fcn(bp: BlockParams, name: str, n_in: int, n_out: int, rng, width: int = FCN_WIDTH, out_bias=None, out_scale=1.0):
    """Three fully-connected layers ``n_in -> width -> width -> n_out`` with GELU between."""
    sizes = [n_in, width, width, n_out]
    for layer in range(3):
        fi, fo = sizes[layer], sizes[layer + 1]
        W = _uniform(rng, (fi, fo), fi)
        b = _uniform(rng, (fo,), fi)
        if layer == 2:
            W = W * out_scale
            if out_bias is not None:
                b = np.broadcast_to(np.asarray(out_bias, float), (fo,)).copy()
        bp.add(f"{name}.l{layer}.W", W)
        bp.add(f"{name}.l{layer}.b", b)


def fcn_forward(bp: BlockParams, name: str, x):
    h = x
    for layer in range(3):
        h = ad.affine(h, bp.v(f"{name}.l{layer}.W"), bp.v(f"{name}.l{layer}.b"))
        if layer < 2:
            h = ad.gelu(h)
    return h


def init_block_params(config: ScenarioConfig, seed: int, M: int | None = None, sizes=None) -> list[BlockParams]:
    """Parameters of ``M`` independent blocks: lambda=1, mu=0, sigma=1."""
    M = config.M if M is None else M
    n_phi, n_r, n_v = sizes if sizes is not None else (config.n_phi, config.n_r, config.n_v)
    K, S, T = config.K, config.S, config.T
    rng = np.random.default_rng(seed)
    blocks = []
    for b in range(M):
        bp = BlockParams(f"block{b}.")
        bp.add("sigma", 1.0)
        for kind in ("K", "V1", "V2"):
            for dim in _DIMS:
                bp.add(f"lam_{kind}_{dim}", 1.0)
                bp.add(f"mu_{kind}_{dim}", 0.0)
        bp.add("lam_F", 1.0)
        bp.add("mu_F", 0.0)
        for dim, n, L in (("phi", n_phi, K), ("r", n_r, S), ("v", n_v, T)):
            bp.add(f"W_K_{dim}", _uniform(rng, (n, L, 2), L))
            bp.add(f"W_V1_{dim}", _uniform(rng, (n,), 1))
            bp.add(f"W_V2_{dim}", _uniform(rng, (L, n, 2), n))
        c_in, hid = 4 * K, 2 * K
        bp.add("ffn.c0.w", _uniform(rng, (hid, c_in, 1, 1), c_in))
        bp.add("ffn.c0.b", _uniform(rng, (hid,), c_in))
        bp.add("ffn.c1.w", _uniform(rng, (hid, hid, 3, 3), hid * 9))
        bp.add("ffn.c1.b", _uniform(rng, (hid,), hid * 9))
        bp.add("ffn.c2.w", _uniform(rng, (4 * K, hid, 1, 1), hid))
        bp.add("ffn.c2.b", _uniform(rng, (4 * K,), hid))
        init_fcn(bp, "fcn_K", 1, 2 * K, rng)
        init_fcn(bp, "fcn_V1", 1, 1, rng)
        init_fcn(bp, "fcn_V2", 1, 2 * K, rng)
        blocks.append(bp)
    return blocks


def _cvec(x, n):
    """First ``n`` entries real part, next ``n`` imaginary part."""
    return ad.complex_from(ad.take(x, slice(0, n)), ad.take(x, slice(n, 2 * n)))


def assemble_keys_values(bp: BlockParams, dicts: DictionarySet, grids: GridSet, phi_min: float) -> dict:
    """Effective keys and values of one block.

    ``K = lam * Phi^H + mu * W``, ``V1 = lam * G + mu * W``, ``V2 = lam * Phi + mu * W``,
    where the angle-related ``W`` are first adapted to ``phi_min``: keys and
    dictionary values are multiplied by a generated complex vector, grid values
    are offset by a generated scalar. Range and velocity ``W`` are used as is.
    """
    K = dicts.phi_dict.shape[0]
    x = np.array([phi_min], dtype=float)
    h_k = _cvec(fcn_forward(bp, "fcn_K", x), K)
    h_v1 = fcn_forward(bp, "fcn_V1", x)
    h_v2 = _cvec(fcn_forward(bp, "fcn_V2", x), K)
    phis = {"phi": dicts.phi_dict, "r": dicts.r_dict, "v": dicts.v_dict}
    gs = {"phi": grids.g_phi, "r": grids.g_r, "v": grids.g_v}
    out = {}
    for dim in _DIMS:
        Wk = ad.as_complex(bp.v(f"W_K_{dim}"))
        Wv1 = bp.v(f"W_V1_{dim}")
        Wv2 = ad.as_complex(bp.v(f"W_V2_{dim}"))
        if dim == "phi":
            Wk = ad.mul(ad.reshape(h_k, (1, K)), Wk)
            Wv1 = ad.add(h_v1, Wv1)
            Wv2 = ad.mul(ad.reshape(h_v2, (K, 1)), Wv2)
        out[f"K_{dim}"] = ad.add(ad.mul(bp.v(f"lam_K_{dim}"), phis[dim].conj().T), ad.mul(bp.v(f"mu_K_{dim}"), Wk))
        out[f"V1_{dim}"] = ad.add(ad.mul(bp.v(f"lam_V1_{dim}"), gs[dim]), ad.mul(bp.v(f"mu_V1_{dim}"), Wv1))
        out[f"V2_{dim}"] = ad.add(ad.mul(bp.v(f"lam_V2_{dim}"), phis[dim]), ad.mul(bp.v(f"mu_V2_{dim}"), Wv2))
    return out


def attention_forward(Q, keys: dict, sigma):
    """3D attention ``softmax(sigma * |Q x K_phi^T x K_r^T x K_v^T|)`` and its marginals."""
    corr = ad.einsum("kst,ik,js,lt->ijl", Q, keys["K_phi"], keys["K_r"], keys["K_v"])
    A = ad.softmax_all(ad.mul(sigma, ad.absval(corr)))
    total = float(np.sum(ad._data(A)))
    if abs(total - 1.0) > 1e-12:
        raise FloatingPointError(f"attention map sums to {total!r}")
    return A, ad.sum_(A, axis=(1, 2)), ad.sum_(A, axis=(0, 2)), ad.sum_(A, axis=(0, 1))


def readout(A_i, A_j, A_k, values: dict):
    """Marginal-weighted values: the estimate triple and the rank-1 atom."""
    est = (
        ad.einsum("i,i->", A_i, values["V1_phi"]),
        ad.einsum("j,j->", A_j, values["V1_r"]),
        ad.einsum("l,l->", A_k, values["V1_v"]),
    )
    atom = ad.einsum(
        "k,s,t->kst",
        ad.einsum("ki,i->k", values["V2_phi"], A_i),
        ad.einsum("sj,j->s", values["V2_r"], A_j),
        ad.einsum("tl,l->t", values["V2_v"], A_k),
    )
    return est, atom


def _ffn(bp: BlockParams, atom, F_pre):
    K = ad._data(atom).shape[0]
    x = ad.concat([ad.real(atom), ad.imag(atom), ad.real(F_pre), ad.imag(F_pre)], axis=0)
    h = ad.gelu(ad.conv2d(x, bp.v("ffn.c0.w"), bp.v("ffn.c0.b")))
    h = ad.gelu(ad.conv2d(h, bp.v("ffn.c1.w"), bp.v("ffn.c1.b")))
    h = ad.conv2d(h, bp.v("ffn.c2.w"), bp.v("ffn.c2.b"))
    f_out1 = ad.complex_from(ad.take(h, slice(0, K)), ad.take(h, slice(K, 2 * K)))
    f_pre = ad.complex_from(ad.take(h, slice(2 * K, 3 * K)), ad.take(h, slice(3 * K, 4 * K)))
    return f_out1, f_pre


def ffn_op_forward(bp: BlockParams, atom, F_pre, z_hat, atom_set: list, detach_projection: bool = False):
    """FFN branch plus orthogonal projection, mixed as ``lam_F * OP + mu_F * FFN``.

    Returns ``(F_out, F_pre_next)``. An empty ``atom_set`` leaves ``z_hat``
    unchanged in the projection branch.
    """
    z_hat = np.asarray(z_hat)
    shape = z_hat.shape
    f_out1, f_pre_next = _ffn(bp, atom, F_pre)
    if atom_set:
        Mm = ad.concat([ad.reshape(a, (-1, 1)) for a in atom_set], axis=1)
        f_out2 = ad.reshape(ad.projection_residual(z_hat.ravel(), Mm, detach=detach_projection), shape)
    else:
        f_out2 = ad.const(z_hat)
    F_out = ad.add(ad.mul(bp.v("lam_F"), f_out2), ad.mul(bp.v("mu_F"), f_out1))
    return F_out, f_pre_next


@dataclass
class ForwardTrace:
    Q: list = field(default_factory=list)
    A: list = field(default_factory=list)
    A_i: list = field(default_factory=list)
    A_j: list = field(default_factory=list)
    A_k: list = field(default_factory=list)
    est: list = field(default_factory=list)
    atoms: list = field(default_factory=list)
    F_pre: list = field(default_factory=list)
    F_out: list = field(default_factory=list)

    def estimates(self) -> np.ndarray:
        return np.array([[float(ad._data(x)) for x in e] for e in self.est]).reshape(-1, 3)

    def targets(self) -> TargetSet:
        e = self.estimates()
        return TargetSet(e[:, 0], e[:, 1], e[:, 2])


def model_forward(
    z_hat,
    phi_min: float,
    blocks: list[BlockParams],
    grids: GridSet,
    dicts: DictionarySet,
    M: int | None = None,
    hard_atoms: bool = False,
    detach_projection: bool = False,
):
    """Chain ``M`` blocks: ``Q1 = F_pre = Z``; each block's output becomes the next query."""
    z_hat = np.asarray(z_hat, dtype=complex)
    M = len(blocks) if M is None else M
    if M > len(blocks):
        raise ValueError(f"model has {len(blocks)} blocks, asked for {M}")
    trace = ForwardTrace()
    Q = ad.const(z_hat)
    F_pre = ad.const(z_hat)
    atom_set: list = []
    for b in range(M):
        bp = blocks[b]
        kv = assemble_keys_values(bp, dicts, grids, phi_min)
        A, a_i, a_j, a_k = attention_forward(Q, kv, bp.v("sigma"))
        est, atom = readout(a_i, a_j, a_k, kv)
        if hard_atoms:
            i, j, k = np.unravel_index(int(np.argmax(ad._data(A))), ad._data(A).shape)
            atom = ad.const(dicts.atom(i, j, k))
        trace.Q.append(Q)
        trace.A.append(A)
        trace.A_i.append(a_i)
        trace.A_j.append(a_j)
        trace.A_k.append(a_k)
        trace.est.append(est)
        trace.atoms.append(atom)
        atom_set.append(atom)
        F_out, F_pre = ffn_op_forward(bp, atom, F_pre, z_hat, atom_set, detach_projection)
        trace.F_pre.append(F_pre)
        trace.F_out.append(F_out)
        Q = F_out
    return trace.targets(), trace


def mae_loss(est, truth_triples, relation=None):
    """Matched MAE summed over dimensions, on tape.

    ``est`` is a list of (phi, r, v) scalar Vars. Returns ``(loss, parts, relation)``;
    pairings are computed on the values and held constant for differentiation.
    """
    truth = np.asarray(truth_triples, dtype=float).reshape(-1, 3)
    M = truth.shape[0]
    vals = np.array([[float(ad._data(x)) for x in e] for e in est]).reshape(-1, 3)
    relation = match_all(truth, vals) if relation is None else relation
    parts = []
    for d, dim in enumerate(_DIMS):
        pairs = relation[dim]
        vec = ad.concat([ad.reshape(est[j][d], (1,)) for _, j in pairs])
        tgt = np.array([truth[i, d] for i, _ in pairs])
        parts.append(ad.mul(1.0 / M, ad.sum_(ad.absval(ad.sub(vec, tgt)))))
    loss = ad.add(ad.add(parts[0], parts[1]), parts[2])
    return loss, parts, relation


class OmpTransformer:
    """Convenience wrapper: configuration, per-block parameters and forward pass."""

    def __init__(self, config: ScenarioConfig, M: int | None = None, seed: int = 0, sizes=None):
        self.config = config
        self.M = config.M if M is None else M
        self.sizes = tuple(sizes) if sizes is not None else (config.n_phi, config.n_r, config.n_v)
        self.blocks = init_block_params(config, seed, self.M, self.sizes)

    def params(self) -> list[Param]:
        return [p for bp in self.blocks for p in bp.values()]

    def grids_and_dicts(self, phi_min: float):
        return build_grids_and_dicts(self.config, phi_min, self.sizes)

    def forward(self, z_hat, phi_min: float, **kw):
        grids, dicts = self.grids_and_dicts(phi_min)
        return model_forward(z_hat, phi_min, self.blocks, grids, dicts, self.M, **kw)

    def detect(self, z_hat, phi_min: float) -> TargetSet:
        targets, _ = self.forward(z_hat, phi_min)
        return targets

    def loss(self, sample, **kw):
        _, trace = self.forward(sample.z_hat, sample.phi_min, **kw)
        loss, _, _ = mae_loss(trace.est, sample.truth.triples())
        return loss
