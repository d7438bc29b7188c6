import math

import numpy as np
import pytest

from mpituning.autodiff import ParamStore, Tensor, grad_check
from mpituning.errors import ContractError, DimensionError
from mpituning.gradcheck import check_mhp
from mpituning.layers import Linear
from mpituning.mhp import (InsertionPoint, MHPEncoder, TinyMLP, build_sinusoidal_table, count_params,
                           insert, mix, tiny_mlp_forward)


def points(dims, tokens, rows=10, seed=0):
    rng = np.random.default_rng(seed)
    return [InsertionPoint(i, f"p{i}", "test", d, rng.permutation(rows)[:t])
            for i, (d, t) in enumerate(zip(dims, tokens))]


# -- sinusoidal table -------------------------------------------------------

def test_table_row_zero_alternates():
    t = build_sinusoidal_table(16, 8).table
    assert t[0, 0::2].tolist() == [0.0] * 4
    assert t[0, 1::2].tolist() == [1.0] * 4


def test_table_scalar_entries():
    t = build_sinusoidal_table(80, 64, 10000.0).table
    assert t[1, 0] == pytest.approx(0.841471, abs=1e-6)
    assert t[2, 2] == pytest.approx(math.sin(2.0 / 10000.0 ** (2.0 / 64)), abs=1e-15)
    assert t[5, 7] == pytest.approx(math.cos(5.0 / 10000.0 ** (6.0 / 64)), abs=1e-15)


def test_table_bounded():
    t = build_sinusoidal_table(4096, 64).table
    assert np.all(np.abs(t) <= 1.0)


@pytest.mark.parametrize("kw", [{"D": 7}, {"L": 0}, {"C": 0.0}])
def test_table_rejects_bad_arguments(kw):
    with pytest.raises(ContractError):
        build_sinusoidal_table(**{"L": 8, "D": 8, "C": 100.0, **kw})


def test_table_rows_bounded_by_length():
    with pytest.raises(ContractError):
        build_sinusoidal_table(8, 4).rows(9)


# -- tiny MLP ---------------------------------------------------------------

def test_tiny_mlp_zero_weights_give_zero(rng):
    store = ParamStore()
    mlp = TinyMLP(store, "m", 8, rng)
    for name in store:
        store[name].data[...] = 0.0
    out = tiny_mlp_forward(mlp, Tensor(rng.normal(size=(5, 8))))
    assert np.array_equal(out.data, np.zeros((5, 8)))


def test_tiny_mlp_preserves_shape(rng):
    mlp = TinyMLP(ParamStore(), "m", 64, rng)
    assert tiny_mlp_forward(mlp, Tensor(rng.normal(size=(11, 64)))).shape == (11, 64)


def test_tiny_mlp_width_mismatch(rng):
    mlp = TinyMLP(ParamStore(), "m", 8, rng)
    with pytest.raises(DimensionError):
        tiny_mlp_forward(mlp, Tensor(np.ones((3, 6))))


def test_tiny_mlp_gradient_every_parameter(rng):
    store = ParamStore()
    mlp = TinyMLP(store, "m", 6, rng)
    x = Tensor(rng.normal(size=(4, 6)))
    for name in store:
        store.zero_grad()
        assert grad_check(lambda _: tiny_mlp_forward(mlp, x).sum(), store[name]) < 1e-4, name


def test_tiny_mlps_have_equal_sizes(rng):
    store = ParamStore()
    for j in range(3):
        TinyMLP(store, f"m{j}", 8, rng)
    assert len({store.count(prefix=f"m{j}.") for j in range(3)}) == 1


# -- mixer ------------------------------------------------------------------

def _maps(store, pts, D, rng=None, zero=True):
    return [Linear(store, f"g{p.id}", D, p.dim, rng, zero=zero) for p in pts]


def test_mix_zero_mixer_gives_zero(rng):
    pts = points((3, 5), (4, 2))
    store = ParamStore()
    E = [Tensor(rng.normal(size=(10, 6))) for _ in range(2)]
    P = mix(E, Tensor(np.zeros((2, 2))), _maps(store, pts, 6, rng, zero=False), pts)
    g = [store["g0.bias"].data, store["g1.bias"].data]
    for p, b, pt in zip(P, g, pts):
        np.testing.assert_array_equal(p.data, np.broadcast_to(b, (pt.tokens, pt.dim)))
    P0 = mix(E, Tensor(np.zeros((2, 2))), _maps(ParamStore(), pts, 6), pts)
    assert all(not p.data.any() for p in P0)


def test_mix_one_to_one_correspondence(rng):
    D = 4
    pts = [InsertionPoint(i, f"p{i}", "t", D, np.arange(6)) for i in range(3)]
    store = ParamStore()
    g = _maps(store, pts, D)
    for lin in g:
        lin.weight.data[...] = np.eye(D)
    E = [Tensor(rng.normal(size=(6, D))) for _ in range(3)]
    P = mix(E, Tensor(np.eye(3)), g, pts)
    for p, e in zip(P, E):
        np.testing.assert_array_equal(p.data, e.data)


def test_mix_matches_double_loop(rng):
    D, n = 5, 10
    pts = points((3, 4, 2), (6, 3, 10), rows=n)
    store = ParamStore()
    g = _maps(store, pts, D, rng, zero=False)
    E = [rng.normal(size=(n, D)) for _ in range(2)]
    A = rng.normal(size=(3, 2))
    P = mix([Tensor(e) for e in E], Tensor(A), g, pts)
    for i, pt in enumerate(pts):
        W, b = g[i].weight.data, g[i].bias.data
        for t, row in enumerate(pt.positions):
            for c in range(pt.dim):
                acc = b[c]
                for k in range(D):
                    m = sum(A[i, j] * E[j][row, k] for j in range(2))
                    acc += m * W[k, c]
                assert P[i].data[t, c] == pytest.approx(acc, abs=1e-12)


def test_mix_dimension_errors(rng):
    pts = points((3, 4), (2, 2))
    E = [Tensor(np.ones((10, 4)))]
    with pytest.raises(DimensionError):
        mix(E, Tensor(np.zeros((2, 2))), _maps(ParamStore(), pts, 4), pts)
    bad = _maps(ParamStore(), pts[:1], 4) + [Linear(ParamStore(), "x", 4, 9)]
    with pytest.raises(DimensionError, match="point 1"):
        mix(E, Tensor(np.zeros((2, 1))), bad, pts)


# -- insertion --------------------------------------------------------------

def test_insert_zero_embedding_is_identity(rng):
    h = Tensor(rng.normal(size=(2, 3, 4)))
    assert np.array_equal(insert(h, Tensor(np.zeros((3, 4)))).data, h.data)


def test_insert_into_zero_broadcasts(rng):
    p = rng.normal(size=(3, 4))
    out = insert(Tensor(np.zeros((2, 3, 4))), Tensor(p)).data
    assert np.array_equal(out, np.stack([p, p]))


def test_insert_batch_equals_stacked_singles(rng):
    h, p = rng.normal(size=(2, 3, 4)), Tensor(rng.normal(size=(3, 4)))
    both = insert(Tensor(h), p).data
    singles = np.concatenate([insert(Tensor(h[i:i + 1]), p).data for i in range(2)])
    assert np.array_equal(both, singles)


def test_insert_mismatch_names_point():
    with pytest.raises(DimensionError, match="insertion point 7"):
        insert(Tensor(np.zeros((1, 3, 4))), Tensor(np.zeros((2, 4))), point_id=7)


# -- encoder ----------------------------------------------------------------

def test_encoder_starts_with_zero_embeddings(rng):
    pts = points((3, 5, 2), (4, 4, 4))
    P = MHPEncoder(ParamStore(), pts, M=3, D=8, L=32, rng=rng)()
    assert all(not p.data.any() for p in P.values())
    assert [P[p.name].shape for p in pts] == [(4, 3), (4, 5), (4, 2)]


def test_encoder_zero_mixer_option(rng):
    store = ParamStore()
    enc = MHPEncoder(store, points((3,), (2,)), M=4, D=8, L=32, rng=rng, zero_mixer=True)
    assert not enc.A.data.any()


def test_encoder_rejects_rows_beyond_table():
    pts = [InsertionPoint(0, "p", "t", 3, np.array([0, 40]))]
    with pytest.raises(ContractError):
        MHPEncoder(ParamStore(), pts, M=1, D=4, L=32)


def test_encoder_rejects_duplicate_ids():
    pts = [InsertionPoint(0, "a", "t", 3, np.arange(2)), InsertionPoint(0, "b", "t", 3, np.arange(2))]
    with pytest.raises(ContractError):
        MHPEncoder(ParamStore(), pts, M=1, D=4, L=32)


def test_encoder_outputs_finite_over_whole_table(rng):
    pts = [InsertionPoint(0, "all", "t", 4, np.arange(4096))]
    store = ParamStore()
    enc = MHPEncoder(store, pts, M=2, D=16, rng=rng)
    for name in store:
        store[name].data[...] = rng.normal(0, 1, store[name].shape)
    assert np.isfinite(enc()["all"].data).all()


@pytest.mark.parametrize("seed", range(10))
def test_full_path_gradient(seed):
    assert max(check_mhp(seed).values()) < 1e-4


# -- parameter accounting ---------------------------------------------------

def enumerate_encoder(M, pts, D):
    store = ParamStore()
    MHPEncoder(store, pts, M=M, D=D, L=64, rng=np.random.default_rng(0))
    return store.count(trainable_only=True)


def test_count_matches_enumeration():
    pts = points((6, 5, 7, 3), (3, 3, 3, 3))
    for M in (0, 1, 3, 6, 12):
        assert count_params(M, pts, 8)["total"] == enumerate_encoder(M, pts, 8)


def test_count_without_heads_is_maps_only():
    pts = points((6, 5), (3, 3))
    b = count_params(0, pts, 8)
    assert b["total"] == b["g_total"] == (8 * 6 + 6) + (8 * 5 + 5)


def test_count_is_affine_in_M():
    pts = points((6, 5, 7), (3, 3, 3))
    c1 = count_params(1, pts, 8)["per_tiny_mlp"] + len(pts)
    for m in (3, 6, 12):
        assert enumerate_encoder(2 * m, pts, 8) - enumerate_encoder(m, pts, 8) == m * c1


def test_doubling_D_quadruples_projection_weights():
    def weights(D):
        store = ParamStore()
        TinyMLP(store, "m", D, np.random.default_rng(0))
        return sum(store[n].size for n in store if n.endswith(".weight"))
    assert weights(16) == 4 * weights(8)
