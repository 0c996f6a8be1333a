import numpy as np
import pytest

from transxssm.tensor import Rng, Tensor, cross_entropy, no_grad, param
from transxssm.autodiff import grad_check
from transxssm.rope import build_frequencies
from transxssm.blocks import (
    FFNParams,
    HybridModuleParams,
    ffn_forward,
    hybrid_module_forward,
    init_ffn,
    init_hybrid_module,
    init_sa_block,
    init_ss_block,
    make_module_caches,
    module_named_parameters,
    rmsnorm,
    sa_block_forward,
    ss_block_forward,
)

ATTN_TABLE = build_frequencies(4, 10000.0, 256)
SSD_TABLE = build_frequencies(4, 10000.0, 256)


def test_rmsnorm_unit_vector():
    out = rmsnorm(Tensor([[1.0, 1.0, 1.0, 1.0]]), Tensor(np.ones(4)), eps=1e-12).data
    assert np.abs(out - 1.0).max() < 1e-9


def test_rmsnorm_halves_scale_two():
    out = rmsnorm(Tensor([[2.0, 2.0]]), Tensor(np.ones(2)), eps=1e-12).data
    assert np.abs(out - 1.0).max() < 1e-9


def test_rmsnorm_output_rms_is_one():
    r = Rng(0)
    x = Tensor(r.normal((6, 16), std=5.0))
    out = rmsnorm(x, Tensor(np.ones(16)), eps=1e-6).data
    rms = np.sqrt((out * out).mean(axis=-1))
    assert np.abs(rms - 1.0).max() < 1e-6


def test_rmsnorm_eps_positive():
    with pytest.raises(ValueError):
        rmsnorm(Tensor(np.ones((2, 2))), Tensor(np.ones(2)), eps=0.0)


def test_ffn_zero_weights_zero_output():
    p = FFNParams(norm_gain=param(np.ones(4)), w1=param(np.zeros((4, 16))), w2=param(np.zeros((16, 4))))
    out = ffn_forward(Tensor(np.ones((3, 4))), p).data
    assert np.array_equal(out, np.zeros((3, 4)))


def test_ffn_pass_through_region_identity():
    # scale into the gate's linear region and back: silu(c*x)/c -> x for x > 0
    d, c = 4, 40.0
    p = FFNParams(
        norm_gain=param(np.ones(d)),
        w1=param(np.eye(d) * c),
        w2=param(np.eye(d) / c),
    )
    r = Rng(1)
    x = r.uniform((5, d), 0.5, 2.0)
    out = ffn_forward(Tensor(x), p).data
    assert np.abs(out - x).max() < 1e-8


def test_ffn_gradient_check():
    r = Rng(2)
    p = init_ffn(r, 4, 1.0)
    x = Tensor(r.normal((3, 4)))
    w = r.normal((3, 4))
    rep = grad_check(
        lambda: (ffn_forward(x, p) * w).sum(),
        {"w1": p.w1, "w2": p.w2},
        eps=1e-5, tol=1e-5,
    )
    assert rep.passed, rep.worst()


def test_ss_block_zero_out_projection_is_identity():
    r = Rng(3)
    p = init_ss_block(r, 8, 2, 4, 4, 1.0)
    p.w_o.data[:] = 0.0
    x = r.normal((6, 8))
    out = ss_block_forward(Tensor(x), p, SSD_TABLE).data
    assert np.array_equal(out, x)


def test_sa_block_zero_out_projection_is_identity():
    r = Rng(4)
    p = init_sa_block(r, 8, 2, 1.0)
    p.w_o.data[:] = 0.0
    x = r.normal((6, 8))
    out = sa_block_forward(Tensor(x), p, ATTN_TABLE).data
    assert np.array_equal(out, x)


def test_ss_block_full_vs_cached_rows():
    r = Rng(5)
    p = init_ss_block(r, 8, 2, 4, 3, 0.7)
    x = r.normal((9, 8))
    with no_grad():
        full = ss_block_forward(Tensor(x), p, SSD_TABLE).data
        from transxssm.blocks import SSCache
        import transxssm.tensor as tc

        cache = SSCache(h=tc.zeros((2, 4, 4)))
        rows = []
        for t in range(9):
            rows.append(ss_block_forward(Tensor(x[t : t + 1]), p, SSD_TABLE, cache=cache, pos=t).data[0])
    assert np.abs(np.stack(rows) - full).max() < 1e-9


def test_sa_block_full_vs_cached_rows():
    r = Rng(6)
    p = init_sa_block(r, 8, 2, 0.7)
    x = r.normal((9, 8))
    with no_grad():
        full = sa_block_forward(Tensor(x), p, ATTN_TABLE).data
        from transxssm.blocks import KVCache

        cache = KVCache()
        rows = []
        for t in range(9):
            rows.append(sa_block_forward(Tensor(x[t : t + 1]), p, ATTN_TABLE, cache=cache, pos=t).data[0])
    assert np.abs(np.stack(rows) - full).max() < 1e-9


def test_cache_position_mismatch_rejected():
    r = Rng(7)
    ss = init_ss_block(r, 8, 2, 4, 4, 1.0)
    sa = init_sa_block(r, 8, 2, 1.0)
    from transxssm.blocks import KVCache, SSCache
    import transxssm.tensor as tc

    with pytest.raises(ValueError):
        ss_block_forward(Tensor(np.ones((1, 8))), ss, SSD_TABLE, cache=SSCache(h=tc.zeros((2, 4, 4)), pos=3), pos=1)
    with pytest.raises(ValueError):
        sa_block_forward(Tensor(np.ones((1, 8))), sa, ATTN_TABLE, cache=KVCache(pos=2), pos=0)


def test_sa_block_without_rope_is_order_blind_at_final_position():
    r = Rng(8)
    p = init_sa_block(r, 8, 2, 0.7)
    # cold init keeps scores near zero; scale q/k up so positions can matter
    p.w_q.data = r.normal((8, 8), 0.6)
    p.w_k.data = r.normal((8, 8), 0.6)
    p.w_v.data = r.normal((8, 8), 0.6)
    p.w_o.data = r.normal((8, 8), 0.6)
    x = r.normal((5, 8))
    perm = np.arange(5)
    perm[1], perm[2] = 2, 1
    with no_grad():
        plain = sa_block_forward(Tensor(x), p, ATTN_TABLE, use_rope=False).data
        swapped = sa_block_forward(Tensor(x[perm]), p, ATTN_TABLE, use_rope=False).data
        roped = sa_block_forward(Tensor(x), p, ATTN_TABLE).data
        roped_swapped = sa_block_forward(Tensor(x[perm]), p, ATTN_TABLE).data
    assert np.abs(swapped[-1] - plain[-1]).max() < 1e-12
    assert np.abs(roped_swapped[-1] - roped[-1]).max() > 1e-3


def test_ss_block_gradient_check_tiny():
    r = Rng(9)
    p = init_ss_block(r, 8, 2, 4, 4, 1.0)
    named = {
        "w_x": p.w_x, "w_b": p.w_b, "w_c": p.w_c, "w_a": p.w_a,
        "a_bias": p.a_bias, "w_o": p.w_o, "gain": p.norm_gain,
    }
    for t in named.values():
        t.data = Rng(10).child(id(t) % 97).normal(t.shape, 0.4)
    x = Tensor(r.normal((4, 8)))
    w = r.normal((4, 8))
    rep = grad_check(
        lambda: (ss_block_forward(x, p, SSD_TABLE) * w).sum(), named, eps=1e-5, tol=1e-4, max_coords=24
    )
    assert rep.passed, rep.worst()


def test_hybrid_module_matches_manual_composition():
    r = Rng(11)
    m = init_hybrid_module(r, 8, 2, 4, 4, 2, 0.7)
    x = r.normal((7, 8))
    with no_grad():
        auto = hybrid_module_forward(Tensor(x), m, ATTN_TABLE, SSD_TABLE).data
        cur = Tensor(x)
        for layer in m.layers:
            if layer.kind == "ss":
                cur = ss_block_forward(cur, layer.block, SSD_TABLE)
            else:
                cur = sa_block_forward(cur, layer.block, ATTN_TABLE)
            cur = cur + ffn_forward(rmsnorm(cur, layer.ffn.norm_gain), layer.ffn)
    assert np.array_equal(auto, cur.data)


def test_hybrid_module_zero_projections_identity():
    r = Rng(12)
    m = init_hybrid_module(r, 8, 2, 4, 4, 2, 0.7)
    for layer in m.layers:
        layer.block.w_o.data[:] = 0.0
        layer.ffn.w2.data[:] = 0.0
    x = r.normal((5, 8))
    out = hybrid_module_forward(Tensor(x), m, ATTN_TABLE, SSD_TABLE).data
    assert np.array_equal(out, x)


def test_hybrid_module_gradient_check():
    r = Rng(13)
    m = init_hybrid_module(r, 8, 2, 4, 4, 1, 1.0)
    named = module_named_parameters(m)
    redraw = Rng(14)
    for i, (k, t) in enumerate(sorted(named.items())):
        t.data = redraw.child(i).normal(t.shape, 0.4)
    x = Tensor(Rng(15).normal((4, 8)))
    targets = Rng(16).integers(0, 8, (4,))

    def f():
        out = hybrid_module_forward(x, m, ATTN_TABLE, SSD_TABLE)
        return cross_entropy(out, targets)

    rep = grad_check(f, named, eps=1e-5, tol=1e-4, max_coords=10)
    assert rep.passed, rep.worst()


def test_layer_pattern_enforced():
    r = Rng(17)
    m = init_hybrid_module(r, 8, 2, 4, 4, 7, 1.0)
    assert m.layer_pattern == ["ss"] * 7 + ["sa"]
    with pytest.raises(ValueError):
        HybridModuleParams(layers=m.layers[1:], ss_per_sa=7)


def test_module_caches_match_layers():
    r = Rng(18)
    m = init_hybrid_module(r, 8, 2, 4, 4, 3, 1.0)
    caches = make_module_caches(m)
    from transxssm.blocks import KVCache, SSCache

    kinds = [type(c) for c in caches]
    assert kinds == [SSCache] * 3 + [KVCache]
    assert caches[0].nbytes > 0 and caches[-1].nbytes == 0
