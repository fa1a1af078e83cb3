import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowlab import mmdit as M
from flowlab import tensor as T
from flowlab.mmdit import ConditioningInputs, ModelConfig
from flowlab.tensor import ShapeError, Tensor


def small(**kw):
    base = dict(depth=2, latent_hw=(4, 4), vocab=6, caption_len=3, context_dim=8, freq_dim=16)
    base.update(kw)
    return ModelConfig(**base)


def inputs(cfg, b=3, seed=0):
    rng = np.random.default_rng(seed)
    h, w = cfg.latent_hw
    z = rng.normal(size=(b, h, w, cfg.latent_channels))
    t = rng.uniform(size=b)
    cond = ConditioningInputs(rng.integers(0, cfg.vocab, size=(b, cfg.caption_len)))
    return z, t, cond


def test_config_invariants_and_json():
    cfg = small(depth=3)
    assert (cfg.hidden, cfg.heads, cfg.mlp_hidden) == (192, 3, 768)
    assert cfg.hidden % cfg.heads == 0
    assert ModelConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ShapeError):
        ModelConfig(latent_hw=(5, 4))
    with pytest.raises(ValueError):
        ModelConfig(text_streams=2, n_encoders=1)


def test_patchify_examples():
    x = np.array([[1, 2], [3, 4]], dtype=float).reshape(2, 2, 1)
    assert np.array_equal(M.patchify(x), [[1, 2, 3, 4]])
    g = np.arange(16, dtype=float).reshape(4, 4, 1)
    tok = M.patchify(g)
    # token k covers rows 2*(k//2).. and cols 2*(k%2)..
    for k in range(4):
        r, c = 2 * (k // 2), 2 * (k % 2)
        assert np.array_equal(tok[k], [g[r, c, 0], g[r, c + 1, 0], g[r + 1, c, 0], g[r + 1, c + 1, 0]])
    with pytest.raises(ShapeError):
        M.patchify(np.zeros((3, 4, 1)))


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
def test_patchify_inverse(gh, gw, c):
    x = np.random.default_rng(gh * 31 + gw * 7 + c).normal(size=(2, 2 * gh, 2 * gw, c))
    assert np.array_equal(M.unpatchify(M.patchify(x), 2 * gh, 2 * gw), x)


def test_positional_grid_examples():
    cfg = small(pos_S=256, pos_H_max=256, pos_W_max=256)
    g = M.positional_grid(cfg, 16, 16)
    assert np.array_equal(g[:, 0, 0], np.arange(16.0))
    full = M.full_position_axis(48, 32, 512)
    assert np.array_equal(full, (np.arange(48) - 8) * 0.5)
    assert full[0] == -4.0 and full[-1] == 19.5
    with pytest.raises(ShapeError):
        M.positional_grid(cfg, 17, 4)


@given(st.integers(1, 48), st.integers(1, 48))
def test_positional_crop_is_slice(h, w):
    cfg = small(pos_S=512, pos_H_max=768, pos_W_max=768)
    g = M.positional_grid(cfg, h, w)
    full = M.full_position_axis(48, 32, 512)
    r0, c0 = (48 - h) // 2, (48 - w) // 2
    assert np.array_equal(g[:, 0, 0], full[r0 : r0 + h])
    assert np.array_equal(g[0, :, 1], full[c0 : c0 + w])


def test_square_grid_transpose_symmetric():
    g = M.positional_grid(small(), 6, 6)
    assert np.array_equal(g[..., 0], g[..., 1].T)


@pytest.mark.parametrize(
    "cfg",
    [small(depth=1), small(depth=2), small(depth=2, text_streams=2), small(depth=3, qk_norm=False), small(depth=2, patch=1, latent_channels=2)],
    ids=["d1", "d2", "three-sets", "d3-noqk", "p1c2"],
)
def test_param_count_and_shape(cfg):
    params = M.init_params(cfg)
    assert M.param_count(cfg) == params.numel()
    z, t, cond = inputs(cfg)
    out = M.model_forward(z, t, cond, params, cfg)
    assert out.shape == z.shape


def test_depth2_param_count_closed_form():
    # D=128, C=8, E=2, V=6, F=16, P=4, head 64
    cfg = small()
    D, C, E, V, F, P, h = 128, 8, 2, 6, 16, 4, 64
    emb = E * V * C + F * D + D + D * D + D + E * C * D + D + D * D + D + C * D + D + P * D + D
    attn = 3 * (D * D + D) + 2 * h
    full = 6 * D * D + 6 * D + attn + D * D + D + 4 * D * D + 4 * D + 4 * D * D + D
    pre = 2 * D * D + 2 * D + attn
    assert M.param_count(cfg) == emb + 3 * full + pre + 2 * D * D + 2 * D + D * P + P


def test_zero_init_output_and_null_conditioning():
    cfg = small()
    params = M.init_params(cfg)
    z, t, cond = inputs(cfg)
    assert np.all(M.model_forward(z, t, cond, params, cfg).data == 0.0)
    params = M.init_params(cfg, zero_init_output=False, modulation_scale=1.0)
    out = M.model_forward(z, t, cond.null(), params, cfg).data
    assert np.all(np.isfinite(out)) and np.any(out != 0)


def test_time_outside_unit_interval_rejected():
    cfg = small()
    z, _, cond = inputs(cfg)
    with pytest.raises(ValueError):
        M.model_forward(z, np.array([0.1, 1.2, 0.3]), cond, M.init_params(cfg), cfg)


def test_dropped_encoder_is_exact_zero():
    cfg = small()
    params = M.init_params(cfg, seed=2)
    _, _, cond = inputs(cfg)
    keep = np.array([[True, False], [False, True], [False, False]])
    ctx, vec = M._conditioning(ConditioningInputs(cond.tokens, keep), params, cfg, np.float64)
    C = cfg.context_dim
    assert np.all(vec.data[0, C:] == 0) and np.all(vec.data[1, :C] == 0) and np.all(vec.data[2] == 0)
    L = cfg.caption_len
    bias = params["ctx0_embed.b"].data
    assert np.array_equal(ctx[0].data[0, L:], np.broadcast_to(bias, (L, cfg.hidden)))
    assert np.array_equal(ctx[0].data[2], np.broadcast_to(bias, (2 * L, cfg.hidden)))


@pytest.mark.parametrize("streams", [1, 2])
def test_dit_degeneracy_bitwise(streams):
    cfg = small(text_streams=streams, row_exact=True)
    params = M.tie_streams(M.init_params(cfg, seed=3, zero_init_output=False, modulation_scale=1.0), cfg)
    z, t, cond = inputs(cfg, seed=4)
    a = M.model_forward(z, t, cond, params, cfg).data
    b = M.dit_forward(z, t, cond, params, cfg).data
    assert np.array_equal(a, b)


def test_dit_degeneracy_default_path_close():
    cfg = small()
    params = M.tie_streams(M.init_params(cfg, seed=3, zero_init_output=False, modulation_scale=1.0), cfg)
    z, t, cond = inputs(cfg, seed=4)
    a = M.model_forward(z, t, cond, params, cfg).data
    b = M.dit_forward(z, t, cond, params, cfg).data
    assert np.max(np.abs(a - b)) <= 1e-12


def test_qk_norm_logit_bound_and_entropy():
    cfg = small()
    params = M.init_params(cfg, seed=5, zero_init_output=False, modulation_scale=1.0)
    bound = math.sqrt(cfg.head_dim)
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(10):
        z = rng.normal(scale=10.0, size=(100, 4, 4, 1))
        cond = ConditioningInputs(rng.integers(0, cfg.vocab, size=(100, 3)))
        trace = {}
        M.model_forward(z, rng.uniform(size=100), cond, params, cfg, trace=trace)
        worst = max(worst, max(np.abs(lg).max() for lg in trace["logits"]))
        ent = M.attention_entropy(trace["attn"][0])
        assert np.all(np.isfinite(ent)) and np.all(ent > 0)
    assert worst <= bound


def test_zero_gates_block_is_identity():
    cfg = small()
    params = M.init_params(cfg, seed=1)  # modulation starts at zero, so every gate is zero
    rng = np.random.default_rng(0)
    c, x = Tensor(rng.normal(size=(2, 3, cfg.hidden))), Tensor(rng.normal(size=(2, 4, cfg.hidden)))
    y = Tensor(rng.normal(size=(2, cfg.hidden)))
    c2, x2 = M.mmdit_block([c, x], y, params, cfg, 0)
    assert np.array_equal(c2.data, c.data) and np.array_equal(x2.data, x.data)


def test_stream_swap_symmetry():
    cfg = small()
    params = M.init_params(cfg, seed=8, modulation_scale=1.0)
    rng = np.random.default_rng(9)
    c, x = Tensor(rng.normal(size=(2, 3, cfg.hidden))), Tensor(rng.normal(size=(2, 5, cfg.hidden)))
    y = Tensor(rng.normal(size=(2, cfg.hidden)))
    c1, x1 = M.mmdit_block([c, x], y, params, cfg, 0, ["c0", "x"])
    x2, c2 = M.mmdit_block([x, c], y, params, cfg, 0, ["x", "c0"])
    assert np.allclose(c1.data, c2.data, rtol=0, atol=1e-12)
    assert np.allclose(x1.data, x2.data, rtol=0, atol=1e-12)


def test_empty_stream_rejected():
    cfg = small()
    params = M.init_params(cfg)
    h = cfg.hidden
    with pytest.raises(ShapeError):
        M.joint_attention([Tensor(np.ones((1, 2, h))), Tensor(np.ones((1, 0, h)))], ["blocks.0.c0", "blocks.0.x"], params, cfg.heads, True)


def test_block_gradient_check():
    cfg = small(depth=1)
    params = M.init_params(cfg, seed=10, modulation_scale=1.0)
    rng = np.random.default_rng(11)
    c, x = Tensor(rng.normal(size=(2, 3, cfg.hidden))), Tensor(rng.normal(size=(2, 4, cfg.hidden)))
    y = Tensor(rng.normal(size=(2, cfg.hidden)))
    probe = rng.normal(size=(2, 4, cfg.hidden))
    sub = {k: v for k, v in params.items() if k.startswith("blocks.0.x")}

    def f():
        _, out = M.mmdit_block([c, x], y, params, cfg, 0)
        return T.sum(T.mul(out, Tensor(probe)))

    assert T.finite_diff_check(f, sub, h=1e-5, rng=np.random.default_rng(0)) < 1e-4


@settings(max_examples=5)
@given(st.integers(0, 100))
def test_gradient_reaches_every_parameter(seed):
    cfg = small()
    params = M.init_params(cfg, seed=seed, zero_init_output=False, modulation_scale=1.0)
    z, t, cond = inputs(cfg, seed=seed)
    T.zero_grad(params)
    out = M.model_forward(z, t, cond, params, cfg)
    probe = np.random.default_rng(seed).normal(size=out.shape)
    grads = T.backward(T.sum(T.mul(out, Tensor(probe))), params)
    dead = sorted(k for k, g in grads.items() if not np.any(g))
    # the last block's text stream only supplies keys and values; its queries are discarded
    last = cfg.depth - 1
    assert dead == [f"blocks.{last}.c0.q.b", f"blocks.{last}.c0.q.w", f"blocks.{last}.c0.q_norm"]
