"""Dual-stream diffusion transformer (MM-DiT) at toy scale.

Text-like and image-like tokens keep separate weights but share one attention
over the concatenated sequence. A vector ``y`` built from the timestep and the
pooled conditioning drives adaLN-style modulation in every block.

Parameter count for ``E`` encoders, ``S`` text streams, depth ``d``, hidden
``D = 64 d``, head dim ``h = D / d``, patch features ``P = p^2 c``, context width
``C`` and frequency width ``F``::

    embeddings   E*V*C + (F*D + D) + (D*D + D) + (E*C*D + D) + (D*D + D)
                 + S*(C*D + D) + (P*D + D)
    full stream  (D*6D + 6D) + 3(D*D + D) + 2h*[qk_norm] + (D*D + D)
                 + (D*4D + 4D) + (4D*D + D)
    pre-only     (D*2D + 2D) + 3(D*D + D) + 2h*[qk_norm]
    blocks       d image streams + (d-1) S full text streams + S pre-only text streams
    final        (D*2D + 2D) + (D*P + P)

``param_count`` evaluates this formula without building any tensors.
"""

from __future__ import annotations

import builtins
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Params, ShapeError, Tensor


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 2
    patch: int = 2
    latent_channels: int = 1
    latent_hw: tuple[int, int] = (16, 16)
    qk_norm: bool = True
    # positional grid: target side S and extreme bucket sides, in pixel units of pos_unit per token
    pos_S: int = 128
    pos_H_max: int = 128
    pos_W_max: int = 128
    pos_unit: int = 16
    context_dim: int = 32
    vocab: int = 16
    caption_len: int = 2
    n_encoders: int = 2
    text_streams: int = 1  # 2 gives the three-weight-set variant
    freq_dim: int = 256
    time_scale: float = 1000.0
    dtype: str = "f64"
    # evaluate every stream's token-wise layers on the joint sequence and slice rows;
    # BLAS results can depend on the row count, so this makes the weight-shared
    # reduction to a single-stream DiT hold bit for bit
    row_exact: bool = False

    @property
    def hidden(self) -> int:
        return 64 * self.depth

    @property
    def heads(self) -> int:
        return self.depth

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def mlp_hidden(self) -> int:
        return 4 * self.hidden

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.latent_channels

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.text_streams not in (1, 2):
            raise ValueError("text_streams must be 1 or 2")
        if self.text_streams == 2 and self.n_encoders != 2:
            raise ValueError("three weight sets need exactly two encoders")
        h, w = self.latent_hw
        if h % self.patch or w % self.patch:
            raise ShapeError(f"latent sides {self.latent_hw} not divisible by patch {self.patch}")

    def to_json(self) -> str:
        d = asdict(self)
        d["latent_hw"] = list(self.latent_hw)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> ModelConfig:
        d = json.loads(text)
        d["latent_hw"] = tuple(d["latent_hw"])
        return cls(**d)


@dataclass
class ConditioningInputs:
    """Caption tokens plus per-encoder keep flags.

    Dropped encoders contribute exact zeros to both the token sequence and the
    pooled vector.
    """

    tokens: np.ndarray  # (B, L) int
    keep: np.ndarray = field(default=None)  # (B, n_encoders) bool

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.keep is None:
            self.keep = np.ones((self.tokens.shape[0], 1), dtype=bool)
        self.keep = np.asarray(self.keep, dtype=bool)

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    def keep_mask(self, n_encoders: int) -> np.ndarray:
        if self.keep.shape[1] == n_encoders:
            return self.keep
        if self.keep.shape[1] == 1:
            return np.repeat(self.keep, n_encoders, axis=1)
        raise ShapeError(f"keep flags {self.keep.shape} do not match {n_encoders} encoders")

    def null(self) -> ConditioningInputs:
        return ConditioningInputs(self.tokens, np.zeros_like(self.keep))


# patching / positions ------------------------------------------------------


def patchify(x: np.ndarray, patch: int = 2) -> np.ndarray:
    """``(..., h, w, c)`` -> ``(..., (h/p)(w/p), p*p*c)`` in row-major patch order."""
    *lead, h, w, c = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"patchify: sides ({h}, {w}) not divisible by patch {patch}")
    x = x.reshape(*lead, h // patch, patch, w // patch, patch, c)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, (h // patch) * (w // patch), patch * patch * c)


def unpatchify(tokens: np.ndarray, h: int, w: int, patch: int = 2) -> np.ndarray:
    *lead, n_tok, feat = tokens.shape
    c = feat // (patch * patch)
    gh, gw = h // patch, w // patch
    if n_tok != gh * gw:
        raise ShapeError(f"unpatchify: {n_tok} tokens do not tile a {h}x{w} grid")
    x = tokens.reshape(*lead, gh, gw, patch, patch, c)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, h, w, c)


def _unpatchify_tensor(tokens: Tensor, h: int, w: int, patch: int) -> Tensor:
    b, n_tok, feat = tokens.shape
    c = feat // (patch * patch)
    gh, gw = h // patch, w // patch
    x = T.reshape(tokens, (b, gh, gw, patch, patch, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, h, w, c))


def _patchify_tensor(z: Tensor, patch: int) -> Tensor:
    b, h, w, c = z.shape
    x = T.reshape(z, (b, h // patch, patch, w // patch, patch, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, (h // patch) * (w // patch), patch * patch * c))


def full_position_axis(n_max: int, s: int, S: int) -> np.ndarray:
    """Values ``(p - (n_max - s)/2) * 256/S`` for ``p = 0..n_max-1``."""
    p = np.arange(n_max, dtype=np.float64)
    return (p - (n_max - s) / 2.0) * 256.0 / S


def positional_grid(config: ModelConfig, h: int, w: int) -> np.ndarray:
    """Center-cropped ``(h, w, 2)`` grid of (vertical, horizontal) positions in token units."""
    unit = config.pos_unit
    h_max, w_max, s = config.pos_H_max // unit, config.pos_W_max // unit, config.pos_S // unit
    if h > h_max or w > w_max:
        raise ShapeError(f"positional_grid: {h}x{w} tokens exceed bucket maximum {h_max}x{w_max}")
    rows = full_position_axis(h_max, s, config.pos_S)
    cols = full_position_axis(w_max, s, config.pos_S)
    r0, c0 = (h_max - h) // 2, (w_max - w) // 2  # floor: ties take the lower start
    rows, cols = rows[r0 : r0 + h], cols[c0 : c0 + w]
    return np.stack(np.meshgrid(rows, cols, indexing="ij"), axis=-1)


def _sincos_1d(pos: np.ndarray, dim: int, base: float = 10000.0) -> np.ndarray:
    half = dim // 2
    omega = 1.0 / base ** (np.arange(half, dtype=np.float64) / half)
    args = pos.reshape(-1)[:, None] * omega[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def position_embedding(grid: np.ndarray, dim: int) -> np.ndarray:
    """Frequency-embed a position grid: half the channels per axis."""
    h, w, _ = grid.shape
    emb_v = _sincos_1d(grid[..., 0], dim // 2)
    emb_h = _sincos_1d(grid[..., 1], dim // 2)
    return np.concatenate([emb_v, emb_h], axis=1).reshape(h * w, dim)


# parameters -------------------------------------------------------------------


def _stream_names(config: ModelConfig) -> list[str]:
    return ["x"] + [f"c{j}" for j in range(config.text_streams)]


def _linear_params(params: Params, name: str, fan_in: int, fan_out: int, rng, dtype, zero=False, bias_scale=0.0):
    if zero:
        w = np.zeros((fan_in, fan_out))
    else:
        w = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))
    b = rng.normal(0.0, bias_scale, size=fan_out) if bias_scale else np.zeros(fan_out)
    params[f"{name}.w"] = Tensor(w.astype(dtype), requires_grad=True)
    params[f"{name}.b"] = Tensor(b.astype(dtype), requires_grad=True)


def init_params(config: ModelConfig, seed: int = 0, zero_init_output: bool = True, modulation_scale: float = 0.0) -> Params:
    """Initialise parameters.

    The final projection starts at zero so the untrained model is the zero
    velocity field. ``zero_init_output=False`` randomises it, which the
    gradient checks need. Modulation layers start from a small random init
    scaled by ``modulation_scale`` (zero keeps gates at exactly zero).
    """
    rng = np.random.default_rng(seed)
    dtype = T.DTYPES[config.dtype]
    D, C, E = config.hidden, config.context_dim, config.n_encoders
    p = Params()
    for e in range(E):
        p[f"tok_embed.{e}"] = Tensor(rng.normal(0, 1.0, size=(config.vocab, C)).astype(dtype), requires_grad=True)
    _linear_params(p, "t_embed.l1", config.freq_dim, D, rng, dtype)
    _linear_params(p, "t_embed.l2", D, D, rng, dtype)
    _linear_params(p, "y_embed.l1", E * C, D, rng, dtype)
    _linear_params(p, "y_embed.l2", D, D, rng, dtype)
    for j in range(config.text_streams):
        _linear_params(p, f"ctx{j}_embed", C, D, rng, dtype)
    _linear_params(p, "x_embed", config.patch_dim, D, rng, dtype)

    for i in range(config.depth):
        last = i == config.depth - 1
        for s in _stream_names(config):
            pre_only = last and s != "x"
            pre = f"blocks.{i}.{s}"
            n_mod = 2 if pre_only else 6
            if modulation_scale:
                w = rng.normal(0, modulation_scale / math.sqrt(D), size=(D, n_mod * D))
                p[f"{pre}.mod.w"] = Tensor(w.astype(dtype), requires_grad=True)
                p[f"{pre}.mod.b"] = Tensor(np.zeros(n_mod * D, dtype=dtype), requires_grad=True)
            else:
                _linear_params(p, f"{pre}.mod", D, n_mod * D, rng, dtype, zero=True)
            for name in ("q", "k", "v"):
                _linear_params(p, f"{pre}.{name}", D, D, rng, dtype)
            if config.qk_norm:
                p[f"{pre}.q_norm"] = Tensor(np.ones(config.head_dim, dtype=dtype), requires_grad=True)
                p[f"{pre}.k_norm"] = Tensor(np.ones(config.head_dim, dtype=dtype), requires_grad=True)
            if not pre_only:
                _linear_params(p, f"{pre}.o", D, D, rng, dtype)
                _linear_params(p, f"{pre}.mlp1", D, config.mlp_hidden, rng, dtype)
                _linear_params(p, f"{pre}.mlp2", config.mlp_hidden, D, rng, dtype)

    _linear_params(p, "final.mod", D, 2 * D, rng, dtype, zero=not modulation_scale)
    if modulation_scale:
        p["final.mod.w"].data[:] = rng.normal(0, modulation_scale / math.sqrt(D), size=(D, 2 * D))
    _linear_params(p, "final.out", D, config.patch_dim, rng, dtype, zero=zero_init_output)
    return p


def param_count(config: ModelConfig) -> int:
    D, C, E, V, F = config.hidden, config.context_dim, config.n_encoders, config.vocab, config.freq_dim
    S, d, h, P = config.text_streams, config.depth, config.head_dim, config.patch_dim
    qk = 2 * h if config.qk_norm else 0
    emb = E * V * C + (F * D + D) + (D * D + D) + (E * C * D + D) + (D * D + D) + S * (C * D + D) + (P * D + D)
    qkv = 3 * (D * D + D)
    full = (D * 6 * D + 6 * D) + qkv + qk + (D * D + D) + (D * 4 * D + 4 * D) + (4 * D * D + D)
    pre_only = (D * 2 * D + 2 * D) + qkv + qk
    blocks = d * full + (d - 1) * S * full + S * pre_only
    final = (D * 2 * D + 2 * D) + (D * P + P)
    return emb + blocks + final


# forward ----------------------------------------------------------------------


def _lin(x: Tensor, p: Params, name: str) -> Tensor:
    return T.linear(x, p[f"{name}.w"], p[f"{name}.b"])


def _stream_lin(xs: list[Tensor], i: int, p: Params, name: str, row_exact: bool) -> Tensor:
    if not row_exact:
        return _lin(xs[i], p, name)
    start = builtins.sum(x.shape[1] for x in xs[:i])
    return T.narrow(_lin(T.concat(xs, axis=1), p, name), 1, start, xs[i].shape[1])


def _mlp2(x: Tensor, p: Params, name: str) -> Tensor:
    return _lin(T.silu(_lin(x, p, f"{name}.l1")), p, f"{name}.l2")


def _modulate(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    # x (B, N, D); scale/shift (B, 1, D)
    return T.add(T.mul(x, T.add(scale, 1.0)), shift)


def _heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def joint_attention(
    streams: list[Tensor],
    weights: list[str],
    params: Params,
    heads: int,
    qk_norm: bool,
    trace: dict | None = None,
    row_exact: bool = False,
) -> list[Tensor]:
    """One softmax attention over the concatenation of all streams.

    ``streams[i]`` is ``(B, N_i, D)`` already modulated; ``weights[i]`` is the
    parameter prefix holding that stream's q/k/v (and optional q/k norm scales).
    Returns the attended values split back per stream (before output projection).
    """
    for s in streams:
        if s.shape[1] == 0:
            raise ShapeError("joint_attention: every stream needs at least one token")
    qs, ks, vs = [], [], []
    for i, pre in enumerate(weights):
        q = _heads(_stream_lin(streams, i, params, f"{pre}.q", row_exact), heads)
        k = _heads(_stream_lin(streams, i, params, f"{pre}.k", row_exact), heads)
        if qk_norm:
            q = T.rms_norm(q, params[f"{pre}.q_norm"])
            k = T.rms_norm(k, params[f"{pre}.k_norm"])
        qs.append(q)
        ks.append(k)
        vs.append(_heads(_stream_lin(streams, i, params, f"{pre}.v", row_exact), heads))
    q, k, v = T.concat(qs, axis=2), T.concat(ks, axis=2), T.concat(vs, axis=2)
    dh = q.shape[-1]
    logits = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = T.softmax(logits)
    if trace is not None:
        trace.setdefault("logits", []).append(logits.data.copy())
        trace.setdefault("attn", []).append(attn.data.copy())
    out = _merge_heads(T.matmul(attn, v))
    return T.split(out, [s.shape[1] for s in streams], axis=1)


def mmdit_block(
    streams: list[Tensor],
    y: Tensor,
    params: Params,
    config: ModelConfig,
    block: int,
    names: list[str] | None = None,
    trace: dict | None = None,
) -> list[Tensor]:
    """One dual-stream block. ``streams`` are ordered like ``names`` (text streams first, image last)."""
    names = names or [f"c{j}" for j in range(len(streams) - 1)] + ["x"]
    last = block == config.depth - 1
    ys = T.silu(y)
    prefixes = [f"blocks.{block}.{n}" for n in names]
    mods, modulated = [], []
    for x, pre in zip(streams, prefixes):
        m = _lin(ys, params, f"{pre}.mod")
        b, nd = m.shape
        n_mod = nd // config.hidden
        parts = T.split(T.reshape(m, (b, 1, nd)), [config.hidden] * n_mod, axis=2)
        mods.append(parts)
        alpha, beta = parts[0], parts[1]
        modulated.append(_modulate(T.layer_norm(x), alpha, beta))
    attended = joint_attention(modulated, prefixes, params, config.heads, config.qk_norm, trace, config.row_exact)
    active = [not (last and name != "x") for name in names]

    resid = []
    for i, (x, pre, parts) in enumerate(zip(streams, prefixes, mods)):
        if not active[i]:
            resid.append(x)  # pre-only text stream: contributes keys/values, output unused
            continue
        resid.append(T.add(x, T.mul(parts[2], _stream_lin(attended, i, params, f"{pre}.o", config.row_exact))))
    hs = [
        _modulate(T.layer_norm(x), parts[3], parts[4]) if on else Tensor(np.zeros_like(x.data))
        for x, parts, on in zip(resid, mods, active)
    ]
    out = []
    for i, (x, pre, parts) in enumerate(zip(resid, prefixes, mods)):
        if not active[i]:
            out.append(x)
            continue
        h = T.silu(_stream_lin(hs, i, params, f"{pre}.mlp1", config.row_exact))
        if config.row_exact:
            # mlp2 sees the joint hidden sequence; inactive rows are placeholders
            hid = [h if j == i else Tensor(np.zeros(hs[j].shape[:2] + (config.mlp_hidden,), dtype=h.dtype)) for j in range(len(hs))]
            h = _stream_lin(hid, i, params, f"{pre}.mlp2", True)
        else:
            h = _lin(h, params, f"{pre}.mlp2")
        out.append(T.add(x, T.mul(parts[5], h)))
    return out


def _conditioning(cond: ConditioningInputs, params: Params, config: ModelConfig, dtype) -> tuple[list[Tensor], Tensor]:
    keep = cond.keep_mask(config.n_encoders).astype(dtype)
    b, L = cond.tokens.shape
    seqs, pooled = [], []
    for e in range(config.n_encoders):
        table = params[f"tok_embed.{e}"]
        emb = _gather_rows(table, cond.tokens)  # (B, L, C)
        emb = T.mul(emb, keep[:, e].reshape(b, 1, 1))
        seqs.append(emb)
        pooled.append(T.mean(emb, axis=1))
    vec = T.concat(pooled, axis=1) if len(pooled) > 1 else pooled[0]
    if config.text_streams == 1:
        ctx = [_lin(T.concat(seqs, axis=1), params, "ctx0_embed")]
    else:
        ctx = [_lin(s, params, f"ctx{j}_embed") for j, s in enumerate(seqs)]
    return ctx, vec


def _gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    data = table.data[idx]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        T._accum(table, full)

    return T._make(data, (table,), backward)


def embed_inputs(z, t, cond: ConditioningInputs, params: Params, config: ModelConfig):
    """Shared front end: returns (text streams, image tokens, y)."""
    dtype = T.DTYPES[config.dtype]
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=dtype))
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if np.any((t < 0) | (t > 1)):
        raise ValueError(f"model_forward: t must lie in [0, 1], got range [{t.min()}, {t.max()}]")
    b, h, w, c = z.shape
    if len(t) == 1 and b > 1:
        t = np.full(b, t[0])
    if c != config.latent_channels:
        raise ShapeError(f"latent has {c} channels, config expects {config.latent_channels}")
    tok = _patchify_tensor(z, config.patch)
    x = _lin(tok, params, "x_embed")
    grid = positional_grid(config, h // config.patch, w // config.patch)
    pos = position_embedding(grid, config.hidden).astype(dtype)
    x = T.add(x, Tensor(pos[None]))

    temb = T.sinusoidal_embed(t * config.time_scale, config.freq_dim, dtype=dtype)
    ctx, vec = _conditioning(cond, params, config, dtype)
    y = T.add(_mlp2(temb, params, "t_embed"), _mlp2(vec, params, "y_embed"))
    return ctx, x, y


def final_layer(x: Tensor, y: Tensor, params: Params, config: ModelConfig, h: int, w: int) -> Tensor:
    m = _lin(T.silu(y), params, "final.mod")
    b = m.shape[0]
    scale, shift = T.split(T.reshape(m, (b, 1, 2 * config.hidden)), [config.hidden] * 2, axis=2)
    x = _modulate(T.layer_norm(x), scale, shift)
    return _unpatchify_tensor(_lin(x, params, "final.out"), h, w, config.patch)


def model_forward(z, t, cond: ConditioningInputs, params: Params, config: ModelConfig, trace: dict | None = None) -> Tensor:
    """Network output with the same shape as ``z`` (B, h, w, c)."""
    ctx, x, y = embed_inputs(z, t, cond, params, config)
    names = [f"c{j}" for j in range(len(ctx))] + ["x"]
    streams = ctx + [x]
    for i in range(config.depth):
        streams = mmdit_block(streams, y, params, config, i, names, trace)
    _, h, w, _ = (z.shape if isinstance(z, Tensor) else np.shape(z))
    return final_layer(streams[-1], y, params, config, h, w)


def dit_forward(z, t, cond: ConditioningInputs, params: Params, config: ModelConfig, stream: str = "x") -> Tensor:
    """Single-stream reference: every block applies one weight set to ``[c; x]``.

    With MM-DiT weights tied across streams this must agree with ``model_forward``.
    """
    ctx, x, y = embed_inputs(z, t, cond, params, config)
    seq = T.concat(ctx + [x], axis=1)
    n_ctx = seq.shape[1] - x.shape[1]
    ys = T.silu(y)
    for i in range(config.depth):
        pre = f"blocks.{i}.{stream}"
        m = _lin(ys, params, f"{pre}.mod")
        b = m.shape[0]
        alpha, beta, gamma, delta, eps_mod, zeta = T.split(
            T.reshape(m, (b, 1, 6 * config.hidden)), [config.hidden] * 6, axis=2
        )
        hmod = _modulate(T.layer_norm(seq), alpha, beta)
        (att,) = joint_attention([hmod], [pre], params, config.heads, config.qk_norm)
        seq = T.add(seq, T.mul(gamma, _lin(att, params, f"{pre}.o")))
        hmod = _modulate(T.layer_norm(seq), delta, eps_mod)
        hmod = _lin(T.silu(_lin(hmod, params, f"{pre}.mlp1")), params, f"{pre}.mlp2")
        seq = T.add(seq, T.mul(zeta, hmod))
    x = T.narrow(seq, 1, n_ctx, seq.shape[1] - n_ctx)
    _, h, w, _ = np.shape(z.data if isinstance(z, Tensor) else z)
    return final_layer(x, y, params, config, h, w)


def tie_streams(params: Params, config: ModelConfig) -> Params:
    """Copy every image-stream block weight into the text streams (in place)."""
    for i in range(config.depth):
        for s in _stream_names(config)[1:]:
            for name, src in params.items():
                prefix = f"blocks.{i}.x."
                if name.startswith(prefix):
                    dst = f"blocks.{i}.{s}." + name[len(prefix) :]
                    if dst in params:
                        params[dst].data[...] = src.data[..., : params[dst].data.shape[-1]]
    return params


def attention_entropy(attn: np.ndarray) -> np.ndarray:
    """Mean entropy per head of attention rows ``(B, H, N, N)`` -> ``(H,)``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(attn > 0, attn * np.log(attn), 0.0).sum(axis=-1)
    return ent.mean(axis=(0, 2))
