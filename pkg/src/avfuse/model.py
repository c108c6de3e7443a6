"""Align-then-Fuse MMDiT over paired audio/video latent tokens.

Audio and video tokens are projected per modality, pass through alignment
blocks (joint self-attention over the concatenated sequence with per-modality
weights), are fused, pass through shared blocks, and are decoded by
per-modality velocity heads. Context tokens enter through cross-attention
(``NAVA`` topology) or as peers in self-attention (``FULLY_UNIFIED``).

Every block is adaLN-modulated by the timestep embedding; the modulation
projections start at zero so that each block is the identity at init.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import container
from .autodiff import Tensor
from .context import MAX_SPANS, VOCAB_SIZE, ContextSequence

NAVA = "NAVA"
FULLY_UNIFIED = "FULLY_UNIFIED"
TOPOLOGIES = (NAVA, FULLY_UNIFIED)
N_TIME_FREQS = 8
N_REL_FREQS = 4

Params = dict


@dataclass(frozen=True)
class ModelConfig:
    n_hal: int = 2
    n_ufl: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_c: int = 32
    d_v_in: int = 16
    d_a_in: int = 12
    topology: str = NAVA
    rope_base: float = 10000.0
    tr_a: int = 8
    tr_v: int = 4
    ffn_mult: int = 2
    d_freq: int = 32
    mask_ufl: bool = True
    time_coords: bool = True

    def validate(self) -> "ModelConfig":
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary embedding")
        if self.n_hal < 0 or self.n_ufl < 0 or self.n_hal + self.n_ufl < 1:
            raise ValueError("need n_hal >= 0, n_ufl >= 0 and at least one block")
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"topology must be one of {TOPOLOGIES}, got {self.topology!r}")
        if self.tr_a <= 0 or self.tr_v <= 0:
            raise ValueError("token rates must be positive")
        if self.rope_base <= 0:
            raise ValueError("rope_base must be positive")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def rope_scale(self) -> float:
        return self.tr_v / self.tr_a

    def to_text(self) -> str:
        return container.format_kv(asdict(self))

    @classmethod
    def from_mapping(cls, items: Mapping[str, str]) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name in items:
                kw[f.name] = _coerce(f.type, items[f.name])
        return cls(**kw).validate()


def _coerce(kind, raw):
    kind = kind if isinstance(kind, str) else kind.__name__
    if isinstance(raw, str):
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    return raw


# -- parameters ---------------------------------------------------------------

def _hal_streams(cfg: ModelConfig) -> list[str]:
    return ["audio", "video"] + (["context"] if cfg.topology == FULLY_UNIFIED else [])


def _block_schema(cfg: ModelConfig, prefix: str) -> dict[str, tuple]:
    d, dc, f = cfg.d_model, cfg.d_c, cfg.ffn_mult * cfg.d_model
    cross = cfg.topology == NAVA
    s = {
        f"{prefix}.mod.w": (d, (9 if cross else 6) * d),
        f"{prefix}.mod.b": ((9 if cross else 6) * d,),
        f"{prefix}.attn.wq": (d, d),
        f"{prefix}.attn.wk": (d, d),
        f"{prefix}.attn.wv": (d, d),
        f"{prefix}.attn.wo": (d, d),
        f"{prefix}.attn.bo": (d,),
    }
    if cross:
        s.update({
            f"{prefix}.xattn.wq": (d, d),
            f"{prefix}.xattn.wk": (dc, d),
            f"{prefix}.xattn.wv": (dc, d),
            f"{prefix}.xattn.wo": (d, d),
            f"{prefix}.xattn.bo": (d,),
        })
    s.update({
        f"{prefix}.ffn.w1": (d, f),
        f"{prefix}.ffn.b1": (f,),
        f"{prefix}.ffn.w2": (f, d),
        f"{prefix}.ffn.b2": (d,),
    })
    return s


def param_schema(cfg: ModelConfig) -> dict[str, tuple]:
    """Name -> shape for every learnable tensor implied by ``cfg``."""
    d, dc = cfg.d_model, cfg.d_c
    s: dict[str, tuple] = {
        "t_embed.w1": (cfg.d_freq, d), "t_embed.b1": (d,),
        "t_embed.w2": (d, d), "t_embed.b2": (d,),
    }
    if cfg.time_coords:
        s["time_proj.w"] = (2 * (N_TIME_FREQS + N_REL_FREQS), d)
    if cfg.n_hal > 0:
        s.update({"in_proj.audio.w": (cfg.d_a_in, d), "in_proj.audio.b": (d,),
                  "in_proj.video.w": (cfg.d_v_in, d), "in_proj.video.b": (d,)})
    else:
        s.update({"in_proj.shared.w": (max(cfg.d_a_in, cfg.d_v_in), d), "in_proj.shared.b": (d,)})
    s.update({
        "ctx.vocab": (VOCAB_SIZE, dc), "ctx.markers": (2, dc),
        "ctx.null_text": (1, dc), "ctx.null_timbre": (1, dc),
        "ctx.slot": (MAX_SPANS + 1, dc),
        "timbre.w1": (cfg.d_a_in, dc), "timbre.b1": (dc,),
        "timbre.w2": (dc, dc), "timbre.b2": (dc,),
    })
    if cfg.topology == FULLY_UNIFIED:
        s.update({"ctx_in.w": (dc, d), "ctx_in.b": (d,)})
    for i in range(cfg.n_hal):
        for st in _hal_streams(cfg):
            s.update(_block_schema(cfg, f"hal.{i}.{st}"))
    for i in range(cfg.n_ufl):
        s.update(_block_schema(cfg, f"ufl.{i}"))
    for m, din in (("audio", cfg.d_a_in), ("video", cfg.d_v_in)):
        s.update({f"final.{m}.mod.w": (d, 2 * d), f"final.{m}.mod.b": (2 * d,),
                  f"head.{m}.w": (d, din), f"head.{m}.b": (din,)})
    return s


def init_params(cfg: ModelConfig, seed: int = 0, zero_gates: bool = True) -> Params:
    """Fresh parameters; ``zero_gates=False`` randomises the adaLN projections too."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    out: Params = {}
    for name, shape in param_schema(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("ctx.") and name != "ctx.slot":
            arr = rng.normal(0.0, 1.0, shape)
        elif name == "ctx.slot":
            arr = rng.normal(0.0, 0.5, shape)
        elif ".mod." in name:
            arr = np.zeros(shape) if zero_gates else rng.normal(0.0, 0.3 / math.sqrt(shape[0]), shape)
        elif name.startswith("head."):
            arr = rng.normal(0.0, 0.3 / math.sqrt(shape[0]), shape) if leaf == "w" else np.zeros(shape)
        elif len(shape) == 2:
            arr = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
        else:
            arr = np.zeros(shape) if zero_gates else rng.normal(0.0, 0.1, shape)
        out[name] = Tensor(arr, requires_grad=True, name=name)
    return out


def count_params(cfg: ModelConfig, prefix: str = "") -> int:
    return int(sum(np.prod(s) for n, s in param_schema(cfg).items() if n.startswith(prefix)))


def save_checkpoint(path, cfg: ModelConfig, params: Params, extra_meta: str = "") -> None:
    meta = "kind=checkpoint\n" + cfg.to_text() + extra_meta
    container.write(path, {n: params[n].data for n in param_schema(cfg)}, meta)


def load_checkpoint(path, cfg: Optional[ModelConfig] = None):
    """Load ``(config, params)``; the tensor names must match the config schema exactly."""
    meta, tensors = container.read(path)
    items = container.parse_kv(meta)
    stored = ModelConfig.from_mapping(items)
    cfg = cfg or stored
    container.check_schema(tensors, param_schema(cfg), "parameter")
    params = {n: Tensor(a, requires_grad=True, name=n) for n, a in tensors.items()}
    return cfg, params


# -- masks and positions ------------------------------------------------------

def build_av_mask(t_a: int, t_v: int, drop_cross: bool) -> np.ndarray:
    """Boolean attention mask over [audio; video]; True = may attend."""
    if t_a < 1 or t_v < 1:
        raise ValueError("build_av_mask needs at least one token per modality")
    n = t_a + t_v
    mask = np.ones((n, n), dtype=bool)
    if drop_cross:
        mask[:t_a, t_a:] = False
        mask[t_a:, :t_a] = False
    return mask


def scaled_positions(t_a: int, t_v: int, tr_a: float, tr_v: float):
    """Rotary positions on the video time grid; audio index i sits at i * tr_v / tr_a."""
    if tr_a <= 0 or tr_v <= 0:
        raise ValueError("token rates must be positive")
    return np.arange(t_a) * tr_v / tr_a, np.arange(t_v, dtype=np.float64)


def time_features(positions: np.ndarray, tr_v: float, length: float) -> np.ndarray:
    """Sinusoidal features of physical time plus clip-relative time.

    ``positions`` and ``length`` (the clip duration) are in video frames. The
    relative part lets tokens locate themselves within the clip, e.g. which
    half of a two-span utterance they belong to.
    """
    wavelengths = tr_v * 2.0 ** (np.arange(N_TIME_FREQS) / 2.0)
    ang = 2 * np.pi * positions[:, None] / wavelengths[None, :]
    rel = np.pi * (positions[:, None] / max(length, 1e-12)) * np.arange(1, N_REL_FREQS + 1)[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang), np.sin(rel), np.cos(rel)], axis=1)


def timestep_features(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = 1000.0 * np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=1)


# -- building blocks ----------------------------------------------------------

@dataclass
class _Env:
    cfg: ModelConfig
    params: Mapping[str, Tensor]
    t_act: Tensor                  # gelu(t_emb), [B, d]
    positions: np.ndarray          # rotary position per joint token
    mask: Optional[np.ndarray]     # [B, 1, T, T] bool or None
    ctx: Optional[Tensor]          # [B, L, d_c]
    ctx_mask: Optional[np.ndarray]  # [B, 1, 1, L] bool


def _linear(x: Tensor, params, name: str) -> Tensor:
    return x @ params[name + ".w"] + params[name + ".b"]


def _heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return ad.transpose(ad.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, mask=None,
              positions: Optional[np.ndarray] = None, rope_base: float = 10000.0) -> Tensor:
    """Multi-head scaled dot-product attention on ``[B, T, d]`` inputs.

    When ``positions`` is given, queries and keys (same sequence) are rotated.
    """
    qh, kh, vh = _heads(q, n_heads), _heads(k, n_heads), _heads(v, n_heads)
    if positions is not None:
        qh = ad.rope_apply(qh, positions, rope_base)
        kh = ad.rope_apply(kh, positions, rope_base)
    scores = ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))) * (1.0 / math.sqrt(qh.shape[-1]))
    return _merge(ad.softmax_rows(scores, mask) @ vh)


def _modulation(env: _Env, prefix: str, chunks: int) -> list[Tensor]:
    d = env.cfg.d_model
    m = _linear(env.t_act, env.params, prefix + ".mod")
    m = ad.reshape(m, (m.shape[0], 1, chunks * d))
    return ad.split(m, [d] * chunks, axis=-1)


def _modulate(h: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return ad.layer_norm(h) * (scale + 1.0) + shift


def _block(hs: Sequence[Tensor], prefixes: Sequence[str], env: _Env) -> list[Tensor]:
    """One transformer block over one or more token streams sharing attention.

    Streams with distinct prefixes keep their own projections; the
    self-attention always runs over the concatenation of all streams.
    """
    cfg, p = env.cfg, env.params
    cross = cfg.topology == NAVA
    mods = [_modulation(env, pre, 9 if cross else 6) for pre in prefixes]

    qs, ks, vs = [], [], []
    for h, pre, m in zip(hs, prefixes, mods):
        x = _modulate(h, m[0], m[1])
        qs.append(x @ p[pre + ".attn.wq"])
        ks.append(x @ p[pre + ".attn.wk"])
        vs.append(x @ p[pre + ".attn.wv"])
    sizes = [h.shape[1] for h in hs]
    cat = (lambda xs: ad.concat(xs, axis=1)) if len(hs) > 1 else (lambda xs: xs[0])
    o = attention(cat(qs), cat(ks), cat(vs), cfg.n_heads, env.mask, env.positions, cfg.rope_base)
    outs = ad.split(o, sizes, axis=1) if len(hs) > 1 else [o]
    hs = [h + m[2] * (oi @ p[pre + ".attn.wo"] + p[pre + ".attn.bo"])
          for h, oi, pre, m in zip(hs, outs, prefixes, mods)]

    if cross:
        new = []
        for h, pre, m in zip(hs, prefixes, mods):
            x = _modulate(h, m[3], m[4])
            o = attention(x @ p[pre + ".xattn.wq"], env.ctx @ p[pre + ".xattn.wk"],
                          env.ctx @ p[pre + ".xattn.wv"], cfg.n_heads, env.ctx_mask)
            new.append(h + m[5] * (o @ p[pre + ".xattn.wo"] + p[pre + ".xattn.bo"]))
        hs = new

    f0 = 6 if cross else 3
    new = []
    for h, pre, m in zip(hs, prefixes, mods):
        x = _modulate(h, m[f0], m[f0 + 1])
        f = ad.gelu(x @ p[pre + ".ffn.w1"] + p[pre + ".ffn.b1"]) @ p[pre + ".ffn.w2"] + p[pre + ".ffn.b2"]
        new.append(h + m[f0 + 2] * f)
    return new


def _batched(x: Tensor) -> Tensor:
    return ad.reshape(x, (1,) + x.shape)


def _unbatched(x: Tensor) -> Tensor:
    return ad.reshape(x, x.shape[1:])


def _block_env(ctx, t_emb, mask, params, cfg, positions, ctx_mask) -> _Env:
    if ctx.ndim == 2:
        ctx = _batched(ctx)
    if t_emb.ndim == 1:
        t_emb = _batched(t_emb)
    m = None if mask is None else np.asarray(mask, dtype=bool).reshape((-1, 1) + np.shape(mask)[-2:])
    cm = None if ctx_mask is None else np.asarray(ctx_mask, dtype=bool).reshape(ctx.shape[0], 1, 1, -1)
    return _Env(cfg, params, ad.gelu(t_emb), positions, m, ctx, cm)


def hal_block(h_a: Tensor, h_v: Tensor, ctx: Tensor, t_emb: Tensor, mask, params,
              block_idx: int, cfg: ModelConfig, ctx_mask=None):
    """Alignment block: per-modality projections, joint audio-video self-attention,
    context cross-attention and FFN. Accepts ``[T, d]`` or ``[B, T, d]`` streams."""
    if cfg.topology != NAVA:
        raise ValueError("hal_block is the NAVA-topology block; use model_forward otherwise")
    single = h_a.ndim == 2
    if single:
        h_a, h_v = _batched(h_a), _batched(h_v)
    t_a, t_v = h_a.shape[1], h_v.shape[1]
    if mask is not None and np.shape(mask)[-1] != t_a + t_v:
        raise ad.ShapeError(f"mask extent {np.shape(mask)[-1]} != {t_a + t_v} tokens")
    pa, pv = scaled_positions(t_a, t_v, cfg.tr_a, cfg.tr_v)
    env = _block_env(ctx, t_emb, mask, params, cfg, np.concatenate([pa, pv]), ctx_mask)
    out_a, out_v = _block([h_a, h_v], [f"hal.{block_idx}.audio", f"hal.{block_idx}.video"], env)
    return (_unbatched(out_a), _unbatched(out_v)) if single else (out_a, out_v)


def ufl_block(h_av: Tensor, ctx: Tensor, t_emb: Tensor, mask, params, block_idx: int,
              cfg: ModelConfig, positions=None, ctx_mask=None) -> Tensor:
    """Fusion block: one shared set of weights over the fused token sequence.

    ``positions`` defaults to ``0..T-1``.
    """
    if cfg.topology != NAVA:
        raise ValueError("ufl_block is the NAVA-topology block; use model_forward otherwise")
    single = h_av.ndim == 2
    if single:
        h_av = _batched(h_av)
    t = h_av.shape[1]
    if mask is not None and np.shape(mask)[-1] != t:
        raise ad.ShapeError(f"mask extent {np.shape(mask)[-1]} != {t} tokens")
    pos = np.arange(t, dtype=np.float64) if positions is None else np.asarray(positions, dtype=np.float64)
    env = _block_env(ctx, t_emb, mask, params, cfg, pos, ctx_mask)
    (out,) = _block([h_av], [f"ufl.{block_idx}"], env)
    return _unbatched(out) if single else out


# -- full model ---------------------------------------------------------------

def timestep_embedding(t: np.ndarray, params, cfg: ModelConfig) -> Tensor:
    feats = Tensor(timestep_features(t, cfg.d_freq))
    h = ad.gelu(feats @ params["t_embed.w1"] + params["t_embed.b1"])
    return h @ params["t_embed.w2"] + params["t_embed.b2"]


def encode_context(tokens: Tensor, slots: np.ndarray, params) -> Tensor:
    """Add span-ordinal embeddings so each span's tokens are distinguishable."""
    return tokens + ad.take_rows(params["ctx.slot"], slots)


def _joint_mask(b: int, t_a: int, t_v: int, drop_cross: np.ndarray, n_ctx: int = 0,
                ctx_mask: Optional[np.ndarray] = None) -> Optional[np.ndarray]:
    n = t_a + t_v + n_ctx
    if t_a and t_v and drop_cross.any():
        mask = np.ones((b, n, n), dtype=bool)
        mask[drop_cross, :t_a, t_a:t_a + t_v] = False
        mask[drop_cross, t_a:t_a + t_v, :t_a] = False
    elif n_ctx and ctx_mask is not None and not ctx_mask.all():
        mask = np.ones((b, n, n), dtype=bool)
    else:
        return None
    if n_ctx and ctx_mask is not None:
        mask[:, :, t_a + t_v:] &= ctx_mask[:, None, :]
    return mask[:, None]


def forward_batch(z_a: Optional[Tensor], z_v: Optional[Tensor], ctx_tokens: Tensor,
                  ctx_slots: np.ndarray, ctx_mask: Optional[np.ndarray], t, drop_cross,
                  cfg: ModelConfig, params):
    """Velocity prediction for a batch.

    ``z_a`` is ``[B, T_a, d_a_in]`` and ``z_v`` is ``[B, T_v, d_v_in]``; either may
    be ``None`` for single-modality tasks. ``ctx_tokens`` is ``[B, L, d_c]`` with
    span ordinals ``ctx_slots`` and key mask ``ctx_mask`` (``[B, L]``, True = real
    token). Returns ``(v_a, v_v)`` with ``None`` for an absent modality.
    """
    p = params
    if z_a is None and z_v is None:
        raise ValueError("need at least one modality")
    b = (z_a if z_a is not None else z_v).shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    if (t < 0).any() or (t > 1).any():
        raise ValueError("t must lie in [0, 1]")
    drop_cross = np.broadcast_to(np.asarray(drop_cross, dtype=bool), (b,))
    if ctx_tokens.shape[1] < 1:
        raise ValueError("context must contain at least one token")
    if ctx_mask is not None:
        ctx_mask = np.asarray(ctx_mask, dtype=bool)
        if not ctx_mask.any(axis=1).all():
            raise ValueError("every sample needs at least one unmasked context token")
    t_a = z_a.shape[1] if z_a is not None else 0
    t_v = z_v.shape[1] if z_v is not None else 0
    if z_a is not None and z_a.shape[2] != cfg.d_a_in:
        raise ad.ShapeError(f"audio latent width {z_a.shape[2]} != {cfg.d_a_in}")
    if z_v is not None and z_v.shape[2] != cfg.d_v_in:
        raise ad.ShapeError(f"video latent width {z_v.shape[2]} != {cfg.d_v_in}")
    pos_a, pos_v = scaled_positions(t_a, t_v, cfg.tr_a, cfg.tr_v)
    length = t_v if t_v else t_a * cfg.tr_v / cfg.tr_a

    # modality-decoupled (or shared) input projection
    streams, names, positions = [], [], []
    width = max(cfg.d_a_in, cfg.d_v_in)
    for z, name, pos in ((z_a, "audio", pos_a), (z_v, "video", pos_v)):
        if z is None:
            continue
        if cfg.n_hal > 0:
            h = _linear(z, p, f"in_proj.{name}")
        else:
            if z.shape[2] < width:
                z = ad.concat([z, Tensor(np.zeros(z.shape[:2] + (width - z.shape[2],)))], axis=2)
            h = _linear(z, p, "in_proj.shared")
        if cfg.time_coords:
            h = h + Tensor(time_features(pos, cfg.tr_v, length)) @ p["time_proj.w"]
        streams.append(h)
        names.append(name)
        positions.append(pos)

    t_emb = timestep_embedding(t, p, cfg)
    t_act = ad.gelu(t_emb)
    ctx = encode_context(ctx_tokens, ctx_slots, p)
    n_ctx = 0
    if cfg.topology == FULLY_UNIFIED:
        streams.append(_linear(ctx, p, "ctx_in"))
        names.append("context")
        n_ctx = ctx.shape[1]
        positions.append(np.zeros(n_ctx))
    pos_all = np.concatenate(positions)
    cm4 = None if ctx_mask is None else ctx_mask[:, None, None, :]
    no_drop = np.zeros(b, dtype=bool)
    hal_mask = _joint_mask(b, t_a, t_v, drop_cross, n_ctx, ctx_mask)
    ufl_mask = hal_mask if cfg.mask_ufl else _joint_mask(b, t_a, t_v, no_drop, n_ctx, ctx_mask)

    env = _Env(cfg, p, t_act, pos_all, hal_mask, ctx, cm4)
    for i in range(cfg.n_hal):
        streams = _block(streams, [f"hal.{i}.{n}" for n in names], env)

    sizes = [s.shape[1] for s in streams]
    if cfg.n_ufl:
        h = ad.concat(streams, axis=1) if len(streams) > 1 else streams[0]
        env = _Env(cfg, p, t_act, pos_all, ufl_mask, ctx, cm4)
        for i in range(cfg.n_ufl):
            (h,) = _block([h], [f"ufl.{i}"], env)
        streams = ad.split(h, sizes, axis=1) if len(streams) > 1 else [h]

    out = {}
    d = cfg.d_model
    for h, name in zip(streams, names):
        if name == "context":
            continue
        m = _linear(t_act, p, f"final.{name}.mod")
        shift, scale = ad.split(ad.reshape(m, (b, 1, 2 * d)), [d, d], axis=-1)
        out[name] = _linear(_modulate(h, shift, scale), p, f"head.{name}")
    return out.get("audio"), out.get("video")


def model_forward(z_a: Optional[Tensor], z_v: Optional[Tensor], context: ContextSequence, t: float,
                  drop_cross: bool, cfg: ModelConfig, params, context_mask=None):
    """Single-sample forward: ``z_a`` is ``[T_a, d_a_in]``, ``z_v`` is ``[T_v, d_v_in]``."""
    if z_v is not None and z_v.shape[0] == 0:
        z_v = None
    if z_a is not None and z_a.shape[0] == 0:
        z_a = None
    za = _batched(z_a) if z_a is not None else None
    zv = _batched(z_v) if z_v is not None else None
    cm = None if context_mask is None else np.asarray(context_mask, dtype=bool)[None]
    v_a, v_v = forward_batch(za, zv, _batched(context.tokens), context.slots[None], cm,
                             np.array([t]), np.array([drop_cross]), cfg, params)
    return (_unbatched(v_a) if v_a is not None else None,
            _unbatched(v_v) if v_v is not None else None)
