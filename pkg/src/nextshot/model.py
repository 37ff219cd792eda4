"""Diffusion-transformer compute core.

Tokens are patch vectors arranged [batch, frames, spatial, features]. Every
frame carries (time_idx, phase, is_context, caption_id) metadata: time_idx
is the within-shot frame index, phase is the shot counter. Temporal rotary
angles follow  angle_j(t, k) = phi_j * t + k * theta  per frequency pair,
so a shot boundary shows up as a hard phase jump while relative positions
within a shot stay intact. Spatial axes rotate by their own frequency
ladders, independent of phase.

The dual cache keeps per-layer keys/values for sparse historical context
(global region, rebuilt at shot boundaries) and for the current shot's own
chunks (local ring, reset at boundaries).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nd
from .nd import Tensor, concat, embedding, masked_softmax, rms_norm


class ShapeError(ValueError):
    pass


class CacheError(RuntimeError):
    pass


class CaptionError(KeyError):
    pass


# -- configuration -------------------------------------------------------------

@dataclass
class RoPEConfig:
    phi: float = 1.0                 # base temporal frequency (rad/frame, first pair)
    theta: float = float(np.pi / 2)  # shot-boundary phase shift; 0 disables the indicator
    freq_base: float = 10000.0       # geometric ladder base across pairs

    def __post_init__(self):
        if self.phi <= 0:
            raise ValueError("phi must be > 0")
        if self.theta < 0:
            raise ValueError("theta must be >= 0")


@dataclass
class ModelConfig:
    channels: int = 8
    height: int = 8
    width: int = 8
    patch: int = 2
    d_model: int = 64
    n_heads: int = 2
    n_blocks: int = 2
    d_ff: int = 256
    vocab_size: int = 21
    chunk_frames: int = 3
    global_chunks: int = 2
    local_chunks: int = 7
    f_context: int = 6
    rope: RoPEConfig = field(default_factory=RoPEConfig)

    def __post_init__(self):
        if isinstance(self.rope, dict):
            self.rope = RoPEConfig(**self.rope)
        if self.height % self.patch or self.width % self.patch:
            raise ShapeError("spatial dims must divide by patch size")
        if self.d_model % self.n_heads:
            raise ShapeError("d_model must divide by n_heads")
        if self.head_dim % 8:
            raise ShapeError("head_dim must divide by 8 for the rotary split")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def s_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def d_patch(self) -> int:
        return self.channels * self.patch * self.patch

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# -- frame metadata ----------------------------------------------------------

@dataclass
class FrameMeta:
    time_idx: np.ndarray    # int32 [F], within-shot frame index
    phase: np.ndarray       # int32 [F], shot counter k
    is_context: np.ndarray  # bool  [F]
    caption_id: np.ndarray  # int32 [F], shot index used for caption lookup

    @classmethod
    def build(cls, time_idx, phase, is_context, caption_id) -> "FrameMeta":
        return cls(np.asarray(time_idx, np.int32), np.asarray(phase, np.int32),
                   np.asarray(is_context, bool), np.asarray(caption_id, np.int32))

    @property
    def n_frames(self) -> int:
        return len(self.time_idx)

    def concat(self, other: "FrameMeta") -> "FrameMeta":
        return FrameMeta(np.concatenate([self.time_idx, other.time_idx]),
                         np.concatenate([self.phase, other.phase]),
                         np.concatenate([self.is_context, other.is_context]),
                         np.concatenate([self.caption_id, other.caption_id]))

    def select(self, keep: np.ndarray) -> "FrameMeta":
        return FrameMeta(self.time_idx[keep], self.phase[keep],
                         self.is_context[keep], self.caption_id[keep])


def target_meta(n_frames: int, phase: int, caption_id: int, start_time: int = 0) -> FrameMeta:
    return FrameMeta.build(np.arange(start_time, start_time + n_frames),
                           np.full(n_frames, phase), np.zeros(n_frames, bool),
                           np.full(n_frames, caption_id))


def context_meta(source: list[tuple[int, int]]) -> FrameMeta:
    """Meta for sampled context frames: source positions, source phases."""
    shots = [s for s, _ in source]
    times = [t for _, t in source]
    n = len(source)
    return FrameMeta.build(times, shots, np.ones(n, bool), shots)


@dataclass
class TokenSeq:
    data: Tensor            # [b, F, s, d]
    meta: FrameMeta

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]


# -- patchify ----------------------------------------------------------------

def patchify(latents: Tensor | np.ndarray, patch: int, meta: FrameMeta | None = None) -> TokenSeq:
    """[b, f, c, h, w] -> tokens [b, f, (h/p)(w/p), c*p*p]; exact permutation."""
    x = latents if isinstance(latents, Tensor) else Tensor(latents)
    b, f, c, h, w = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"spatial dims {(h, w)} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = x.reshape(b, f, c, gh, patch, gw, patch)
    x = x.transpose((0, 1, 3, 5, 2, 4, 6))           # b f gh gw c p p
    x = x.reshape(b, f, gh * gw, c * patch * patch)
    if meta is None:
        meta = target_meta(f, phase=0, caption_id=0)
    return TokenSeq(data=x, meta=meta)


def unpatchify(seq_data: Tensor, channels: int, height: int, width: int, patch: int) -> Tensor:
    """Inverse of patchify on the data tensor: tokens -> [b, f, c, h, w]."""
    b, f, s, d = seq_data.shape
    gh, gw = height // patch, width // patch
    if s != gh * gw or d != channels * patch * patch:
        raise ShapeError(f"token shape {(s, d)} does not match {(gh * gw, channels * patch * patch)}")
    x = seq_data.reshape(b, f, gh, gw, channels, patch, patch)
    x = x.transpose((0, 1, 4, 2, 5, 3, 6))           # b f c gh p gw p
    return x.reshape(b, f, channels, height, width)


def frame_concat(context: TokenSeq | None, target: TokenSeq) -> TokenSeq:
    """Concatenate context tokens before target tokens along the frame axis."""
    if context is None or context.n_frames == 0:
        return target
    cb, _, cs, cd = context.data.shape
    tb, _, ts, td = target.data.shape
    if (cb, cs, cd) != (tb, ts, td):
        raise ShapeError(f"context {context.data.shape} vs target {target.data.shape}")
    return TokenSeq(data=concat([context.data, target.data], axis=1),
                    meta=context.meta.concat(target.meta))


# -- rotary embedding -----------------------------------------------------------

def rope_angle(t: int | np.ndarray, k: int | np.ndarray, cfg: RoPEConfig):
    """Base temporal rotation angle phi*t + k*theta (first frequency pair)."""
    return cfg.phi * np.asarray(t, dtype=np.float64) + np.asarray(k, dtype=np.float64) * cfg.theta


def _ladder(n: int, base: float) -> np.ndarray:
    return base ** (-np.arange(n, dtype=np.float64) / max(n, 1))


def rope_cos_sin(meta: FrameMeta, grid: tuple[int, int], head_dim: int,
                 cfg: RoPEConfig, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Per-token rotation tables [F*s, head_dim/2].

    Pair layout: first head_dim/4 pairs temporal, then head_dim/8 height,
    then head_dim/8 width. The phase term k*theta applies uniformly to
    every temporal pair.
    """
    nt, nh, nw = head_dim // 4, head_dim // 8, head_dim // 8
    gh, gw = grid
    s = gh * gw
    t = meta.time_idx.astype(np.float64)
    k = meta.phase.astype(np.float64)

    temporal = (cfg.phi * t[:, None]) * _ladder(nt, cfg.freq_base)[None, :] \
        + (k * cfg.theta)[:, None]                                    # [F, nt]
    rows = np.repeat(np.arange(gh), gw).astype(np.float64)            # [s]
    cols = np.tile(np.arange(gw), gh).astype(np.float64)
    ang_h = rows[:, None] * _ladder(nh, cfg.freq_base)[None, :]       # [s, nh]
    ang_w = cols[:, None] * _ladder(nw, cfg.freq_base)[None, :]

    F = meta.n_frames
    full = np.empty((F, s, nt + nh + nw), dtype=np.float64)
    full[:, :, :nt] = temporal[:, None, :]
    full[:, :, nt:nt + nh] = ang_h[None, :, :]
    full[:, :, nt + nh:] = ang_w[None, :, :]
    full = full.reshape(F * s, nt + nh + nw)
    return np.cos(full).astype(dtype), np.sin(full).astype(dtype)


def apply_rope_tables(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate [b, H, N, Dh] by per-token tables; pair i = (dim i, dim i+Dh/2)."""
    dh = x.shape[-1]
    if dh % 2:
        raise ShapeError("rotated head dim must be even")
    half = dh // 2
    x1 = x[..., :half]
    x2 = x[..., half:]
    c = cos[None, None, :, :]
    s = sin[None, None, :, :]
    return concat([x1 * c - x2 * s, x1 * s + x2 * c], axis=-1)


def apply_rope(x: Tensor, meta: FrameMeta, grid: tuple[int, int], cfg: RoPEConfig) -> Tensor:
    """Convenience wrapper: build tables from metadata and rotate."""
    cos, sin = rope_cos_sin(meta, grid, x.shape[-1], cfg, dtype=x.dtype)
    return apply_rope_tables(x, cos, sin)


# -- attention masks -----------------------------------------------------------

NEG_INF = float("-inf")


def build_mask(mode: str, meta: FrameMeta, chunk_frames: int) -> np.ndarray:
    """Frame-level additive mask [F, F]; 0 visible, -inf hidden.

    bidirectional: everything sees everything. block_causal: context frames
    attend only among themselves; target frames see all context, earlier
    chunks, and their own chunk, never later chunks.
    """
    F = meta.n_frames
    if mode == "bidirectional":
        return np.zeros((F, F), dtype=np.float32)
    if mode != "block_causal":
        raise ValueError(f"unknown mask mode {mode!r}")

    ctx = meta.is_context
    chunk_of = np.full(F, -1, dtype=np.int64)
    chunk_of[~ctx] = np.arange(int((~ctx).sum())) // chunk_frames

    mask = np.full((F, F), NEG_INF, dtype=np.float32)
    mask[np.ix_(ctx, ctx)] = 0.0                                   # context <-> context
    if (~ctx).any():
        mask[np.ix_(~ctx, ctx)] = 0.0                              # target -> context
        tgt = np.where(~ctx)[0]
        ok = chunk_of[tgt][:, None] >= chunk_of[tgt][None, :]
        sub = np.where(ok, 0.0, NEG_INF).astype(np.float32)
        mask[np.ix_(~ctx, ~ctx)] = sub
    return mask


def expand_mask(frame_mask: np.ndarray, s: int) -> np.ndarray:
    return np.repeat(np.repeat(frame_mask, s, axis=0), s, axis=1)


# -- parameters ---------------------------------------------------------------

GROUPS = ("attn3d", "xattn", "ffn", "norm", "embed", "lora")


def param_group(name: str) -> str:
    if ".lora_" in name:
        return "lora"
    if ".attn." in name:
        return "attn3d"
    if ".xattn." in name:
        return "xattn"
    if ".ffn." in name:
        return "ffn"
    if "norm" in name:
        return "norm"
    return "embed"


class ModelParams:
    """Named tensors plus the config they were built for."""

    def __init__(self, tensors: dict[str, Tensor], cfg: ModelConfig):
        self.tensors = tensors
        self.cfg = cfg

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def eff(self, name: str) -> Tensor:
        """Effective weight: base plus low-rank delta when present."""
        w = self.tensors[name]
        la, lb = name + ".lora_a", name + ".lora_b"
        if la in self.tensors:
            return w + self.tensors[la] @ self.tensors[lb]
        return w

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                            for k, v in self.tensors.items()}, self.cfg)

    def trainable_names(self, mode: str) -> set[str]:
        if mode == "all":
            return {k for k in self.tensors if ".lora_" not in k}
        if mode == "3d_only":
            return {k for k in self.tensors if param_group(k) == "attn3d"}
        if mode == "lora_only":
            return {k for k in self.tensors if param_group(k) == "lora"}
        raise ValueError(f"unknown trainable mode {mode!r}")

    def add_lora(self, rank: int, seed: int) -> None:
        """Attach zero-effect low-rank deltas to the 3D attention weights."""
        rng = np.random.default_rng(seed)
        d = self.cfg.d_model
        for name in [k for k in self.tensors if param_group(k) == "attn3d"]:
            a = (rng.standard_normal((d, rank)) / np.sqrt(d)).astype(np.float32)
            self.tensors[name + ".lora_a"] = Tensor(a, requires_grad=True)
            self.tensors[name + ".lora_b"] = Tensor(np.zeros((rank, d), np.float32),
                                                    requires_grad=True)

    def merge_lora(self) -> None:
        for name in [k for k in list(self.tensors) if k.endswith(".lora_a")]:
            base = name[:-len(".lora_a")]
            delta = self.tensors[name].data @ self.tensors[base + ".lora_b"].data
            self.tensors[base].data += delta.astype(self.tensors[base].dtype)
            del self.tensors[name], self.tensors[base + ".lora_b"]


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    d, dff, dp = cfg.d_model, cfg.d_ff, cfg.d_patch
    resid_scale = 1.0 / np.sqrt(2.0 * cfg.n_blocks)

    def mat(rows, cols, scale):
        return Tensor((rng.standard_normal((rows, cols)) * scale).astype(dtype),
                      requires_grad=True)

    def vec(n, value=0.0):
        return Tensor(np.full(n, value, dtype=dtype), requires_grad=True)

    t: dict[str, Tensor] = {
        "patch_embed.w": mat(dp, d, dp ** -0.5),
        "patch_embed.b": vec(d),
        "time_mlp.w1": mat(d, d, d ** -0.5),
        "time_mlp.b1": vec(d),
        "time_mlp.w2": mat(d, d, d ** -0.5),
        "time_mlp.b2": vec(d),
        "caption_embed.table": mat(cfg.vocab_size, d, 0.5),
        "final_norm.g": vec(d, 1.0),
        "head.w": Tensor(np.zeros((d, dp), dtype=dtype), requires_grad=True),
        "head.b": Tensor(np.zeros(dp, dtype=dtype), requires_grad=True),
    }
    for i in range(cfg.n_blocks):
        p = f"blocks.{i}."
        t[p + "norm1.g"] = vec(d, 1.0)
        t[p + "attn.wq"] = mat(d, d, d ** -0.5)
        t[p + "attn.wk"] = mat(d, d, d ** -0.5)
        t[p + "attn.wv"] = mat(d, d, d ** -0.5)
        t[p + "attn.wo"] = mat(d, d, d ** -0.5 * resid_scale)
        t[p + "norm2.g"] = vec(d, 1.0)
        t[p + "xattn.wq"] = mat(d, d, d ** -0.5)
        t[p + "xattn.wk"] = mat(d, d, d ** -0.5)
        t[p + "xattn.wv"] = mat(d, d, d ** -0.5)
        t[p + "xattn.wo"] = mat(d, d, d ** -0.5 * resid_scale)
        t[p + "norm3.g"] = vec(d, 1.0)
        t[p + "ffn.w1"] = mat(d, dff, d ** -0.5)
        t[p + "ffn.b1"] = vec(dff)
        t[p + "ffn.w2"] = mat(dff, d, dff ** -0.5 * resid_scale)
        t[p + "ffn.b2"] = vec(d)
    return ModelParams(t, cfg)


# -- dual cache ----------------------------------------------------------------

@dataclass
class LayerKV:
    global_k: Tensor | None = None       # [b, H, Ng, Dh], rotary already applied
    global_v: Tensor | None = None
    local: list = field(default_factory=list)   # [(chunk_id, k, v)]


class DualCache:
    """Per-layer KV memory: fixed global region plus a local ring buffer."""

    def __init__(self, cfg: ModelConfig, batch: int = 1):
        self.cfg = cfg
        self.batch = batch
        self.layers = [LayerKV() for _ in range(cfg.n_blocks)]
        self.phase = 0
        self.global_frames = 0
        self.global_provenance: list = []    # (shot_idx, frame_idx) tags for audits
        self._next_chunk_id = 0

    # occupancy in chunks, global rounded up
    def occupancy(self) -> tuple[int, int]:
        g = int(np.ceil(self.global_frames / self.cfg.chunk_frames)) if self.global_frames else 0
        return g, len(self.layers[0].local)

    def local_chunk_ids(self) -> list[int]:
        return [cid for cid, _, _ in self.layers[0].local]

    def append_local(self, per_layer_kv: list[tuple[Tensor, Tensor]]) -> int:
        if len(per_layer_kv) != len(self.layers):
            raise CacheError(f"{len(per_layer_kv)} layer KVs for {len(self.layers)} layers")
        cid = self._next_chunk_id
        self._next_chunk_id += 1
        for layer, (k, v) in zip(self.layers, per_layer_kv):
            layer.local.append((cid, k, v))
            if len(layer.local) > self.cfg.local_chunks:
                layer.local.pop(0)           # drop-oldest beyond capacity
        return cid

    def set_global(self, per_layer_kv: list[tuple[Tensor, Tensor]], n_frames: int,
                   provenance: list | None = None) -> None:
        cap = self.cfg.global_chunks * self.cfg.chunk_frames
        if n_frames > cap:
            raise CacheError(f"context of {n_frames} frames exceeds global capacity {cap}")
        for layer, (k, v) in zip(self.layers, per_layer_kv):
            layer.global_k, layer.global_v = k, v
        self.global_frames = n_frames
        self.global_provenance = list(provenance or [])

    def reset_local(self) -> None:
        for layer in self.layers:
            layer.local.clear()

    def assembled(self, li: int) -> tuple[Tensor | None, Tensor | None]:
        """Concatenated (k, v) of the visible cache for layer li."""
        layer = self.layers[li]
        ks, vs = [], []
        if layer.global_k is not None and self.global_frames > 0:
            ks.append(layer.global_k)
            vs.append(layer.global_v)
        for _, k, v in layer.local:
            ks.append(k)
            vs.append(v)
        if not ks:
            return None, None
        return concat(ks, axis=2), concat(vs, axis=2)

    def detach_all(self) -> None:
        """Cut gradient paths into every stored entry (shot-boundary rule)."""
        for layer in self.layers:
            if layer.global_k is not None:
                layer.global_k = layer.global_k.detach()
                layer.global_v = layer.global_v.detach()
            layer.local = [(c, k.detach(), v.detach()) for c, k, v in layer.local]


def cache_shot_boundary(cache: DualCache, context_kv: list[tuple[Tensor, Tensor]],
                        n_context_frames: int, provenance: list | None = None) -> DualCache:
    """Shot transition: replace the global region, clear the local ring,
    advance the phase counter by exactly one."""
    cache.set_global(context_kv, n_context_frames, provenance)
    cache.reset_local()
    cache.phase += 1
    return cache


# -- forward ---------------------------------------------------------------------

def time_features(t: np.ndarray, d: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal features of the diffusion time, [b, F, d]."""
    half = d // 2
    freqs = np.exp(np.linspace(np.log(1.0), np.log(1000.0), half))
    ang = np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).astype(dtype)


def per_frame_t(meta: FrameMeta, t_target: float | np.ndarray, batch: int) -> np.ndarray:
    """[b, F] diffusion times: 0 on context frames, t_target on targets."""
    t = np.zeros((batch, meta.n_frames), dtype=np.float32)
    tt = np.broadcast_to(np.asarray(t_target, dtype=np.float32), (batch,))
    t[:, ~meta.is_context] = tt[:, None]
    return t


def cross_attend(params: ModelParams, x: Tensor, cap_tokens: np.ndarray,
                 block: int) -> Tensor:
    """Per-frame cross-attention onto that frame's caption tokens.

    x: [b, F, s, d]; cap_tokens: int [b, F, n_cap]. Zero caption tokens is
    a no-op.
    """
    if cap_tokens.shape[-1] == 0:
        return x * 0.0
    if np.any(cap_tokens < 0) or np.any(cap_tokens >= params.cfg.vocab_size):
        raise CaptionError(f"caption token ids outside vocab {params.cfg.vocab_size}")
    p = f"blocks.{block}.xattn."
    emb = embedding(params["caption_embed.table"], cap_tokens)     # [b, F, n_cap, d]
    q = x @ params.eff(p + "wq")                                   # [b, F, s, d]
    k = emb @ params.eff(p + "wk")
    v = emb @ params.eff(p + "wv")
    scale = 1.0 / np.sqrt(params.cfg.d_model)
    logits = (q @ k.swapaxes(-1, -2)) * scale                      # [b, F, s, n_cap]
    attn = masked_softmax(logits)
    return (attn @ v) @ params.eff(p + "wo")


def _self_attention(params: ModelParams, x_flat: Tensor, block: int,
                    cos_q, sin_q, cos_k, sin_k,
                    token_mask: np.ndarray | None,
                    cache: DualCache | None):
    """One 3D attention layer over flattened tokens [b, N, d].

    Returns (output [b, N, d], (k_rot, v) of the new tokens).
    """
    cfg = params.cfg
    b, n, d = x_flat.shape
    h, dh = cfg.n_heads, cfg.head_dim
    p = f"blocks.{block}.attn."

    def heads(t):
        return t.reshape(b, n, h, dh).transpose((0, 2, 1, 3))      # [b, H, N, Dh]

    q = heads(x_flat @ params.eff(p + "wq"))
    k = heads(x_flat @ params.eff(p + "wk"))
    v = heads(x_flat @ params.eff(p + "wv"))
    q = apply_rope_tables(q, cos_q, sin_q)
    k = apply_rope_tables(k, cos_k, sin_k)

    if cache is not None:
        ck, cv = cache.assembled(block)
        if ck is not None:
            k_all = concat([ck, k], axis=2)
            v_all = concat([cv, v], axis=2)
        else:
            k_all, v_all = k, v
    else:
        k_all, v_all = k, v

    logits = (q @ k_all.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    attn = masked_softmax(logits, token_mask)
    out = attn @ v_all                                             # [b, H, N, Dh]
    out = out.transpose((0, 2, 1, 3)).reshape(b, n, d)
    return out @ params.eff(p + "wo"), (k, v)


def forward_tokens(params: ModelParams, seq: TokenSeq, t_frames: np.ndarray,
                   mask_mode: str, cap_tokens: np.ndarray,
                   cache: DualCache | None = None):
    """Run the block stack; returns (hidden [b, N, d], per-layer new-token KV)."""
    cfg = params.cfg
    b, F, s, dp = seq.data.shape
    if dp != cfg.d_patch or s != cfg.s_tokens:
        raise ShapeError(f"token shape {(s, dp)} vs config {(cfg.s_tokens, cfg.d_patch)}")

    x = seq.data @ params["patch_embed.w"] + params["patch_embed.b"]
    temb = time_features(t_frames, cfg.d_model, dtype=x.dtype)     # [b, F, d]
    t_hidden = Tensor(temb) @ params["time_mlp.w1"] + params["time_mlp.b1"]
    t_hidden = t_hidden.silu() @ params["time_mlp.w2"] + params["time_mlp.b2"]
    x = x + t_hidden.reshape(b, F, 1, cfg.d_model)

    cos, sin = rope_cos_sin(seq.meta, cfg.grid, cfg.head_dim, cfg.rope, dtype=x.dtype)

    if cache is None:
        frame_mask = build_mask(mask_mode, seq.meta, cfg.chunk_frames)
        token_mask = expand_mask(frame_mask, s)
        cos_k, sin_k = cos, sin
    else:
        if mask_mode != "block_causal":
            raise CacheError("cached forward requires the block_causal mask mode")
        token_mask = None                      # cache holds only visible entries
        cos_k, sin_k = cos, sin

    n = F * s
    x = x.reshape(b, n, cfg.d_model)
    new_kv = []
    for i in range(cfg.n_blocks):
        attn_out, kv = _self_attention(params, rms_norm(x, params[f"blocks.{i}.norm1.g"]),
                                       i, cos, sin, cos_k, sin_k, token_mask, cache)
        x = x + attn_out
        new_kv.append(kv)
        x_frames = x.reshape(b, F, s, cfg.d_model)
        xa = cross_attend(params, rms_norm(x_frames, params[f"blocks.{i}.norm2.g"]),
                          cap_tokens, i)
        x = x + xa.reshape(b, n, cfg.d_model)
        hidden = rms_norm(x, params[f"blocks.{i}.norm3.g"])
        hidden = (hidden @ params[f"blocks.{i}.ffn.w1"] + params[f"blocks.{i}.ffn.b1"]).silu()
        x = x + (hidden @ params[f"blocks.{i}.ffn.w2"] + params[f"blocks.{i}.ffn.b2"])
    return x, new_kv


def forward_velocity(params: ModelParams, x_input: TokenSeq, t_frames: np.ndarray,
                     mask_mode: str, cap_tokens: np.ndarray,
                     cache: DualCache | None = None, commit: bool = True) -> TokenSeq:
    """Predicted velocity for target frames.

    Without a cache, `x_input` holds context plus target frames and the mask
    mode decides visibility. With a cache, `x_input` holds only the new
    chunk; its keys/values are appended to the local ring after computation
    (suppressed via commit=False during intermediate denoise steps).
    """
    cfg = params.cfg
    b, F, s, _ = x_input.data.shape
    if cache is not None and x_input.meta.is_context.any():
        raise CacheError("cached forward expects target-only input frames")

    x, new_kv = forward_tokens(params, x_input, t_frames, mask_mode, cap_tokens, cache)
    x = rms_norm(x, params["final_norm.g"])
    vel = x @ params["head.w"] + params["head.b"]
    if not np.isfinite(vel.data).all():
        raise FloatingPointError("non-finite activations in velocity head")
    vel = vel.reshape(b, F, s, cfg.d_patch)

    if cache is not None and commit:
        cache.append_local(new_kv)

    keep = ~x_input.meta.is_context
    if keep.all():
        return TokenSeq(data=vel, meta=x_input.meta)
    idx = np.where(keep)[0]
    return TokenSeq(data=vel[:, idx], meta=x_input.meta.select(keep))


def encode_context_kv(params: ModelParams, ctx_seq: TokenSeq,
                      cap_tokens: np.ndarray) -> list[tuple[Tensor, Tensor]]:
    """Per-layer (k, v) of context frames, computed with context-only
    attention (exactly what those rows see in an uncached forward)."""
    b = ctx_seq.data.shape[0]
    t = np.zeros((b, ctx_seq.n_frames), dtype=np.float32)
    _, kv = forward_tokens(params, ctx_seq, t, "bidirectional", cap_tokens, cache=None)
    return kv


def caption_rows_from_script(script) -> np.ndarray:
    """Per-shot caption token rows: global caption followed by the shot's own.

    Rows must share one length (true by construction for generated captions).
    """
    rows = [list(script.global_caption) + list(s.caption) for s in script.shots]
    lengths = {len(r) for r in rows}
    if len(lengths) > 1:
        raise CaptionError(f"caption rows have mixed lengths {sorted(lengths)}")
    return np.asarray(rows, dtype=np.int64)


def caption_matrix(meta: FrameMeta, caption_rows: np.ndarray, batch: int) -> np.ndarray:
    """[b, F, n_cap] caption token ids resolved from per-frame caption_id.

    caption_rows is [n_shots, n_cap] shared across the batch, or
    [b, n_shots, n_cap] per item.
    """
    caption_rows = np.asarray(caption_rows)
    n_shots = caption_rows.shape[-2]
    if np.any(meta.caption_id < 0) or np.any(meta.caption_id >= n_shots):
        raise CaptionError(f"caption_id outside the script's {n_shots} shots")
    if caption_rows.ndim == 3:
        if caption_rows.shape[0] != batch:
            raise CaptionError(f"{caption_rows.shape[0]} caption tables for batch {batch}")
        return caption_rows[:, meta.caption_id]
    per_frame = caption_rows[meta.caption_id]                  # [F, n_cap]
    return np.broadcast_to(per_frame, (batch,) + per_frame.shape).copy()


# -- checkpoint io -------------------------------------------------------------

CKPT_MAGIC = b"NXSHOTCKPT\x00v0001"
assert len(CKPT_MAGIC) == 16


def save_checkpoint(path: str | Path, params: ModelParams, extra: dict | None = None) -> None:
    names = sorted(params.tensors)
    payload = {"model_config": params.cfg.to_dict(), "extra": extra or {}}
    blob = json.dumps(payload).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", 1))
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            data = params.tensors[name].data.astype("<f4")
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        if fh.read(16) != CKPT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != 1:
            raise ValueError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(n):
            (ln,) = struct.unpack("<H", fh.read(2))
            name = fh.read(ln).decode()
            (rank,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            count = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(dims).copy()
            tensors[name] = Tensor(data, requires_grad=True)
        (jl,) = struct.unpack("<I", fh.read(4))
        payload = json.loads(fh.read(jl).decode())
    cfg = ModelConfig.from_dict(payload["model_config"])
    return ModelParams(tensors, cfg), payload["extra"]
