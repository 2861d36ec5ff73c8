"""Architectural units: conv stages, sub-sampled attention, hybrid blocks,
and the all-scale token-fusion module that replaces skip connections.

Every block is a pure function of (input, parameters). Parameters are
float64 tensors whose values are exactly float32-representable, so
checkpoints round-trip bit-identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ShapeError, Tensor
from .core import functional as F


# ---------------------------------------------------------------------------
# parameter containers


def _param(values) -> Tensor:
    # round through float32: keeps every parameter exactly representable
    # in checkpoint storage
    arr = np.asarray(values, dtype=np.float32).astype(np.float64)
    return Tensor(arr, requires_grad=True)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return _param(rng.uniform(-bound, bound, shape))


class Module:
    """Minimal parameter container; submodules register by attribute."""

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(val, Tensor):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{path}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{path}.{i}", item

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def param_count(self) -> int:
        return int(np.sum([t.size for t in self.parameters()]).item()) if self.parameters() else 0

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, rng, in_ch: int, out_ch: int, kernel: int,
                 stride: int = 1, pad: int = 0, groups: int = 1):
        fan_in = (in_ch // groups) * kernel * kernel
        self.w = kaiming_uniform(rng, (out_ch, in_ch // groups, kernel, kernel), fan_in)
        self.b = _param(np.zeros(out_ch))
        self.stride, self.pad, self.groups = stride, pad, groups

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad,
                        groups=self.groups)


class LayerNorm(Module):
    """Channel-axis normalization with learned affine."""

    def __init__(self, channels: int, eps: float = 1e-6):
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, eps=self.eps)

    def forward_nchw(self, x: Tensor) -> Tensor:
        """Apply over the channel axis of a (B, C, H, W) map."""
        h = F.transpose(x, (0, 2, 3, 1))
        h = F.layer_norm(h, self.gamma, self.beta, eps=self.eps)
        return F.transpose(h, (0, 3, 1, 2))


class Linear(Module):
    def __init__(self, rng, in_features: int, out_features: int):
        self.w = kaiming_uniform(rng, (in_features, out_features), in_features)
        self.b = _param(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        return F.add(F.matmul(x, self.w), self.b)


# ---------------------------------------------------------------------------
# attention


@dataclass
class AttentionConfig:
    """Head layout and key/value reduction target.

    subsample_k is the token count the key/value maps are reduced to; it is
    clamped to n at call time when the map is already small, in which case
    the reduction is skipped entirely (identity sub-sampling).
    """
    heads: int = 4
    subsample_k: int = 256
    head_dim: int | None = None
    variant: str = "self"

    def __post_init__(self):
        if self.heads < 1:
            raise ValueError(f"heads must be >= 1, got {self.heads}")
        if self.subsample_k < 1:
            raise ValueError(f"subsample_k must be >= 1, got {self.subsample_k}")
        if self.head_dim is not None and self.head_dim < 1:
            raise ValueError(f"head_dim must be >= 1, got {self.head_dim}")
        if self.variant not in ("self", "cross"):
            raise ValueError(f"variant must be 'self' or 'cross', got {self.variant!r}")

    def dim_per_head(self, channels: int) -> int:
        if channels % self.heads:
            raise ShapeError(f"channels {channels} not divisible by {self.heads} heads")
        d = channels // self.heads
        if self.head_dim is not None and self.head_dim != d:
            raise ShapeError(
                f"head_dim {self.head_dim} inconsistent with channels {channels} / heads {self.heads}")
        return d


def _attend_tokens(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention over token sequences.

    q: (B, n, C); k, v: (B, m, C) with C == heads * d. Softmax runs over the
    key axis, giving an (n, m) score map per head and O(n m d) cost.
    """
    B, n, C = q.shape
    m = k.shape[1]
    d = C // heads
    q4 = F.transpose(F.reshape(q, (B, n, heads, d)), (0, 2, 1, 3))
    k4 = F.transpose(F.reshape(k, (B, m, heads, d)), (0, 2, 1, 3))
    v4 = F.transpose(F.reshape(v, (B, m, heads, d)), (0, 2, 1, 3))
    scores = F.mul(F.matmul(q4, F.transpose(k4, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    weights = F.softmax(scores, axis=-1)
    out = F.matmul(weights, v4)
    return F.reshape(F.transpose(out, (0, 2, 1, 3)), (B, n, C))


def _map_to_tokens(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    return F.transpose(F.reshape(x, (B, C, H * W)), (0, 2, 1))


def _tokens_to_map(t: Tensor, h: int, w: int) -> Tensor:
    B, _, C = t.shape
    return F.reshape(F.transpose(t, (0, 2, 1)), (B, C, h, w))


def _square_side(k_target: int, n: int) -> int:
    # largest square not exceeding the source token count
    return max(1, min(math.isqrt(n), math.ceil(math.sqrt(k_target))))


class EfficientMHSA(Module):
    """Multi-head self-attention with sub-sampled keys and values.

    Queries, keys and values come from 1x1 convolutions. When the map holds
    more than subsample_k tokens, keys and values each pass through their
    own 1x1 projection and a bilinear resize down to roughly subsample_k
    tokens; otherwise the reduction is the identity. A second input selects
    the cross variant: queries from x, keys/values from kv.
    """

    def __init__(self, rng, channels: int, cfg: AttentionConfig):
        cfg.dim_per_head(channels)
        self.cfg = cfg
        self.channels = channels
        self.to_q = Conv2d(rng, channels, channels, 1)
        self.to_k = Conv2d(rng, channels, channels, 1)
        self.to_v = Conv2d(rng, channels, channels, 1)
        self.sub_k = Conv2d(rng, channels, channels, 1)
        self.sub_v = Conv2d(rng, channels, channels, 1)
        self.proj = Conv2d(rng, channels, channels, 1)

    def forward(self, x: Tensor, kv: Tensor | None = None) -> Tensor:
        kv_src = x if kv is None else kv
        if kv_src.shape[0] != x.shape[0] or kv_src.shape[1] != x.shape[1]:
            raise ShapeError(
                f"query map {x.shape} and key/value map {kv_src.shape} must share batch and channels")
        if x.shape[1] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {x.shape[1]}")
        B, C, Hq, Wq = x.shape
        hk, wk = kv_src.shape[2], kv_src.shape[3]

        q_map = self.to_q(x)
        k_map = self.to_k(kv_src)
        v_map = self.to_v(kv_src)

        n_kv = hk * wk
        if self.cfg.subsample_k < n_kv:
            side = _square_side(self.cfg.subsample_k, n_kv)
            k_map = F.bilinear_resize(self.sub_k(k_map), side, side)
            v_map = F.bilinear_resize(self.sub_v(v_map), side, side)

        out = _attend_tokens(_map_to_tokens(q_map), _map_to_tokens(k_map),
                             _map_to_tokens(v_map), self.cfg.heads)
        return self.proj(_tokens_to_map(out, Hq, Wq))


def efficient_mhsa(x: Tensor, attention: EfficientMHSA) -> Tensor:
    return attention(x)


def cross_mhsa(q_src: Tensor, kv_src: Tensor, attention: EfficientMHSA) -> Tensor:
    """Queries from q_src, keys/values from kv_src; output matches q_src."""
    return attention(q_src, kv=kv_src)


# ---------------------------------------------------------------------------
# blocks


class PureConvBlock(Module):
    """Two (3x3 conv, channel norm, gelu) stages; resolution preserved."""

    def __init__(self, rng, in_ch: int, out_ch: int):
        self.conv1 = Conv2d(rng, in_ch, out_ch, 3, pad=1)
        self.ln1 = LayerNorm(out_ch)
        self.conv2 = Conv2d(rng, out_ch, out_ch, 3, pad=1)
        self.ln2 = LayerNorm(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        h = F.gelu(self.ln1.forward_nchw(self.conv1(x)))
        return F.gelu(self.ln2.forward_nchw(self.conv2(h)))


def pure_conv_block(x: Tensor, block: PureConvBlock) -> Tensor:
    return block(x)


class TransNeXtBlock(Module):
    """Depthwise-conv bottleneck + attention + token MLP, three residuals.

    Bottom to top: x + (dw7x7 -> norm -> 1x1 C->4C -> gelu -> 1x1 4C->C),
    then y + MHSA(norm(y)), then z + (norm -> 1x1 C->4C -> gelu -> 1x1
    4C->C). The expand/contract shape avoids squeezing information through
    a narrow projection. Shape preserved throughout.
    """

    def __init__(self, rng, channels: int, cfg: AttentionConfig):
        C = channels
        self.dw = Conv2d(rng, C, C, 7, pad=3, groups=C)
        self.ln1 = LayerNorm(C)
        self.pw1 = Conv2d(rng, C, 4 * C, 1)
        self.pw2 = Conv2d(rng, 4 * C, C, 1)
        self.ln2 = LayerNorm(C)
        self.attn = EfficientMHSA(rng, C, cfg)
        self.ln3 = LayerNorm(C)
        self.pw3 = Conv2d(rng, C, 4 * C, 1)
        self.pw4 = Conv2d(rng, 4 * C, C, 1)

    def forward(self, x: Tensor, kv: Tensor | None = None) -> Tensor:
        h = self.dw(x)
        h = self.ln1.forward_nchw(h)
        h = self.pw2(F.gelu(self.pw1(h)))
        y = F.add(x, h)

        a = self.attn(self.ln2.forward_nchw(y), kv=kv)
        z = F.add(y, a)

        m = self.ln3.forward_nchw(z)
        m = self.pw4(F.gelu(self.pw3(m)))
        return F.add(z, m)


def transnext_block(x: Tensor, block: TransNeXtBlock, kv: Tensor | None = None) -> Tensor:
    return block(x, kv=kv)


def downsample(x: Tensor) -> Tensor:
    """Halve the spatial extent with a 2x2 max pool."""
    return F.maxpool2x2(x)


class Upsample(Module):
    """Double the spatial extent bilinearly, then 1x1 conv for channels."""

    def __init__(self, rng, in_ch: int, out_ch: int):
        self.proj = Conv2d(rng, in_ch, out_ch, 1)

    def forward(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        return self.proj(F.bilinear_resize(x, 2 * H, 2 * W))


def upsample(x: Tensor, module: Upsample) -> Tensor:
    return module(x)


# ---------------------------------------------------------------------------
# global multi-scale fusion


class TokenFusionBlock(Module):
    """One transformer block over a multi-scale token sequence.

    Pre-norm attention and MLP with residuals. Key/value reduction happens
    per scale: each scale's chunk folds back to its map, resizes by a
    common linear factor, and the reduced chunks re-concatenate. Keeping
    the reduction per scale makes the block equivariant to scale order.
    """

    def __init__(self, rng, width: int, cfg: AttentionConfig):
        cfg.dim_per_head(width)
        self.cfg = cfg
        self.ln1 = LayerNorm(width)
        self.to_q = Linear(rng, width, width)
        self.to_k = Linear(rng, width, width)
        self.to_v = Linear(rng, width, width)
        self.proj = Linear(rng, width, width)
        self.ln2 = LayerNorm(width)
        self.mlp1 = Linear(rng, width, 4 * width)
        self.mlp2 = Linear(rng, 4 * width, width)

    def _reduce(self, tokens: Tensor, shapes) -> Tensor:
        total = tokens.shape[1]
        k_target = self.cfg.subsample_k
        if k_target >= total:
            return tokens
        factor = math.sqrt(k_target / total)
        chunks, start = [], 0
        for h, w in shapes:
            n_i = h * w
            chunk = F.narrow(tokens, 1, start, n_i)
            start += n_i
            rh = max(1, round(h * factor))
            rw = max(1, round(w * factor))
            if (rh, rw) != (h, w):
                chunk = _map_to_tokens(F.bilinear_resize(_tokens_to_map(chunk, h, w), rh, rw))
            chunks.append(chunk)
        return F.concat(chunks, axis=1)

    def forward(self, tokens: Tensor, shapes) -> Tensor:
        t = self.ln1(tokens)
        q = self.to_q(t)
        k = self._reduce(self.to_k(t), shapes)
        v = self._reduce(self.to_v(t), shapes)
        attn = _attend_tokens(q, k, v, self.cfg.heads)
        tokens = F.add(tokens, self.proj(attn))
        m = self.mlp2(F.gelu(self.mlp1(self.ln2(tokens))))
        return F.add(tokens, m)


class GlobalMultiScaleFusion(Module):
    """All-to-all fusion across every encoder scale.

    Each scale projects to a common token width, flattens, and gains a
    learned per-scale embedding; the concatenated sequence passes through
    `depth` transformer blocks; chunks then fold back to their original
    shapes and project to their original channel counts. Output shapes
    equal input shapes exactly.
    """

    def __init__(self, rng, channel_list, cfg: AttentionConfig, depth: int = 1):
        if len(channel_list) < 1:
            raise ShapeError("fusion needs at least one scale")
        self.channel_list = list(channel_list)
        self.width = max(channel_list)
        self.proj_in = [Conv2d(rng, c, self.width, 1) for c in channel_list]
        self.scale_emb = [_param(rng.normal(0.0, 0.02, self.width)) for _ in channel_list]
        self.blocks = [TokenFusionBlock(rng, self.width, cfg) for _ in range(depth)]
        self.proj_out = [Conv2d(rng, self.width, c, 1) for c in channel_list]

    def forward(self, maps) -> list[Tensor]:
        maps = list(maps)
        if not maps:
            raise ShapeError("fusion received an empty scale list")
        if len(maps) != len(self.channel_list):
            raise ShapeError(
                f"expected {len(self.channel_list)} scales, got {len(maps)}")
        batch = maps[0].shape[0]
        shapes = []
        token_chunks = []
        for i, m in enumerate(maps):
            if m.shape[0] != batch:
                raise ShapeError(f"inconsistent batch sizes: {batch} vs {m.shape[0]}")
            if m.shape[1] != self.channel_list[i]:
                raise ShapeError(
                    f"scale {i} expected {self.channel_list[i]} channels, got {m.shape[1]}")
            shapes.append((m.shape[2], m.shape[3]))
            tok = _map_to_tokens(self.proj_in[i](m))
            token_chunks.append(F.add(tok, self.scale_emb[i]))
        tokens = F.concat(token_chunks, axis=1) if len(token_chunks) > 1 else token_chunks[0]
        for block in self.blocks:
            tokens = block(tokens, shapes)
        outs, start = [], 0
        for i, (h, w) in enumerate(shapes):
            chunk = F.narrow(tokens, 1, start, h * w)
            start += h * w
            outs.append(self.proj_out[i](_tokens_to_map(chunk, h, w)))
        return outs


def gmsf(maps, fusion: GlobalMultiScaleFusion) -> list[Tensor]:
    return fusion(maps)
