"""Full segmentation network: conv stages at outer resolutions, hybrid
attention blocks at inner resolutions, all-scale fusion in place of skip
connections, and a sigmoid head. Includes parameter/MAC accounting.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .core import ShapeError, Tensor
from .core import functional as F
from .core import meter
from .nnblocks import (
    AttentionConfig,
    Conv2d,
    GlobalMultiScaleFusion,
    Module,
    PureConvBlock,
    TransNeXtBlock,
    Upsample,
    downsample,
)


@dataclass
class ModelConfig:
    """Architecture hyper-parameters.

    n1 pure-conv stages run at the outer resolutions, n2 hybrid stages at
    the inner ones; stage s uses 2**s * base_channels channels. The patch
    side must divide evenly through every stage.
    """
    n1: int = 1
    n2: int = 3
    base_channels: int = 32
    heads: int = 4
    subsample_k: int = 256
    patch: int = 128
    in_channels: int = 1
    out_channels: int = 1
    fusion_depth: int = 1

    def validate(self):
        if self.n1 < 1:
            raise ValueError(f"n1 must be >= 1, got {self.n1}")
        if self.n2 < 1:
            raise ValueError(f"n2 must be >= 1, got {self.n2}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        depth = self.n1 + self.n2
        if self.patch % (1 << depth):
            raise ValueError(
                f"patch {self.patch} not divisible by 2^(n1+n2) = {1 << depth}")
        for s in range(self.n1, depth):
            width = (1 << s) * self.base_channels
            if width % self.heads:
                raise ValueError(
                    f"stage {s} width {width} not divisible by {self.heads} heads")
        return self

    @property
    def stages(self) -> int:
        return self.n1 + self.n2

    def stage_channels(self, s: int) -> int:
        return (1 << s) * self.base_channels


class _HybridStage(Module):
    """Channel projection followed by a hybrid block (encoder or decoder)."""

    def __init__(self, rng, in_ch, out_ch, cfg: AttentionConfig):
        self.proj = Conv2d(rng, in_ch, out_ch, 1) if in_ch != out_ch else None
        self.block = TransNeXtBlock(rng, out_ch, cfg)

    def forward(self, x, kv=None):
        if self.proj is not None:
            x = self.proj(x)
        return self.block(x, kv=kv)


class VesselNext(Module):
    """U-shaped encoder/decoder over vessel probability maps."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        attn = AttentionConfig(heads=config.heads, subsample_k=config.subsample_k)
        S, C = config.stages, config.base_channels

        self.enc = []
        for s in range(S):
            width = config.stage_channels(s)
            prev = config.in_channels if s == 0 else config.stage_channels(s - 1)
            if s < config.n1:
                self.enc.append(PureConvBlock(rng, prev, width))
            else:
                self.enc.append(_HybridStage(rng, prev, width, attn))

        self.fusion = GlobalMultiScaleFusion(
            rng, [config.stage_channels(s) for s in range(S)], attn,
            depth=config.fusion_depth)

        self.dec_up = []
        self.dec = []
        for s in range(S - 2, -1, -1):
            width = config.stage_channels(s)
            self.dec_up.append(Upsample(rng, config.stage_channels(s + 1), width))
            if s >= config.n1:
                self.dec.append(_HybridStage(rng, width, width, attn))
            else:
                self.dec.append(PureConvBlock(rng, 2 * width, width))

        self.head = Conv2d(rng, C, config.out_channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels or \
                x.shape[2] != cfg.patch or x.shape[3] != cfg.patch:
            raise ShapeError(
                f"expected input (B, {cfg.in_channels}, {cfg.patch}, {cfg.patch}), got {x.shape}")
        feats = []
        h = x
        for s, stage in enumerate(self.enc):
            with meter.scoped(f"enc{s}"):
                if s > 0:
                    h = downsample(h)
                h = stage(h)
            feats.append(h)
        with meter.scoped("fusion"):
            fused = self.fusion(feats)
        d = fused[-1]
        for i, s in enumerate(range(cfg.stages - 2, -1, -1)):
            with meter.scoped(f"dec{s}"):
                d = self.dec_up[i](d)
                if s >= cfg.n1:
                    d = self.dec[i](d, kv=fused[s])
                else:
                    d = self.dec[i](F.concat([d, fused[s]], axis=1))
        with meter.scoped("head"):
            return F.sigmoid(self.head(d))


def build(config: ModelConfig, seed: int = 0) -> VesselNext:
    """Deterministically initialized network; same seed, same bits."""
    return VesselNext(config, seed=seed)


def forward(model: VesselNext, x: Tensor) -> Tensor:
    return model.forward(x)


# ---------------------------------------------------------------------------
# cost accounting


@dataclass
class CostReport:
    """Per-layer parameter and MAC totals for one forward pass.

    MACs count conv and matmul multiply-accumulates only. A conventional
    FLOPs figure is 2 * MACs; reports state this explicitly since the
    convention varies.
    """
    patch: int
    rows: list = field(default_factory=list)  # (layer, params, macs)

    @property
    def params(self) -> int:
        return sum(r[1] for r in self.rows)

    @property
    def macs(self) -> int:
        return sum(r[2] for r in self.rows)

    @property
    def flops(self) -> int:
        return 2 * self.macs

    def as_text(self) -> str:
        out = io.StringIO()
        out.write(f"cost report @ {self.patch}x{self.patch} input "
                  f"(FLOPs = 2 x MACs convention)\n")
        width = max(len(r[0]) for r in self.rows) if self.rows else 8
        out.write(f"{'layer':<{width}}  {'params':>12}  {'macs':>16}\n")
        for name, p, m in self.rows:
            out.write(f"{name:<{width}}  {p:>12}  {m:>16}\n")
        out.write(f"{'total':<{width}}  {self.params:>12}  {self.macs:>16}\n")
        out.write(f"total: {self.params / 1e6:.2f} M params, "
                  f"{self.flops / 1e9:.2f} GFLOPs\n")
        return out.getvalue()

    def as_csv(self) -> str:
        lines = ["layer,params,macs"]
        lines += [f"{name},{p},{m}" for name, p, m in self.rows]
        lines.append(f"total,{self.params},{self.macs}")
        return "\n".join(lines) + "\n"


def count_cost(model: VesselNext) -> CostReport:
    """Exact parameter totals plus metered MACs for a batch-1 forward."""
    cfg = model.config
    with meter.MacCounter() as counter:
        model.forward(Tensor(np.zeros((1, cfg.in_channels, cfg.patch, cfg.patch))))

    named = []
    for s, stage in enumerate(model.enc):
        named.append((f"enc{s}", stage))
    named.append(("fusion", model.fusion))
    for i, s in enumerate(range(cfg.stages - 2, -1, -1)):
        named.append((f"dec{s}", _Pair(model.dec_up[i], model.dec[i])))
    named.append(("head", model.head))

    report = CostReport(patch=cfg.patch)
    for name, module in named:
        report.rows.append((name, module.param_count(), counter.by_scope.get(name, 0)))
    assert report.macs == counter.total, "scope rows must partition the forward"
    return report


class _Pair(Module):
    def __init__(self, a, b):
        self.a, self.b = a, b
