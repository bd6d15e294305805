"""Small conditional image networks built on :mod:`casdm.netcore`.

Each network is a plain description object: ``init(rng)`` returns a
:class:`ParamStore`, ``__call__(p, x, t)`` runs the forward pass with ``p``
a mapping of parameter path -> graph tensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from casdm.netcore import ad
from casdm.netcore.autodiff import Tensor
from casdm.netcore.params import ParamStore, fan_in_init

Params = Mapping[str, Tensor]


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding of integer steps, shape (N, dim), float32."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros_like(emb[:, :1])], axis=-1)
    return emb.astype(np.float32)


def norm_groups(channels: int, max_groups: int = 8) -> int:
    return math.gcd(channels, max_groups)


# ---------------------------------------------------------------------------
# layers


class Layer:
    def shapes(self) -> Iterator[tuple[str, tuple[int, ...], str]]:
        raise NotImplementedError


class Conv(Layer):
    def __init__(self, name: str, cin: int, cout: int, k: int = 3, zero: bool = False):
        self.name, self.cin, self.cout, self.k, self.zero = name, cin, cout, k, zero

    def shapes(self):
        yield f"{self.name}.w", (self.k, self.k, self.cin, self.cout), "zero" if self.zero else "fan_in"
        yield f"{self.name}.b", (self.cout,), "zero"

    def __call__(self, p: Params, x: Tensor) -> Tensor:
        return ad.conv2d(x, p[f"{self.name}.w"], p[f"{self.name}.b"])


class Dense(Layer):
    def __init__(self, name: str, din: int, dout: int):
        self.name, self.din, self.dout = name, din, dout

    def shapes(self):
        yield f"{self.name}.w", (self.din, self.dout), "fan_in"
        yield f"{self.name}.b", (self.dout,), "zero"

    def __call__(self, p: Params, x: Tensor) -> Tensor:
        return ad.linear(x, p[f"{self.name}.w"], p[f"{self.name}.b"])


class GroupNorm(Layer):
    def __init__(self, name: str, channels: int):
        self.name, self.channels = name, channels
        self.groups = norm_groups(channels)

    def shapes(self):
        yield f"{self.name}.g", (self.channels,), "one"
        yield f"{self.name}.b", (self.channels,), "zero"

    def __call__(self, p: Params, x: Tensor) -> Tensor:
        return ad.group_norm(x, self.groups, p[f"{self.name}.g"], p[f"{self.name}.b"])


class ResBlock(Layer):
    def __init__(self, name: str, cin: int, cout: int, temb: int):
        self.norm1 = GroupNorm(f"{name}.norm1", cin)
        self.conv1 = Conv(f"{name}.conv1", cin, cout)
        self.temb = Dense(f"{name}.temb", temb, cout)
        self.norm2 = GroupNorm(f"{name}.norm2", cout)
        self.conv2 = Conv(f"{name}.conv2", cout, cout)
        self.skip = Conv(f"{name}.skip", cin, cout, k=1) if cin != cout else None

    def shapes(self):
        for layer in (self.norm1, self.conv1, self.temb, self.norm2, self.conv2, self.skip):
            if layer is not None:
                yield from layer.shapes()

    def __call__(self, p: Params, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(p, ad.silu(self.norm1(p, x)))
        e = self.temb(p, ad.silu(emb))
        h = h + ad.reshape(e, (e.shape[0], 1, 1, e.shape[1]))
        h = self.conv2(p, ad.silu(self.norm2(p, h)))
        return (x if self.skip is None else self.skip(p, x)) + h


class SelfAttention(Layer):
    def __init__(self, name: str, channels: int):
        self.channels = channels
        self.norm = GroupNorm(f"{name}.norm", channels)
        self.qkv = Conv(f"{name}.qkv", channels, 3 * channels, k=1)
        self.proj = Conv(f"{name}.proj", channels, channels, k=1)

    def shapes(self):
        for layer in (self.norm, self.qkv, self.proj):
            yield from layer.shapes()

    def __call__(self, p: Params, x: Tensor) -> Tensor:
        n, h, w, c = x.shape
        qkv = ad.reshape(self.qkv(p, self.norm(p, x)), (n, h * w, 3 * c))
        q, k, v = qkv[:, :, :c], qkv[:, :, c : 2 * c], qkv[:, :, 2 * c :]
        att = ad.softmax(ad.matmul(q, ad.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(c)), axis=-1)
        out = ad.reshape(ad.matmul(att, v), (n, h, w, c))
        return x + self.proj(p, out)


# ---------------------------------------------------------------------------
# networks


@dataclass(frozen=True)
class NetworkSpec:
    in_channels: int
    out_channels: int
    base_channels: int = 32
    blocks: int = 2
    levels: int = 2
    attention: tuple[bool, ...] = field(default_factory=tuple)
    temb_dim: int = 0  # 0 -> 4 * base_channels
    fixed_resolution: bool = False
    zero_out: bool = False

    @property
    def time_dim(self) -> int:
        return self.temb_dim or 4 * self.base_channels

    def level_channels(self, level: int) -> int:
        return self.base_channels * min(2**level, 4)


class UNet:
    """Down/up path with per-level skip concatenation and a time-embedding MLP.

    With ``fixed_resolution`` the pooling, upsampling and attention are all
    dropped, leaving a same-size CNN with identical block structure.
    """

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        s = spec
        td = s.time_dim
        self.t1 = Dense("time.0", s.base_channels, td)
        self.t2 = Dense("time.1", td, td)
        self.conv_in = Conv("conv_in", s.in_channels, s.base_channels)
        self.down: list[list[Layer]] = []
        ch = s.base_channels
        skip_ch: list[int] = []
        for lvl in range(s.levels):
            out = s.level_channels(lvl)
            blocks: list[Layer] = []
            for b in range(s.blocks):
                blocks.append(ResBlock(f"down.{lvl}.{b}", ch, out, td))
                ch = out
                if self._attn(lvl):
                    blocks.append(SelfAttention(f"down.{lvl}.{b}.attn", ch))
            self.down.append(blocks)
            skip_ch.append(ch)
        self.mid = ResBlock("mid", ch, ch, td)
        self.up: list[list[Layer]] = []
        for lvl in reversed(range(s.levels)):
            out = s.level_channels(lvl)
            blocks = []
            cin = ch + skip_ch[lvl]
            for b in range(s.blocks):
                blocks.append(ResBlock(f"up.{lvl}.{b}", cin, out, td))
                cin = out
                if self._attn(lvl):
                    blocks.append(SelfAttention(f"up.{lvl}.{b}.attn", out))
            ch = out
            self.up.append(blocks)
        self.norm_out = GroupNorm("norm_out", ch)
        self.conv_out = Conv("conv_out", ch, s.out_channels, zero=s.zero_out)

    def _attn(self, level: int) -> bool:
        a = self.spec.attention
        return (not self.spec.fixed_resolution) and level < len(a) and bool(a[level])

    def layers(self) -> Iterator[Layer]:
        yield self.t1
        yield self.t2
        yield self.conv_in
        for blocks in self.down:
            yield from blocks
        yield self.mid
        for blocks in self.up:
            yield from blocks
        yield self.norm_out
        yield self.conv_out

    def param_shapes(self) -> list[tuple[str, tuple[int, ...], str]]:
        return [s for layer in self.layers() for s in layer.shapes()]

    def init(self, rng: np.random.Generator) -> ParamStore:
        store = ParamStore()
        for name, shape, kind in self.param_shapes():
            if kind == "fan_in":
                store[name] = fan_in_init(rng, shape)
            elif kind == "one":
                store[name] = np.ones(shape, dtype=np.float32)
            else:
                store[name] = np.zeros(shape, dtype=np.float32)
        return store

    def __call__(self, p: Params, x: Tensor, t) -> Tensor:
        s = self.spec
        if x.ndim != 4 or x.shape[-1] != s.in_channels:
            raise ValueError(f"expected NHWC input with {s.in_channels} channels, got {x.shape}")
        down_factor = 1 if s.fixed_resolution else 2 ** (s.levels - 1)
        if x.shape[1] % down_factor or x.shape[2] % down_factor:
            raise ValueError(f"spatial size {x.shape[1:3]} not divisible by {down_factor}")
        t = np.broadcast_to(np.asarray(t), (x.shape[0],))
        temb = ad.constant(timestep_embedding(t, s.base_channels).astype(x.dtype))
        emb = self.t2(p, ad.silu(self.t1(p, temb)))

        h = self.conv_in(p, x)
        skips = []
        for lvl, blocks in enumerate(self.down):
            for layer in blocks:
                h = layer(p, h, emb) if isinstance(layer, ResBlock) else layer(p, h)
            skips.append(h)
            if lvl < s.levels - 1 and not s.fixed_resolution:
                h = ad.avg_pool2(h)
        h = self.mid(p, h, emb)
        for i, blocks in enumerate(self.up):
            lvl = s.levels - 1 - i
            if lvl < s.levels - 1 and not s.fixed_resolution:
                h = ad.upsample2(h)
            h = ad.concat([h, skips[lvl]], axis=-1)
            for layer in blocks:
                h = layer(p, h, emb) if isinstance(layer, ResBlock) else layer(p, h)
        return self.conv_out(p, ad.silu(self.norm_out(p, h)))
