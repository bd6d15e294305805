"""Fixed-weight feature networks used as perceptual losses and for evaluation.

The default backbone follows the LPIPS recipe with every pooling layer being an
average pool: stages of conv -> SiLU -> 2x avg-pool, each stage tapped.
Features are unit-normalised over channels at every location before being
compared.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from casdm.netcore import ad
from casdm.netcore.autodiff import Tensor
from casdm.netcore.params import ContainerFormatError, ParamStore, read_container, truncated_normal, write_container

NORM_EPS = 1e-10
BACKBONES = ("lpips_avgpool", "plain_cnn")


@dataclass(frozen=True)
class MetricTransform:
    """Bilinear resize to ``size`` x ``size``, then map [-1, 1] -> [0, 1]."""

    size: int = 32

    def __call__(self, x):
        x = x if isinstance(x, Tensor) else ad.constant(np.asarray(x, dtype=np.float32))
        x = ad.resize_bilinear(x, self.size, self.size)
        return (x + 1.0) * 0.5

    @staticmethod
    def inverse_values(y):
        return 2.0 * y - 1.0


@dataclass(frozen=True)
class ExtractorSpec:
    in_channels: int
    widths: tuple[int, ...] = (16, 32, 32, 64)
    activation: str = "silu"
    taps: tuple[int, ...] | None = None  # None -> every stage

    @property
    def tap_indices(self) -> tuple[int, ...]:
        return tuple(range(len(self.widths))) if self.taps is None else self.taps


class FeatureExtractor:
    """Frozen conv feature network. Weights are read-only arrays."""

    pooling = "avg"

    def __init__(self, spec: ExtractorSpec, weights: ParamStore, ident: str):
        self.spec = spec
        self.ident = ident
        self.weights = weights
        for arr in weights.values():
            arr.setflags(write=False)
        self._tensors = weights.tensors(requires_grad=False)

    @property
    def num_stages(self) -> int:
        return len(self.spec.widths)

    def min_resolution(self) -> int:
        return 2**self.num_stages

    def check_resolution(self, size: int) -> None:
        m = self.min_resolution()
        if size < m or size % m:
            raise ValueError(
                f"resolution {size} incompatible with a {self.num_stages}-stage extractor "
                f"(needs a positive multiple of {m})"
            )

    def extract(self, x) -> list[Tensor]:
        if not isinstance(x, Tensor):
            x = ad.constant(np.asarray(x, dtype=np.float32))
        if x.ndim != 4 or x.shape[-1] != self.spec.in_channels:
            raise ValueError(f"extractor expects NHWC with {self.spec.in_channels} channels, got {x.shape}")
        if x.shape[1] != x.shape[2]:
            raise ValueError(f"extractor expects square images, got {x.shape[1:3]}")
        self.check_resolution(x.shape[1])
        act = ad.silu if self.spec.activation == "silu" else ad.relu
        taps = set(self.spec.tap_indices)
        feats: list[Tensor] = []
        h = x
        for i in range(self.num_stages):
            h = ad.conv2d(h, self._tensors[f"stage{i}.w"], self._tensors[f"stage{i}.b"])
            h = ad.avg_pool2(act(h))
            if i in taps:
                feats.append(h)
        return feats


def extract_features(x, extractor: FeatureExtractor) -> list[Tensor]:
    return extractor.extract(x)


def unit_normalize(f: Tensor) -> Tensor:
    norm = ad.sqrt(ad.sum(ad.square(f), axis=-1, keepdims=True) + NORM_EPS)
    return f / norm


def feature_distance(feats_a: Sequence[Tensor], feats_b: Sequence[Tensor]) -> Tensor:
    """Sum over taps of the location-averaged squared distance of unit-normalised features."""
    if len(feats_a) != len(feats_b):
        raise ValueError(f"tap count mismatch: {len(feats_a)} vs {len(feats_b)}")
    total = None
    for fa, fb in zip(feats_a, feats_b):
        if fa.shape != fb.shape:
            raise ValueError(f"tap shape mismatch: {fa.shape} vs {fb.shape}")
        d = ad.sum(ad.square(unit_normalize(fa) - unit_normalize(fb)), axis=-1)
        term = ad.mean(d)
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# construction and registry


def seeded_extractor(spec: ExtractorSpec, seed: int, ident: str) -> FeatureExtractor:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), *b"metricfn"]))
    store = ParamStore(seed=seed)
    cin = spec.in_channels
    for i, cout in enumerate(spec.widths):
        store[f"stage{i}.w"] = truncated_normal(rng, (3, 3, cin, cout), std=np.sqrt(2.0 / (9 * cin)))
        store[f"stage{i}.b"] = truncated_normal(rng, (cout,), std=0.1)
        cin = cout
    return FeatureExtractor(spec, store, ident)


def save_extractor(path: str | Path, extractor: FeatureExtractor) -> None:
    write_container(path, dict(extractor.weights.items()))


def load_weight_file(path: str | Path, in_channels: int | None = None) -> FeatureExtractor:
    arrays = read_container(path)
    store = ParamStore()
    widths: list[int] = []
    cin = None
    i = 0
    while f"stage{i}.w" in arrays:
        w = arrays[f"stage{i}.w"]
        if w.ndim != 4 or w.shape[0] != 3 or w.shape[1] != 3:
            raise ContainerFormatError(f"stage{i}.w", f"expected a (3, 3, cin, cout) kernel, got {w.shape}")
        if cin is not None and w.shape[2] != cin:
            raise ContainerFormatError(f"stage{i}.w", f"input channels {w.shape[2]} do not chain from {cin}")
        b = arrays.get(f"stage{i}.b")
        if b is None:
            raise ContainerFormatError(f"stage{i}.b", "missing bias")
        if b.shape != (w.shape[3],):
            raise ContainerFormatError(f"stage{i}.b", f"expected shape ({w.shape[3]},), got {b.shape}")
        store[f"stage{i}.w"], store[f"stage{i}.b"] = w, b
        widths.append(int(w.shape[3]))
        cin = int(w.shape[3])
        i += 1
    if not widths:
        raise ContainerFormatError("stage0.w", f"no stages found in {path}")
    extra = sorted(set(arrays) - set(store.keys()))
    if extra:
        raise ContainerFormatError(extra[0], "unexpected entry")
    cin0 = int(store["stage0.w"].shape[2])
    if in_channels is not None and cin0 != in_channels:
        raise ContainerFormatError("stage0.w", f"expects {cin0} input channels, images have {in_channels}")
    return FeatureExtractor(ExtractorSpec(in_channels=cin0, widths=tuple(widths)), store, f"file:{path}")


def load_extractor(backbone: str, in_channels: int, seed: int = 0) -> FeatureExtractor:
    """Registry: ``lpips_avgpool``, ``plain_cnn`` or ``file:<path>``."""
    if backbone == "lpips_avgpool":
        return seeded_extractor(ExtractorSpec(in_channels), seed, f"lpips_avgpool/seed={seed}")
    if backbone == "plain_cnn":
        spec = ExtractorSpec(in_channels, widths=(16, 32, 64), activation="relu", taps=(2,))
        return seeded_extractor(spec, seed, f"plain_cnn/seed={seed}")
    if backbone.startswith("file:"):
        return load_weight_file(backbone[len("file:") :], in_channels)
    raise ValueError(f"unknown metric backbone {backbone!r}; expected one of {BACKBONES} or file:<path>")


def weights_snapshot(extractor: FeatureExtractor) -> Mapping[str, bytes]:
    return {k: v.tobytes() for k, v in extractor.weights.items()}
