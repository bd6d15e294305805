"""Datasets, the ``CDT1`` raw tensor container, and seeded batch iteration."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from casdm.netcore.params import ContainerFormatError

TENSOR_MAGIC = b"CDT1"
_U64 = struct.Struct("<Q")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
SYNTHETIC_KINDS = ("synthetic_gaussian", "synthetic_patterns")


# ---------------------------------------------------------------------------
# tensor container


def save_tensor(path: str | Path, tensor: np.ndarray) -> None:
    arr = np.ascontiguousarray(tensor, dtype="<f4")
    head = bytearray(TENSOR_MAGIC) + _U64.pack(arr.ndim)
    for d in arr.shape:
        head += _U64.pack(d)
    with open(path, "wb") as fh:
        fh.write(bytes(head))
        fh.write(arr.tobytes())


def load_tensor(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != TENSOR_MAGIC:
        raise ContainerFormatError("magic", f"expected {TENSOR_MAGIC!r} in {path}")
    if len(buf) < 12:
        raise ContainerFormatError("rank", f"truncated header in {path}")
    rank = _U64.unpack_from(buf, 4)[0]
    if rank > 8:
        raise ContainerFormatError("rank", f"implausible rank {rank}")
    start = 12 + 8 * rank
    if len(buf) < start:
        raise ContainerFormatError("dims", f"truncated header in {path}")
    dims = tuple(_U64.unpack_from(buf, 12 + 8 * i)[0] for i in range(rank))
    expected = int(np.prod(dims, dtype=np.int64)) * 4
    if len(buf) - start != expected:
        raise ContainerFormatError(
            "payload", f"dims {dims} need {expected} bytes, file has {len(buf) - start}"
        )
    return np.frombuffer(buf, dtype="<f4", offset=start).reshape(dims).astype(np.float32)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    images: np.ndarray  # (n, H, W, C) float32 in [-1, 1]
    source: str
    normalization: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"dataset images must be (n, H, W, C), got {self.images.shape}")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]


def pattern_motifs(size: int, channels: int = 1) -> np.ndarray:
    """Eight fixed motifs (stripes, checkers, blobs), values in [-0.8, 0.8]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    rr = np.sqrt((yy - c) ** 2 + (xx - c) ** 2)
    motifs = [
        np.where((yy // 2) % 2 == 0, 1.0, -1.0),  # horizontal stripes
        np.where((xx // 2) % 2 == 0, 1.0, -1.0),  # vertical stripes
        np.where(((yy // 2) + (xx // 2)) % 2 == 0, 1.0, -1.0),  # 2px checker
        np.where((yy + xx) % 2 == 0, 1.0, -1.0),  # 1px checker
        2.0 * np.exp(-(rr**2) / (2 * (size / 5) ** 2)) - 1.0,  # centre blob
        1.0 - 2.0 * np.exp(-(rr**2) / (2 * (size / 5) ** 2)),  # inverted blob
        np.where(((yy + xx) // 2) % 2 == 0, 1.0, -1.0),  # diagonal stripes
        np.where(np.abs(rr - size / 3) < size / 8, 1.0, -1.0),  # ring
    ]
    out = np.stack(motifs)[..., None] * 0.8
    if channels > 1:
        tint = np.linspace(1.0, 0.6, channels)
        out = out * tint
    return out.astype(np.float32)


def make_synthetic(
    kind: str,
    n: int,
    shape: tuple[int, int, int] = (8, 8, 1),
    seed: int = 0,
    mean: float = 0.0,
    std: float = 0.5,
    jitter: float = 0.05,
) -> Dataset:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    h, w, c = shape
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), *b"data"]))
    if kind == "synthetic_gaussian":
        x = rng.normal(mean, std, size=(n, h, w, c))
        norm = {"mean": mean, "std": std, "clip": [-1.0, 1.0]}
    elif kind == "synthetic_patterns":
        if h != w:
            raise ValueError("synthetic_patterns needs square images")
        motifs = pattern_motifs(h, c)
        idx = rng.integers(0, len(motifs), size=n)
        x = motifs[idx] + rng.uniform(-jitter, jitter, size=(n, h, w, c))
        norm = {"motifs": len(motifs), "jitter": jitter}
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")
    return Dataset(np.clip(x, -1.0, 1.0).astype(np.float32), source=kind, normalization=norm)


def to_unit_range(pixels: np.ndarray) -> np.ndarray:
    """uint8 [0, 255] -> float32 [-1, 1]."""
    return (np.asarray(pixels, dtype=np.float32) / 127.5 - 1.0).astype(np.float32)


def to_pixels(images: np.ndarray) -> np.ndarray:
    """float [-1, 1] -> uint8 [0, 255], rounding to nearest."""
    return np.clip(np.rint((np.asarray(images, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def load_folder(path: str | Path, channels: int = 3, image_size: int | None = None) -> Dataset:
    from PIL import Image

    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"not a directory: {root}")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"no images found in {root}")
    mode = "L" if channels == 1 else "RGB"
    arrays = []
    for f in files:
        with Image.open(f) as im:
            im = im.convert(mode)
            if image_size is not None and im.size != (image_size, image_size):
                im = im.resize((image_size, image_size), Image.BILINEAR)
            a = np.asarray(im, dtype=np.uint8)
        arrays.append(a[..., None] if a.ndim == 2 else a)
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"images in {root} have differing shapes: {sorted(shapes)}")
    return Dataset(to_unit_range(np.stack(arrays)), source="folder", normalization={"scale": "x/127.5-1"})


def load_tensor_dataset(path: str | Path) -> Dataset:
    x = load_tensor(path)
    if x.ndim != 4:
        raise ValueError(f"tensor file {path} must hold (n, H, W, C) images, got {x.shape}")
    return Dataset(x, source="tensor_file")


# ---------------------------------------------------------------------------
# batching


class BatchSampler:
    """Seeded epoch-wise shuffling; its full state round-trips through ``state()``."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.n = n
        self.batch_size = batch_size
        self.rng = np.random.default_rng(np.random.SeedSequence([int(seed), *b"order"]))
        self.epoch = 0
        self.pos = 0
        self.perm = self.rng.permutation(n)

    def next_indices(self) -> np.ndarray:
        out = []
        need = self.batch_size
        while need:
            if self.pos >= self.n:
                self.epoch += 1
                self.pos = 0
                self.perm = self.rng.permutation(self.n)
            take = min(need, self.n - self.pos)
            out.append(self.perm[self.pos : self.pos + take])
            self.pos += take
            need -= take
        return np.concatenate(out)

    def state(self) -> dict:
        return {
            "epoch": self.epoch,
            "pos": self.pos,
            "perm": self.perm.tolist(),
            "rng": self.rng.bit_generator.state,
        }

    def load_state(self, st: dict) -> None:
        self.epoch = int(st["epoch"])
        self.pos = int(st["pos"])
        self.perm = np.asarray(st["perm"], dtype=np.int64)
        self.rng.bit_generator.state = st["rng"]
