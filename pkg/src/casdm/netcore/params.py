"""Named parameter stores, initialisers and the ``CDM1`` checkpoint container."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from casdm.netcore.autodiff import Tensor, leaf

MAGIC = b"CDM1"
_U64 = struct.Struct("<Q")


class ContainerFormatError(ValueError):
    """A container file is malformed; ``field`` names the part that failed."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ParamStore:
    """Ordered mapping of parameter path -> float array.

    Iteration order is insertion order, which is fixed by the network
    builder, so two stores built from the same spec line up key for key.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None, seed: int | None = None):
        self._arrays: dict[str, np.ndarray] = {}
        self.seed = seed
        for k, v in (arrays or {}).items():
            self[k] = v

    def __setitem__(self, key: str, value: np.ndarray) -> None:
        self._arrays[key] = np.asarray(value)

    def __getitem__(self, key: str) -> np.ndarray:
        return self._arrays[key]

    def __contains__(self, key: object) -> bool:
        return key in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def keys(self):
        return self._arrays.keys()

    def items(self):
        return self._arrays.items()

    def values(self):
        return self._arrays.values()

    @property
    def num_params(self) -> int:
        return int(sum(a.size for a in self._arrays.values()))

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._arrays.items()}, seed=self.seed)

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({k: v.astype(dtype) for k, v in self._arrays.items()}, seed=self.seed)

    def tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        """Fresh graph leaves, one per parameter."""
        return {k: leaf(v, requires_grad=requires_grad, name=k) for k, v in self._arrays.items()}

    def subset(self, prefix: str) -> "ParamStore":
        n = len(prefix)
        return ParamStore({k[n:]: v for k, v in self._arrays.items() if k.startswith(prefix)})

    def prefixed(self, prefix: str) -> "ParamStore":
        return ParamStore({prefix + k: v for k, v in self._arrays.items()})

    def equal(self, other: "ParamStore") -> bool:
        """Bitwise equality of keys, shapes and values."""
        if list(self.keys()) != list(other.keys()):
            return False
        return all(
            a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()
            for a, b in zip(self.values(), other.values())
        )


def truncated_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std^2) resampled until every draw lies within ``bound`` stds."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(np.float32)


def fan_in_init(rng: np.random.Generator, shape) -> np.ndarray:
    # (kh, kw, cin, cout) or (din, dout): fan-in is everything but the last axis
    fan_in = int(np.prod(shape[:-1]))
    return truncated_normal(rng, shape, std=1.0 / np.sqrt(fan_in))


# ---------------------------------------------------------------------------
# CDM1 container


def write_container(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    header = bytearray(MAGIC)
    header += _U64.pack(len(arrays))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        header += _U64.pack(len(raw)) + raw
        header += _U64.pack(arr.ndim)
        for d in arr.shape:
            header += _U64.pack(d)
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_container(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int, field: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise ContainerFormatError(field, f"truncated file ({path})")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    def u64(field: str) -> int:
        return _U64.unpack(take(8, field))[0]

    if take(4, "magic") != MAGIC:
        raise ContainerFormatError("magic", f"expected {MAGIC!r} in {path}")
    count = u64("parameter count")
    manifest: list[tuple[str, tuple[int, ...]]] = []
    for i in range(count):
        length = u64(f"path length[{i}]")
        if length > len(buf):
            raise ContainerFormatError(f"path length[{i}]", f"implausible value {length}")
        try:
            name = take(length, f"path[{i}]").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerFormatError(f"path[{i}]", "not valid utf-8") from exc
        rank = u64(f"rank[{name}]")
        if rank > 8:
            raise ContainerFormatError(f"rank[{name}]", f"implausible rank {rank}")
        dims = tuple(u64(f"dims[{name}]") for _ in range(rank))
        manifest.append((name, dims))
    out: dict[str, np.ndarray] = {}
    for name, dims in manifest:
        nbytes = int(np.prod(dims, dtype=np.int64)) * 4
        raw = take(nbytes, f"data[{name}]")
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(buf):
        raise ContainerFormatError("payload", f"{len(buf) - pos} trailing bytes")
    return out


def save_params(path: str | Path, params: ParamStore) -> None:
    write_container(path, dict(params.items()))


def load_params(path: str | Path) -> ParamStore:
    return ParamStore(read_container(path))
