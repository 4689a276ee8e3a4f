"""Complete factor-grid datasets: lazily rendered sprites or FVB1 container files.

FVB1 layout (all integers little-endian)::

    b"FVB1"
    u32 version (= 1)
    u32 n_axes
    n_axes x { u16 name_len, name (UTF-8), u32 cardinality, u8 ordered }
    u32 height, u32 width, u32 channels
    u8  dtype (0 = u8 quantised as round(255 p), 1 = f32)
    total x height x width x channels samples, combination-index order, row-major

The image block follows the header immediately; no padding, no trailer.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .factors import FactorAxis, FactorSpace
from .sprites import RendererConfig, check_compatible, render_sprite

MAGIC = b"FVB1"
VERSION = 1
DTYPES = {0: np.dtype("u1"), 1: np.dtype("<f4")}
DTYPE_CODES = {"u8": 0, "f32": 1}


class ContainerFormatError(ValueError):
    pass


class Dataset:
    """Index -> (factor levels, image) over every cell of ``space``."""

    space: FactorSpace
    image_shape: tuple[int, int, int]

    def __len__(self) -> int:
        return self.space.total

    def __getitem__(self, index: int) -> tuple[tuple[int, ...], np.ndarray]:
        return self.space.combination_of(int(index)), self.image(int(index))

    def image(self, index: int) -> np.ndarray:
        raise NotImplementedError

    def images(self, indices) -> np.ndarray:
        """Stack of float32 images in [0, 1], shape (n, H, W, C)."""
        indices = np.asarray(indices, dtype=np.int64)
        out = np.empty((indices.size,) + self.image_shape, dtype=np.float32)
        for row, k in enumerate(indices):
            out[row] = self.image(int(k))
        return out

    def flat_images(self, indices) -> np.ndarray:
        x = self.images(indices)
        return x.reshape(x.shape[0], -1)


class SyntheticDataset(Dataset):
    def __init__(self, space: FactorSpace, config: RendererConfig):
        check_compatible(space, config)
        self.space = space
        self.config = config
        self.image_shape = (config.canvas, config.canvas, 1)

    def image(self, index: int) -> np.ndarray:
        return render_sprite(self.config, self.space, self.space.combination_of(index))


def build_synthetic_dataset(space: FactorSpace, config: RendererConfig) -> SyntheticDataset:
    return SyntheticDataset(space, config)


class ContainerDataset(Dataset):
    def __init__(self, path, space: FactorSpace, image_shape, dtype_code: int, offset: int):
        self.path = Path(path)
        self.space = space
        self.image_shape = tuple(image_shape)
        self.dtype_code = dtype_code
        self._data = np.memmap(self.path, dtype=DTYPES[dtype_code], mode="r", offset=offset,
                               shape=(space.total,) + self.image_shape)

    def image(self, index: int) -> np.ndarray:
        raw = self._data[index]
        if self.dtype_code == 0:
            return raw.astype(np.float32) / 255.0
        return np.array(raw, dtype=np.float32)

    def images(self, indices) -> np.ndarray:
        indices = np.asarray(indices, dtype=np.int64)
        raw = self._data[indices]
        if self.dtype_code == 0:
            return raw.astype(np.float32) / 255.0
        return np.asarray(raw, dtype=np.float32)

    def raw(self, index: int) -> np.ndarray:
        return np.array(self._data[index])


def _header(space: FactorSpace, image_shape, dtype_code: int) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, space.n_factors)]
    for axis in space.axes:
        name = axis.name.encode("utf-8")
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack("<IB", axis.cardinality, int(axis.ordered)))
    h, w, c = image_shape
    parts.append(struct.pack("<IIIB", h, w, c, dtype_code))
    return b"".join(parts)


def _encode(images: np.ndarray, dtype_code: int) -> bytes:
    if dtype_code == 0:
        return np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8).tobytes()
    return images.astype("<f4").tobytes()


def save_container(dataset: Dataset, path, dtype: str = "u8", chunk: int = 1024) -> Path:
    """Write every image of ``dataset`` in index order; the file appears atomically."""
    if dtype not in DTYPE_CODES:
        raise ValueError(f"dtype must be one of {sorted(DTYPE_CODES)}")
    code = DTYPE_CODES[dtype]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_header(dataset.space, dataset.image_shape, code))
        total = dataset.space.total
        for start in range(0, total, chunk):
            idx = np.arange(start, min(start + chunk, total))
            if isinstance(dataset, ContainerDataset) and dataset.dtype_code == code:
                fh.write(np.ascontiguousarray(dataset._data[idx]).tobytes())
            else:
                fh.write(_encode(dataset.images(idx), code))
    os.replace(tmp, path)
    return path


def _read_header(fh, path) -> tuple[FactorSpace, tuple[int, int, int], int, int]:
    def take(n):
        buf = fh.read(n)
        if len(buf) != n:
            raise ContainerFormatError(f"{path}: truncated header")
        return buf

    if take(4) != MAGIC:
        raise ContainerFormatError(f"{path}: bad magic, not an FVB1 container")
    version, n_axes = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ContainerFormatError(f"{path}: unsupported version {version}")
    axes = []
    for _ in range(n_axes):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        card, ordered = struct.unpack("<IB", take(5))
        axes.append(FactorAxis(name, card, bool(ordered)))
    h, w, c, code = struct.unpack("<IIIB", take(13))
    if code not in DTYPES:
        raise ContainerFormatError(f"{path}: unknown dtype code {code}")
    return FactorSpace(tuple(axes), Path(path).stem), (h, w, c), code, fh.tell()


def load_container(path) -> ContainerDataset:
    path = Path(path)
    with open(path, "rb") as fh:
        space, shape, code, offset = _read_header(fh, path)
    expected = offset + space.total * int(np.prod(shape)) * DTYPES[code].itemsize
    actual = path.stat().st_size
    if actual != expected:
        raise ContainerFormatError(
            f"{path}: size {actual} bytes does not match header ({expected} bytes expected)")
    return ContainerDataset(path, space, shape, code, offset)


def container_size(space: FactorSpace, image_shape, dtype: str = "u8") -> int:
    """Exact file size of an FVB1 container for this space and image shape."""
    code = DTYPE_CODES[dtype]
    return len(_header(space, image_shape, code)) + space.total * int(np.prod(image_shape)) * DTYPES[code].itemsize
