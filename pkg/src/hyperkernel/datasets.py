"""Images and pixel-coordinate regression tasks.

IDX files are the big-endian container used by MNIST: a 4-byte magic
(``0x00000803`` for images, ``0x00000801`` for labels), one 4-byte size per
dimension, then raw unsigned bytes. ``synthetic_images`` is an offline stand-in
made of bright rectangles on a dark background.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagic, DimensionMismatch, Truncated
from .kernels import fourier_features
from .linalg import rng

IDX3_MAGIC = 0x00000803
IDX1_MAGIC = 0x00000801
_NDIM_OF = {IDX1_MAGIC: 1, IDX3_MAGIC: 3}

BRIGHT_MIN = 200
DARK_MAX = 55


@dataclass
class ImageSet:
    pixels: np.ndarray  # uint8, (count, height, width)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 3 or self.pixels.dtype != np.uint8:
            raise DimensionMismatch("ImageSet needs a uint8 array of shape (count, height, width)")

    @property
    def count(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @property
    def normalized(self) -> np.ndarray:
        return self.pixels / 255.0

    def subset(self, idx) -> "ImageSet":
        return ImageSet(self.pixels[np.asarray(idx)])


def _read_idx(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4:
        raise Truncated(f"{path}: file shorter than the magic number")
    (magic,) = struct.unpack(">i", data[:4])
    if magic not in _NDIM_OF:
        raise BadMagic(f"{path}: magic {magic:#010x} is not an unsigned-byte IDX1/IDX3 file")
    ndim = _NDIM_OF[magic]
    head = 4 + 4 * ndim
    if len(data) < head:
        raise Truncated(f"{path}: header cut short")
    shape = struct.unpack(f">{ndim}i", data[4:head])
    size = int(np.prod(shape))
    if len(data) - head < size:
        raise Truncated(f"{path}: expected {size} data bytes, found {len(data) - head}")
    if len(data) - head > size:
        raise Truncated(f"{path}: {len(data) - head - size} trailing bytes after the data")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=head).reshape(shape)


def load_idx(path) -> ImageSet:
    """Read an IDX3 image file."""
    arr = _read_idx(path)
    if arr.ndim != 3:
        raise BadMagic(f"{path}: expected an image (IDX3) file, found a label file")
    return ImageSet(arr.copy())


def load_idx_labels(path) -> np.ndarray:
    arr = _read_idx(path)
    if arr.ndim != 1:
        raise BadMagic(f"{path}: expected a label (IDX1) file")
    return arr.copy()


def write_idx(path, data) -> None:
    """Write an :class:`ImageSet` as IDX3 or a 1-d byte array as IDX1."""
    arr = data.pixels if isinstance(data, ImageSet) else np.asarray(data)
    if arr.dtype != np.uint8 or arr.ndim not in (1, 3):
        raise DimensionMismatch("write_idx takes uint8 arrays with 1 or 3 dimensions")
    magic = IDX3_MAGIC if arr.ndim == 3 else IDX1_MAGIC
    with open(path, "wb") as f:
        f.write(struct.pack(f">i{arr.ndim}i", magic, *arr.shape))
        f.write(np.ascontiguousarray(arr).tobytes())


def synthetic_images(count: int, size: int = 28, seed: int = 0, max_rects: int = 3) -> ImageSet:
    """Bright axis-aligned rectangles on a dark noisy background.

    Rectangle centres are drawn around the image centre, so the pixel
    intensity has a spatial prior that a regression model can pick up.
    """
    if size < 4:
        raise ValueError("size must be at least 4")
    gen = rng(seed, 0x1A)
    out = gen.integers(0, DARK_MAX + 1, size=(count, size, size)).astype(np.uint8)
    for img in out:
        for _ in range(gen.integers(1, max_rects + 1)):
            cy, cx = np.clip(gen.normal(size / 2, size / 6, 2), 1, size - 2)
            hh, hw = gen.integers(1, max(2, size // 4) + 1, 2)
            r0, r1 = int(max(0, cy - hh)), int(min(size, cy + hh + 1))
            c0, c1 = int(max(0, cx - hw)), int(min(size, cx + hw + 1))
            img[r0:r1, c0:c1] = gen.integers(BRIGHT_MIN, 256, size=(r1 - r0, c1 - c0))
        # keep at least one dark pixel
        if img.min() > DARK_MAX:
            img[0, 0] = 0
    return ImageSet(out)


@dataclass
class PixelTask:
    X: np.ndarray  # meta inputs, one flattened (possibly masked) image per sample
    Z: np.ndarray  # primary inputs (coordinates or their Fourier features)
    y: np.ndarray
    image_id: np.ndarray
    coords: np.ndarray  # integer (row, col)
    mode: str

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def inputs(self):
        return (self.X, self.Z)


def meta_input(images: ImageSet, mode: str) -> np.ndarray:
    """Flattened meta inputs; inpainting zeroes columns ``>= width // 2``."""
    if mode not in ("representation", "inpainting"):
        raise ValueError(f"unknown mode {mode!r}")
    img = images.normalized.copy()
    if mode == "inpainting":
        img[:, :, images.width // 2:] = 0.0
    return img.reshape(images.count, -1)


def coordinate_features(coords, height: int, width: int, fourier: int | None = None, seed: int = 0,
                        scale: float = 1.0) -> np.ndarray:
    """Pixel coordinates scaled to ``[0, 1]^2``, optionally Fourier-mapped to ``fourier`` features."""
    coords = np.asarray(coords, dtype=float)
    z = coords / np.array([max(height - 1, 1), max(width - 1, 1)])
    if fourier:
        return fourier_features(z, fourier, seed, scale)
    return z


def build_task(images: ImageSet, N: int | None = None, pixels_per_image: int = 20, mode: str = "representation",
               fourier: int | None = None, seed: int = 0, scale: float = 1.0, all_pixels: bool = False,
               feature_seed: int | None = None) -> PixelTask:
    """Sample ``N`` pixel regression examples from ``images``.

    Images are taken in order, ``pixels_per_image`` distinct random pixels each,
    until ``N`` samples exist (``N`` defaults to all images). With
    ``all_pixels`` every pixel of every image is used instead. Fourier
    features share ``feature_seed`` (default ``seed``) so that training and
    test tasks can use the same map.
    """
    H, W = images.height, images.width
    Xall = meta_input(images, mode)
    gen = rng(seed, 0x7A)
    if all_pixels:
        ids = np.repeat(np.arange(images.count), H * W)
        flat = np.tile(np.arange(H * W), images.count)
    else:
        if pixels_per_image < 1 or pixels_per_image > H * W:
            raise ValueError("pixels_per_image must be between 1 and the pixel count")
        N = images.count * pixels_per_image if N is None else int(N)
        n_img = -(-N // pixels_per_image)
        if n_img > images.count:
            raise ValueError(f"N={N} needs {n_img} images, only {images.count} available")
        flat = np.concatenate([gen.choice(H * W, size=pixels_per_image, replace=False) for _ in range(n_img)])[:N]
        ids = np.repeat(np.arange(n_img), pixels_per_image)[:N]
    coords = np.column_stack(np.divmod(flat, W))
    y = images.normalized[ids, coords[:, 0], coords[:, 1]]
    fs = seed if feature_seed is None else feature_seed
    Z = coordinate_features(coords, H, W, fourier, fs, scale)
    return PixelTask(Xall[ids], Z, y, ids, coords, mode)


def export_task_csv(task: PixelTask, path) -> None:
    """Write ``image_id,row,col,label`` rows."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image_id", "row", "col", "label"])
        for i, (r, c), y in zip(task.image_id, task.coords, task.y):
            w.writerow([int(i), int(r), int(c), repr(float(y))])


def import_task_csv(path, images: ImageSet, mode: str = "representation", fourier: int | None = None,
                    seed: int = 0, scale: float = 1.0) -> PixelTask:
    """Rebuild a task from an exported CSV and its source images."""
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    ids = np.array([int(r["image_id"]) for r in rows], dtype=int)
    coords = np.array([[int(r["row"]), int(r["col"])] for r in rows], dtype=int).reshape(-1, 2)
    y = np.array([float(r["label"]) for r in rows])
    X = meta_input(images, mode)[ids]
    Z = coordinate_features(coords, images.height, images.width, fourier, seed, scale)
    return PixelTask(X, Z, y, ids, coords, mode)


def pixel_split(images: ImageSet, N: int, pixels_per_image: int = 20, mode: str = "representation",
                fourier: int | None = None, scale: float = 1.0, n_test_images: int = 20, seed: int = 0):
    """Training task from the leading images and an all-pixel test task on the last ``n_test_images``.

    Both tasks share one Fourier map, so features are comparable.
    """
    if n_test_images < 1 or n_test_images >= images.count:
        raise ValueError("n_test_images must leave at least one training image")
    pool = images.subset(np.arange(images.count - n_test_images))
    held = images.subset(np.arange(images.count - n_test_images, images.count))
    train = build_task(pool, N, pixels_per_image, mode, fourier, seed=seed, scale=scale)
    test = build_task(held, mode=mode, fourier=fourier, seed=seed + 1, scale=scale, all_pixels=True,
                      feature_seed=seed)
    return train, test


def window_mean_targets(images: ImageSet, frac: float = 0.4) -> np.ndarray:
    """Mean intensity of a centred square window; a smooth scalar target per image."""
    h = max(1, int(round(images.height * frac)))
    w = max(1, int(round(images.width * frac)))
    r0, c0 = (images.height - h) // 2, (images.width - w) // 2
    return images.normalized[:, r0:r0 + h, c0:c0 + w].mean(axis=(1, 2))
