"""Data ingestion and generation: IDX files, PGM dumps, affine perturbation,
the synthetic digit corpus used as an MNIST stand-in when no real IDX files
are supplied, and the synthetic concept dataset.
"""

from __future__ import annotations

import math
import os
import queue
import struct
import threading
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    """Base class for dataset ingestion failures."""


class BadMagicError(DataError):
    pass


class TruncatedError(DataError):
    pass


class CountMismatchError(DataError):
    pass


@dataclass
class LabeledImageSet:
    """Images in [0,1] as (N,C,H,W), integer labels, optional binary concept
    indicators Z, and a provenance tag describing where the data came from."""

    images: np.ndarray
    labels: np.ndarray
    Z: Optional[np.ndarray] = None
    provenance: str = ""

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise CountMismatchError(
                f"{self.images.shape[0]} images vs {self.labels.shape[0]} labels")
        if self.Z is not None and self.Z.shape[0] != self.labels.shape[0]:
            raise CountMismatchError(
                f"{self.Z.shape[0]} concept rows vs {self.labels.shape[0]} labels")

    @property
    def count(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "LabeledImageSet":
        return LabeledImageSet(
            images=self.images[idx],
            labels=self.labels[idx],
            Z=None if self.Z is None else self.Z[idx],
            provenance=self.provenance,
        )


# -- IDX files -----------------------------------------------------------------

def read_idx(path: str) -> np.ndarray:
    """Read one big-endian IDX file of unsigned bytes."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedError(f"{path}: shorter than an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise BadMagicError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise TruncatedError(f"{path}: header cut short")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    expected = int(np.prod(dims))
    payload = raw[header_len:]
    if len(payload) != expected:
        raise TruncatedError(
            f"{path}: payload holds {len(payload)} bytes, header promises {expected}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def write_idx(path: str, array: np.ndarray) -> None:
    """Write an unsigned-byte array as IDX (3-D arrays as images, 1-D as labels)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = IDX_IMAGES_MAGIC if array.ndim == 3 else IDX_LABELS_MAGIC
    if array.ndim not in (1, 3):
        raise DataError(f"IDX writer supports 1-D or 3-D arrays, got {array.ndim}-D")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_idx(images_path: str, labels_path: str,
             provenance: Optional[str] = None) -> LabeledImageSet:
    """Load an images/labels IDX pair, scaling pixels to [0,1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise BadMagicError(f"{images_path}: expected an image tensor")
    if labels.ndim != 1:
        raise BadMagicError(f"{labels_path}: expected a label vector")
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images.shape[0]} images vs {labels.shape[0]} labels")
    floats = images.astype(np.float64)[:, None, :, :] / 255.0
    return LabeledImageSet(floats, labels.astype(np.int64),
                           provenance=provenance or images_path)


# -- PGM dumps -------------------------------------------------------------------

def write_pgm(path: str, image: np.ndarray) -> None:
    """Write one grayscale image ([0,1] floats or uint8) as binary PGM (P5)."""
    img = np.asarray(image)
    img = np.squeeze(img)
    if img.ndim != 2:
        raise DataError(f"PGM writer needs a single 2-D image, got {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P5":
            raise DataError(f"{path}: not a binary PGM")
        w, h = map(int, fh.readline().split())
        maxval = int(fh.readline())
        if maxval != 255:
            raise DataError(f"{path}: unsupported maxval {maxval}")
        data = fh.read(w * h)
    if len(data) != w * h:
        raise TruncatedError(f"{path}: PGM payload cut short")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


# -- affine perturbation ----------------------------------------------------------

@dataclass
class AffineParams:
    """Bounded affine transform; ranges keep digits inside the frame."""

    rotation: float = 0.0      # radians
    scale_x: float = 1.0
    scale_y: float = 1.0
    trans_x: float = 0.0       # pixels
    trans_y: float = 0.0
    shear: float = 0.0

    def __post_init__(self):
        limit = math.radians(20.0) + 1e-9
        if abs(self.rotation) > limit:
            raise ValueError(f"rotation {self.rotation} outside +-20 degrees")
        for s in (self.scale_x, self.scale_y):
            if not 0.8 <= s <= 1.2:
                raise ValueError(f"scale {s} outside [0.8, 1.2]")


def sample_affine(rng: np.random.Generator, width: int) -> AffineParams:
    """Draw random parameters from the documented bounded ranges."""
    max_t = 0.2 * width
    return AffineParams(
        rotation=rng.uniform(-math.radians(20), math.radians(20)),
        scale_x=rng.uniform(0.8, 1.2),
        scale_y=rng.uniform(0.8, 1.2),
        trans_x=rng.uniform(-max_t, max_t),
        trans_y=rng.uniform(-max_t, max_t),
        shear=rng.uniform(-0.15, 0.15),
    )


def affine_apply(img: np.ndarray, params: AffineParams) -> np.ndarray:
    """Apply the affine transform by inverse-map bilinear resampling.

    Content moves by (trans_y, trans_x) in (row, col); rotation, shear and
    scale act about the image center. Samples falling outside the source
    take the background value 0. Identity parameters reproduce the image
    bit-for-bit.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise DataError(f"affine_apply expects a single-channel image, got {img.shape}")
    h, w = img.shape
    if abs(params.trans_x) > 0.2 * w + 1e-9 or abs(params.trans_y) > 0.2 * h + 1e-9:
        raise ValueError("translation exceeds 20% of the image size")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    cos_t, sin_t = math.cos(params.rotation), math.sin(params.rotation)
    # forward map: dest = R @ Shear @ Scale @ (src - c) + c + t
    fwd = np.array([[cos_t, -sin_t], [sin_t, cos_t]]) @ \
        np.array([[1.0, params.shear], [0.0, 1.0]]) @ \
        np.array([[params.scale_y, 0.0], [0.0, params.scale_x]])
    inv = np.linalg.inv(fwd)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy = rows - cy - params.trans_y
    dx = cols - cx - params.trans_x
    src_y = inv[0, 0] * dy + inv[0, 1] * dx + cy
    src_x = inv[1, 0] * dy + inv[1, 1] * dx + cx
    y0 = np.floor(src_y).astype(int)
    x0 = np.floor(src_x).astype(int)
    fy = src_y - y0
    fx = src_x - x0

    def sample(yy, xx):
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        out = np.zeros_like(src_y)
        out[valid] = img[yy[valid], xx[valid]]
        return out

    top = sample(y0, x0) * (1 - fx) + sample(y0, x0 + 1) * fx
    bot = sample(y0 + 1, x0) * (1 - fx) + sample(y0 + 1, x0 + 1) * fx
    return top * (1 - fy) + bot * fy


def perturb_set(dataset: LabeledImageSet, seed: int) -> LabeledImageSet:
    """Apply an independent random bounded affine transform to every image."""
    rng = np.random.default_rng(seed)
    out = np.empty_like(dataset.images)
    w = dataset.images.shape[-1]
    for i in range(dataset.count):
        params = sample_affine(rng, w)
        out[i, 0] = affine_apply(dataset.images[i, 0], params)
    return LabeledImageSet(out, dataset.labels.copy(), dataset.Z,
                           provenance=f"{dataset.provenance}+affine")


# -- synthetic digit corpus (MNIST stand-in) ---------------------------------------

_DIGIT_GLYPHS = [
    (".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."),
    ("..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."),
    (".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"),
    (".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."),
    ("...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."),
    ("#####", "#....", "####.", "....#", "....#", "#...#", ".###."),
    ("..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."),
    ("#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."),
    (".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."),
    (".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."),
]


def _glyph_array(digit: int) -> np.ndarray:
    rows = _DIGIT_GLYPHS[digit]
    return np.array([[1.0 if ch == "#" else 0.0 for ch in row] for row in rows])


def render_digit(digit: int, rng: np.random.Generator, size: int = 28) -> np.ndarray:
    """Render one jittered digit glyph onto a size x size canvas in [0,1]."""
    glyph = np.kron(_glyph_array(digit), np.ones((3, 3)))    # 21 x 15
    gh, gw = glyph.shape
    canvas = np.zeros((size, size))
    top = (size - gh) // 2 + rng.integers(-3, 4)
    left = (size - gw) // 2 + rng.integers(-3, 4)
    canvas[top:top + gh, left:left + gw] = glyph * rng.uniform(0.7, 1.0)
    params = AffineParams(
        rotation=rng.uniform(-math.radians(10), math.radians(10)),
        scale_x=rng.uniform(0.9, 1.1),
        scale_y=rng.uniform(0.9, 1.1),
        trans_x=0.0,
        trans_y=0.0,
        shear=rng.uniform(-0.1, 0.1),
    )
    out = affine_apply(canvas, params)
    out += rng.normal(0.0, 0.02, out.shape)
    return np.clip(out, 0.0, 1.0)


def gen_digit_dataset(n: int, seed: int, size: int = 28) -> LabeledImageSet:
    """Balanced synthetic digit set with labels cycling through 0-9."""
    rng = np.random.default_rng(seed)
    images = np.empty((n, 1, size, size))
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        digit = i % 10
        images[i, 0] = render_digit(digit, rng, size)
        labels[i] = digit
    order = rng.permutation(n)
    return LabeledImageSet(images[order], labels[order],
                           provenance=f"synthetic-digits(seed={seed})")


def ensure_digit_idx(directory: str, n_train: int, n_test: int,
                     seed: int) -> dict:
    """Materialize the synthetic digit corpus as IDX files (once) and return
    their paths; training code then ingests them through load_idx like any
    real MNIST dump."""
    os.makedirs(directory, exist_ok=True)
    tag = f"{n_train}-{n_test}-{seed}"
    paths = {
        "train_images": os.path.join(directory, f"digits-{tag}-train-images.idx"),
        "train_labels": os.path.join(directory, f"digits-{tag}-train-labels.idx"),
        "test_images": os.path.join(directory, f"digits-{tag}-test-images.idx"),
        "test_labels": os.path.join(directory, f"digits-{tag}-test-labels.idx"),
    }
    if not all(os.path.exists(p) for p in paths.values()):
        full = gen_digit_dataset(n_train + n_test, seed)
        as_u8 = np.clip(np.rint(full.images[:, 0] * 255.0), 0, 255).astype(np.uint8)
        write_idx(paths["train_images"], as_u8[:n_train])
        write_idx(paths["train_labels"], full.labels[:n_train].astype(np.uint8))
        write_idx(paths["test_images"], as_u8[n_train:])
        write_idx(paths["test_labels"], full.labels[n_train:].astype(np.uint8))
    return paths


# -- synthetic concept dataset -------------------------------------------------------

CONCEPT_NAMES = ("vertical-bar", "disk", "corner-l", "checker", "ring",
                 "diagonal-stripe", "bright-border", "dark-blob")

_CONCEPT_GRID = [(r, c) for r in range(2) for c in range(4)]   # 16x8 cells on 32x32


def concept_region(index: int, size: int = 32) -> tuple:
    """Reserved (row, col, height, width) cell of one concept."""
    r, c = _CONCEPT_GRID[index]
    return r * 16, c * 8, 16, 8


def _paint_concept(canvas: np.ndarray, index: int, rng: np.random.Generator) -> None:
    top, left, h, w = concept_region(index)
    cell = canvas[top:top + h, left:left + w]
    level = rng.uniform(0.75, 1.0)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cy, cx = (h - 1) / 2, (w - 1) / 2
    rad = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    if index == 0:      # vertical bar
        cell[2:h - 2, w // 2 - 1:w // 2 + 1] = level
    elif index == 1:    # disk
        cell[rad <= 3.0] = level
    elif index == 2:    # corner L
        cell[2:h - 2, 1:3] = level
        cell[h - 4:h - 2, 1:w - 1] = level
    elif index == 3:    # checker patch
        tiles = ((yy // 2 + xx // 2) % 2).astype(float)
        cell[:] = np.maximum(cell, tiles * level)
    elif index == 4:    # ring
        cell[(rad <= 3.5) & (rad >= 2.0)] = level
    elif index == 5:    # diagonal stripe
        cell[np.abs(yy - 2 * xx + 4) <= 2] = level
    elif index == 6:    # bright border
        cell[0, :] = level
        cell[h - 1, :] = level
        cell[:, 0] = level
        cell[:, w - 1] = level
    elif index == 7:    # dark blob on a lit plate
        cell[:] = 0.55 * level
        cell[rad <= 2.5] = 0.05
    else:
        raise ValueError(f"no concept with index {index}")


def concept_class_label(z: np.ndarray) -> int:
    """Deterministic class from the indicator vector: XOR-parity of up to
    three consecutive concept pairs packed into bits."""
    bits = min(3, len(z) // 2)
    label = 0
    for g in range(bits):
        label |= (int(z[2 * g]) ^ int(z[2 * g + 1])) << g
    return label


def concept_class_count(m: int) -> int:
    return 2 ** min(3, m // 2)


def gen_concept_dataset(n: int, m: int, seed: int) -> LabeledImageSet:
    """Synthetic 32x32 images composed of m visual concepts, each
    independently present with probability 0.5. Z records presence; the
    class label is the XOR-parity group of Z."""
    if not 1 <= m <= 8:
        raise ValueError(f"concept count must be in [1, 8], got {m}")
    rng = np.random.default_rng(seed)
    images = np.zeros((n, 1, 32, 32))
    labels = np.empty(n, dtype=np.int64)
    Z = rng.integers(0, 2, size=(n, m))
    for i in range(n):
        for j in range(m):
            if Z[i, j]:
                _paint_concept(images[i, 0], j, rng)
        labels[i] = concept_class_label(Z[i])
    return LabeledImageSet(images, labels, Z=Z,
                           provenance=f"synthetic-concepts(m={m},seed={seed})")


# -- batching --------------------------------------------------------------------

@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    Z: Optional[np.ndarray] = None


def iterate_batches(dataset: LabeledImageSet, batch_size: int,
                    rng: Optional[np.random.Generator] = None) -> Iterator[Batch]:
    """Yield minibatches, shuffled when an rng is given."""
    order = np.arange(dataset.count)
    if rng is not None:
        rng.shuffle(order)
    for start in range(0, dataset.count, batch_size):
        idx = order[start:start + batch_size]
        yield Batch(
            images=dataset.images[idx],
            labels=dataset.labels[idx],
            Z=None if dataset.Z is None else dataset.Z[idx],
        )


def prefetch(items: Iterable, capacity: int = 4) -> Iterator:
    """Produce items on a background thread through a bounded queue.

    Order-preserving: each item is produced once and consumed once, so a
    prefetched epoch is indistinguishable from a sequential one.
    """
    q: queue.Queue = queue.Queue(maxsize=capacity)
    done = object()

    def worker():
        try:
            for item in items:
                q.put(item)
            q.put(done)
        except BaseException as exc:          # surfaced in the consumer
            q.put(exc)

    thread = threading.Thread(target=worker, daemon=True)
    thread.start()
    while True:
        item = q.get()
        if item is done:
            break
        if isinstance(item, BaseException):
            raise item
        yield item
    thread.join()
