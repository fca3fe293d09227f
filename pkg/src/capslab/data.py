"""Dataset ingestion and deterministic synthesis.

Source digits come from IDX files (``load_mnist_idx``) or, when no IDX
path is available, from the bundled UCI handwritten-digits corpus
(``builtin_digits``), upsampled to the same 28x28 geometry.

Generators are pure functions of (inputs, master seed): every record
draws from its own seed stream derived as hash(master_seed, split_tag,
record_index), so regeneration is bitwise identical and order
independent.  Pixels live in [0, 1].
"""

import gzip
import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

TRAIN_CANVAS = 40   # 28px digit placed on a black 40x40 background
MULTI_CANVAS = 36   # 28px digit shifted up to 4px in each direction
PAD = 6             # test digits: symmetric 6px pad to 40x40 before warping


# ---------------------------------------------------------------------------
# seed streams


def _tag_int(tag):
    return int.from_bytes(hashlib.blake2s(tag.encode()).digest()[:8], "little")


def record_rng(master_seed, split_tag, index):
    """Independent, reproducible per-record generator."""
    return np.random.default_rng(
        np.random.SeedSequence((int(master_seed), _tag_int(split_tag), int(index)))
    )


# ---------------------------------------------------------------------------
# IDX ingestion


def _open_maybe_gzip(path):
    f = open(path, "rb")
    if f.read(2) == b"\x1f\x8b":
        f.close()
        return gzip.open(path, "rb")
    f.seek(0)
    return f


def _read_exact(f, n, path):
    data = f.read(n)
    if len(data) != n:
        raise DataError(f"{path}: truncated (wanted {n} bytes, got {len(data)})")
    return data


def load_mnist_idx(images_path, labels_path):
    """Parse big-endian IDX image/label files into ([0,1] images, labels)."""
    with _open_maybe_gzip(images_path) as f:
        magic, count, rows, cols = struct.unpack(">iiii", _read_exact(f, 16, images_path))
        if magic != IMAGE_MAGIC:
            raise DataError(f"{images_path}: bad magic {magic}, expected {IMAGE_MAGIC}")
        raw = _read_exact(f, count * rows * cols, images_path)
        images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)
    with _open_maybe_gzip(labels_path) as f:
        magic, lcount = struct.unpack(">ii", _read_exact(f, 8, labels_path))
        if magic != LABEL_MAGIC:
            raise DataError(f"{labels_path}: bad magic {magic}, expected {LABEL_MAGIC}")
        labels = np.frombuffer(_read_exact(f, lcount, labels_path), dtype=np.uint8)
    if count != lcount:
        raise DataError(f"image count {count} != label count {lcount}")
    return images.astype(np.float32) / 255.0, labels.astype(np.int64)


def builtin_digits(split):
    """Bundled real handwritten digits (8x8 UCI corpus via scikit-learn),
    bilinearly upsampled to 28x28.

    A stand-in source for environments without MNIST files: 60 test
    digits per class, the rest train, split deterministically.  Returns
    ([0,1] images (N,28,28), labels).
    """
    from sklearn.datasets import load_digits

    raw = load_digits()
    images = raw.images.astype(np.float64) / 16.0
    labels = raw.target.astype(np.int64)
    test_mask = np.zeros(labels.shape[0], dtype=bool)
    for cls in range(10):
        test_mask[np.where(labels == cls)[0][:60]] = True
    keep = test_mask if split == "test" else ~test_mask
    small = images[keep]
    up = np.empty((small.shape[0], 28, 28), dtype=np.float32)
    grid = (np.arange(28) + 0.5) * (8.0 / 28.0) - 0.5
    g0 = np.clip(np.floor(grid).astype(int), 0, 7)
    g1 = np.clip(g0 + 1, 0, 7)
    frac = np.clip(grid - g0, 0.0, 1.0)
    for i, img in enumerate(small):
        rows = img[g0, :] * (1 - frac)[:, None] + img[g1, :] * frac[:, None]
        up[i] = rows[:, g0] * (1 - frac)[None, :] + rows[:, g1] * frac[None, :]
    return np.clip(up, 0.0, 1.0), labels[keep]


def load_source(split, mnist_dir=None):
    """MNIST IDX files when a directory is given (or via CAPSLAB_DATA_DIR),
    otherwise the bundled digit corpus."""
    import os

    mnist_dir = mnist_dir or os.environ.get("CAPSLAB_DATA_DIR") or None
    if mnist_dir:
        stem = "train" if split == "train" else "t10k"
        import pathlib

        d = pathlib.Path(mnist_dir)
        for suffix in ("", ".gz"):
            ip = d / f"{stem}-images-idx3-ubyte{suffix}"
            lp = d / f"{stem}-labels-idx1-ubyte{suffix}"
            if ip.exists() and lp.exists():
                return load_mnist_idx(str(ip), str(lp))
        raise DataError(f"no {stem} IDX files under {mnist_dir}")
    return builtin_digits(split)


# ---------------------------------------------------------------------------
# canvases and affine warps


@dataclass(frozen=True)
class AffineParams:
    rotation_deg: float = 0.0
    shear_x_deg: float = 0.0
    shear_y_deg: float = 0.0
    scale_x: float = 1.0
    scale_y: float = 1.0
    translate_x_px: float = 0.0
    translate_y_px: float = 0.0

    RANGES = {
        "rotation_deg": (-20.0, 20.0),
        "shear_x_deg": (-45.0, 45.0),
        "shear_y_deg": (-45.0, 45.0),
        "scale_x": (0.8, 1.2),
        "scale_y": (0.8, 1.2),
        "translate_x_px": (-8.0, 8.0),
        "translate_y_px": (-8.0, 8.0),
    }

    def validate(self):
        for name, (lo, hi) in self.RANGES.items():
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise DataError(f"affine parameter {name}={v} outside [{lo}, {hi}]")
        return self


def sample_affine_params(rng):
    draws = {name: rng.uniform(lo, hi) for name, (lo, hi) in AffineParams.RANGES.items()}
    return AffineParams(**draws)


def make_train_canvas(img28, rng, canvas=TRAIN_CANVAS):
    """Place a digit at an integer offset drawn uniformly over the valid
    positions of a black canvas; no interpolation, pixel mass conserved."""
    h, w = img28.shape
    max_off = canvas - h
    oy, ox = int(rng.integers(0, max_off + 1)), int(rng.integers(0, max_off + 1))
    out = np.zeros((canvas, canvas), dtype=np.float32)
    out[oy : oy + h, ox : ox + w] = img28
    return out, (oy, ox)


def pad_to_canvas(img28, pad=PAD):
    """Symmetric zero padding (the centered placement used for test digits)."""
    return np.pad(img28, pad).astype(np.float32)


def apply_affine(img, params):
    """Inverse-warp with bilinear interpolation about the image center.

    Content transform order: scale, then shear, then rotate, then
    translate.  Out-of-bounds samples read zero; output is clamped to
    [0, 1].  Identity parameters reproduce the input exactly.
    """
    img = np.asarray(img, dtype=np.float32)
    s = img.shape[0]
    center = (s - 1) / 2.0
    th = np.deg2rad(params.rotation_deg)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    shear = np.array(
        [[1.0, np.tan(np.deg2rad(params.shear_x_deg))],
         [np.tan(np.deg2rad(params.shear_y_deg)), 1.0]]
    )
    scale = np.diag([params.scale_x, params.scale_y])
    fwd = rot @ shear @ scale
    inv = np.linalg.inv(fwd)

    xs, ys = np.meshgrid(np.arange(s, dtype=np.float64), np.arange(s, dtype=np.float64))
    # x = column, y = row; subtract translation and center, invert, recenter
    pts = np.stack(
        [xs.ravel() - params.translate_x_px - center, ys.ravel() - params.translate_y_px - center]
    )
    src = inv @ pts
    sx = src[0] + center
    sy = src[1] + center

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0

    def fetch(yy, xx):
        valid = (yy >= 0) & (yy < s) & (xx >= 0) & (xx < s)
        vals = np.zeros(yy.shape, dtype=np.float64)
        vals[valid] = img[yy[valid], xx[valid]]
        return vals

    out = (
        fetch(y0, x0) * (1 - fy) * (1 - fx)
        + fetch(y0, x0 + 1) * (1 - fy) * fx
        + fetch(y0 + 1, x0) * fy * (1 - fx)
        + fetch(y0 + 1, x0 + 1) * fy * fx
    )
    return np.clip(out.reshape(s, s), 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# dataset containers and generators


@dataclass
class Dataset:
    """Columnar image set: pixels (N,S,S) float32 or uint8-coded [0,1],
    labels (N,) or (N,2), optional per-digit targets (N,2,S,S)."""

    pixels: np.ndarray
    labels: np.ndarray
    components: np.ndarray = None
    tag: str = ""

    def __len__(self):
        return self.pixels.shape[0]

    @property
    def side(self):
        return self.pixels.shape[1]

    def pixel_batch(self, idx):
        x = self.pixels[idx]
        if x.dtype == np.uint8:
            return x.astype(np.float32) / 255.0
        return x.astype(np.float32, copy=False)

    def component_batch(self, idx):
        if self.components is None:
            return None
        c = self.components[idx]
        if c.dtype == np.uint8:
            return c.astype(np.float32) / 255.0
        return c.astype(np.float32, copy=False)


def _quantize(img):
    return np.round(img * 255.0).astype(np.uint8)


def gen_train_canvases(images, labels, count, seed, canvas=TRAIN_CANVAS):
    """Randomly placed training canvases; record i reuses source digit
    i mod len(images) under its own seed stream."""
    n_src = images.shape[0]
    pixels = np.zeros((count, canvas, canvas), dtype=np.uint8)
    out_labels = np.zeros(count, dtype=np.int64)
    src_q = _quantize(images)
    h = images.shape[1]
    max_off = canvas - h
    for i in range(count):
        rng = record_rng(seed, "train_canvas", i)
        j = i % n_src
        oy, ox = int(rng.integers(0, max_off + 1)), int(rng.integers(0, max_off + 1))
        pixels[i, oy : oy + h, ox : ox + h] = src_q[j]
        out_labels[i] = labels[j]
    return Dataset(pixels=pixels, labels=out_labels, tag="train_canvas")


def gen_centered_canvases(images, labels, pad=PAD):
    """Deterministic 6px-padded canvases (the untransformed test set)."""
    pixels = np.pad(_quantize(images), ((0, 0), (pad, pad), (pad, pad)))
    return Dataset(pixels=pixels, labels=labels.astype(np.int64).copy(), tag="centered")


def gen_affnist_test(images, labels, seed, variants_per_image=1):
    """Pad each test digit to 40x40 and warp it with per-record affine
    parameters; ``variants_per_image`` stacks independent warps."""
    n = images.shape[0]
    side = images.shape[1] + 2 * PAD
    count = n * variants_per_image
    pixels = np.zeros((count, side, side), dtype=np.float32)
    out_labels = np.zeros(count, dtype=np.int64)
    for i in range(count):
        src = i // variants_per_image
        rng = record_rng(seed, "affnist", i)
        params = sample_affine_params(rng).validate()
        pixels[i] = apply_affine(pad_to_canvas(images[src]), params)
        out_labels[i] = labels[src]
    return Dataset(pixels=pixels, labels=out_labels, tag="affnist")


def gen_multimnist(images, labels, pairs_per_image, seed, split_tag="train"):
    """Overlapping-digit composites.

    Each base digit is shifted by integer offsets in [-4, 4]^2 onto a
    36x36 canvas and overlaid (pixelwise max) with an independently
    shifted partner of a different class from the same split.  Per-digit
    canvases are kept as reconstruction targets.
    """
    if not 1 <= pairs_per_image <= 1000:
        raise DataError(f"pairs_per_image must be in [1, 1000], got {pairs_per_image}")
    n_src = images.shape[0]
    count = n_src * pairs_per_image
    src_q = _quantize(images)
    labels = np.asarray(labels)
    by_class = [np.where(labels != c)[0] for c in range(10)]

    pixels = np.zeros((count, MULTI_CANVAS, MULTI_CANVAS), dtype=np.uint8)
    components = np.zeros((count, 2, MULTI_CANVAS, MULTI_CANVAS), dtype=np.uint8)
    out_labels = np.zeros((count, 2), dtype=np.int64)

    def place(img, oy, ox):
        canvas = np.zeros((MULTI_CANVAS, MULTI_CANVAS), dtype=np.uint8)
        canvas[oy + 4 : oy + 32, ox + 4 : ox + 32] = img  # offsets in [-4,4] -> [0,8]
        return canvas

    for i in range(count):
        base = i // pairs_per_image
        rng = record_rng(seed, f"multimnist_{split_tag}", i)
        partner = int(by_class[labels[base]][rng.integers(0, by_class[labels[base]].size)])
        oy1, ox1 = rng.integers(-4, 5), rng.integers(-4, 5)
        oy2, ox2 = rng.integers(-4, 5), rng.integers(-4, 5)
        a = place(src_q[base], int(oy1), int(ox1))
        b = place(src_q[partner], int(oy2), int(ox2))
        pixels[i] = np.maximum(a, b)
        components[i, 0] = a
        components[i, 1] = b
        out_labels[i, 0] = labels[base]
        out_labels[i, 1] = labels[partner]
    return Dataset(pixels=pixels, labels=out_labels, components=components,
                   tag=f"multimnist_{split_tag}")


def batch_iter(dataset, batch_size=128, shuffle_seed=None, epoch=0):
    """Deterministically shuffled index batches; the final partial batch
    is kept.  ``shuffle_seed=None`` iterates in dataset order."""
    n = len(dataset)
    order = np.arange(n)
    if shuffle_seed is not None:
        rng = np.random.default_rng(
            np.random.SeedSequence((int(shuffle_seed), _tag_int("shuffle"), int(epoch)))
        )
        order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


# ---------------------------------------------------------------------------
# materialized cache format: magic CAPSDS01, little-endian header
# {u32 count, u16 side, u8 labels_per_record, u8 has_components}, then per
# record u8 labels[...], f32 pixels row-major, optional two component planes.

MAGIC = b"CAPSDS01"


def save_capsds(dataset, path):
    labels = dataset.labels if dataset.labels.ndim == 2 else dataset.labels[:, None]
    has_comp = dataset.components is not None
    side = dataset.side
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IHBB", len(dataset), side, labels.shape[1], int(has_comp)))
        for i in range(len(dataset)):
            f.write(labels[i].astype(np.uint8).tobytes())
            f.write(dataset.pixel_batch(i).astype("<f4").tobytes())
            if has_comp:
                f.write(dataset.component_batch(i).astype("<f4").tobytes())
    return path


def load_capsds(path):
    with open(path, "rb") as f:
        if _read_exact(f, 8, path) != MAGIC:
            raise DataError(f"{path}: not a CAPSDS v1 file")
        count, side, lpr, has_comp = struct.unpack("<IHBB", _read_exact(f, 8, path))
        px_bytes = side * side * 4
        pixels = np.zeros((count, side, side), dtype=np.float32)
        labels = np.zeros((count, lpr), dtype=np.int64)
        components = np.zeros((count, 2, side, side), dtype=np.float32) if has_comp else None
        for i in range(count):
            labels[i] = np.frombuffer(_read_exact(f, lpr, path), dtype=np.uint8)
            pixels[i] = np.frombuffer(_read_exact(f, px_bytes, path), dtype="<f4").reshape(side, side)
            if has_comp:
                components[i] = np.frombuffer(
                    _read_exact(f, 2 * px_bytes, path), dtype="<f4"
                ).reshape(2, side, side)
        extra = f.read(1)
        if extra:
            raise DataError(f"{path}: trailing bytes after {count} records")
    if lpr == 1:
        labels = labels[:, 0]
    return Dataset(pixels=pixels, labels=labels, components=components, tag=path)


def content_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dataset_manifest(dataset, seed, options):
    return {
        "tag": dataset.tag,
        "count": len(dataset),
        "side": dataset.side,
        "seed": seed,
        "options": options,
        "labels_per_record": 1 if dataset.labels.ndim == 1 else dataset.labels.shape[1],
        "has_components": dataset.components is not None,
    }


def manifest_json(manifest):
    return json.dumps(manifest, sort_keys=True, indent=2)
