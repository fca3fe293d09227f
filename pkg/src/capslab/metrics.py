"""Accuracy metrics, the semantic-compactness score, and capsule
perturbation sweeps."""

import json
import struct
import zlib
from dataclasses import dataclass, asdict

import numpy as np

from . import data as dpipe
from . import models as mz
from .errors import ConfigError

COMPACTNESS_FACTORS = ("rotation", "trans_x", "trans_y", "scale", "shear_x", "shear_y")

_FACTOR_FIELDS = {
    "rotation": ("rotation_deg",),
    "trans_x": ("translate_x_px",),
    "trans_y": ("translate_y_px",),
    "scale": ("scale_x", "scale_y"),  # one scale factor sweeps both axes
    "shear_x": ("shear_x_deg",),
    "shear_y": ("shear_y_deg",),
}


def accuracy(probabilities, labels):
    """Argmax match rate; argmax ties resolve to the lowest class index."""
    probabilities = np.asarray(probabilities)
    labels = np.asarray(labels)
    return float((probabilities.argmax(axis=1) == labels).mean())


def per_class_accuracy(probabilities, labels, num_classes=10):
    pred = np.asarray(probabilities).argmax(axis=1)
    labels = np.asarray(labels)
    out = {}
    for c in range(num_classes):
        mask = labels == c
        out[c] = float((pred[mask] == c).mean()) if mask.any() else None
    return out


def top2_multitarget_accuracy(probabilities, label_pairs):
    """A record counts iff its top-2 class set equals the label set."""
    probabilities = np.asarray(probabilities)
    label_pairs = np.asarray(label_pairs)
    # stable sort keeps ties deterministic (lower class index wins)
    top2 = np.argsort(-probabilities, axis=1, kind="stable")[:, :2]
    top2 = np.sort(top2, axis=1)
    want = np.sort(label_pairs, axis=1)
    return float(np.all(top2 == want, axis=1).mean())


@dataclass
class EvalResult:
    dataset_tag: str
    n_examples: int
    accuracy: float
    per_class: dict
    seed: int = 0

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class CompactnessReport:
    factor: str
    score: float
    n_images: int
    n_variations: int
    skipped_zero_variance: int

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def variance_compactness(variances, d_out=16):
    """KL divergence between sum-normalized per-dimension variances and
    the uniform distribution (natural log; 0*ln 0 := 0).

    One-hot variance scores ln(d_out); uniform variance scores 0.
    """
    variances = np.asarray(variances, dtype=np.float64)
    total = variances.sum()
    if total <= 0:
        return None
    vn = variances / total
    nz = vn > 0
    return float(np.sum(vn[nz] * np.log(d_out * vn[nz])))


def factor_sweep_params(factor, n_variations):
    """Evenly spaced affine parameter settings across the factor's range."""
    if factor not in _FACTOR_FIELDS:
        raise ConfigError(f"unknown factor {factor!r}; choose from {COMPACTNESS_FACTORS}")
    fields = _FACTOR_FIELDS[factor]
    lo, hi = dpipe.AffineParams.RANGES[fields[0]]
    values = np.linspace(lo, hi, n_variations)
    return [dpipe.AffineParams(**{f: float(v) for f in fields}) for v in values]


def compactness_score(spec, images, labels, factor, n_variations=11, batch_size=256):
    """Mean over images of the variance-compactness of the ground-truth
    class representation under a sweep of one latent factor.

    ``images`` are untransformed (S, S) canvases in [0, 1]; each is
    warped ``n_variations`` times along the factor, the 16-unit
    ground-truth representation is collected per variant, and
    per-dimension variances feed the KL score.  Images whose variance
    sums to zero are skipped and counted.
    """
    if n_variations < 2:
        raise ConfigError(f"n_variations must be >= 2, got {n_variations}")
    images = np.asarray(images)
    labels = np.asarray(labels)
    sweep = factor_sweep_params(factor, n_variations)
    n = images.shape[0]
    d_out = spec.cfg.d_out

    reps = np.zeros((n, n_variations, d_out), dtype=np.float64)
    variants = np.zeros((n, n_variations) + images.shape[1:], dtype=np.float32)
    for i in range(n):
        for j, params in enumerate(sweep):
            variants[i, j] = dpipe.apply_affine(images[i], params)
    flat = variants.reshape(n * n_variations, 1, images.shape[1], images.shape[2])
    rep_labels = np.repeat(labels, n_variations)
    for start in range(0, flat.shape[0], batch_size):
        stop = min(start + batch_size, flat.shape[0])
        out = mz.forward(spec, flat[start:stop])
        reps.reshape(-1, d_out)[start:stop] = mz.rep_for_class(
            spec, out, rep_labels[start:stop]
        )

    scores = []
    skipped = 0
    for i in range(n):
        score = variance_compactness(reps[i].var(axis=0), d_out)
        if score is None:
            skipped += 1
        else:
            scores.append(score)
    mean = float(np.mean(scores)) if scores else 0.0
    return CompactnessReport(
        factor=factor,
        score=mean,
        n_images=n - skipped,
        n_variations=n_variations,
        skipped_zero_variance=skipped,
    )


@dataclass(frozen=True)
class PerturbationSweepSpec:
    dimension: int
    lo: float
    hi: float
    step: float
    model_tag: str = ""

    def deltas(self):
        if self.step <= 0:
            raise ConfigError(f"step must be positive, got {self.step}")
        if not np.isfinite([self.lo, self.hi]).all() or self.hi < self.lo:
            raise ConfigError(f"bad range [{self.lo}, {self.hi}]")
        count = int(np.floor((self.hi - self.lo) / self.step)) + 1
        return self.lo + self.step * np.arange(count)


def default_sweep_range(cfg):
    """Capsule-length models respond to tiny unit tweaks; raw-activation
    models need a far wider range before reconstructions change."""
    if cfg.arch_family in ("capsnet", "convnet_cr_sf"):
        return (-0.2, 0.2, 0.05)
    return (-8.0, 8.0, 2.0)


def perturb_sweep(spec, image, sweep):
    """Decode the representation with one dimension tweaked per step.

    Runs the model on the single image, masks the 160-unit representation
    to the predicted class where the model uses masking, adds each delta
    to the chosen dimension, and decodes.  Returns (grid, deltas) where
    grid has one reconstructed image per delta; the delta-0 column equals
    the unperturbed reconstruction exactly.
    """
    if not spec.has_reconstruction:
        raise ConfigError(f"{spec.cfg.arch_family} has no reconstruction head")
    cfg = spec.cfg
    x = np.asarray(image, dtype=np.float32).reshape(1, 1, cfg.input_size, cfg.input_size)
    out = mz.forward(spec, x)
    rep_dim = cfg.num_classes * cfg.d_out
    if not 0 <= sweep.dimension < rep_dim:
        raise ConfigError(f"dimension {sweep.dimension} outside [0, {rep_dim})")

    from . import capsules as cp
    from .autodiff import Tensor

    if cfg.reconstruction == "conditional":
        if out.capsules is not None:
            grouped = out.capsules.v
        else:
            grouped = Tensor(out.rep.data.reshape(1, cfg.num_classes, cfg.d_out))
        rep = cp.mask_capsules(grouped).data[0]
    else:
        rep = out.rep.data[0]

    deltas = sweep.deltas()
    batch = np.repeat(rep[None, :], deltas.shape[0], axis=0)
    batch[:, sweep.dimension] += deltas.astype(batch.dtype)
    decoded = mz.decode(spec, Tensor(batch)).data
    side = cfg.input_size
    return decoded.reshape(deltas.shape[0], side, side), deltas


def sweep_grid_image(grid, pad=1):
    """Tile sweep reconstructions into one row image (uint8 grayscale)."""
    n, h, w = grid.shape
    out = np.zeros((h, n * (w + pad) - pad), dtype=np.uint8)
    for i in range(n):
        out[:, i * (w + pad) : i * (w + pad) + w] = np.round(
            np.clip(grid[i], 0, 1) * 255
        ).astype(np.uint8)
    return out


def write_pgm(image, path):
    """Binary PGM (P5, maxval 255)."""
    image = np.asarray(image, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        f.write(image.tobytes())
    return path


def write_png(image, path):
    """Minimal 8-bit grayscale PNG encoder (no external imaging dependency)."""
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    raw = b"".join(b"\x00" + image[r].tobytes() for r in range(h))

    def chunk(tag, payload):
        body = tag + payload
        return struct.pack(">I", len(payload)) + body + struct.pack(">I", zlib.crc32(body))

    header = struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0)
    with open(path, "wb") as f:
        f.write(b"\x89PNG\r\n\x1a\n")
        f.write(chunk(b"IHDR", header))
        f.write(chunk(b"IDAT", zlib.compress(raw, 9)))
        f.write(chunk(b"IEND", b""))
    return path
