"""Datasets: synthetic domain shifts, IDX digit files, deterministic batching.

Labels are 0-based inside the package and 1-based wherever they leave it
(``labels_1based``, CSV exports). Labels of a target-domain dataset are only
reachable through :meth:`Dataset.evaluation_labels`; the training path asks
for :meth:`Dataset.training_labels`, which refuses target data.
"""
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError, ParameterError
from .numerics import SeededStream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CACHE_MAGIC = b"CLDS"


class Dataset:
    def __init__(self, features, labels, domain, num_classes):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2:
            raise DataError(f"features must be (n, d), got shape {features.shape}")
        if not np.all(np.isfinite(features)):
            raise DataError("features contain non-finite values")
        if domain not in ("source", "target"):
            raise DataError(f"domain must be 'source' or 'target', got {domain!r}")
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (features.shape[0],):
                raise DataError("exactly one label per row is required")
            if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
                raise DataError(f"labels must lie in [1, {num_classes}]")
            labels.setflags(write=False)
        features.setflags(write=False)
        self.features = features
        self._labels = labels
        self.domain = domain
        self.num_classes = int(num_classes)

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    @property
    def has_labels(self):
        return self._labels is not None

    def training_labels(self):
        if self.domain == "target":
            raise DataError("target labels are not available to training")
        if self._labels is None:
            raise DataError("dataset carries no labels")
        return self._labels

    def evaluation_labels(self):
        if self._labels is None:
            raise DataError("dataset carries no labels")
        return self._labels

    @property
    def labels_1based(self):
        return None if self._labels is None else self._labels + 1

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        labels = None if self._labels is None else self._labels[idx]
        return Dataset(self.features[idx], labels, self.domain, self.num_classes)

    def __repr__(self):
        return f"Dataset({self.domain}, n={len(self)}, d={self.dim}, M={self.num_classes})"


def split_holdout(dataset, fraction, stream):
    """Random (train, holdout) split; ``fraction`` of rows go to the holdout."""
    if not 0.0 <= fraction < 1.0:
        raise ParameterError(f"holdout fraction must lie in [0, 1), got {fraction}")
    n_hold = int(round(fraction * len(dataset)))
    if n_hold == 0:
        return dataset, None
    perm = stream.permutation(len(dataset))
    return dataset.subset(np.sort(perm[n_hold:])), dataset.subset(np.sort(perm[:n_hold]))


# ---------------------------------------------------------------- synthetic

def _default_means():
    angles = np.deg2rad([90.0, 210.0, 330.0])
    return (1.8 * np.stack([np.cos(angles), np.sin(angles)], axis=1)).tolist()


def _default_translation():
    # unit step along the rotation direction of class 2, which pushes that class onto a source boundary
    a = np.deg2rad(330.0)
    return [float(np.cos(a)), float(np.sin(a))]


@dataclass
class SyntheticSpec:
    num_classes: int = 3
    n: int = 1500
    means: list = field(default_factory=_default_means)
    # per-class covariance: a scalar variance, a diagonal, or a full matrix
    covariances: object = 1.0
    angle_deg: float = 30.0
    translation: list = field(default_factory=_default_translation)
    proportions: list = field(default_factory=lambda: [0.5, 0.3, 0.2])
    noise: float = 0.5
    seed: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise ParameterError("need at least two classes")
        means = np.asarray(self.means, dtype=np.float64)
        if means.ndim != 2 or means.shape[0] != self.num_classes:
            raise ParameterError(f"means must be ({self.num_classes}, d), got {means.shape}")
        props = np.asarray(self.proportions, dtype=np.float64)
        if props.shape != (self.num_classes,) or np.any(props < 0) or abs(props.sum() - 1.0) > 1e-9:
            raise ParameterError("proportions must be M nonnegative numbers summing to 1")
        if means.shape[1] < 2:
            raise ParameterError("rotation needs at least two feature dimensions")
        if len(self.translation) != means.shape[1]:
            raise ParameterError("translation must have one entry per feature dimension")
        if self.n < self.num_classes:
            raise ParameterError("n must be at least the number of classes")
        if self.noise <= 0:
            raise ParameterError("noise scale must be positive")
        return means, props


def _cholesky_factors(cov, num_classes, dim):
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim == 0:
        cov = np.broadcast_to(np.eye(dim) * cov, (num_classes, dim, dim))
    elif cov.ndim == 1:
        cov = np.broadcast_to(np.diag(cov), (num_classes, dim, dim))
    elif cov.ndim == 2:
        cov = np.broadcast_to(cov, (num_classes, dim, dim))
    if cov.shape != (num_classes, dim, dim):
        raise ParameterError(f"covariance shape {cov.shape} does not fit M={num_classes}, d={dim}")
    factors = []
    for m, c in enumerate(cov):
        if not np.allclose(c, c.T):
            raise ParameterError(f"covariance of class {m + 1} is not symmetric")
        try:
            factors.append(np.linalg.cholesky(c))
        except np.linalg.LinAlgError:
            raise ParameterError(f"covariance of class {m + 1} is degenerate") from None
        if np.min(np.abs(np.diag(factors[-1]))) < 1e-12:
            raise ParameterError(f"covariance of class {m + 1} is degenerate")
    return np.stack(factors)


def rotation_matrix(dim, angle_deg):
    """Rotation by ``angle_deg`` in the plane of the first two coordinates."""
    r = np.eye(dim)
    a = np.deg2rad(angle_deg)
    r[:2, :2] = [[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]]
    return r


def _sample_gaussians(labels, means, factors, noise, stream):
    z = stream.normal((labels.shape[0], means.shape[1]))
    return means[labels] + noise * np.einsum("nij,nj->ni", factors[labels], z)


def make_gaussian_shift(spec):
    """Class-conditional Gaussians; the target is rotated, translated and label-shifted."""
    means, props = spec.validate()
    m, d = means.shape
    factors = _cholesky_factors(spec.covariances, m, d)
    root = SeededStream(spec.seed, ("data", "gaussian_shift"))

    src_stream = root.child("source")
    src_labels = np.arange(spec.n) % m
    src_labels = src_labels[src_stream.permutation(spec.n)]
    xs = _sample_gaussians(src_labels, means, factors, spec.noise, src_stream)

    tgt_stream = root.child("target")
    tgt_labels = tgt_stream.generator.choice(m, size=spec.n, p=props)
    xt = _sample_gaussians(tgt_labels, means, factors, spec.noise, tgt_stream)
    rot = rotation_matrix(d, spec.angle_deg)
    xt = xt @ rot.T + np.asarray(spec.translation, dtype=np.float64)
    return Dataset(xs, src_labels, "source", m), Dataset(xt, tgt_labels, "target", m)


def _moons(n, noise, stream):
    labels = np.arange(n) % 2
    labels = labels[stream.permutation(n)]
    t = np.pi * stream.uniform(n)
    outer = np.stack([np.cos(t), np.sin(t)], axis=1)
    inner = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    x = np.where(labels[:, None] == 0, outer, inner)
    x = x - np.array([0.5, 0.25])  # centre so rotations act about the middle
    return x + noise * stream.normal(x.shape), labels


def make_two_moons_rotated(n, angle_deg, noise=0.1, seed=0):
    if n < 4:
        raise ParameterError("two moons needs n >= 4")
    root = SeededStream(seed, ("data", "two_moons"))
    xs, ys = _moons(n, noise, root.child("source"))
    xt, yt = _moons(n, noise, root.child("target"))
    xt = xt @ rotation_matrix(2, angle_deg).T
    return Dataset(xs, ys, "source", 2), Dataset(xt, yt, "target", 2)


# ---------------------------------------------------------------- IDX files

def _read_exact(buf, offset, size, what):
    if offset + size > len(buf):
        raise FormatError(f"truncated IDX {what}: need {size} bytes, {len(buf) - offset} left", offset)
    return buf[offset:offset + size]


def parse_idx_images(buf):
    (magic,) = struct.unpack(">I", _read_exact(buf, 0, 4, "header"))
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}", 0)
    n, rows, cols = struct.unpack(">III", _read_exact(buf, 4, 12, "header"))
    body = _read_exact(buf, 16, n * rows * cols, "pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(n, rows, cols)


def parse_idx_labels(buf):
    (magic,) = struct.unpack(">I", _read_exact(buf, 0, 4, "header"))
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}", 0)
    (n,) = struct.unpack(">I", _read_exact(buf, 4, 4, "header"))
    return np.frombuffer(_read_exact(buf, 8, n, "label data"), dtype=np.uint8).copy()


def _area_weights(src, dst):
    """(dst, src) matrix of fractional overlaps; rows sum to 1."""
    w = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(np.floor(lo)), min(src, int(np.ceil(hi)))):
            w[i, j] = min(hi, j + 1) - max(lo, j)
    return w / scale


def area_downsample(images, side):
    """Area-average resize of (n, H, W) images to (n, side, side)."""
    n, h, w = images.shape
    if side is None or (side == h and side == w):
        return images.astype(np.float64)
    if side > h or side > w:
        raise ParameterError(f"cannot downsample {h}x{w} images up to {side}x{side}")
    wh, ww = _area_weights(h, side), _area_weights(w, side)
    return np.einsum("ih,nhw,jw->nij", wh, images.astype(np.float64), ww)


def load_idx(images_path, labels_path, downsample_to=8, limit=None, domain="source", num_classes=10):
    """Read an IDX image/label pair into a Dataset with pixels in [0, 1]."""
    with open(images_path, "rb") as fh:
        images = parse_idx_images(fh.read())
    with open(labels_path, "rb") as fh:
        labels = parse_idx_labels(fh.read())
    if len(labels) != len(images):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    if labels.size and labels.max() >= num_classes:
        raise DataError(f"label {labels.max()} outside the {num_classes} classes")
    pix = area_downsample(images / 255.0, downsample_to) if len(images) else np.zeros((0, downsample_to, downsample_to))
    return Dataset(pix.reshape(len(pix), -1), labels.astype(np.int64), domain, num_classes)


def write_idx(images_path, labels_path, images, labels):
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


# ---------------------------------------------------------------- flat cache

def save_cache(path, dataset):
    """16-byte header (magic, n, d, M) then big-endian float64 features and int16 labels."""
    n, d = dataset.features.shape
    labels = dataset._labels if dataset.has_labels else np.full(n, -1)
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack(">III", n, d, dataset.num_classes))
        fh.write(dataset.features.astype(">f8").tobytes())
        fh.write(np.asarray(labels).astype(">i2").tobytes())


def load_cache(path, domain):
    with open(path, "rb") as fh:
        buf = fh.read()
    if _read_exact(buf, 0, 4, "cache header") != CACHE_MAGIC:
        raise FormatError("bad dataset cache magic", 0)
    n, d, m = struct.unpack(">III", _read_exact(buf, 4, 12, "cache header"))
    feats = np.frombuffer(_read_exact(buf, 16, 8 * n * d, "cache features"), dtype=">f8").reshape(n, d)
    labels = np.frombuffer(_read_exact(buf, 16 + 8 * n * d, 2 * n, "cache labels"), dtype=">i2").astype(np.int64)
    return Dataset(feats.astype(np.float64), None if np.any(labels < 0) else labels, domain, m)


# ---------------------------------------------------------------- batching

def batch_iter(n, b, stream, drop_last=False):
    """Endless stream of index batches, reshuffled every epoch.

    ``n`` may be a Dataset. Within an epoch indices never repeat; with
    ``drop_last`` the short tail batch of each epoch is skipped so every
    batch has exactly ``b`` rows.
    """
    if isinstance(n, Dataset):
        n = len(n)
    if b < 1 or b > n:
        raise ParameterError(f"batch size {b} must lie in [1, {n}]")
    while True:
        perm = stream.permutation(n)
        for start in range(0, n, b):
            idx = perm[start:start + b]
            if drop_last and len(idx) < b:
                break
            yield idx
