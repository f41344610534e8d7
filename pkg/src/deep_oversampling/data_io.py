"""Datasets: IDX ingestion, synthetic blobs, imbalance creation, augmentation."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx


class IdxFormatError(ValueError):
    def __init__(self, message, offset=None, path=None):
        where = f" at byte {offset}" if offset is not None else ""
        src = f"{path}: " if path else ""
        super().__init__(f"{src}{message}{where}")
        self.offset = offset
        self.path = path


@dataclass
class Dataset:
    """``x`` is ``(m, C, H, W)``, ``y`` holds integer labels in ``[0, n_classes)``.

    ``minority_classes`` records which classes were artificially reduced;
    ``source_index`` maps each sample back to its position in the dataset the
    imbalancers were applied to.
    """
    x: np.ndarray
    y: np.ndarray
    n_classes: int
    minority_classes: tuple = ()
    provenance: str = ""
    source_index: np.ndarray = field(default=None)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} inputs but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if self.source_index is None:
            self.source_index = np.arange(len(self.y))
        self.minority_classes = tuple(sorted(int(c) for c in self.minority_classes))

    def __len__(self):
        return len(self.y)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.x.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes)

    def subset(self, keep, note: str = "") -> "Dataset":
        keep = np.asarray(keep)
        prov = f"{self.provenance}; {note}" if note and self.provenance else note or self.provenance
        return replace(self, x=self.x[keep], y=self.y[keep], provenance=prov,
                       source_index=self.source_index[keep])

    def manifest(self, seed=None) -> str:
        """Plain ``key: value`` text describing the dataset."""
        counts = self.class_counts()
        lines = [f"samples: {len(self)}", f"classes: {self.n_classes}",
                 f"input_shape: {'x'.join(str(s) for s in self.input_shape)}",
                 f"minority_classes: {','.join(map(str, self.minority_classes)) or '-'}",
                 f"minority_reduced: {len(self.minority_classes)}"]
        if seed is not None:
            lines.append(f"seed: {seed}")
        lines.append(f"provenance: {self.provenance}")
        for c, n in enumerate(counts):
            tag = "minority" if c in self.minority_classes else "majority"
            lines.append(f"class {c}: {n} {tag}")
        return "\n".join(lines) + "\n"


# -- IDX -------------------------------------------------------------------
_IDX_TYPES = {0x08: np.dtype(">u1"), 0x09: np.dtype(">i1"), 0x0B: np.dtype(">i2"),
              0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}
_IDX_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}


def _open(path, mode):
    return gzip.open(path, mode) if str(path).endswith(".gz") else open(path, mode)


def read_idx(path) -> np.ndarray:
    """Read one IDX array (big-endian header, any IDX element type)."""
    with _open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise IdxFormatError("truncated header", len(data), path)
    if data[0] != 0 or data[1] != 0:
        raise IdxFormatError(f"bad magic {data[:4].hex()}", 0, path)
    code, rank = data[2], data[3]
    if code not in _IDX_TYPES:
        raise IdxFormatError(f"unknown element type 0x{code:02x}", 2, path)
    if len(data) < 4 + 4 * rank:
        raise IdxFormatError("truncated dimension list", len(data), path)
    dims = struct.unpack_from(f">{rank}I", data, 4)
    offset = 4 + 4 * rank
    dtype = _IDX_TYPES[code]
    need = int(np.prod(dims)) * dtype.itemsize
    if len(data) - offset < need:
        raise IdxFormatError(f"expected {need} payload bytes, found {len(data) - offset}",
                             len(data), path)
    if len(data) - offset > need:
        raise IdxFormatError("trailing bytes after payload", offset + need, path)
    arr = np.frombuffer(data, dtype=dtype, count=int(np.prod(dims)), offset=offset)
    return arr.reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array) -> None:
    array = np.asarray(array)
    code = _IDX_CODES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"dtype {array.dtype} has no IDX encoding")
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    with _open(path, "wb") as fh:
        fh.write(header)
        fh.write(array.astype(_IDX_TYPES[code]).tobytes())


def load_idx(images_path, labels_path, n_classes: int = None) -> Dataset:
    """Load an image/label IDX pair.

    ``uint8`` pixels are scaled to ``[0, 1]``; floating images are taken as is.
    Rank-3 image files get a singleton channel axis.
    """
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise IdxFormatError(f"labels must have rank 1, found {labels.ndim}", 3, labels_path)
    if images.ndim == 3:
        images = images[:, None]
    if images.ndim != 4:
        raise IdxFormatError(f"images must have rank 3 or 4, found {images.ndim}", 3,
                             images_path)
    if len(images) != len(labels):
        raise IdxFormatError(f"{len(images)} images but {len(labels)} labels", 4,
                             labels_path)
    if images.dtype == np.uint8:
        x = images.astype(np.float32) / np.float32(255.0)
    else:
        x = images.astype(np.float32)
    if n_classes is None:
        n_classes = max(int(labels.max()) + 1, 2) if len(labels) else 2
    return Dataset(x, labels.astype(np.int64), n_classes, provenance=f"idx:{images_path}")


def save_idx(dataset: Dataset, images_path, labels_path, as_uint8: bool = False) -> None:
    """Write a dataset as an IDX pair (float32 pixels unless ``as_uint8``)."""
    x = dataset.x
    if as_uint8:
        x = np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)
    else:
        x = x.astype(np.float32)
    if x.shape[1] == 1:
        x = x[:, 0]
    write_idx(images_path, x)
    write_idx(labels_path, dataset.y.astype(np.uint8))


# -- synthetic data ----------------------------------------------------------
def blob_centroids(n_classes: int, dims, separation: float, seed: int) -> np.ndarray:
    """Random centroids scaled so the closest pair is ``separation`` apart."""
    size = int(np.prod(dims))
    rng = nx.make_rng(seed, "centroids")
    c = rng.standard_normal((n_classes, size))
    if n_classes > 1:
        diff = c[:, None, :] - c[None, :, :]
        dist = np.sqrt(np.sum(diff * diff, axis=2))
        closest = dist[~np.eye(n_classes, dtype=bool)].min()
        c *= separation / closest
    else:
        c *= 0.0
    return c


def bump_basis(latent_dim: int, dims) -> np.ndarray:
    """``latent_dim`` unit-norm Gaussian bumps laid out on a grid per channel.

    Returns a ``(latent_dim, C*H*W)`` matrix; bump ``j`` lives on channel
    ``j % C``.
    """
    c, h, w = dims
    per_channel = -(-latent_dim // c)
    side = int(np.ceil(np.sqrt(per_channel)))
    ys = (np.arange(side) + 0.5) * h / side
    xs = (np.arange(side) + 0.5) * w / side
    width = 0.5 * min(h, w) / side
    yy, xx = np.mgrid[0:h, 0:w]
    basis = np.zeros((latent_dim, c, h, w))
    for j in range(latent_dim):
        cell = j // c
        cy, cx = ys[cell // side], xs[cell % side]
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
        basis[j, j % c] = bump / np.linalg.norm(bump)
    return basis.reshape(latent_dim, -1)


def synth_blobs(n_classes: int, per_class_counts, dims, separation: float, seed: int,
                centroid_seed: int = None, spread: float = 1.0,
                latent_dim: int = None) -> Dataset:
    """Isotropic Gaussian clusters rendered into ``dims`` (C x H x W).

    With ``latent_dim=None`` the clusters live directly in pixel space.
    Otherwise they are drawn in a ``latent_dim``-dimensional space and
    rendered as weighted sums of smooth spatial bumps (:func:`bump_basis`),
    which gives image-like inputs with local spatial structure.

    Centroids come from ``centroid_seed`` (default ``seed``) so that
    independent train/test draws can share one class geometry.
    """
    dims = tuple(dims)
    if len(per_class_counts) != n_classes or min(per_class_counts) < 1:
        raise ValueError("need a positive count for every class")
    cseed = seed if centroid_seed is None else centroid_seed
    space = dims if latent_dim is None else (latent_dim,)
    centroids = blob_centroids(n_classes, space, separation, cseed)
    rng = nx.make_rng(seed, "blobs")
    zs, ys = [], []
    for c, count in enumerate(per_class_counts):
        zs.append(centroids[c] + spread * rng.standard_normal((count, centroids.shape[1])))
        ys.append(np.full(count, c))
    z = np.concatenate(zs)
    if latent_dim is not None:
        z = z @ bump_basis(latent_dim, dims)
    x = z.reshape((-1,) + dims).astype(np.float32)
    return Dataset(x, np.concatenate(ys), n_classes,
                   provenance=f"blobs(sep={separation}, spread={spread}, seed={seed}, "
                              f"centroid_seed={cseed}, latent_dim={latent_dim})")


# -- imbalance ----------------------------------------------------------------
@dataclass
class ImbalanceSpec:
    mode: str = "random-classes"  # or "gaussian-overall"
    minority_count: int = 4
    p: float = 0.9
    overall_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("random-classes", "gaussian-overall"):
            raise ValueError(f"unknown imbalance mode {self.mode!r}")
        if not 0 <= self.p < 1:
            raise ValueError("removal fraction p must lie in [0, 1)")
        if not 0 <= self.overall_rate < 1:
            raise ValueError("overall reduction rate must lie in [0, 1)")


def make_imbalanced(dataset: Dataset, spec: ImbalanceSpec) -> Dataset:
    if spec.mode == "random-classes":
        return make_imbalanced_random(dataset, spec)
    return make_imbalanced_gaussian(dataset, spec.overall_rate, spec.seed)


def make_imbalanced_random(dataset: Dataset, spec: ImbalanceSpec) -> Dataset:
    """Pick ``minority_count`` classes and delete ``floor(p * m_j)`` from each."""
    if not 0 <= spec.p < 1:
        raise ValueError("removal fraction p must lie in [0, 1)")
    if spec.p == 0 or spec.minority_count == 0:
        return dataset
    if spec.minority_count >= dataset.n_classes:
        raise ValueError("minority_count must be smaller than the number of classes")
    rng = nx.make_rng(spec.seed, "imbalance")
    minority = np.sort(rng.choice(dataset.n_classes, spec.minority_count, replace=False))
    drop = []
    for c in minority:
        members = np.flatnonzero(dataset.y == c)
        n_drop = int(np.floor(spec.p * len(members)))
        drop.append(rng.choice(members, n_drop, replace=False))
    keep = np.setdiff1d(np.arange(len(dataset)), np.concatenate(drop))
    out = dataset.subset(keep, f"random-classes(p={spec.p}, seed={spec.seed})")
    out.minority_classes = tuple(int(c) for c in minority)
    return out


def _gaussian_fractions(counts: np.ndarray, rate: float, rng) -> np.ndarray:
    # draws |N(0,1)| per class, then finds a scale s with
    # sum_j min(s * f_j, 0.99) * m_j == rate * M (monotone in s -> bisection)
    frac = np.abs(rng.standard_normal(len(counts)))
    frac[counts == 0] = 0.0
    if frac.sum() == 0:
        frac[counts > 0] = 1.0
    target = rate * counts.sum()

    def deleted(s):
        return float(np.sum(np.minimum(s * frac, 0.99) * counts))

    lo, hi = 0.0, 1.0
    while deleted(hi) < target and hi < 1e12:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if deleted(mid) < target else (lo, mid)
    return np.minimum(hi * frac, 0.99)


def make_imbalanced_gaussian(dataset: Dataset, overall_rate: float, seed: int) -> Dataset:
    """Delete samples with per-class fractions drawn from ``|N(0, 1)|``.

    Fractions are rescaled (each clipped to 0.99) so the total deletion is
    ``overall_rate`` of the dataset, rounded to a whole sample. Classes whose
    fraction ends up largest relative to the mean are the minority classes.
    """
    if not 0 <= overall_rate < 1:
        raise ValueError("overall reduction rate must lie in [0, 1)")
    if overall_rate == 0:
        return dataset
    if overall_rate > 0.99:
        raise ValueError("per-class deletion is capped at 0.99; rate unreachable")
    counts = dataset.class_counts()
    rng = nx.make_rng(seed, "gaussian-imbalance")
    frac = _gaussian_fractions(counts, overall_rate, rng)
    n_drop = np.floor(frac * counts).astype(int)
    target = int(round(overall_rate * counts.sum()))
    # hand out the rounding remainder to classes with the largest leftovers
    leftover = frac * counts - n_drop
    for c in np.argsort(-leftover, kind="stable"):
        if n_drop.sum() >= target:
            break
        if n_drop[c] < counts[c] - 1:
            n_drop[c] += 1
    drop = []
    for c in range(dataset.n_classes):
        members = np.flatnonzero(dataset.y == c)
        drop.append(rng.choice(members, n_drop[c], replace=False))
    keep = np.setdiff1d(np.arange(len(dataset)), np.concatenate(drop))
    out = dataset.subset(keep, f"gaussian-overall(rate={overall_rate}, seed={seed})")
    mean_frac = n_drop.sum() / counts.sum()
    out.minority_classes = tuple(int(c) for c in np.flatnonzero(n_drop > mean_frac * counts))
    return out


# -- augmentation -------------------------------------------------------------
def rotate_nearest(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate ``(C, H, W)`` about the image center, nearest-neighbor, zero fill."""
    c, h, w = image.shape
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w]
    # inverse mapping: output pixel -> source pixel
    cos, sin = np.cos(theta), np.sin(theta)
    sy = cos * (yy - cy) - sin * (xx - cx) + cy
    sx = sin * (yy - cy) + cos * (xx - cx) + cx
    iy, ix = np.rint(sy).astype(int), np.rint(sx).astype(int)
    valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
    out = np.zeros_like(image)
    out[:, valid] = image[:, iy[valid], ix[valid]]
    return out


def augment_mirror_rotate(dataset: Dataset, factor: int, seed: int) -> Dataset:
    """``factor`` copies per sample: original, horizontal mirror, then random
    rotations (uniform angle in [0, 360)). Copies of a sample are adjacent."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return dataset
    if dataset.x.shape[2] != dataset.x.shape[3]:
        raise ValueError("mirror/rotate augmentation needs square images")
    rng = nx.make_rng(seed, "augment")
    angles = rng.uniform(0.0, 360.0, (len(dataset), max(factor - 2, 0)))
    xs = []
    for i, img in enumerate(dataset.x):
        copies = [img, img[:, :, ::-1]][:factor]
        copies += [rotate_nearest(img, a) for a in angles[i]]
        xs.extend(copies)
    x = np.stack(xs).astype(dataset.x.dtype)
    return Dataset(x, np.repeat(dataset.y, factor), dataset.n_classes,
                   dataset.minority_classes,
                   f"{dataset.provenance}; augment(factor={factor}, seed={seed})",
                   np.repeat(dataset.source_index, factor))
