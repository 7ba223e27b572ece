"""Datasets: synthetic multi-modal generation, two-view digits, IDX and CMMDMAT I/O."""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .model import Batch

log = logging.getLogger(__name__)

MAT_MAGIC = b"CMMDMAT"
MAT_VERSION = 1
MANIFEST_NAME = "manifest.txt"


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Modality matrices (rows x width) plus labels, with their manifest facts."""

    x: dict[str, np.ndarray]
    y: np.ndarray | None
    families: dict[str, str]
    num_classes: int
    label_mode: str = "softmax"
    observed: tuple[str, ...] = ()
    missing: tuple[str, ...] = ()
    stats: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        rows = {len(v) for v in self.x.values()}
        if self.y is not None:
            rows.add(len(self.y))
        if len(rows) > 1:
            raise DataFormatError(f"inconsistent row counts across modalities: {sorted(rows)}")
        for name, arr in self.x.items():
            if arr.ndim != 2:
                raise DataFormatError(f"modality {name!r} must be a matrix, got shape {arr.shape}")

    def __len__(self) -> int:
        return len(next(iter(self.x.values())))

    @property
    def widths(self) -> tuple[tuple[str, int], ...]:
        return tuple((k, v.shape[1]) for k, v in self.x.items())

    def batch(self, index=None) -> Batch:
        b = Batch(dict(self.x), self.y)
        return b if index is None else b.take(index)

    def subset(self, index) -> "Dataset":
        return Dataset({k: v[index] for k, v in self.x.items()},
                       None if self.y is None else self.y[index],
                       dict(self.families), self.num_classes, self.label_mode,
                       self.observed, self.missing, dict(self.stats))

    def class_indices(self) -> np.ndarray:
        if self.y is None:
            raise ValueError("dataset has no labels")
        if self.label_mode == "softmax":
            return np.argmax(self.y, axis=1)
        return self.y.astype(np.int64)


# ---------------------------------------------------------------------------
# standardization

def standardize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (x - mean) / std


def destandardize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return x * std + mean


def fit_standardizer(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std < 1e-8] = 1.0
    return mean, std


def standardize_dataset(train: Dataset, *others: Dataset) -> None:
    """Standardize gaussian modalities in place using statistics from ``train``."""
    for name, arr in train.x.items():
        if train.families.get(name) != "gaussian":
            continue
        mean, std = fit_standardizer(arr)
        for ds in (train, *others):
            ds.x[name] = standardize(ds.x[name], mean, std)
            ds.stats[name] = (mean, std)


# ---------------------------------------------------------------------------
# synthetic data

@dataclass(frozen=True)
class ModalityConfig:
    name: str
    width: int
    depth: int = 1
    noise: float = 0.1
    # per-feature noise variances drawn uniformly from this range, overrides ``noise``
    noise_var_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.width <= 0 or self.depth < 0 or self.noise < 0:
            raise ValueError(f"invalid modality config {self}")


@dataclass(frozen=True)
class SynthConfig:
    modalities: tuple[ModalityConfig, ...]
    num_classes: int = 4
    latent_dim: int = 8
    separation: float = 3.0
    label_noise: float = 0.0
    rows: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.latent_dim < 1 or self.rows < 0 or not self.modalities:
            raise ValueError(f"invalid synthetic config {self}")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValueError("label_noise must lie in [0, 1)")


@dataclass
class SynthGenerator:
    """Fixed random class means and modality maps; draw any number of rows."""

    cfg: SynthConfig
    means: np.ndarray
    maps: dict[str, list[tuple[np.ndarray, np.ndarray]]]
    noise_std: dict[str, np.ndarray]

    @classmethod
    def from_config(cls, cfg: SynthConfig) -> "SynthGenerator":
        rng = np.random.default_rng([cfg.seed, 0])
        k, d = cfg.num_classes, cfg.latent_dim
        if k <= d:
            basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
            means = basis[:, :k].T.copy()
        else:
            means = rng.standard_normal((k, d))
            means /= np.linalg.norm(means, axis=1, keepdims=True)
        means *= cfg.separation
        maps, noise_std = {}, {}
        for m in cfg.modalities:
            layers = [(rng.standard_normal((d, m.width)) / math.sqrt(d), rng.normal(0, 0.1, m.width))]
            for _ in range(m.depth):
                layers.append((rng.standard_normal((m.width, m.width)) / math.sqrt(m.width),
                               rng.normal(0, 0.1, m.width)))
            maps[m.name] = layers
            if m.noise_var_range is not None:
                lo, hi = m.noise_var_range
                noise_std[m.name] = np.sqrt(rng.uniform(lo, hi, m.width))
            else:
                noise_std[m.name] = np.full(m.width, m.noise)
        return cls(cfg, means, maps, noise_std)

    def sample(self, rows: int, stream: int = 1) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray]:
        """Return (modalities, observed labels, clean labels)."""
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, stream])
        labels = rng.integers(0, cfg.num_classes, size=rows)
        t = self.means[labels] + rng.standard_normal((rows, cfg.latent_dim))
        x = {}
        for m in cfg.modalities:
            (w0, b0), *rest = self.maps[m.name]
            h = t @ w0 + b0
            for w, b in rest:
                h = np.tanh(h) @ w + b
            x[m.name] = h + self.noise_std[m.name] * rng.standard_normal((rows, m.width))
        noisy = labels.copy()
        if cfg.label_noise > 0 and cfg.num_classes > 1:
            flip = rng.random(rows) < cfg.label_noise
            shift = rng.integers(1, cfg.num_classes, size=rows)
            noisy[flip] = (labels[flip] + shift[flip]) % cfg.num_classes
        return x, noisy, labels


def one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def gen_synth_multimodal(cfg: SynthConfig, observed=None, missing=None, stream: int = 1) -> Dataset:
    """Draw ``cfg.rows`` rows; different ``stream`` values give disjoint splits."""
    gen = SynthGenerator.from_config(cfg)
    x, labels, _ = gen.sample(cfg.rows, stream)
    names = [m.name for m in cfg.modalities]
    observed = tuple(observed or names[:1])
    missing = tuple(missing or [n for n in names if n not in observed])
    return Dataset(x, one_hot(labels, cfg.num_classes), {n: "gaussian" for n in names},
                   cfg.num_classes, "softmax", observed, missing)


# ---------------------------------------------------------------------------
# two-view digits

def rotate_image(img: np.ndarray, angle: float) -> np.ndarray:
    """Rotate about the image centre with bilinear interpolation, zero fill."""
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    c, s = math.cos(angle), math.sin(angle)
    dy, dx = yy - cy, xx - cx
    # inverse map: output pixel -> source location
    sx = c * dx + s * dy + cx
    sy = -s * dx + c * dy + cy
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx, fy = sx - x0, sy - y0
    padded = np.zeros((h + 2, w + 2))
    padded[1:-1, 1:-1] = img

    def at(yi, xi):
        yi = np.clip(yi + 1, 0, h + 1)
        xi = np.clip(xi + 1, 0, w + 1)
        return padded[yi, xi]

    out = (at(y0, x0) * (1 - fx) * (1 - fy) + at(y0, x0 + 1) * fx * (1 - fy)
           + at(y0 + 1, x0) * (1 - fx) * fy + at(y0 + 1, x0 + 1) * fx * fy)
    return out


def make_two_view_digits(images: np.ndarray, labels: np.ndarray, seed: int,
                         max_angle: float = math.pi / 4, pad_to: int | None = None,
                         angles: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Rotated view and a noisy same-class view for every image.

    Returns flattened ``(x_O, x_M)``.  ``pad_to`` pads each image to a larger
    square before rotating and crops back afterwards.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if images.ndim != 3 or len(labels) != len(images):
        raise ValueError(f"expected n x H x W images with matching labels, got {images.shape}")
    if images.size and (images.min() < 0 or images.max() > 1):
        raise ValueError("pixel values must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n, h, w = images.shape
    if angles is None:
        angles = rng.uniform(-max_angle, max_angle, size=n)
    x_O = np.empty((n, h * w))
    for i in range(n):
        img = images[i]
        if pad_to is not None:
            top, left = (pad_to - h) // 2, (pad_to - w) // 2
            big = np.zeros((pad_to, pad_to))
            big[top:top + h, left:left + w] = img
            img = rotate_image(big, angles[i])[top:top + h, left:left + w]
        else:
            img = rotate_image(img, angles[i])
        x_O[i] = img.reshape(-1)
    by_class = {c: np.flatnonzero(labels == c) for c in np.unique(labels)}
    partner = np.array([rng.choice(by_class[c]) for c in labels], dtype=np.int64)
    noisy = images[partner].reshape(n, -1) + rng.uniform(0.0, 1.0, size=(n, h * w))
    x_M = np.clip(noisy, 0.0, 1.0)
    return np.clip(x_O, 0.0, 1.0), x_M


# ---------------------------------------------------------------------------
# IDX

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def load_idx(path) -> np.ndarray:
    """Parse an IDX file; u8 arrays of rank >= 2 are scaled to [0, 1]."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4:
        raise DataFormatError(f"{path}: truncated IDX header")
    zero, dtype_code, rank = struct.unpack(">HBB", blob[:4])
    if zero != 0 or dtype_code not in _IDX_TYPES or rank == 0:
        raise DataFormatError(f"{path}: bad IDX magic 0x{int.from_bytes(blob[:4], 'big'):08x}")
    header = 4 + 4 * rank
    if len(blob) < header:
        raise DataFormatError(f"{path}: truncated IDX extents")
    shape = struct.unpack(f">{rank}I", blob[4:header])
    dtype = np.dtype(_IDX_TYPES[dtype_code])
    need = int(np.prod(shape)) * dtype.itemsize
    if len(blob) - header != need:
        raise DataFormatError(f"{path}: expected {need} data bytes, found {len(blob) - header}")
    arr = np.frombuffer(blob, dtype=dtype, offset=header).reshape(shape)
    if dtype_code == 0x08 and rank >= 2:
        return arr.astype(np.float64) / 255.0
    if dtype_code in (0x0D, 0x0E):
        return arr.astype(np.float64)
    return arr.astype(np.int64)


def write_idx(path, arr: np.ndarray) -> None:
    """Write an unsigned-byte IDX file (for fixtures and subsets)."""
    arr = np.asarray(arr)
    with open(path, "wb") as f:
        f.write(struct.pack(">HBB", 0, 0x08, arr.ndim))
        f.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        f.write(arr.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# CMMDMAT container

def write_matrix(path, mat: np.ndarray) -> None:
    mat = np.asarray(mat)
    if mat.ndim != 2:
        raise ValueError(f"write_matrix expects a matrix, got shape {mat.shape}")
    with open(path, "wb") as f:
        f.write(MAT_MAGIC)
        f.write(struct.pack("<IQQ", MAT_VERSION, *mat.shape))
        f.write(np.ascontiguousarray(mat, dtype="<f4").tobytes())


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    head = len(MAT_MAGIC) + 20
    if len(blob) < head or blob[:len(MAT_MAGIC)] != MAT_MAGIC:
        raise DataFormatError(f"{path}: not a CMMDMAT file")
    version, rows, cols = struct.unpack("<IQQ", blob[len(MAT_MAGIC):head])
    if version != MAT_VERSION:
        raise DataFormatError(f"{path}: unsupported CMMDMAT version {version}")
    if len(blob) - head != rows * cols * 4:
        raise DataFormatError(f"{path}: expected {rows}x{cols} floats, found {len(blob) - head} bytes")
    return np.frombuffer(blob, dtype="<f4", offset=head).reshape(rows, cols).astype(np.float64)


def _fmt_list(values) -> str:
    return ", ".join(str(v) for v in values)


def save_dataset(ds: Dataset, path) -> None:
    """Write ``manifest.txt`` plus one CMMDMAT file per modality (and labels, stats)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = list(ds.x)
    lines = [
        "modalities = " + _fmt_list(names),
        "widths = " + _fmt_list(ds.x[n].shape[1] for n in names),
        "families = " + _fmt_list(ds.families[n] for n in names),
        f"rows = {len(ds)}",
        f"num_classes = {ds.num_classes}",
        f"label_mode = {ds.label_mode}",
        "observed = " + _fmt_list(ds.observed),
        "missing = " + _fmt_list(ds.missing),
        "files = " + _fmt_list(f"{n}.mat" for n in names),
        "labels = " + ("labels.mat" if ds.y is not None else "none"),
        "standardized = " + _fmt_list(n for n in names if n in ds.stats),
    ]
    for n in names:
        write_matrix(path / f"{n}.mat", ds.x[n])
        if n in ds.stats:
            write_matrix(path / f"{n}.stats.mat", np.stack(ds.stats[n]))
    if ds.y is not None:
        write_matrix(path / "labels.mat", ds.y)
    (path / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> dict[str, str]:
    kv = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataFormatError(f"{path}: malformed manifest line {raw!r}")
        kv[key.strip()] = value.strip()
    return kv


def _split(v: str) -> list[str]:
    return [s.strip() for s in v.split(",") if s.strip()]


def load_dataset(path) -> Dataset:
    path = Path(path)
    m = read_manifest(path / MANIFEST_NAME)
    try:
        names, widths = _split(m["modalities"]), [int(w) for w in _split(m["widths"])]
        families, files = _split(m["families"]), _split(m["files"])
        rows = int(m["rows"])
        num_classes = int(m["num_classes"])
    except KeyError as e:
        raise DataFormatError(f"{path}: manifest lacks key {e.args[0]!r}") from None
    if not (len(names) == len(widths) == len(families) == len(files)):
        raise DataFormatError(f"{path}: modality lists in manifest have different lengths")
    x = {}
    for name, width, fname in zip(names, widths, files):
        mat = read_matrix(path / fname)
        if mat.shape != (rows, width):
            raise DataFormatError(f"{path}: {fname} is {mat.shape}, manifest says {(rows, width)}")
        x[name] = mat
    y = None
    if m.get("labels", "none") != "none":
        y = read_matrix(path / m["labels"])
        if len(y) != rows:
            raise DataFormatError(f"{path}: labels have {len(y)} rows, manifest says {rows}")
    stats = {}
    for name in _split(m.get("standardized", "")):
        st = read_matrix(path / f"{name}.stats.mat")
        stats[name] = (st[0], st[1])
    return Dataset(x, y, dict(zip(names, families)), num_classes, m.get("label_mode", "softmax"),
                   tuple(_split(m.get("observed", ""))), tuple(_split(m.get("missing", ""))), stats)


# ---------------------------------------------------------------------------
# batching

def batch_indices(n: int, batch_size: int, shuffle: bool, seed=None, rng=None,
                  min_size: int = 1) -> Iterator[np.ndarray]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if shuffle:
        rng = rng if rng is not None else np.random.default_rng(seed)
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) < min_size:
            log.info("dropping short final batch of %d rows", len(idx))
            continue
        yield idx


def batches(ds: Dataset, batch_size: int, shuffle: bool = True, seed=None, rng=None,
            min_size: int = 1) -> Iterator[Batch]:
    for idx in batch_indices(len(ds), batch_size, shuffle, seed, rng, min_size):
        yield ds.batch(idx)
