"""Binary dataset and checkpoint files, MNIST IDX ingestion, config files, CSV reports.

Dataset file (little-endian)::

    magic "TGMV" | version u16 = 1 | reserved u16 | n_samples u64 | dim u32 | flags u32
    payload: n_samples * dim float32
    labels (flags bit 0): n_samples uint16

Checkpoint file (little-endian)::

    magic "TGMC" | version u16 = 1 | reserved u16
    config: u32 length + UTF-8 ``key = value`` text
    u32 parameter count, then per parameter:
        u16 name length + name | u32 rows | u32 cols | rows*cols float64
    u32 dim + dim float64 minima + dim float64 maxima (zero dim: no normaliser)
    u64 seed | u64 step counter
"""

from __future__ import annotations

import csv
import gzip
import io
import os
import struct
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .model import CONFIG_FIELDS, ConfigError, ModelConfig, Normalizer, param_shapes

DATASET_MAGIC = b"TGMV"
CHECKPOINT_MAGIC = b"TGMC"
FORMAT_VERSION = 1
FLAG_LABELS = 1

_DATASET_HEADER = struct.Struct("<4sHHQII")
_CKPT_HEADER = struct.Struct("<4sHH")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """Malformed or inconsistent file contents."""


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class VersionMismatchError(DataFormatError):
    pass


class ShapeMismatchError(DataFormatError):
    pass


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write_bytes(path, data: bytes):
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


# -- dataset files ------------------------------------------------------------


def write_dataset(path, samples, labels=None):
    x = np.asarray(samples)
    if x.ndim != 2:
        raise ShapeMismatchError(f"samples must be 2-D, got shape {x.shape}")
    flags = 0
    buf = io.BytesIO()
    if labels is not None:
        lab = np.asarray(labels)
        if lab.shape != (len(x),):
            raise ShapeMismatchError(f"{len(lab)} labels for {len(x)} samples")
        if lab.size and (lab.min() < 0 or lab.max() > 0xFFFF):
            raise DataFormatError("labels must fit in uint16")
        flags |= FLAG_LABELS
    buf.write(_DATASET_HEADER.pack(DATASET_MAGIC, FORMAT_VERSION, 0, len(x), x.shape[1], flags))
    buf.write(np.ascontiguousarray(x, dtype="<f4").tobytes())
    if labels is not None:
        buf.write(np.ascontiguousarray(lab, dtype="<u2").tobytes())
    atomic_write_bytes(path, buf.getvalue())


def read_dataset(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Return ``(samples as float32, labels or None)``."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != DATASET_MAGIC:
        raise BadMagicError(f"{path}: not a dataset file")
    if len(raw) < _DATASET_HEADER.size:
        raise TruncatedFileError(f"{path}: truncated header")
    _, version, _, n, dim, flags = _DATASET_HEADER.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {FORMAT_VERSION}")
    off = _DATASET_HEADER.size
    need = n * dim * 4 + (n * 2 if flags & FLAG_LABELS else 0)
    if len(raw) - off < need:
        raise TruncatedFileError(f"{path}: payload has {len(raw) - off} bytes, expected {need}")
    x = np.frombuffer(raw, dtype="<f4", count=n * dim, offset=off).reshape(n, dim).astype(np.float32)
    labels = None
    if flags & FLAG_LABELS:
        labels = np.frombuffer(raw, dtype="<u2", count=n, offset=off + n * dim * 4).astype(np.int64)
    return x, labels


# -- MNIST --------------------------------------------------------------------


def _read_idx(path, magic, ndim):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4 + 4 * ndim:
        raise TruncatedFileError(f"{path}: truncated IDX header")
    found = struct.unpack_from(">I", raw)[0]
    if found != magic:
        raise BadMagicError(f"{path}: IDX magic {found:#010x}, expected {magic:#010x}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    off = 4 + 4 * ndim
    count = int(np.prod(dims))
    if len(raw) - off < count:
        raise TruncatedFileError(f"{path}: expected {count} data bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=off).reshape(dims)


def read_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """MNIST images scaled to [0, 1] and flattened, plus integer labels."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise ShapeMismatchError(f"{len(images)} images but {len(labels)} labels")
    return images.reshape(len(images), -1).astype(np.float64) / 255.0, labels.astype(np.int64)


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 images ``(n, rows, cols)`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    atomic_write_bytes(images_path, struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes())
    atomic_write_bytes(labels_path, struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def choose_digits(seed: int, n: int = 3) -> list[int]:
    return sorted(int(d) for d in np.random.default_rng(seed).choice(10, size=n, replace=False))


def make_mnist_mixture(samples, labels, chosen_digits, major_fraction: float = 0.9, seed: int = 0):
    """Keep every image of the chosen digits and subsample the rest to ``1 - major_fraction``.

    Returns ``(samples, truth)`` with truth ``1..3`` for the chosen digits in
    the given order and ``4`` for the remainder. Output order is shuffled.
    """
    if not 0.0 < major_fraction < 1.0:
        raise ValueError("major_fraction must lie in (0, 1)")
    chosen = list(chosen_digits)
    if len(set(chosen)) != len(chosen):
        raise ValueError("chosen digits must be distinct")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    major = np.flatnonzero(np.isin(labels, chosen))
    rest = np.flatnonzero(~np.isin(labels, chosen))
    n_rest = int(round(len(major) * (1.0 - major_fraction) / major_fraction))
    n_rest = min(n_rest, len(rest))
    picked = rng.choice(rest, size=n_rest, replace=False) if n_rest else np.array([], dtype=np.int64)
    idx = rng.permutation(np.concatenate([major, picked]))
    rank = {d: i + 1 for i, d in enumerate(chosen)}
    truth = np.array([rank.get(int(labels[i]), len(chosen) + 1) for i in idx], dtype=np.int64)
    return np.asarray(samples)[idx], truth


# -- checkpoints --------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    normalizer: Normalizer | None = None
    seed: int = 0
    step: int = 0


def save_checkpoint(path, ckpt: Checkpoint):
    buf = io.BytesIO()
    buf.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, FORMAT_VERSION, 0))
    text = format_config(ckpt.config).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name, value in ckpt.params.items():
        arr = np.asarray(value, dtype="<f8")
        if arr.ndim != 2:
            raise ShapeMismatchError(f"parameter {name!r} is not 2-D")
        enc = name.encode("utf-8")
        buf.write(struct.pack("<H", len(enc)) + enc)
        buf.write(struct.pack("<II", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    norm = ckpt.normalizer
    if norm is None:
        buf.write(struct.pack("<I", 0))
    else:
        lo = np.asarray(norm.lo, dtype="<f8")
        buf.write(struct.pack("<I", len(lo)))
        buf.write(lo.tobytes())
        buf.write(np.asarray(norm.hi, dtype="<f8").tobytes())
    buf.write(struct.pack("<QQ", ckpt.seed, ckpt.step))
    atomic_write_bytes(path, buf.getvalue())


class _Reader:
    def __init__(self, raw, path):
        self.raw = raw
        self.off = 0
        self.path = path

    def take(self, n):
        if self.off + n > len(self.raw):
            raise TruncatedFileError(f"{self.path}: unexpected end of file at byte {self.off}")
        out = self.raw[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint file")
    r = _Reader(raw, path)
    _, version, _ = r.unpack("<4sHH")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {FORMAT_VERSION}")
    (text_len,) = r.unpack("<I")
    config, _ = parse_config(r.take(text_len).decode("utf-8"), source=str(path))
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        rows, cols = r.unpack("<II")
        params[name] = np.frombuffer(r.take(rows * cols * 8), dtype="<f8").reshape(rows, cols).copy()
    expected = param_shapes(config)
    for name, shape in expected.items():
        if name not in params:
            raise ShapeMismatchError(f"{path}: missing parameter {name!r}")
        if params[name].shape != shape:
            raise ShapeMismatchError(f"{path}: {name!r} has shape {params[name].shape}, config implies {shape}")
    (dim,) = r.unpack("<I")
    normalizer = None
    if dim:
        lo = np.frombuffer(r.take(dim * 8), dtype="<f8").copy()
        hi = np.frombuffer(r.take(dim * 8), dtype="<f8").copy()
        normalizer = Normalizer(lo, hi)
    seed, step = r.unpack("<QQ")
    return Checkpoint(config, params, normalizer, seed, step)


# -- config files -------------------------------------------------------------


@dataclass
class PipelineOptions:
    """Simulation, baseline and MNIST options that sit outside the model."""

    n_states: int = 10
    n_major: int = 5
    n_roi: int = 15
    n_timepoints: int = 50000
    window: int = 11
    noise_std: float = 0.1
    shrinkage: bool = False
    gmm_covariance: str = "spherical"
    gmm_max_iter: int = 200
    major_fraction: float = 0.9
    mnist_digits: tuple | None = None  # None: drawn from the seed


PIPELINE_FIELDS = tuple(f.name for f in fields(PipelineOptions))

_TYPES: dict[str, type] = {}
for _f in fields(ModelConfig):
    _TYPES[_f.name] = _f.type
for _f in fields(PipelineOptions):
    _TYPES[_f.name] = _f.type


def _parse_value(key, text, source, lineno):
    kind = _TYPES[key]
    where = f"{source}:{lineno}"
    try:
        if "tuple" in str(kind):
            if text.lower() in ("auto", "none", ""):
                return None
            return tuple(int(v) for v in text.replace(",", " ").split())
        if kind in (bool, "bool"):
            low = text.lower()
            if low in ("true", "on", "yes", "1"):
                return True
            if low in ("false", "off", "no", "0"):
                return False
            raise ValueError(text)
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{where}: bad value {text!r} for {key}") from None


def parse_config(text: str, source: str = "<config>", overrides: dict | None = None, defaults: dict | None = None):
    """Parse ``key = value`` lines into ``(ModelConfig, PipelineOptions)``.

    ``#`` starts a comment. Unknown keys are rejected; missing keys take
    ``defaults`` (a preset) and then the dataclass defaults. ``overrides``
    (already typed) are applied last.
    """
    values = {}
    for key, value in (defaults or {}).items():
        if key not in _TYPES:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = value
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, value, source, lineno)
    if overrides:
        for key, value in overrides.items():
            if key not in _TYPES:
                raise ConfigError(f"unknown key {key!r}")
            values[key] = value
    model = ModelConfig(**{k: v for k, v in values.items() if k in CONFIG_FIELDS})
    pipeline = PipelineOptions(**{k: v for k, v in values.items() if k in PIPELINE_FIELDS})
    if pipeline.gmm_covariance not in ("diag", "spherical"):
        raise ConfigError(f"gmm_covariance must be 'diag' or 'spherical', got {pipeline.gmm_covariance!r}")
    if not 1 <= pipeline.n_major <= pipeline.n_states:
        raise ConfigError("need 1 <= n_major <= n_states")
    return model, pipeline


def load_config(path=None, overrides: dict | None = None, defaults: dict | None = None):
    if path is None:
        text = ""
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except UnicodeDecodeError as exc:
            raise ConfigError(f"{path}: not UTF-8 text ({exc.reason})") from None
    return parse_config(text, source=str(path or "<defaults>"), overrides=overrides, defaults=defaults)


def _format_value(v):
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(i) for i in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(model: ModelConfig, pipeline: PipelineOptions | None = None) -> str:
    lines = [f"{f.name} = {_format_value(getattr(model, f.name))}" for f in fields(model)]
    if pipeline is not None:
        lines += [f"{f.name} = {_format_value(getattr(pipeline, f.name))}" for f in fields(pipeline)]
    return "\n".join(lines) + "\n"


# -- CSV reports --------------------------------------------------------------

METRIC_HEADER = ("method", "seed", "metric", "value")


def format_value(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_metrics_csv(path, rows):
    """Rows are ``(method, seed, metric, value)``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_HEADER)
    for method, seed, metric, value in rows:
        w.writerow((method, seed, metric, format_value(value)))
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def read_metrics_csv(path) -> list[tuple[str, int, str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = tuple(next(r, ()))
        if header != METRIC_HEADER:
            raise DataFormatError(f"{path}: unexpected header {header}")
        return [(m, int(s), k, float(v)) for m, s, k, v in r]


def write_table_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_value(v) if isinstance(v, (float, np.floating)) else v for v in row])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))
