"""Loading, validation, splitting, and neighbour-bank construction.

A dataset is aligned arrays over n examples: an embedding matrix (n, d),
confidences in [0, 1], binary outcomes, and optionally a known ground-truth
miscalibration value per example (synthetic data only) plus integer group
labels. Residuals y - f are derived on demand, never stored on disk.

On-disk formats:
  csv    header ``f,y,x0,...,x{d-1}[,delta_true][,group]``
  jsonl  one object per line with keys ``f``, ``y``, ``x`` (array),
         optional ``delta_true``, ``group``
  bin    columnar: magic ``CFLD1``, u64 n, u64 d, flags byte, then arrays
         (embeddings row-major, confidences, outcomes, optional true field
         as little-endian f64; optional group labels as little-endian i64)
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"CFLD1"
FORMATS = ("csv", "jsonl", "bin")

_FLAG_TRUE_FIELD = 0x01
_FLAG_GROUPS = 0x02


class DataError(ValueError):
    """Malformed or invalid dataset content."""


@dataclass(frozen=True)
class Dataset:
    """Aligned (embedding, confidence, outcome) triples, immutable after construction."""

    embeddings: np.ndarray          # (n, d) float64
    confidences: np.ndarray         # (n,) float64 in [0, 1]
    outcomes: np.ndarray            # (n,) float64 in {0, 1}
    true_field: Optional[np.ndarray] = None   # (n,) float64, synthetic only
    group_labels: Optional[np.ndarray] = None  # (n,) int64
    group_names: Optional[dict[int, str]] = None

    def __post_init__(self):
        emb = np.ascontiguousarray(np.asarray(self.embeddings, dtype=np.float64))
        conf = np.asarray(self.confidences, dtype=np.float64)
        out = np.asarray(self.outcomes, dtype=np.float64)
        if emb.ndim != 2:
            raise DataError(f"embeddings must be 2-D, got shape {emb.shape}")
        n = emb.shape[0]
        if n < 1:
            raise DataError("dataset must contain at least one example")
        if conf.shape != (n,) or out.shape != (n,):
            raise DataError(
                f"row-count mismatch: {n} embeddings, {conf.shape[0]} confidences, "
                f"{out.shape[0]} outcomes"
            )
        if not np.all(np.isfinite(emb)):
            raise DataError("embeddings contain non-finite values")
        if np.any((conf < 0.0) | (conf > 1.0)) or not np.all(np.isfinite(conf)):
            raise DataError("confidences outside [0, 1]")
        if not np.all((out == 0.0) | (out == 1.0)):
            raise DataError("outcomes must be exactly 0 or 1")
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "confidences", conf)
        object.__setattr__(self, "outcomes", out)
        if self.true_field is not None:
            tf = np.asarray(self.true_field, dtype=np.float64)
            if tf.shape != (n,):
                raise DataError("true_field length mismatch")
            object.__setattr__(self, "true_field", tf)
        if self.group_labels is not None:
            gl = np.asarray(self.group_labels, dtype=np.int64)
            if gl.shape != (n,):
                raise DataError("group_labels length mismatch")
            object.__setattr__(self, "group_labels", gl)

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    @property
    def residuals(self) -> np.ndarray:
        """Per-example residual y - f."""
        return self.outcomes - self.confidences

    def subset(self, indices: np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            embeddings=self.embeddings[idx],
            confidences=self.confidences[idx],
            outcomes=self.outcomes[idx],
            true_field=None if self.true_field is None else self.true_field[idx],
            group_labels=None if self.group_labels is None else self.group_labels[idx],
            group_names=self.group_names,
        )


@dataclass(frozen=True)
class SplitSpec:
    """Fractions for a seeded train/val/test partition."""

    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f <= 0 for f in fracs):
            raise ValueError(f"split fractions must be positive, got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)!r}")


@dataclass(frozen=True)
class NeighbourBank:
    """Capped subsample of the training split used as kernel support."""

    embeddings: np.ndarray     # (b, d)
    residuals: np.ndarray      # (b,)
    source_indices: np.ndarray  # (b,) indices into the train split
    cap: int

    def __post_init__(self):
        b = self.embeddings.shape[0]
        if b > self.cap:
            raise ValueError(f"bank size {b} exceeds cap {self.cap}")
        if len(np.unique(self.source_indices)) != b:
            raise ValueError("bank source indices must be unique")

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Partition a dataset by a seeded uniform permutation.

    Val/test get exactly floor(n * frac) rows; the remainder goes to train.
    """
    n = ds.n
    if n < 10:
        raise ValueError(f"need at least 10 rows to split, got {n}")
    n_val = int(np.floor(n * spec.val_frac))
    n_test = int(np.floor(n * spec.test_frac))
    n_train = n - n_val - n_test
    perm = np.random.default_rng(spec.seed).permutation(n)
    idx_train = perm[:n_train]
    idx_val = perm[n_train:n_train + n_val]
    idx_test = perm[n_train + n_val:]
    return ds.subset(idx_train), ds.subset(idx_val), ds.subset(idx_test)


def sample_bank(train: Dataset, cap: int = 20000, seed: int = 0) -> NeighbourBank:
    """Build the neighbour bank: the full train split, or a capped uniform subsample."""
    if cap < 1:
        raise ValueError(f"bank cap must be >= 1, got {cap}")
    if train.n <= cap:
        idx = np.arange(train.n, dtype=np.int64)
    else:
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(train.n, size=cap, replace=False)).astype(np.int64)
    return NeighbourBank(
        embeddings=train.embeddings[idx],
        residuals=train.residuals[idx],
        source_indices=idx,
        cap=cap,
    )


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def _row_error(row_num: int, msg: str) -> DataError:
    return DataError(f"data row {row_num}: {msg}")


def _check_row(row_num: int, f: float, y: float, x: np.ndarray, d: int):
    if x.shape[0] != d:
        raise _row_error(row_num, f"embedding has {x.shape[0]} dims, expected {d}")
    if not np.all(np.isfinite(x)):
        raise _row_error(row_num, "non-finite embedding value")
    if not np.isfinite(f) or f < 0.0 or f > 1.0:
        raise _row_error(row_num, f"confidence {f!r} outside [0, 1]")
    if y not in (0.0, 1.0):
        raise _row_error(row_num, f"outcome {y!r} is not 0 or 1")


def _groups_sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".groups.json")


def _load_group_names(path: Path) -> Optional[dict[int, str]]:
    sidecar = _groups_sidecar(path)
    if not sidecar.exists():
        return None
    raw = json.loads(sidecar.read_text())
    return {int(k): str(v) for k, v in raw.items()}


def load_triples(path: str | Path, format: str) -> Dataset:
    """Load a dataset from ``path`` in one of the formats in ``FORMATS``.

    The embedding dimension is inferred from the first row and enforced for
    all rows; validation errors name the offending 1-based data row.
    """
    path = Path(path)
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}, expected one of {FORMATS}")
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    if format == "csv":
        ds = _load_csv(path)
    elif format == "jsonl":
        ds = _load_jsonl(path)
    else:
        ds = _load_bin(path)
    return ds


def save_triples(ds: Dataset, path: str | Path, format: str) -> None:
    """Write a dataset to ``path``; the binary format round-trips bit-exactly."""
    path = Path(path)
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}, expected one of {FORMATS}")
    path.parent.mkdir(parents=True, exist_ok=True)
    if format == "csv":
        _save_csv(ds, path)
    elif format == "jsonl":
        _save_jsonl(ds, path)
    else:
        _save_bin(ds, path)
    if ds.group_names is not None:
        _groups_sidecar(path).write_text(
            json.dumps({str(k): v for k, v in sorted(ds.group_names.items())}, indent=1)
        )


def _load_csv(path: Path) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"empty file: {path}") from None
        header = [h.strip() for h in header]
        if len(header) < 3 or header[0] != "f" or header[1] != "y":
            raise DataError(f"bad CSV header {header!r}: expected f,y,x0,...")
        has_delta = "delta_true" in header
        has_group = "group" in header
        d = len(header) - 2 - int(has_delta) - int(has_group)
        if d < 1 or header[2:2 + d] != [f"x{i}" for i in range(d)]:
            raise DataError(f"bad CSV header {header!r}: expected columns x0..x{{d-1}}")
        fs, ys, xs, deltas, groups = [], [], [], [], []
        for row_num, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise _row_error(row_num, f"expected {len(header)} fields, got {len(row)}")
            try:
                f = float(row[0])
                y = float(row[1])
                x = np.array([float(v) for v in row[2:2 + d]], dtype=np.float64)
            except ValueError as exc:
                raise _row_error(row_num, f"unparseable number ({exc})") from None
            _check_row(row_num, f, y, x, d)
            fs.append(f)
            ys.append(y)
            xs.append(x)
            pos = 2 + d
            if has_delta:
                deltas.append(float(row[pos]))
                pos += 1
            if has_group:
                groups.append(int(row[pos]))
        if not fs:
            raise DataError(f"no data rows in {path}")
        return Dataset(
            embeddings=np.vstack(xs),
            confidences=np.array(fs),
            outcomes=np.array(ys),
            true_field=np.array(deltas) if has_delta else None,
            group_labels=np.array(groups, dtype=np.int64) if has_group else None,
            group_names=_load_group_names(path),
        )


def _save_csv(ds: Dataset, path: Path) -> None:
    header = ["f", "y"] + [f"x{i}" for i in range(ds.d)]
    if ds.true_field is not None:
        header.append("delta_true")
    if ds.group_labels is not None:
        header.append("group")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(ds.n):
            row = [repr(float(ds.confidences[i])), repr(float(ds.outcomes[i]))]
            row += [repr(float(v)) for v in ds.embeddings[i]]
            if ds.true_field is not None:
                row.append(repr(float(ds.true_field[i])))
            if ds.group_labels is not None:
                row.append(str(int(ds.group_labels[i])))
            writer.writerow(row)


def _load_jsonl(path: Path) -> Dataset:
    fs, ys, xs, deltas, groups = [], [], [], [], []
    has_delta = has_group = False
    d = None
    with open(path) as fh:
        row_num = 0
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row_num += 1
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise _row_error(row_num, f"invalid JSON ({exc.msg})") from None
            try:
                f = float(obj["f"])
                y = float(obj["y"])
                x = np.asarray(obj["x"], dtype=np.float64)
            except (KeyError, TypeError, ValueError) as exc:
                raise _row_error(row_num, f"missing or malformed key ({exc})") from None
            if x.ndim != 1:
                raise _row_error(row_num, "embedding 'x' must be a flat array")
            if d is None:
                d = x.shape[0]
                has_delta = "delta_true" in obj
                has_group = "group" in obj
            _check_row(row_num, f, y, x, d)
            if has_delta != ("delta_true" in obj) or has_group != ("group" in obj):
                raise _row_error(row_num, "inconsistent optional keys across rows")
            fs.append(f)
            ys.append(y)
            xs.append(x)
            if has_delta:
                deltas.append(float(obj["delta_true"]))
            if has_group:
                groups.append(int(obj["group"]))
    if not fs:
        raise DataError(f"empty file: {path}")
    return Dataset(
        embeddings=np.vstack(xs),
        confidences=np.array(fs),
        outcomes=np.array(ys),
        true_field=np.array(deltas) if has_delta else None,
        group_labels=np.array(groups, dtype=np.int64) if has_group else None,
        group_names=_load_group_names(path),
    )


def _save_jsonl(ds: Dataset, path: Path) -> None:
    with open(path, "w") as fh:
        for i in range(ds.n):
            obj = {
                "f": float(ds.confidences[i]),
                "y": float(ds.outcomes[i]),
                "x": [float(v) for v in ds.embeddings[i]],
            }
            if ds.true_field is not None:
                obj["delta_true"] = float(ds.true_field[i])
            if ds.group_labels is not None:
                obj["group"] = int(ds.group_labels[i])
            fh.write(json.dumps(obj) + "\n")


def _load_bin(path: Path) -> Dataset:
    raw = path.read_bytes()
    if len(raw) == 0:
        raise DataError(f"empty file: {path}")
    head = struct.calcsize("<5sQQB")
    if len(raw) < head or raw[:5] != MAGIC:
        raise DataError(f"not a {MAGIC.decode()} columnar file: {path}")
    _, n, d, flags = struct.unpack_from("<5sQQB", raw, 0)
    off = head
    expect = n * d * 8 + 2 * n * 8
    if flags & _FLAG_TRUE_FIELD:
        expect += n * 8
    if flags & _FLAG_GROUPS:
        expect += n * 8
    if len(raw) - off != expect:
        raise DataError(f"truncated columnar file: expected {expect} payload bytes, got {len(raw) - off}")

    def take_f64(count):
        nonlocal off
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).copy()
        off += count * 8
        return arr

    emb = take_f64(n * d).reshape(n, d)
    conf = take_f64(n)
    out = take_f64(n)
    tf = take_f64(n) if flags & _FLAG_TRUE_FIELD else None
    gl = None
    if flags & _FLAG_GROUPS:
        gl = np.frombuffer(raw, dtype="<i8", count=n, offset=off).copy()
    return Dataset(
        embeddings=emb,
        confidences=conf,
        outcomes=out,
        true_field=tf,
        group_labels=gl,
        group_names=_load_group_names(path),
    )


def _save_bin(ds: Dataset, path: Path) -> None:
    flags = 0
    if ds.true_field is not None:
        flags |= _FLAG_TRUE_FIELD
    if ds.group_labels is not None:
        flags |= _FLAG_GROUPS
    with open(path, "wb") as fh:
        fh.write(struct.pack("<5sQQB", MAGIC, ds.n, ds.d, flags))
        fh.write(np.ascontiguousarray(ds.embeddings, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.confidences, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.outcomes, dtype="<f8").tobytes())
        if ds.true_field is not None:
            fh.write(np.ascontiguousarray(ds.true_field, dtype="<f8").tobytes())
        if ds.group_labels is not None:
            fh.write(np.ascontiguousarray(ds.group_labels, dtype="<i8").tobytes())
