"""Trajectory dataset container, persistence, splitting and batching.

On disk a dataset is a compact binary container ("QTRJ"):

    magic "QTRJ" | u16 version | u32 manifest length | manifest JSON
    records: for each record
        u8 prep axis (0=X, 1=Y, 2=Z) | u8 y0 | u8 meas axis | u8 yT |
        u16 step count | step_count * f32 voltages
    u32 CRC-32 over the record section

All integers and floats are little-endian. The manifest echoes the
generating configuration, the record count and the normalization
statistics (null until normalize() has been applied).

In memory the records live in flat numpy arrays (labels, step counts,
one concatenated voltage buffer plus offsets), which keeps millions of
short traces cheap to hold and slice. Datasets are treated as immutable
after construction.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .core import Label
from .errors import ConfigError, DataError, NumericError

MAGIC = b"QTRJ"
VERSION = 1
MAX_STEP_COUNT = 65535

_HEADER = struct.Struct("<4sHI")
_REC_HEADER = struct.Struct("<BBBBH")


def new_manifest(config: dict | None = None, seed: int | None = None,
                 n_records: int = 0) -> dict:
    return {
        "format": "qtraj.trajectories",
        "config": config or {},
        "seed": seed,
        "counts": {"records": int(n_records)},
        "normalization": None,
    }


@dataclass
class Dataset:
    """Immutable collection of trajectory records.

    labels columns are (prep_axis, y0, meas_axis, yT); voltages is the
    concatenation of all records, indexed through offsets.
    """

    manifest: dict
    labels: np.ndarray       # (n, 4) uint8
    step_counts: np.ndarray  # (n,) uint16
    voltages: np.ndarray     # (total_samples,) float32
    offsets: np.ndarray      # (n + 1,) int64

    def __post_init__(self):
        n = len(self.step_counts)
        if self.labels.shape != (n, 4) or self.offsets.shape != (n + 1,):
            raise DataError("inconsistent dataset array shapes")
        if self.manifest["counts"]["records"] != n:
            raise DataError(
                f"manifest record count {self.manifest['counts']['records']} "
                f"!= {n}"
            )
        if int(self.offsets[-1]) != len(self.voltages):
            raise DataError("voltage buffer length does not match offsets")

    def __len__(self) -> int:
        return len(self.step_counts)

    @property
    def norm_stats(self) -> tuple[float, float] | None:
        ns = self.manifest.get("normalization")
        if ns is None:
            return None
        return float(ns["mean"]), float(ns["std"])

    def prep_label(self, i: int) -> Label:
        return Label(y=int(self.labels[i, 1]), axis=int(self.labels[i, 0]))

    def meas_label(self, i: int) -> Label:
        return Label(y=int(self.labels[i, 3]), axis=int(self.labels[i, 2]))

    def record_voltages(self, i: int) -> np.ndarray:
        return self.voltages[self.offsets[i]:self.offsets[i + 1]]

    def groups_by_length(self) -> Iterator[tuple[int, np.ndarray]]:
        """Yield (step_count, record indices) for each distinct length."""
        for steps in np.unique(self.step_counts):
            (idx,) = np.nonzero(self.step_counts == steps)
            yield int(steps), idx

    def voltage_matrix(self, indices: np.ndarray) -> np.ndarray:
        """Stack equal-length records into a (len(indices), steps) matrix."""
        if len(indices) == 0:
            return np.empty((0, 0), dtype=np.float32)
        steps = int(self.step_counts[indices[0]])
        out = np.empty((len(indices), steps), dtype=np.float32)
        for row, i in enumerate(indices):
            out[row] = self.voltages[self.offsets[i]:self.offsets[i] + steps]
        return out

    def subset(self, indices: np.ndarray) -> "Dataset":
        indices = np.asarray(indices)
        counts = self.step_counts[indices]
        offsets = np.zeros(len(indices) + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        flat = np.empty(int(offsets[-1]), dtype=np.float32)
        for row, i in enumerate(indices):
            flat[offsets[row]:offsets[row + 1]] = self.record_voltages(i)
        manifest = json.loads(json.dumps(self.manifest))
        manifest["counts"]["records"] = len(indices)
        return Dataset(manifest=manifest, labels=self.labels[indices].copy(),
                       step_counts=counts.copy(), voltages=flat, offsets=offsets)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.manifest == other.manifest
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.step_counts, other.step_counts)
            and np.array_equal(self.voltages, other.voltages)
        )


def from_shots(shots, manifest: dict | None = None) -> Dataset:
    """Build a Dataset from an iterable of simulated shots."""
    shots = list(shots)
    n = len(shots)
    labels = np.zeros((n, 4), dtype=np.uint8)
    counts = np.zeros(n, dtype=np.uint16)
    for i, s in enumerate(shots):
        if s.steps > MAX_STEP_COUNT:
            raise DataError(f"record {i} has {s.steps} steps > {MAX_STEP_COUNT}")
        labels[i] = (s.prep.axis, s.prep.y, s.meas.axis, s.meas.y)
        counts[i] = s.steps
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    flat = np.empty(int(offsets[-1]), dtype=np.float32)
    for i, s in enumerate(shots):
        flat[offsets[i]:offsets[i + 1]] = s.record
    manifest = manifest if manifest is not None else new_manifest(n_records=n)
    manifest["counts"]["records"] = n
    return Dataset(manifest=manifest, labels=labels, step_counts=counts,
                   voltages=flat, offsets=offsets)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def write_dataset(path, dataset: Dataset) -> None:
    manifest_bytes = json.dumps(dataset.manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(manifest_bytes)))
        fh.write(manifest_bytes)
        crc = 0
        for i in range(len(dataset)):
            steps = int(dataset.step_counts[i])
            head = _REC_HEADER.pack(*dataset.labels[i], steps)
            body = dataset.record_voltages(i).astype("<f4").tobytes()
            crc = zlib.crc32(body, zlib.crc32(head, crc))
            fh.write(head)
            fh.write(body)
        fh.write(struct.pack("<I", crc))


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise DataError("file too short for header")
    magic, version, man_len = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DataError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DataError(f"unsupported version {version}")
    pos = _HEADER.size
    if pos + man_len + 4 > len(blob):
        raise DataError("truncated manifest")
    try:
        manifest = json.loads(blob[pos:pos + man_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"invalid manifest: {exc}") from exc
    pos += man_len
    try:
        n = int(manifest["counts"]["records"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError("manifest lacks a record count") from exc

    rec_start = pos
    labels = np.zeros((n, 4), dtype=np.uint8)
    counts = np.zeros(n, dtype=np.uint16)
    offsets = np.zeros(n + 1, dtype=np.int64)
    chunks = []
    for i in range(n):
        if pos + _REC_HEADER.size > len(blob) - 4:
            raise DataError(f"truncated record header at record {i}")
        pa, y0, ma, yt, steps = _REC_HEADER.unpack_from(blob, pos)
        if pa > 2 or ma > 2 or y0 > 1 or yt > 1:
            raise DataError(f"invalid label bytes in record {i}")
        pos += _REC_HEADER.size
        nbytes = 4 * steps
        if pos + nbytes > len(blob) - 4:
            raise DataError(f"truncated voltage block at record {i}")
        labels[i] = (pa, y0, ma, yt)
        counts[i] = steps
        offsets[i + 1] = offsets[i] + steps
        chunks.append(np.frombuffer(blob, dtype="<f4", count=steps, offset=pos))
        pos += nbytes
    if pos + 4 != len(blob):
        raise DataError("trailing bytes after records")
    (crc_stored,) = struct.unpack_from("<I", blob, pos)
    crc = zlib.crc32(blob[rec_start:pos])
    if crc != crc_stored:
        raise DataError(f"record checksum mismatch: {crc:#x} != {crc_stored:#x}")
    flat = (np.concatenate(chunks).astype(np.float32) if chunks
            else np.empty(0, dtype=np.float32))
    return Dataset(manifest=manifest, labels=labels, step_counts=counts,
                   voltages=flat, offsets=offsets)


# ---------------------------------------------------------------------------
# Splitting, normalization, batching
# ---------------------------------------------------------------------------


def split(dataset: Dataset, eval_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint, exhaustive random split; eval gets round(n * fraction)."""
    if not 0.0 < eval_fraction < 1.0:
        raise ConfigError("eval_fraction must be in (0, 1)")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_eval = int(round(n * eval_fraction))
    eval_idx = np.sort(perm[:n_eval])
    train_idx = np.sort(perm[n_eval:])
    return dataset.subset(train_idx), dataset.subset(eval_idx)


def compute_norm_stats(dataset: Dataset) -> tuple[float, float]:
    if len(dataset.voltages) < 2:
        raise NumericError("need at least 2 voltage samples for statistics")
    v = dataset.voltages.astype(np.float64)
    mean = float(v.mean())
    std = float(v.std())
    if std <= 0.0 or not np.isfinite(std):
        raise NumericError("voltage variance is zero; cannot normalize")
    return mean, std


def normalize(dataset: Dataset, stats: tuple[float, float] | None = None) -> Dataset:
    """Return a z-scored copy; stats default to the dataset's own."""
    mean, std = stats if stats is not None else compute_norm_stats(dataset)
    if std <= 0.0:
        raise NumericError("voltage variance is zero; cannot normalize")
    flat = ((dataset.voltages.astype(np.float64) - mean) / std).astype(np.float32)
    manifest = json.loads(json.dumps(dataset.manifest))
    manifest["normalization"] = {"mean": mean, "std": std}
    return Dataset(manifest=manifest, labels=dataset.labels.copy(),
                   step_counts=dataset.step_counts.copy(), voltages=flat,
                   offsets=dataset.offsets.copy())


@dataclass
class Batch:
    """Equal-length records assembled for one optimizer step."""

    indices: np.ndarray    # (b,) positions in the source dataset
    step_count: int
    prep_axis: np.ndarray  # (b,) uint8
    y0: np.ndarray
    meas_axis: np.ndarray
    y_t: np.ndarray
    voltages: np.ndarray   # (b, step_count) float64

    def __len__(self) -> int:
        return len(self.indices)


def batches(dataset: Dataset, batch_size: int, shuffle_seed: int) -> Iterator[Batch]:
    """Length-bucketed mini-batches covering every record exactly once.

    Records are bucketed by step count, shuffled within buckets, cut
    into batches of at most batch_size, and the batch order itself is
    shuffled. Fully deterministic in shuffle_seed.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    rng = np.random.default_rng(shuffle_seed)
    slices: list[np.ndarray] = []
    for _, idx in dataset.groups_by_length():
        idx = idx[rng.permutation(len(idx))]
        for lo in range(0, len(idx), batch_size):
            slices.append(idx[lo:lo + batch_size])
    order = rng.permutation(len(slices))
    for b in order:
        sel = slices[b]
        yield Batch(
            indices=sel,
            step_count=int(dataset.step_counts[sel[0]]),
            prep_axis=dataset.labels[sel, 0],
            y0=dataset.labels[sel, 1],
            meas_axis=dataset.labels[sel, 2],
            y_t=dataset.labels[sel, 3],
            voltages=dataset.voltage_matrix(sel).astype(np.float64),
        )
