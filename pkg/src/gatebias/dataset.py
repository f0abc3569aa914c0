"""Activation datasets: labels, the ``.actv`` binary cache, ingestion and splits.

A dataset is stored column-wise (one float32 matrix plus small label arrays)
so that downstream stages can work on whole matrices; ``records`` gives the
row view when a per-example object is more convenient.
"""

from __future__ import annotations

import enum
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DataError, FormatError

CACHE_MAGIC = b"ACTV"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sHIQB")


class Behavior(enum.IntEnum):
    TOOL_CALL = 0
    REQUEST_FOR_INFO = 1
    DIRECT_ANSWER = 2
    CANNOT_ANSWER = 3


class Correctness(enum.IntEnum):
    TRUE_CALL = 0
    FALSE_CALL = 1
    TRUE_NOCALL = 2
    FALSE_NOCALL = 3
    UNKNOWN = 4


class Split(enum.IntEnum):
    CAL = 0
    TEST = 1
    UNASSIGNED = 2


class Provenance(enum.IntEnum):
    SURROGATE = 0
    INGESTED = 1


# judge label strings as emitted by the four-way classifier
LABEL_NAMES = {
    "tool_call": Behavior.TOOL_CALL,
    "request_for_info": Behavior.REQUEST_FOR_INFO,
    "direct_answer": Behavior.DIRECT_ANSWER,
    "cannot_answer": Behavior.CANNOT_ANSWER,
}

CORRECTNESS_NAMES = {c.name.lower(): c for c in Correctness}


@dataclass(frozen=True)
class ActivationRecord:
    context_id: str
    h: np.ndarray
    behavior_label: Behavior
    correctness: Correctness = Correctness.UNKNOWN
    split: Split = Split.UNASSIGNED


def correctness_from(decided_call: np.ndarray, required_call: np.ndarray) -> np.ndarray:
    """Map (emitted decision, required decision) pairs onto `Correctness` codes."""
    decided_call = np.asarray(decided_call, dtype=bool)
    required_call = np.asarray(required_call, dtype=bool)
    out = np.empty(decided_call.shape, dtype=np.uint8)
    out[decided_call & required_call] = Correctness.TRUE_CALL
    out[decided_call & ~required_call] = Correctness.FALSE_CALL
    out[~decided_call & ~required_call] = Correctness.TRUE_NOCALL
    out[~decided_call & required_call] = Correctness.FALSE_NOCALL
    return out


@dataclass(frozen=True, eq=False)
class ActivationDataset:
    """Immutable column store of action-boundary activations and labels."""

    d: int
    H: np.ndarray
    context_ids: tuple[str, ...]
    behavior: np.ndarray
    correctness: np.ndarray
    split: np.ndarray
    provenance: Provenance = Provenance.SURROGATE
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.d <= 0:
            raise DataError(f"activation width must be positive, got d={self.d}")
        H = np.ascontiguousarray(self.H, dtype=np.float32).reshape(-1, self.d)
        n = H.shape[0]
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "context_ids", tuple(self.context_ids))
        for name in ("behavior", "correctness", "split"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.uint8).reshape(-1)
            if arr.shape[0] != n:
                raise DataError(f"{name} has {arr.shape[0]} entries for {n} records")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if len(self.context_ids) != n:
            raise DataError(f"{len(self.context_ids)} context ids for {n} records")
        if self.behavior.size and self.behavior.max() > max(Behavior):
            raise DataError("unknown behavior code")
        if self.correctness.size and self.correctness.max() > max(Correctness):
            raise DataError("unknown correctness code")
        if self.split.size and self.split.max() > max(Split):
            raise DataError("unknown split code")
        H.setflags(write=False)
        object.__setattr__(self, "provenance", Provenance(self.provenance))

    @classmethod
    def empty(cls, d: int, provenance: Provenance = Provenance.SURROGATE) -> "ActivationDataset":
        z = np.zeros(0, dtype=np.uint8)
        return cls(d, np.zeros((0, d), np.float32), (), z, z, z, provenance)

    @classmethod
    def from_records(
        cls, records: Sequence[ActivationRecord], d: int,
        provenance: Provenance = Provenance.SURROGATE,
    ) -> "ActivationDataset":
        if not records:
            return cls.empty(d, provenance)
        for r in records:
            if np.asarray(r.h).shape != (d,):
                raise DataError(f"record {r.context_id!r} has width {np.asarray(r.h).shape}, expected {d}")
        return cls(
            d,
            np.stack([np.asarray(r.h, np.float32) for r in records]),
            tuple(r.context_id for r in records),
            np.array([r.behavior_label for r in records], np.uint8),
            np.array([r.correctness for r in records], np.uint8),
            np.array([r.split for r in records], np.uint8),
            provenance,
        )

    def __len__(self) -> int:
        return self.H.shape[0]

    def record(self, i: int) -> ActivationRecord:
        return ActivationRecord(
            self.context_ids[i],
            self.H[i],
            Behavior(int(self.behavior[i])),
            Correctness(int(self.correctness[i])),
            Split(int(self.split[i])),
        )

    @property
    def records(self) -> Iterator[ActivationRecord]:
        return (self.record(i) for i in range(len(self)))

    # -- label views ---------------------------------------------------------

    @property
    def call_mask(self) -> np.ndarray:
        """D+ membership: records judged as tool calls."""
        return self.behavior == Behavior.TOOL_CALL

    @property
    def nocall_mask(self) -> np.ndarray:
        """D- membership: records judged as requests for information."""
        return self.behavior == Behavior.REQUEST_FOR_INFO

    @property
    def gating_mask(self) -> np.ndarray:
        return self.call_mask | self.nocall_mask

    @property
    def has_correctness(self) -> bool:
        return len(self) > 0 and bool(np.all(self.correctness != Correctness.UNKNOWN))

    @property
    def required_call(self) -> np.ndarray:
        """Ground-truth required decision (True = CALL); needs known correctness."""
        if not self.has_correctness:
            raise DataError("ground-truth correctness labels are missing")
        c = self.correctness
        return (c == Correctness.TRUE_CALL) | (c == Correctness.FALSE_NOCALL)

    # -- derived datasets ------------------------------------------------------

    def subset(self, index) -> "ActivationDataset":
        idx = np.arange(len(self))[index]
        return replace(
            self,
            H=self.H[idx],
            context_ids=tuple(self.context_ids[i] for i in idx),
            behavior=self.behavior[idx],
            correctness=self.correctness[idx],
            split=self.split[idx],
            meta=dict(self.meta),
        )

    def gating(self) -> "ActivationDataset":
        """Restrict to D+ and D-; the other two response types never take part."""
        return self.subset(self.gating_mask)

    def in_split(self, which: Split) -> "ActivationDataset":
        return self.subset(self.split == which)

    def with_activations(self, H: np.ndarray) -> "ActivationDataset":
        H = np.asarray(H)
        if H.shape != self.H.shape:
            raise DataError(f"activation shape {H.shape} does not match {self.H.shape}")
        return replace(self, H=H, meta=dict(self.meta))

    def with_labels(self, behavior=None, correctness=None, split=None) -> "ActivationDataset":
        return replace(
            self,
            behavior=self.behavior if behavior is None else behavior,
            correctness=self.correctness if correctness is None else correctness,
            split=self.split if split is None else split,
            meta=dict(self.meta),
        )

    def equals(self, other: "ActivationDataset") -> bool:
        return (
            self.d == other.d
            and self.provenance == other.provenance
            and self.context_ids == other.context_ids
            and np.array_equal(self.H, other.H)
            and np.array_equal(self.behavior, other.behavior)
            and np.array_equal(self.correctness, other.correctness)
            and np.array_equal(self.split, other.split)
        )


# -- binary cache ---------------------------------------------------------------


def write_cache(dataset: ActivationDataset, path) -> None:
    """Write ``dataset`` to ``path`` atomically in the little-endian ``.actv`` layout."""
    path = Path(path)
    chunks = [_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, dataset.d, len(dataset), dataset.provenance)]
    H = dataset.H.astype("<f4", copy=False)
    for i in range(len(dataset)):
        cid = dataset.context_ids[i].encode("utf-8")
        chunks.append(struct.pack("<I", len(cid)))
        chunks.append(cid)
        chunks.append(H[i].tobytes())
        chunks.append(bytes((dataset.behavior[i], dataset.correctness[i], dataset.split[i])))
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(chunks))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_cache(path) -> ActivationDataset:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read activation cache {path}: {exc}") from exc
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, d, n, prov = _HEADER.unpack_from(buf, 0)
    if magic != CACHE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CACHE_MAGIC!r}")
    if version != CACHE_VERSION:
        raise FormatError(f"{path}: unsupported cache version {version}")
    if d == 0:
        raise FormatError(f"{path}: zero activation width")
    if prov > max(Provenance):
        raise FormatError(f"{path}: unknown provenance code {prov}")
    off = _HEADER.size
    row_bytes = 4 * d
    H = np.empty((n, d), dtype=np.float32)
    ids: list[str] = []
    labels = np.empty((n, 3), dtype=np.uint8)
    mv = memoryview(buf)
    for i in range(n):
        if off + 4 > len(buf):
            raise FormatError(f"{path}: truncated at record {i}")
        (k,) = struct.unpack_from("<I", buf, off)
        off += 4
        end = off + k + row_bytes + 3
        if end > len(buf):
            raise FormatError(f"{path}: truncated at record {i}")
        try:
            ids.append(bytes(mv[off:off + k]).decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: record {i} has an invalid context id") from exc
        off += k
        H[i] = np.frombuffer(buf, dtype="<f4", count=d, offset=off)
        off += row_bytes
        labels[i] = np.frombuffer(buf, dtype=np.uint8, count=3, offset=off)
        off += 3
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes")
    try:
        return ActivationDataset(d, H, ids, labels[:, 0], labels[:, 1], labels[:, 2], Provenance(prov))
    except DataError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# -- ingestion ---------------------------------------------------------------------


def ingest(jsonl_path, d: int) -> ActivationDataset:
    """Load externally produced residual dumps and judge labels from JSONL.

    Each line holds ``context_id``, ``activation`` (``d`` floats), ``label`` (one
    of the four judge categories) and optionally ``correctness``.
    """
    rows: list[ActivationRecord] = []
    with open(jsonl_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            try:
                cid = str(obj["context_id"])
                act = obj["activation"]
                label = str(obj["label"]).strip().lower()
            except (KeyError, TypeError) as exc:
                raise DataError(f"line {lineno}: missing field {exc}") from exc
            if label not in LABEL_NAMES:
                raise DataError(f"line {lineno}: unknown label {obj['label']!r}")
            try:
                h = np.asarray(act, dtype=np.float32)
            except (TypeError, ValueError) as exc:
                raise DataError(f"line {lineno}: activation is not numeric") from exc
            if h.ndim != 1 or h.shape[0] != d:
                raise DataError(f"line {lineno}: activation length {h.size} != d={d}")
            corr = obj.get("correctness")
            if corr is None:
                correctness = Correctness.UNKNOWN
            else:
                key = str(corr).strip().lower()
                if key not in CORRECTNESS_NAMES:
                    raise DataError(f"line {lineno}: unknown correctness {corr!r}")
                correctness = CORRECTNESS_NAMES[key]
            rows.append(ActivationRecord(cid, h, LABEL_NAMES[label], correctness))
    return ActivationDataset.from_records(rows, d, Provenance.INGESTED)


# -- splitting ----------------------------------------------------------------------


def split(dataset: ActivationDataset, cal_fraction: float = 0.5, seed: int = 0) -> ActivationDataset:
    """Tag every record CAL or TEST with a seeded shuffle stratified by behavior.

    Per-class CAL counts use largest-remainder rounding so the CAL total equals
    ``round(cal_fraction * n)``. When only one class is present this reduces to
    a plain seeded split.
    """
    if not 0.0 < cal_fraction < 1.0:
        raise DataError(f"cal_fraction must be in (0, 1), got {cal_fraction}")
    n = len(dataset)
    classes = [c for c in range(len(Behavior)) if np.any(dataset.behavior == c)]
    members = {c: np.flatnonzero(dataset.behavior == c) for c in classes}
    small = [Behavior(c).name for c in classes if members[c].size < 2]
    if small:
        raise DataError(f"too few records to stratify classes {small} (need >= 2 each)")
    target = int(round(cal_fraction * n))
    exact = {c: cal_fraction * members[c].size for c in classes}
    take = {c: int(np.floor(exact[c])) for c in classes}
    order = sorted(classes, key=lambda c: (-(exact[c] - take[c]), c))
    for c in order[: max(0, target - sum(take.values()))]:
        take[c] += 1
    for c in classes:
        take[c] = min(max(take[c], 1), members[c].size - 1)

    rng = np.random.default_rng(seed)
    tags = np.full(n, Split.TEST, dtype=np.uint8)
    for c in classes:
        idx = rng.permutation(members[c])
        tags[idx[: take[c]]] = Split.CAL
    return dataset.with_labels(split=tags)


def counts(dataset: ActivationDataset) -> dict[str, int]:
    """Exact per-behavior record counts (zero for absent labels)."""
    tally = np.bincount(dataset.behavior, minlength=len(Behavior))
    return {b.name: int(tally[b]) for b in Behavior}
