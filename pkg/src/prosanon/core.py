"""Embedding and prosody tables, min-max normalization and seeded randomness.

Both tables are plain CSV with a fixed column order.  Floats are written with
``repr`` (shortest decimal that round-trips), so ``load(save(t)) == t`` holds
bit for bit.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

PROSODY_FEATURES = ("spr", "nsyll", "pnum", "plength", "f0", "nrg")

_ID_RE = re.compile(r"^[A-Za-z0-9_-]+$")
_FIXED_COLS = ("sample_id", "speaker_id", "attribute")


class TableFormatError(ValueError):
    """Malformed table file or table contents; ``row`` is the 1-based line."""

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Generator that depends only on ``seed`` and the integer ``keys``.

    Used wherever work is split per dimension / per resample so that the
    result is the same however the work is scheduled.
    """
    seq = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(k) for k in keys))
    return np.random.default_rng(seq)


def format_float(value: float) -> str:
    return repr(float(value))


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    """N x D embedding matrix plus per-row sample id, speaker id and attribute.

    ``attributes`` holds 0, 1 or None (no label, e.g. an auxiliary corpus).
    """

    sample_ids: tuple
    speaker_ids: tuple
    attributes: tuple
    vectors: np.ndarray

    def __post_init__(self):
        vecs = np.asarray(self.vectors, dtype=np.float64)
        if vecs.ndim != 2:
            raise TableFormatError(f"vectors must be 2-D, got shape {vecs.shape}")
        n, d = vecs.shape
        if d < 1:
            raise TableFormatError("embedding dimension must be >= 1")
        object.__setattr__(self, "sample_ids", tuple(str(s) for s in self.sample_ids))
        object.__setattr__(self, "speaker_ids", tuple(str(s) for s in self.speaker_ids))
        object.__setattr__(
            self, "attributes", tuple(None if a is None else int(a) for a in self.attributes)
        )
        if not (len(self.sample_ids) == len(self.speaker_ids) == len(self.attributes) == n):
            raise TableFormatError("label columns and vectors disagree on row count")
        seen = set()
        for i, (sid, spk, attr) in enumerate(zip(self.sample_ids, self.speaker_ids, self.attributes)):
            if not _ID_RE.match(sid) or not _ID_RE.match(spk):
                raise TableFormatError(f"invalid id {sid!r}/{spk!r}", row=i + 2)
            if sid in seen:
                raise TableFormatError(f"duplicate sample_id {sid!r}", row=i + 2)
            seen.add(sid)
            if attr not in (None, 0, 1):
                raise TableFormatError(f"attribute must be 0, 1 or empty, got {attr!r}", row=i + 2)
        if not np.all(np.isfinite(vecs)):
            bad = int(np.argwhere(~np.isfinite(vecs))[0, 0])
            raise TableFormatError("non-finite embedding value", row=bad + 2)
        object.__setattr__(self, "vectors", _frozen(vecs))

    @property
    def n_rows(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def has_attributes(self) -> bool:
        return all(a is not None for a in self.attributes)

    def attribute_array(self) -> np.ndarray:
        if not self.has_attributes():
            raise TableFormatError("attribute label missing for some rows")
        return np.asarray(self.attributes, dtype=np.int64)

    def with_vectors(self, vectors: np.ndarray) -> "EmbeddingTable":
        return EmbeddingTable(self.sample_ids, self.speaker_ids, self.attributes, vectors)

    def take(self, index: Sequence[int]) -> "EmbeddingTable":
        index = list(index)
        return EmbeddingTable(
            [self.sample_ids[i] for i in index],
            [self.speaker_ids[i] for i in index],
            [self.attributes[i] for i in index],
            self.vectors[index] if index else np.empty((0, self.dim)),
        )

    def __eq__(self, other):
        if not isinstance(other, EmbeddingTable):
            return NotImplemented
        return (
            self.sample_ids == other.sample_ids
            and self.speaker_ids == other.speaker_ids
            and self.attributes == other.attributes
            and self.vectors.shape == other.vectors.shape
            and self.vectors.tobytes() == other.vectors.tobytes()
        )

    __hash__ = None


def embedding_header(dim: int) -> list:
    return list(_FIXED_COLS) + [f"e{i}" for i in range(dim)]


def dumps_embedding_table(table: EmbeddingTable) -> str:
    lines = [",".join(embedding_header(table.dim))]
    for sid, spk, attr, vec in zip(table.sample_ids, table.speaker_ids, table.attributes, table.vectors):
        cells = [sid, spk, "" if attr is None else str(attr)]
        cells.extend(format_float(v) for v in vec)
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def save_embedding_table(table: EmbeddingTable, path) -> None:
    Path(path).write_text(dumps_embedding_table(table), encoding="utf-8", newline="\n")


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise TableFormatError(f"non-numeric value {cell!r} in column {col}", row=row) from None
    if not math.isfinite(value):
        raise TableFormatError(f"non-finite value {cell!r} in column {col}", row=row)
    return value


def loads_embedding_table(text: str) -> EmbeddingTable:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise TableFormatError("empty file: missing header", row=1)
    header = lines[0].rstrip("\r").split(",")
    if tuple(header[:3]) != _FIXED_COLS or len(header) < 4:
        raise TableFormatError("header must start with sample_id,speaker_id,attribute,e0", row=1)
    dim = len(header) - 3
    if header[3:] != [f"e{i}" for i in range(dim)]:
        raise TableFormatError("embedding columns must be e0..e{D-1} in order", row=1)

    sample_ids, speaker_ids, attributes, rows = [], [], [], []
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.rstrip("\r").split(",")
        if len(cells) != dim + 3:
            raise TableFormatError(f"expected {dim + 3} cells, got {len(cells)} (ragged row)", row=lineno)
        sid, spk, attr = cells[:3]
        if not _ID_RE.match(sid) or not _ID_RE.match(spk):
            raise TableFormatError(f"invalid id {sid!r}/{spk!r}", row=lineno)
        if sid in seen:
            raise TableFormatError(f"duplicate sample_id {sid!r}", row=lineno)
        seen.add(sid)
        if attr not in ("0", "1", ""):
            raise TableFormatError(f"attribute must be 0, 1 or empty, got {attr!r}", row=lineno)
        sample_ids.append(sid)
        speaker_ids.append(spk)
        attributes.append(None if attr == "" else int(attr))
        rows.append([_parse_float(c, lineno, header[3 + j]) for j, c in enumerate(cells[3:])])

    vectors = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    return EmbeddingTable(sample_ids, speaker_ids, attributes, vectors)


def load_embedding_table(path) -> EmbeddingTable:
    return loads_embedding_table(Path(path).read_text(encoding="utf-8"))


def normalize_minmax(values: Iterable[float], stored_bounds: Optional[tuple] = None):
    """Map values to [0, 1] with min-max scaling.

    With ``stored_bounds`` the given (min, max) are applied instead of being
    computed, and results are clipped to [0, 1] so held-out values outside
    the training range stay in the unit interval.  A constant column
    (max == min) maps to zeros.

    Returns ``(normalized, (min, max))``.
    """
    x = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot normalize an empty list")
    if stored_bounds is None:
        lo, hi = float(np.min(x)), float(np.max(x))
    else:
        lo, hi = float(stored_bounds[0]), float(stored_bounds[1])
        if hi < lo:
            raise ValueError(f"invalid bounds ({lo}, {hi}): max < min")
    if hi == lo:
        return np.zeros_like(x), (lo, hi)
    out = (x - lo) / (hi - lo)
    if stored_bounds is not None:
        out = np.clip(out, 0.0, 1.0)
    return out, (lo, hi)


@dataclass(frozen=True, eq=False)
class ProsodyTable:
    """Raw prosody features per sample, optionally with normalized copies.

    ``raw`` is N x 6 in ``PROSODY_FEATURES`` order.  ``bounds`` is a dict
    feature -> (min, max) once :meth:`normalized` has been applied.
    """

    sample_ids: tuple
    raw: np.ndarray
    norm: Optional[np.ndarray] = None
    bounds: Optional[dict] = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "sample_ids", tuple(str(s) for s in self.sample_ids))
        raw = np.asarray(self.raw, dtype=np.float64).reshape(len(self.sample_ids), len(PROSODY_FEATURES))
        if not np.all(np.isfinite(raw)):
            raise TableFormatError("non-finite prosody value")
        object.__setattr__(self, "raw", _frozen(raw))
        if self.norm is not None:
            norm = np.asarray(self.norm, dtype=np.float64).reshape(raw.shape)
            if np.any(norm < 0) or np.any(norm > 1):
                raise TableFormatError("normalized prosody values must lie in [0, 1]")
            object.__setattr__(self, "norm", _frozen(norm))
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise TableFormatError("duplicate sample_id in prosody table")

    @property
    def n_rows(self) -> int:
        return self.raw.shape[0]

    def column(self, name: str, normalized: bool = True) -> np.ndarray:
        j = PROSODY_FEATURES.index(name)
        src = self.norm if (normalized and self.norm is not None) else self.raw
        return src[:, j]

    def normalized(self, bounds: Optional[dict] = None) -> "ProsodyTable":
        """Normalize every feature column; pass training-split ``bounds`` for held-out splits."""
        cols, new_bounds = [], {}
        for j, name in enumerate(PROSODY_FEATURES):
            col, b = normalize_minmax(self.raw[:, j], None if bounds is None else bounds[name])
            cols.append(col)
            new_bounds[name] = b
        return ProsodyTable(self.sample_ids, self.raw, np.column_stack(cols), new_bounds)

    def aligned_to(self, sample_ids: Sequence[str]) -> "ProsodyTable":
        """Reorder rows to follow ``sample_ids``; every id must be present."""
        pos = {s: i for i, s in enumerate(self.sample_ids)}
        missing = [s for s in sample_ids if s not in pos]
        if missing:
            raise TableFormatError(f"prosody missing for sample {missing[0]!r}")
        idx = [pos[s] for s in sample_ids]
        return ProsodyTable(
            [self.sample_ids[i] for i in idx],
            self.raw[idx],
            None if self.norm is None else self.norm[idx],
            self.bounds,
        )

    def __eq__(self, other):
        if not isinstance(other, ProsodyTable):
            return NotImplemented
        same_norm = (self.norm is None and other.norm is None) or (
            self.norm is not None and other.norm is not None and self.norm.tobytes() == other.norm.tobytes()
        )
        return (
            self.sample_ids == other.sample_ids
            and self.raw.tobytes() == other.raw.tobytes()
            and same_norm
            and self.bounds == other.bounds
        )

    __hash__ = None


def _bounds_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".bounds.json")


def save_prosody_table(table: ProsodyTable, path) -> None:
    """Write the prosody CSV; normalization bounds go to ``<path>.bounds.json``."""
    header = ["sample_id", *PROSODY_FEATURES]
    if table.norm is not None:
        header += [f"{f}_norm" for f in PROSODY_FEATURES]
    lines = [",".join(header)]
    for i, sid in enumerate(table.sample_ids):
        cells = [sid] + [format_float(v) for v in table.raw[i]]
        if table.norm is not None:
            cells += [format_float(v) for v in table.norm[i]]
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    if table.bounds is not None:
        payload = {k: [format_float(v) for v in table.bounds[k]] for k in PROSODY_FEATURES}
        _bounds_path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_prosody_table(path) -> ProsodyTable:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise TableFormatError("empty file: missing header", row=1)
    header = lines[0].split(",")
    base = ["sample_id", *PROSODY_FEATURES]
    with_norm = base + [f"{f}_norm" for f in PROSODY_FEATURES]
    if header == base:
        has_norm = False
    elif header == with_norm:
        has_norm = True
    else:
        raise TableFormatError("unexpected prosody header", row=1)
    ids, raw, norm = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != len(header):
            raise TableFormatError(f"expected {len(header)} cells, got {len(cells)} (ragged row)", row=lineno)
        ids.append(cells[0])
        vals = [_parse_float(c, lineno, header[j + 1]) for j, c in enumerate(cells[1:])]
        raw.append(vals[: len(PROSODY_FEATURES)])
        if has_norm:
            norm.append(vals[len(PROSODY_FEATURES):])
    bounds = None
    bpath = _bounds_path(path)
    if bpath.exists():
        data = json.loads(bpath.read_text(encoding="utf-8"))
        bounds = {k: (float(data[k][0]), float(data[k][1])) for k in PROSODY_FEATURES}
    n = len(ids)
    return ProsodyTable(
        ids,
        np.array(raw, dtype=np.float64).reshape(n, len(PROSODY_FEATURES)),
        np.array(norm, dtype=np.float64).reshape(n, len(PROSODY_FEATURES)) if has_norm else None,
        bounds,
    )
