"""Per-person prediction streams and the CSV interchange format.

CSV columns (header required, comma separated, UTF-8, '.' decimal)::

    person_id, t, p_l_x_cm, p_l_y_cm, p_r_x_cm, p_r_y_cm     required
    g_x_cm, g_y_cm                                           optional pair
    v                                                        optional, 0/1
    o_x_cm, o_y_cm, o_z_cm                                   optional gaze origin

Any other column is rejected.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import DuplicateIndex, ParseError, SchemaError
from .geometry import PoG

REQUIRED = ("person_id", "t", "p_l_x_cm", "p_l_y_cm", "p_r_x_cm", "p_r_y_cm")
GT = ("g_x_cm", "g_y_cm")
ORIGIN = ("o_x_cm", "o_y_cm", "o_z_cm")
OPTIONAL = GT + ("v",) + ORIGIN
COLUMNS = REQUIRED + OPTIONAL


@dataclass(frozen=True)
class GazeSample:
    """One timestamped record, as yielded by :meth:`PersonStream.samples`."""

    t: int
    p_l: PoG
    p_r: PoG
    g: PoG | None = None
    v: int | None = None
    origin: tuple[float, float, float] | None = None


@dataclass
class PersonStream:
    """Columnar storage of one person's samples, sorted by ``t``."""

    person_id: str
    t: np.ndarray
    p_l: np.ndarray
    p_r: np.ndarray
    g: np.ndarray | None = None
    v: np.ndarray | None = None
    origin: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64)
        self.p_l = np.asarray(self.p_l, dtype=float).reshape(-1, 2)
        self.p_r = np.asarray(self.p_r, dtype=float).reshape(-1, 2)
        n = len(self.t)
        if self.p_l.shape[0] != n or self.p_r.shape[0] != n:
            raise ValueError("stream columns differ in length")
        if self.g is not None:
            self.g = np.asarray(self.g, dtype=float).reshape(-1, 2)
        if self.v is not None:
            self.v = np.asarray(self.v, dtype=np.int64)
        if self.origin is not None:
            self.origin = np.asarray(self.origin, dtype=float).reshape(-1, 3)

    def __len__(self):
        return len(self.t)

    @property
    def p(self) -> np.ndarray:
        """Eye-averaged initial prediction."""
        return (self.p_l + self.p_r) / 2.0

    def subset(self, idx) -> PersonStream:
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return PersonStream(self.person_id, self.t[idx], self.p_l[idx], self.p_r[idx],
                            pick(self.g), pick(self.v), pick(self.origin), dict(self.meta))

    def samples(self) -> Iterator[GazeSample]:
        for i in range(len(self)):
            yield GazeSample(
                int(self.t[i]),
                PoG(*self.p_l[i]),
                PoG(*self.p_r[i]),
                None if self.g is None else PoG(*self.g[i]),
                None if self.v is None else int(self.v[i]),
                None if self.origin is None else tuple(self.origin[i]),
            )


def _fmt(x: float) -> str:
    return repr(float(x))


def write_csv(streams, path, extra: dict | None = None) -> None:
    """Write streams in the interchange schema.

    ``extra`` maps person_id -> {column: array} for additional output columns
    (the refined-stream export); those columns are appended in insertion
    order.
    """
    streams = list(streams)
    has_g = any(s.g is not None for s in streams)
    has_v = any(s.v is not None for s in streams)
    has_o = any(s.origin is not None for s in streams)
    header = list(REQUIRED)
    if has_g:
        header += list(GT)
    if has_v:
        header.append("v")
    if has_o:
        header += list(ORIGIN)
    extra_cols: list[str] = []
    if extra:
        for cols in extra.values():
            for c in cols:
                if c not in extra_cols:
                    extra_cols.append(c)
    header += extra_cols
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for s in streams:
            ex = (extra or {}).get(s.person_id, {})
            for i in range(len(s)):
                row = [s.person_id, str(int(s.t[i])), *map(_fmt, s.p_l[i]), *map(_fmt, s.p_r[i])]
                if has_g:
                    row += ["", ""] if s.g is None else list(map(_fmt, s.g[i]))
                if has_v:
                    row.append("" if s.v is None else str(int(s.v[i])))
                if has_o:
                    row += ["", "", ""] if s.origin is None else list(map(_fmt, s.origin[i]))
                for c in extra_cols:
                    val = ex.get(c)
                    if val is None:
                        row.append("")
                    else:
                        x = val[i]
                        row.append(str(int(x)) if isinstance(x, (np.integer, int)) else _fmt(x))
                w.writerow(row)


def _parse_float(text: str, line: int, col: str) -> float:
    try:
        x = float(text)
    except ValueError:
        raise ParseError(f"column {col!r}: cannot parse {text!r} as a number", line) from None
    if not math.isfinite(x):
        raise ParseError(f"column {col!r}: non-finite value {text!r}", line)
    return x


def read_csv(path) -> list[PersonStream]:
    """Parse and validate a prediction file; streams come back sorted by person, then t."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty file: header row required") from None
        header = [h.strip() for h in header]
        unknown = [h for h in header if h not in COLUMNS]
        if unknown:
            raise SchemaError(f"unknown column {unknown[0]!r}", unknown[0])
        if len(set(header)) != len(header):
            raise SchemaError("duplicate column in header")
        for col in REQUIRED:
            if col not in header:
                raise SchemaError(f"missing required column {col!r}", col)
        if (GT[0] in header) != (GT[1] in header):
            missing = GT[1] if GT[0] in header else GT[0]
            raise SchemaError(f"missing column {missing!r} (ground truth needs both)", missing)
        present_o = [c for c in ORIGIN if c in header]
        if present_o and len(present_o) != 3:
            missing = next(c for c in ORIGIN if c not in header)
            raise SchemaError(f"missing column {missing!r} (origin needs all three)", missing)
        pos = {h: i for i, h in enumerate(header)}
        has_g, has_v, has_o = GT[0] in pos, "v" in pos, bool(present_o)

        rows: dict[str, list] = {}
        for line, rec in enumerate(reader, start=2):
            if not rec or all(not x.strip() for x in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(rec)}", line)
            pid = rec[pos["person_id"]].strip()
            if not pid:
                raise ParseError("empty person_id", line)
            t_text = rec[pos["t"]].strip()
            try:
                t = int(t_text)
            except ValueError:
                raise ParseError(f"column 't': cannot parse {t_text!r} as an integer", line) from None
            vals = [_parse_float(rec[pos[c]], line, c) for c in REQUIRED[2:]]
            g = [_parse_float(rec[pos[c]], line, c) for c in GT] if has_g else None
            v = None
            if has_v:
                v_text = rec[pos["v"]].strip()
                if v_text not in ("0", "1"):
                    raise ParseError(f"column 'v' must be 0 or 1, got {v_text!r}", line)
                v = int(v_text)
            o = [_parse_float(rec[pos[c]], line, c) for c in ORIGIN] if has_o else None
            rows.setdefault(pid, []).append((t, vals, g, v, o, line))

    streams = []
    for pid in sorted(rows):
        recs = sorted(rows[pid], key=lambda r: r[0])
        ts = [r[0] for r in recs]
        for a, b in zip(recs, recs[1:]):
            if a[0] == b[0]:
                raise DuplicateIndex(f"duplicate sample t={a[0]} for person {pid!r} (line {b[5]})")
        vals = np.array([r[1] for r in recs], dtype=float)
        streams.append(PersonStream(
            pid,
            np.array(ts, dtype=np.int64),
            vals[:, 0:2],
            vals[:, 2:4],
            np.array([r[2] for r in recs]) if has_g else None,
            np.array([r[3] for r in recs]) if has_v else None,
            np.array([r[4] for r in recs]) if has_o else None,
        ))
    return streams


ingest_predictions = read_csv
