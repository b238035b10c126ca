"""Aggregate historical control-arm data: parsing, validation and summaries."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

CSV_HEADER = ("id", "responders", "n")


class ParseError(ValueError):
    """Malformed input record. ``line`` and ``field`` locate the problem."""

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class ValidationError(ValueError):
    """A record parsed but violates a domain invariant."""


@dataclass(frozen=True)
class HistoricalStudy:
    """One historical control arm: ``responders`` out of ``arm_size`` patients."""

    id: str
    responders: int
    arm_size: int
    label: str = ""

    def __post_init__(self):
        if not self.id:
            raise ValidationError("study id must be non-empty")
        for name in ("responders", "arm_size"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value:
                raise ValidationError(f"study {self.id!r}: {name} must be an integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.arm_size < 1:
            raise ValidationError(f"study {self.id!r}: arm size must be >= 1, got {self.arm_size}")
        if self.responders < 0:
            raise ValidationError(f"study {self.id!r}: responders must be >= 0, got {self.responders}")
        if self.responders > self.arm_size:
            raise ValidationError(
                f"study {self.id!r}: responders ({self.responders}) exceed arm size ({self.arm_size})"
            )

    @property
    def rate(self) -> float:
        return self.responders / self.arm_size


@dataclass(frozen=True)
class HistoricalSummary:
    study_rates: tuple
    pooled_rate: float
    mean_arm_size: float
    total_responders: int
    total_n: int
    study_ids: tuple = field(default=())


# Placebo arms, EASI-75 responders / arm size.
_BUILTIN = (
    ("simpson2020", 7, 85, "Simpson et al. (2020), dupilumab monotherapy, ages 13-17"),
    ("paller2020", 33, 123, "Paller et al. (2020), dupilumab + TCS, ages 6-11"),
    ("paller2022", 28, 79, "Paller et al. (2022), dupilumab + TCS, 6 months - 6 years"),
    ("torrelo2023", 39, 122, "Torrelo et al. (2023), baricitinib + TCS, ages 2-18"),
    ("paller2023", 6, 94, "Paller et al. (2023), tralokinumab monotherapy, ages 12-17"),
    ("ebisawa2024", 6, 32, "Ebisawa et al. (2024), dupilumab + TCS, ages 6-12"),
)


def builtin_dataset() -> list[HistoricalStudy]:
    """The six pediatric atopic dermatitis placebo arms used throughout the package."""
    return [HistoricalStudy(i, r, n, label) for i, r, n, label in _BUILTIN]


def _check_unique(studies: Sequence[HistoricalStudy]) -> None:
    seen = set()
    for s in studies:
        if s.id in seen:
            raise ValidationError(f"duplicate study id {s.id!r}")
        seen.add(s.id)


def _to_int(value, line, name):
    if isinstance(value, bool):
        raise ParseError(f"expected an integer, got {value!r}", line=line, field=name)
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    try:
        return int(str(value).strip())
    except ValueError:
        raise ParseError(f"expected an integer, got {value!r}", line=line, field=name) from None


def _parse_csv(text: str) -> list[HistoricalStudy]:
    rows = csv.reader(io.StringIO(text))
    studies = []
    header_seen = False
    for lineno, row in enumerate(rows, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        cells = [c.strip() for c in row]
        if not header_seen:
            header_seen = True
            if tuple(c.lower() for c in cells[:3]) == CSV_HEADER:
                continue
            # headerless input is accepted as long as the first row is data
        if len(cells) not in (3, 4):
            raise ParseError(f"expected 3 columns (id,responders,n), got {len(cells)}", line=lineno)
        sid, r, n = cells[:3]
        label = cells[3] if len(cells) == 4 else ""
        if not sid:
            raise ParseError("empty study id", line=lineno, field="id")
        studies.append(
            HistoricalStudy(sid, _to_int(r, lineno, "responders"), _to_int(n, lineno, "n"), label)
        )
    return studies


def _parse_json(text: str) -> list[HistoricalStudy]:
    if not text.strip():
        return []
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
    if isinstance(payload, dict) and "studies" in payload:
        payload = payload["studies"]
    if not isinstance(payload, list):
        raise ParseError("expected a JSON array of study objects")
    studies = []
    for idx, rec in enumerate(payload):
        if not isinstance(rec, dict):
            raise ParseError(f"record {idx} is not an object", field=str(idx))
        for key in CSV_HEADER:
            if key not in rec:
                raise ParseError(f"record {idx} is missing key", field=key)
        studies.append(
            HistoricalStudy(
                str(rec["id"]),
                _to_int(rec["responders"], None, "responders"),
                _to_int(rec["n"], None, "n"),
                str(rec.get("label", "")),
            )
        )
    return studies


def parse_historical(source, format: str = "csv") -> list[HistoricalStudy]:
    """Parse historical control arms from CSV (``id,responders,n``) or JSON.

    ``source`` may be bytes, str or a binary/text file object.
    """
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, (bytes, bytearray)):
        try:
            source = bytes(source).decode("utf-8-sig")
        except UnicodeDecodeError as exc:
            raise ParseError(f"input is not valid UTF-8: {exc.reason}") from None
    fmt = format.lower()
    if fmt == "csv":
        studies = _parse_csv(source)
    elif fmt == "json":
        studies = _parse_json(source)
    else:
        raise ValueError(f"unknown format {format!r}; expected 'csv' or 'json'")
    _check_unique(studies)
    return studies


def serialize_historical(studies: Iterable[HistoricalStudy], format: str = "csv") -> str:
    studies = list(studies)
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for s in studies:
            writer.writerow([s.id, s.responders, s.arm_size] + ([s.label] if s.label else []))
        return buf.getvalue()
    if format == "json":
        recs = []
        for s in studies:
            rec = {"id": s.id, "responders": s.responders, "n": s.arm_size}
            if s.label:
                rec["label"] = s.label
            recs.append(rec)
        return json.dumps(recs, indent=2) + "\n"
    raise ValueError(f"unknown format {format!r}")


def load_historical(path) -> list[HistoricalStudy]:
    """Read a CSV or JSON file, choosing the parser from the file suffix."""
    path = str(path)
    fmt = "json" if path.lower().endswith(".json") else "csv"
    with open(path, "rb") as fh:
        return parse_historical(fh.read(), fmt)


def summarize(studies: Sequence[HistoricalStudy]) -> HistoricalSummary:
    studies = list(studies)
    if not studies:
        raise ValueError("summarize needs at least one study")
    r = np.array([s.responders for s in studies])
    n = np.array([s.arm_size for s in studies])
    return HistoricalSummary(
        study_rates=tuple(float(x) for x in r / n),
        pooled_rate=float(r.sum() / n.sum()),
        mean_arm_size=float(n.mean()),
        total_responders=int(r.sum()),
        total_n=int(n.sum()),
        study_ids=tuple(s.id for s in studies),
    )


def as_counts(studies) -> tuple[np.ndarray, np.ndarray]:
    """Coerce studies into ``(responders, sizes)`` integer arrays.

    Accepts a sequence of :class:`HistoricalStudy` or an ``(J, 2)`` array-like
    of ``(responders, n)`` rows, so estimators can be fed either.
    """
    studies = list(studies) if not isinstance(studies, np.ndarray) else studies
    if len(studies) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    if isinstance(studies[0], HistoricalStudy):
        r = np.array([s.responders for s in studies], dtype=np.int64)
        n = np.array([s.arm_size for s in studies], dtype=np.int64)
    else:
        arr = np.asarray(studies)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ValidationError(f"expected (n_studies, 2) counts, got shape {arr.shape}")
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValidationError("counts must be integers")
        r, n = arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64)
    if np.any(n < 1) or np.any(r < 0) or np.any(r > n):
        bad = int(np.flatnonzero((n < 1) | (r < 0) | (r > n))[0])
        raise ValidationError(f"study {bad}: invalid counts {int(r[bad])}/{int(n[bad])}")
    return r, n
