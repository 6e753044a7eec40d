"""Shared domain types for a Gridbox site.

Records are frozen dataclasses; mutation goes through ``dataclasses.replace``
inside the storage element so every value handed out is safe to share
between threads.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

SITE_RE = re.compile(r"[a-z0-9-]{1,16}")
KINDS = ("pat", "img", "epi")
HEX32_RE = re.compile(r"[0-9a-f]{32}")
DATE_RE = re.compile(r"\d{4}-\d{2}-\d{2}")
MAX_TTL_HOPS = 16


class GridError(Exception):
    """Base class for every error raised by the gridbox package."""


class ValidationError(GridError, ValueError):
    pass


class NotFoundError(GridError, KeyError):
    def __str__(self) -> str:  # KeyError repr-quotes its message
        return str(self.args[0]) if self.args else ""


def check_site(site: str) -> str:
    if not isinstance(site, str) or not SITE_RE.fullmatch(site):
        raise ValidationError(f"invalid site id {site!r}")
    return site


@dataclass(frozen=True, eq=True)
class GlobalId:
    site: str
    kind: str
    num: int

    def __post_init__(self) -> None:
        check_site(self.site)
        if self.kind not in KINDS:
            raise ValidationError(f"invalid gid kind {self.kind!r}")
        if not isinstance(self.num, int) or self.num < 1:
            raise ValidationError(f"gid counter must be >= 1, got {self.num!r}")
        object.__setattr__(self, "_text", f"{self.site}/{self.kind}/{self.num}")
        object.__setattr__(self, "_hash", hash(self._text))

    def __str__(self) -> str:
        return self._text

    def __hash__(self) -> int:
        return self._hash

    def __lt__(self, other: "GlobalId") -> bool:
        return self._text < other._text

    @classmethod
    def parse(cls, text: str) -> "GlobalId":
        parts = text.split("/")
        if len(parts) != 3 or not parts[2].isdigit() or parts[2].startswith("0"):
            raise ValidationError(f"malformed global id {text!r}")
        return cls(parts[0], parts[1], int(parts[2]))


def make_gid(site: str, kind: str, counter: int) -> GlobalId:
    return GlobalId(site, kind, counter)


@dataclass(frozen=True)
class PatientRecord:
    gid: GlobalId
    pseudoid: str
    age: int
    sex: str
    hrt: bool
    site: str

    def __post_init__(self) -> None:
        if not 0 <= self.age <= 130:
            raise ValidationError(f"age out of range: {self.age}")
        if self.sex not in ("F", "M"):
            raise ValidationError(f"invalid sex {self.sex!r}")
        if not re.fullmatch(r"[0-9a-f]{16}", self.pseudoid):
            raise ValidationError(f"pseudoid must be 16 hex chars, got {self.pseudoid!r}")


LATERALITIES = ("L", "R")
DIAGNOSES = ("cancer", "benign", "normal")
OUTCOMES = ("successful", "failed", "none")
VIEWS = ("CC", "MLO")


@dataclass(frozen=True)
class Episode:
    gid: GlobalId
    patient: GlobalId
    laterality: str
    diagnosis: str
    therapy_outcome: str
    date: str
    therapy_end_date: Optional[str] = None

    def __post_init__(self) -> None:
        if self.laterality not in LATERALITIES:
            raise ValidationError(f"invalid laterality {self.laterality!r}")
        if self.diagnosis not in DIAGNOSES:
            raise ValidationError(f"invalid diagnosis {self.diagnosis!r}")
        if self.therapy_outcome not in OUTCOMES:
            raise ValidationError(f"invalid therapy outcome {self.therapy_outcome!r}")
        for d in (self.date, self.therapy_end_date):
            if d is not None and not DATE_RE.fullmatch(d):
                raise ValidationError(f"invalid ISO date {d!r}")
        if self.therapy_end_date is not None and self.therapy_end_date < self.date:
            raise ValidationError("therapy_end_date precedes episode date")


@dataclass(frozen=True)
class ImageMeta:
    gid: GlobalId
    patient: GlobalId
    view: str
    laterality: str
    study_date: str
    rows: int
    cols: int
    modality: str
    guid: str
    lfn: str = ""
    derived: dict = field(default_factory=dict, compare=True, hash=False)

    def __post_init__(self) -> None:
        if self.view not in VIEWS:
            raise ValidationError(f"invalid view {self.view!r}")
        if self.laterality not in LATERALITIES:
            raise ValidationError(f"invalid laterality {self.laterality!r}")
        if self.rows < 1 or self.cols < 1:
            raise ValidationError("rows and cols must be positive")


def format_number(value) -> str:
    """Render a derived value the same way on every site."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    return repr(float(value))
