"""Morphokinetic annotations, direct-cleavage and blastulation grouping, and a
rule-based baseline scorer.

The baseline scorer is a SURROGATE. It is a transparent hierarchical rule
table built for this package and is not the proprietary KIDScore D5 v3
model; it only shares that model's input requirements.

Surrogate rule table (all seven inputs pn, t2, t3, t5, tB, ICM, TE required):

=====================  ===================================================
condition              score
=====================  ===================================================
pn != 2                1.0 (floor band)
direct cleavage        2.0 + 0.225 * (icm_points + te_points)   -> [2.0, 2.9]
otherwise              3.0 + 3.4 * speed + 0.875 * (icm_points + te_points)
=====================  ===================================================

``icm_points``/``te_points``: A=2, B=1, C=0.
``speed = clip((120 - tB) / 30, 0, 1)``: 1 for tB <= 90 hpi, 0 for tB >= 120.
Direct cleavage means DC1-3 when tPNf is annotated, or t5 - t3 < 5 h.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Any

DC_THRESHOLD_H = 5.0
TB_EDGES = (100.0, 105.0, 110.0, 115.0)
TB_LABELS = ("<100", "100-105", "105-110", "110-115", ">115")
GRADE_POINTS = {"A": 2, "B": 1, "C": 0}
TIMING_FIELDS = ("tPNf", "t2", "t3", "t5", "tB")


class Grade(str, Enum):
    A = "A"
    B = "B"
    C = "C"


class CleavagePattern(str, Enum):
    NO_DC = "NO_DC"
    DC1_3 = "DC1_3"
    DC2_5 = "DC2_5"
    UNDETERMINED = "UNDETERMINED"


class _NotScorable:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "NOT_SCORABLE"

    def __bool__(self):
        return False


NOT_SCORABLE = _NotScorable()


@dataclass(frozen=True)
class MorphokineticRecord:
    pn: int | None = None
    tPNf: float | None = None
    t2: float | None = None
    t3: float | None = None
    t5: float | None = None
    tB: float | None = None
    icm: Grade | None = None
    te: Grade | None = None

    def __post_init__(self):
        for name in ("icm", "te"):
            v = getattr(self, name)
            if v is not None and not isinstance(v, Grade):
                object.__setattr__(self, name, Grade(v))
        present = [(n, getattr(self, n)) for n in TIMING_FIELDS if getattr(self, n) is not None]
        for name, t in present:
            if not t > 0:
                raise ValueError(f"{name}={t}: timings must be positive")
        for (n1, a), (n2, b) in zip(present, present[1:]):
            if a > b:
                raise ValueError(f"timings out of order: {n1}={a} > {n2}={b}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "pn": self.pn,
            **{n: getattr(self, n) for n in TIMING_FIELDS},
            "icm": self.icm.value if self.icm else None,
            "te": self.te.value if self.te else None,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MorphokineticRecord":
        return cls(**{k: d.get(k) for k in ("pn", *TIMING_FIELDS, "icm", "te")})


def classify_direct_cleavage(rec: MorphokineticRecord) -> CleavagePattern:
    """DC1-3 if t3 - tPNf < 5 h, else DC2-5 if t5 - t3 < 5 h, else no DC.

    Both inequalities are strict. DC1-3 wins when both hold. tPNf, t3 and t5
    must all be annotated; t2 is not required.
    """
    if rec.tPNf is None or rec.t3 is None or rec.t5 is None:
        return CleavagePattern.UNDETERMINED
    if rec.t3 - rec.tPNf < DC_THRESHOLD_H:
        return CleavagePattern.DC1_3
    if rec.t5 - rec.t3 < DC_THRESHOLD_H:
        return CleavagePattern.DC2_5
    return CleavagePattern.NO_DC


def tb_group(rec: MorphokineticRecord | float | None) -> str | None:
    """Blastulation-speed bin; bins are half-open and lower-inclusive.

    ``>115`` holds tB >= 115. Returns None when tB is absent.
    """
    tb = rec.tB if isinstance(rec, MorphokineticRecord) else rec
    if tb is None:
        return None
    for edge, label in zip(TB_EDGES, TB_LABELS):
        if tb < edge:
            return label
    return TB_LABELS[-1]


def _direct_cleavage_for_baseline(rec: MorphokineticRecord) -> bool:
    if rec.tPNf is not None and rec.t3 - rec.tPNf < DC_THRESHOLD_H:
        return True
    return rec.t5 - rec.t3 < DC_THRESHOLD_H


def baseline_score(rec: MorphokineticRecord | None):
    """Surrogate rule-based score in [1.0, 9.9], or ``NOT_SCORABLE``."""
    if rec is None:
        return NOT_SCORABLE
    required = (rec.pn, rec.t2, rec.t3, rec.t5, rec.tB, rec.icm, rec.te)
    if any(v is None for v in required):
        return NOT_SCORABLE
    if rec.pn != 2:
        return 1.0
    grade = GRADE_POINTS[rec.icm.value] + GRADE_POINTS[rec.te.value]
    if _direct_cleavage_for_baseline(rec):
        return 2.0 + 0.225 * grade
    speed = min(max((120.0 - rec.tB) / 30.0, 0.0), 1.0)
    return 3.0 + 3.4 * speed + 0.875 * grade


def is_scorable(value) -> bool:
    return value is not NOT_SCORABLE and not (isinstance(value, float) and math.isnan(value))
