"""Structured verdicts shared by the checkers and the path verifications."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

PASS, FAIL, INCONCLUSIVE = "pass", "fail", "inconclusive"
_RANK = {PASS: 0, INCONCLUSIVE: 1, FAIL: 2}


def worst(verdicts) -> str:
    verdicts = list(verdicts)
    if not verdicts:
        return INCONCLUSIVE
    return max(verdicts, key=_RANK.__getitem__)


def _plain(value):
    """Convert numpy scalars/arrays and tuples into JSON-ready values."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return value


@dataclass
class ConditionReport:
    """Verdict for one hypothesis.

    ``witness`` holds the offending point (or stamp) for failures;
    ``estimates`` the constants behind a pass.
    """

    id: str
    verdict: str
    estimates: dict = field(default_factory=dict)
    witness: Optional[dict] = None
    region: str = ""
    note: str = ""
    items: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.verdict not in _RANK:
            raise ValueError(f"bad verdict {self.verdict!r}")
        if self.verdict == FAIL and not self.witness:
            raise ValueError(f"{self.id}: a failing report needs a witness")

    @property
    def passed(self) -> bool:
        return self.verdict == PASS

    def to_dict(self) -> dict:
        out = {"id": self.id, "verdict": self.verdict, "region": self.region,
               "estimates": _plain(self.estimates), "witness": _plain(self.witness)}
        if self.note:
            out["note"] = self.note
        if self.items:
            out["items"] = {k: v.to_dict() for k, v in sorted(self.items.items())}
        return out
