"""Process metrics over episode logs: SUC, Pass@1 and AVG Re."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from dualmem.errors import InvalidComparisonError, InvalidInputError, ParseError
from dualmem.sim_env import EpisodeOutcome

UNDEFINED = "NA"
METRICS = ("suc", "pass_at_1", "avg_re")


@dataclass
class MetricsReport:
    n_samples: int
    suc: float
    pass_at_1: float
    avg_re: float | None  # None when there are no successes
    per_mode: dict = field(default_factory=dict)
    config_digest: str | None = None

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "suc": self.suc,
            "pass_at_1": self.pass_at_1,
            "avg_re": self.avg_re,
            "per_mode": {m: r.to_dict() for m, r in self.per_mode.items()},
            "config_digest": self.config_digest,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls(
            n_samples=int(data["n_samples"]),
            suc=float(data["suc"]),
            pass_at_1=float(data["pass_at_1"]),
            avg_re=None if data["avg_re"] is None else float(data["avg_re"]),
            per_mode={m: cls.from_dict(r) for m, r in data.get("per_mode", {}).items()},
            config_digest=data.get("config_digest"),
        )


def _summarize(outcomes) -> tuple:
    n = len(outcomes)
    wins = [o for o in outcomes if o.reward == 1]
    first = sum(1 for o in outcomes if o.first_attempt_success)
    suc = float(Fraction(len(wins), n))
    p1 = float(Fraction(first, n))
    avg_re = float(Fraction(sum(o.retries for o in wins), len(wins))) if wins else None
    return suc, p1, avg_re


def aggregate_metrics(outcomes, config_digest: str | None = None) -> MetricsReport:
    outcomes = list(outcomes)
    if not outcomes:
        raise InvalidInputError("no outcomes to aggregate")
    suc, p1, avg_re = _summarize(outcomes)
    per_mode = {}
    modes = sorted({o.mode for o in outcomes})
    if len(modes) > 1:
        for m in modes:
            sub = [o for o in outcomes if o.mode == m]
            s, p, a = _summarize(sub)
            per_mode[m] = MetricsReport(len(sub), s, p, a, config_digest=config_digest)
    return MetricsReport(len(outcomes), suc, p1, avg_re, per_mode, config_digest)


def _fmt(x) -> str:
    return UNDEFINED if x is None else repr(float(x))


def report_tsv(report: MetricsReport, label: str = "all") -> str:
    lines = ["mode\tn\tsuc\tpass_at_1\tavg_re"]
    lines.append(f"{label}\t{report.n_samples}\t{_fmt(report.suc)}\t{_fmt(report.pass_at_1)}\t{_fmt(report.avg_re)}")
    for m, r in report.per_mode.items():
        lines.append(f"{m}\t{r.n_samples}\t{_fmt(r.suc)}\t{_fmt(r.pass_at_1)}\t{_fmt(r.avg_re)}")
    return "\n".join(lines) + "\n"


def compare_modes(report_learned: MetricsReport, report_semantic: MetricsReport) -> list:
    """Rows ``(metric, learned, semantic, delta)``; delta is ``None`` if either side is undefined."""
    a, b = report_learned, report_semantic
    if a.n_samples != b.n_samples:
        raise InvalidComparisonError(f"episode counts differ: {a.n_samples} vs {b.n_samples}")
    if a.config_digest is not None and b.config_digest is not None and a.config_digest != b.config_digest:
        raise InvalidComparisonError("reports come from different world configurations")
    rows = []
    for name in METRICS:
        x, y = getattr(a, name), getattr(b, name)
        rows.append((name, x, y, None if x is None or y is None else x - y))
    return rows


def comparison_tsv(rows) -> str:
    lines = ["metric\tlearned\tsemantic\tdelta"]
    for name, x, y, dlt in rows:
        lines.append(f"{name}\t{_fmt(x)}\t{_fmt(y)}\t{_fmt(dlt)}")
    return "\n".join(lines) + "\n"


def write_outcomes(outcomes, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for o in outcomes:
            fh.write(json.dumps(o.to_dict(), sort_keys=True) + "\n")


def read_outcomes(path) -> list:
    path = Path(path)
    out = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(EpisodeOutcome.from_dict(json.loads(line)))
            except (json.JSONDecodeError, TypeError, InvalidInputError) as exc:
                raise ParseError(f"bad outcome record: {exc}", path, lineno) from None
    return out
