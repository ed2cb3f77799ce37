"""Flat key-value test reports and CSV exports."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ValidationError


def _fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass
class TestReport:
    """Outcome of one test: statistic, p-value, estimates and config echo."""

    __test__ = False

    statistic: str
    value: float
    p_value: float
    theta_hat: np.ndarray | None = None
    sigma_hat: float | None = None
    n: int | None = None
    seed: int | None = None
    sign_convention: str | None = None
    copula_r: float | None = None
    extra: dict = field(default_factory=dict)
    path: Any = field(default=None, repr=False)
    edf: Any = field(default=None, repr=False)

    def __post_init__(self):
        if not (0.0 <= self.p_value <= 1.0):
            raise ValidationError(f"p_value {self.p_value} outside [0, 1]")

    def as_dict(self) -> dict:
        out = {"statistic": self.statistic, "value": self.value, "p_value": self.p_value}
        if self.theta_hat is not None:
            for j, th in enumerate(np.atleast_1d(self.theta_hat), start=1):
                out[f"theta_hat_{j}"] = float(th)
        out["sigma_hat"] = self.sigma_hat
        out["n"] = self.n
        out["seed"] = self.seed
        out["sign_convention"] = self.sign_convention
        if self.copula_r is not None:
            out["copula_r"] = self.copula_r
        out.update(self.extra)
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.as_dict().items())

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text(), encoding="utf-8")
        return path


def parse_report(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if line.strip():
            key, _, val = line.partition("=")
            out[key] = val
    return out


def export_paths(report: TestReport, out_path) -> list[Path]:
    """Write the process path as CSV (t, value) and, when present, an e.d.f. table.

    The path file is ``out_path``; the e.d.f. comparison goes next to it with
    suffix ``_edf.csv`` and columns (x, edf, limit_cdf).
    """
    if report.path is None and report.edf is None:
        raise ValidationError("report carries no path to export")
    out_path = Path(out_path)
    written = []
    if report.path is not None:
        p = report.path
        lines = [f"# {p.name}: right-continuous values with left limits at jumps", "t,value,left"]
        lines += [f"{t!r},{v!r},{lv!r}" for t, v, lv in zip(p.t.tolist(), p.value.tolist(), p.left.tolist())]
        out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(out_path)
    if report.edf is not None:
        x, edf, lim = report.edf
        target = out_path.with_name(out_path.stem + "_edf.csv")
        lines = ["# empirical distribution of the statistic against its limit law", "x,edf,limit_cdf"]
        lines += [f"{a!r},{b!r},{c!r}" for a, b, c in zip(np.asarray(x).tolist(), np.asarray(edf).tolist(), np.asarray(lim).tolist())]
        target.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(target)
    return written


def edf_table(sample, limit_cdf, n_points: int = 512):
    """(x, edf, limit_cdf) on a 512-point grid spanning the sample."""
    s = np.sort(np.asarray(sample, dtype=float))
    x = np.linspace(0.0, s[-1] * 1.05 if s[-1] > 0 else 1.0, n_points)
    edf = np.searchsorted(s, x, side="right") / s.size
    return x, edf, np.asarray([limit_cdf(v) for v in x])


def write_edf(path, sample, limit_cdf, name: str = "statistic") -> Path:
    """Write (x, edf, limit_cdf) for a simulated statistic next to its limit law."""
    x, edf, lim = edf_table(sample, limit_cdf)
    lines = [f"# e.d.f. of {name} against its limit law, {x.size}-point grid", "x,edf,limit_cdf"]
    lines += [f"{a!r},{b!r},{c!r}" for a, b, c in zip(x.tolist(), edf.tolist(), np.asarray(lim, dtype=float).tolist())]
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
