"""Per-case metric collection and report assembly."""
from __future__ import annotations

import contextlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..errors import ConfigurationError, DegenerateInputWarning, InvalidInputError
from ..hashing import config_hash
from .rubric import RubricResult, score_plan_rubrics
from .stats import bootstrap_ci
from .text import rouge_all
from .volume import dice_iou, hd95, surface_dice

METRIC_GROUPS = {
    "rouge": ("r1", "r2", "rl"),
    "dice": ("dice", "iou"),
    "hd95": ("hd95",),
    "surface_dice": ("surface_dice",),
}


@dataclass
class EvalConfig:
    # no default: the tolerance must be stated wherever a report is produced
    surface_tolerance_mm: float
    metrics: tuple = ("rouge", "dice", "hd95", "surface_dice")
    n_resamples: int = 1000
    level: float = 0.95
    seed: int = 0
    hd95_pooling: str = "pooled"
    hd95_points: str = "surface"

    def __post_init__(self):
        self.metrics = tuple(self.metrics)
        unknown = set(self.metrics) - set(METRIC_GROUPS)
        if unknown:
            raise ConfigurationError(f"unknown metrics: {sorted(unknown)}")
        if not self.surface_tolerance_mm > 0:
            raise ConfigurationError("surface_tolerance_mm must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        if "surface_tolerance_mm" not in d:
            raise ConfigurationError("eval config must set surface_tolerance_mm explicitly")
        return cls(**d)


@dataclass
class MetricSummary:
    point: float
    ci_low: float
    ci_high: float
    n: int


def summarize(values, cfg: EvalConfig) -> MetricSummary:
    values = [float(v) for v in values]
    if not values:
        raise InvalidInputError("no values to summarize")
    ci = bootstrap_ci(values, cfg.n_resamples, cfg.level, cfg.seed)
    return MetricSummary(math.fsum(values) / len(values), ci["low"], ci["high"], len(values))


@contextlib.contextmanager
def capture_flags(flags: list, case_id: str, stage: str):
    """Record degenerate-input warnings raised inside the block as report flags."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateInputWarning)
        yield
    for w in caught:
        if issubclass(w.category, DegenerateInputWarning):
            flags.append({"case_id": case_id, "stage": stage, "message": str(w.message)})
        else:
            warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)


def text_scores(case_id, candidate, reference, flags, stage) -> dict:
    with capture_flags(flags, case_id, stage):
        return rouge_all(candidate, reference)


def mask_scores(case_id, pred, gt, cfg: EvalConfig, flags, stage="segmentation") -> dict:
    out = {}
    with capture_flags(flags, case_id, stage):
        if "dice" in cfg.metrics:
            out.update(dice_iou(pred, gt))
        if "hd95" in cfg.metrics:
            out["hd95"] = hd95(pred, gt, pooling=cfg.hd95_pooling, points=cfg.hd95_points)
        if "surface_dice" in cfg.metrics:
            out["surface_dice"] = surface_dice(pred, gt, cfg.surface_tolerance_mm)
    return out


def rubric_scores(case_id, plan, fields, flags) -> dict:
    res: RubricResult = score_plan_rubrics(plan, fields)
    if res.parse_failure:
        flags.append({"case_id": case_id, "stage": "plan", "message": "plan could not be parsed"})
    return {"case_id": case_id, **res.to_dict()}


@dataclass
class MetricsReport:
    metrics: dict = field(default_factory=dict)
    rubrics: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"metrics": {k: asdict(v) for k, v in self.metrics.items()},
                "rubrics": self.rubrics, "flags": self.flags, "config": self.config}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls({k: MetricSummary(**v) for k, v in d["metrics"].items()},
                   d["rubrics"], d["flags"], d["config"])

    def table_rows(self):
        return [[name, s.point, s.ci_low, s.ci_high, s.n] for name, s in self.metrics.items()]

    def write(self, out_dir, name="report"):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{name}.json").write_text(json.dumps(self.to_dict(), indent=2))
        text = format_table(["metric", "point", "ci_low", "ci_high", "n"], self.table_rows())
        (out_dir / f"{name}.txt").write_text(text)
        return out_dir / f"{name}.json"


def build_report(per_case: dict, cfg: EvalConfig, rubrics=(), flags=(), config=None) -> MetricsReport:
    """``per_case`` maps metric name to a list of (case_id, value) in any order."""
    metrics = {}
    for name, rows in per_case.items():
        rows = sorted(rows, key=lambda r: r[0])
        metrics[name] = summarize([v for _, v in rows], cfg)
    echo = dict(config or {})
    echo["eval"] = {**asdict(cfg), "metrics": list(cfg.metrics)}
    echo["config_hash"] = config_hash(echo)
    return MetricsReport(metrics, sorted(rubrics, key=lambda r: r["case_id"]),
                         sorted(flags, key=lambda f: (f["case_id"], f["stage"])), echo)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def format_table(headers, rows) -> str:
    cells = [list(map(str, headers))] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_table(out_dir, name, headers, rows, meta=None):
    """Emit one table as JSON records plus aligned text."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = [dict(zip(headers, r)) for r in rows]
    payload = {"columns": list(headers), "rows": records, **({"meta": meta} if meta else {})}
    (out_dir / f"{name}.json").write_text(json.dumps(payload, indent=2))
    (out_dir / f"{name}.txt").write_text(format_table(headers, rows))
    return out_dir / f"{name}.json"
