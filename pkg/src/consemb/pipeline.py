"""Run configuration, the report-to-mask cascade, and experiment drivers."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ValidationError
from .finetune import LMTrainConfig, TrainedLM, fit_lm, load_lm
from .hashing import config_hash, text_hash
from .metrics.report import (EvalConfig, MetricsReport, build_report, format_table,
                             mask_scores, rubric_scores, text_scores, write_table)
from .metrics.stats import bootstrap_ci
from .metrics.volume import volume_diagonal
from .seg.train import SegTrainConfig, TrainedSeg, fit_seg, load_seg, predict_logits
from .synth import MaskTensor, generate_corpus
from .volio import write_volume

log = logging.getLogger(__name__)

ABLATION_AXES = {
    "noise_type": ("uniform", "gaussian"),
    "alpha": (5.0, 10.0, 15.0),
    "objective": ("vanilla", "neftune", "ceftune"),
    "expert_strategy": ("separate", "unified"),
    "finetuning": ("full", "lora"),
}


_NOISE_KEYS = {"alpha": "alpha", "distribution": "noise_distribution", "seed": "noise_seed"}
_ENCODER_KEYS = {"mode": "encoder_mode", "dim": "encoder_dim"}


@dataclass
class RunConfig:
    """Everything needed to reproduce a run.

    ``noise`` (alpha, distribution, seed) and ``encoder`` (mode, dim) apply
    to every model that uses them; ``lm`` and ``seg`` hold further overrides
    for the LM and segmentation training configs and win over the shared
    sections. ``eval`` must name the surface tolerance.
    """
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    n_cases: int = 250
    n_test: int = 50
    include_bilateral: bool = False
    summary_objective: str = "vanilla"
    plan_objective: str = "ceftune"
    seg_objective: str = "ceseg"
    noise: dict = field(default_factory=dict)
    encoder: dict = field(default_factory=dict)
    lm: dict = field(default_factory=dict)
    seg: dict = field(default_factory=dict)
    eval: dict = field(default_factory=lambda: {"surface_tolerance_mm": 3.0})
    window_dims: tuple = (32, 32, 16)
    overlap: float = 0.5
    bypass_summary: bool = False
    out_dir: str = "runs"

    def __post_init__(self):
        self.seeds = list(self.seeds)
        self.window_dims = tuple(self.window_dims)
        if self.n_test >= self.n_cases:
            raise ConfigurationError("n_test must be smaller than n_cases")
        for section, keys in (("noise", _NOISE_KEYS), ("encoder", _ENCODER_KEYS)):
            unknown = set(getattr(self, section)) - set(keys)
            if unknown:
                raise ConfigurationError(f"unknown {section} keys: {sorted(unknown)}")
        self.eval_config()
        self.lm_config("plan", self.plan_objective, 0)
        self.seg_config(self.seg_objective, 0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    def eval_config(self) -> EvalConfig:
        return EvalConfig.from_dict(self.eval)

    def _shared(self, with_encoder):
        out = {_NOISE_KEYS[k]: v for k, v in self.noise.items()}
        if with_encoder:
            out.update({_ENCODER_KEYS[k]: v for k, v in self.encoder.items()})
        return out

    def lm_config(self, role, objective, seed) -> LMTrainConfig:
        return LMTrainConfig(**{**self._shared(True), **self.lm, "role": role,
                                "objective": objective, "seed": seed})

    def seg_config(self, objective, seed, **extra) -> SegTrainConfig:
        return SegTrainConfig(**{**self._shared(False), **self.seg, "objective": objective,
                                 "seed": seed, **extra})


def corpus_split(config: RunConfig, seed: int):
    cases = generate_corpus(config.n_cases, seed + 1, include_bilateral=config.include_bilateral)
    k = config.n_cases - config.n_test
    return cases[:k], cases[k:]


def _load(obj, loader):
    return loader(obj) if isinstance(obj, (str, Path)) else obj


# -- cascade ----------------------------------------------------------------

@dataclass
class CaseTrace:
    case_id: str
    report: str
    summary: str | None = None
    plan: str | None = None
    mask_ref: str | None = None
    hashes: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)


@dataclass
class CascadeTrace:
    cases: list
    config: dict
    checkpoints: dict

    def to_dict(self) -> dict:
        return {"config": self.config, "config_hash": config_hash(self.config),
                "checkpoints": self.checkpoints, "cases": [asdict(c) for c in self.cases]}

    def content_hash(self) -> str:
        """Hash of everything except wall-clock timings."""
        d = self.to_dict()
        for c in d["cases"]:
            c.pop("timings")
        return config_hash(d)

    def check_purity(self):
        for c in self.cases:
            h = c.hashes
            if "plan_input" in h and h["plan_input"] != h.get("summary_used"):
                raise ValidationError(f"{c.case_id}: plan stage did not consume the summary stage output")
            if "seg_input" in h and h["seg_input"] != h.get("plan"):
                raise ValidationError(f"{c.case_id}: segmentation did not consume the plan stage output")


def check_compatible(summary: TrainedLM, plan: TrainedLM, seg: TrainedSeg):
    if summary.config.role not in ("summary", "unified"):
        raise ValidationError(f"summary checkpoint has role {summary.config.role!r}")
    if plan.config.role not in ("plan", "unified"):
        raise ValidationError(f"plan checkpoint has role {plan.config.role!r}")
    if seg.lm.weights_hash != plan.weights_hash:
        raise ValidationError("segmentation model was trained on a different frozen LM than the plan expert")


def _zero_mask_scores(gt: MaskTensor, cfg: EvalConfig) -> dict:
    out = {}
    if "dice" in cfg.metrics:
        out.update(dice=0.0, iou=0.0)
    if "hd95" in cfg.metrics:
        out["hd95"] = volume_diagonal(gt.data.shape, gt.spacing_mm)
    if "surface_dice" in cfg.metrics:
        out["surface_dice"] = 0.0
    return out


def run_cascade(config: RunConfig, checkpoints: dict, cases, out_dir=None):
    """Report -> summary -> plan -> mask for each case, with metrics at every stage.

    ``checkpoints`` maps summary/plan/seg to loaded models or checkpoint paths.
    Returns ``(CascadeTrace, MetricsReport)``.
    """
    summary_lm = _load(checkpoints["summary"], load_lm)
    plan_lm = _load(checkpoints["plan"], load_lm)
    seg = checkpoints["seg"]
    seg = load_seg(seg, plan_lm) if isinstance(seg, (str, Path)) else seg
    check_compatible(summary_lm, plan_lm, seg)
    cfg = config.eval_config()
    out_dir = Path(out_dir) if out_dir else None
    traces, flags, rubrics = [], [], []
    per_case = {}

    def add(prefix, case_id, scores):
        for k, v in scores.items():
            per_case.setdefault(f"{prefix}{k}", []).append((case_id, v))

    for case in sorted(cases, key=lambda c: c.id):
        tr = CaseTrace(case.id, case.report, hashes={"report": text_hash(case.report)})
        t = time.perf_counter()
        summary = case.summary if config.bypass_summary else summary_lm.generate("summary", case.report)
        tr.timings["summary_s"] = time.perf_counter() - t
        tr.summary = summary
        tr.hashes["summary_used"] = text_hash(summary)
        if not summary.strip():
            tr.failures.append("summary")
        add("summary_", case.id, text_scores(case.id, summary, case.summary, flags, "summary"))

        plan = ""
        if "summary" not in tr.failures:
            tr.hashes["plan_input"] = text_hash(summary)
            t = time.perf_counter()
            plan = plan_lm.generate("plan", summary)
            tr.timings["plan_s"] = time.perf_counter() - t
        tr.plan = plan
        tr.hashes["plan"] = text_hash(plan)
        if not plan.strip():
            tr.failures.append("plan")
        add("plan_", case.id, text_scores(case.id, plan, case.plan, flags, "plan"))
        rubrics.append(rubric_scores(case.id, plan, case.fields, flags))

        if tr.failures:
            flags.append({"case_id": case.id, "stage": "segmentation",
                          "message": f"skipped after failed stage(s) {tr.failures}; scored as zero"})
            add("seg_", case.id, _zero_mask_scores(case.mask, cfg))
        else:
            tr.hashes["seg_input"] = text_hash(plan)
            t = time.perf_counter()
            logits = predict_logits(seg, case.volume, plan, config.window_dims, config.overlap)
            pred = MaskTensor((logits > 0).astype(np.uint8), case.volume.spacing_mm)
            tr.timings["segment_s"] = time.perf_counter() - t
            tr.hashes["mask"] = text_hash(pred.data.tobytes().hex())
            if out_dir is not None:
                ref = Path("masks") / f"{case.id}.mask"
                write_volume(out_dir / ref, pred)
                tr.mask_ref = str(ref)
            add("seg_", case.id, mask_scores(case.id, pred, case.mask, cfg, flags))
        traces.append(tr)

    ckpt_info = {"summary": summary_lm.weights_hash, "plan": plan_lm.weights_hash,
                 "seg_lm": seg.lm.weights_hash, "seg": config_hash(asdict(seg.config))}
    trace = CascadeTrace(traces, config.to_dict(), ckpt_info)
    trace.check_purity()
    rubric_totals = [(r["case_id"], r["total"]) for r in rubrics]
    per_case["plan_rubric_total"] = rubric_totals
    report = build_report(per_case, cfg, rubrics, flags,
                          {"run": config.to_dict(), "checkpoints": ckpt_info})
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "trace.json").write_text(json.dumps(trace.to_dict(), indent=2))
        report.write(out_dir, "cascade_report")
    return trace, report


# -- consistency analysis ---------------------------------------------------

_CESEG_KEYS = {"objective", "lam"}


def check_matched(a: TrainedSeg, b: TrainedSeg):
    da, db = asdict(a.config), asdict(b.config)
    diff = {k for k in da if da[k] != db[k]} - _CESEG_KEYS
    if diff:
        raise ValidationError(f"segmentation checkpoints differ beyond the CESEG setting: {sorted(diff)}")
    if a.lm.weights_hash != b.lm.weights_hash:
        raise ValidationError("segmentation checkpoints use different frozen LMs")


def mask_dice(seg: TrainedSeg, cases, plans, config: RunConfig) -> dict:
    """Per-case Dice/IoU for the given plan texts, keyed by metric."""
    out = {"dice": [], "iou": []}
    cfg = EvalConfig(surface_tolerance_mm=config.eval_config().surface_tolerance_mm, metrics=("dice",))
    for case in cases:
        logits = predict_logits(seg, case.volume, plans[case.id], config.window_dims, config.overlap)
        pred = MaskTensor((logits > 0).astype(np.uint8), case.volume.spacing_mm)
        s = mask_scores(case.id, pred, case.mask, cfg, [])
        out["dice"].append(s["dice"])
        out["iou"].append(s["iou"])
    return out


def run_consistency_analysis(config: RunConfig, seg_checkpoints: dict, cases, generated_plans: dict,
                             out_dir=None) -> dict:
    """Dice/IoU of two segmentation models on clean and generated plans.

    ``seg_checkpoints`` maps ``with_ceseg`` and ``without_ceseg`` to models or
    paths; ``generated_plans`` maps case id to plan text from the cascade.
    """
    models = {k: _load(seg_checkpoints[k], load_seg) for k in ("with_ceseg", "without_ceseg")}
    check_matched(models["with_ceseg"], models["without_ceseg"])
    missing = [c.id for c in cases if c.id not in generated_plans]
    if missing:
        raise ValidationError(f"no generated plan for cases {missing[:5]}")
    cases = sorted(cases, key=lambda c: c.id)
    cfg = config.eval_config()
    clean = {c.id: c.plan for c in cases}
    result = {"config_hash": config.hash, "models": {}}
    rows = []
    for name, seg in models.items():
        cells = {}
        for source, plans in (("ground_truth", clean), ("generated", generated_plans)):
            cells[source] = mask_dice(seg, cases, plans, config)
        entry = {}
        for metric in ("dice", "iou"):
            gt_vals = np.array(cells["ground_truth"][metric])
            gen_vals = np.array(cells["generated"][metric])
            diff = gt_vals - gen_vals
            entry[metric] = {
                "ground_truth": _cell(gt_vals, cfg), "generated": _cell(gen_vals, cfg),
                "difference": _cell(diff, cfg),
                "abs_gap": abs(float(gt_vals.mean() - gen_vals.mean())),
            }
        result["models"][name] = entry
        for source in ("ground_truth", "generated", "difference"):
            rows.append([name, source, entry["dice"][source]["point"], entry["iou"][source]["point"]])
    if out_dir is not None:
        write_table(out_dir, "consistency", ["model", "plans", "dice", "iou"], rows,
                    {"config_hash": config.hash, "detail": result["models"]})
    result["table"] = format_table(["model", "plans", "dice", "iou"], rows)
    return result


def _cell(values, cfg: EvalConfig) -> dict:
    ci = bootstrap_ci(values, cfg.n_resamples, cfg.level, cfg.seed)
    return {"point": float(np.mean(values)), "ci_low": ci["low"], "ci_high": ci["high"], "n": len(values)}


# -- ablations --------------------------------------------------------------

def plan_rouge_on_generated(plan_lm: TrainedLM, summaries: dict, cases) -> dict:
    """Plan-stage scores when the expert reads the given (generated) summaries."""
    flags = []
    scores = {"r1": [], "r2": [], "rl": [], "rubric_total": []}
    for case in cases:
        plan = plan_lm.generate("plan", summaries[case.id])
        s = text_scores(case.id, plan, case.plan, flags, "plan")
        for k in ("r1", "r2", "rl"):
            scores[k].append(s[k])
        scores["rubric_total"].append(rubric_scores(case.id, plan, case.fields, flags)["total"])
    return {k: float(np.mean(v)) for k, v in scores.items()}


def _cell_configs(config: RunConfig, axis, value, seed):
    plan_cfg = config.lm_config("plan", config.plan_objective, seed)
    if axis == "noise_type":
        plan_cfg = replace(plan_cfg, noise_distribution=value)
    elif axis == "alpha":
        plan_cfg = replace(plan_cfg, alpha=float(value))
    elif axis == "objective":
        plan_cfg = replace(plan_cfg, objective=value)
    elif axis == "finetuning":
        plan_cfg = replace(plan_cfg, finetuning=value)
    return plan_cfg


def run_ablation_grid(config: RunConfig, axis: str, values=None, out_dir=None) -> list:
    """Train and score one plan expert per grid cell and seed.

    Every cell is scored on the plan stage of the cascade, i.e. on summaries
    generated by a separately trained summary expert (or by the unified model
    itself for the unified strategy).
    """
    if axis not in ABLATION_AXES:
        raise ValidationError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    values = tuple(values) if values is not None else ABLATION_AXES[axis]
    bad = [v for v in values if v not in ABLATION_AXES[axis]]
    if bad:
        raise ValidationError(f"unsupported values for {axis}: {bad}")
    per_seed = {v: [] for v in values}
    for seed in config.seeds:
        train, test = corpus_split(config, seed)
        summary_lm = fit_lm(train, [], config.lm_config("summary", config.summary_objective, seed))
        summaries = {c.id: summary_lm.generate("summary", c.report) for c in test}
        for v in values:
            if axis == "expert_strategy" and v == "unified":
                uni = fit_lm(train, [], config.lm_config("unified", config.plan_objective, seed))
                own = {c.id: uni.generate("summary", c.report) for c in test}
                row = plan_rouge_on_generated(uni, own, test)
                row["summary_rl"] = float(np.mean([text_scores(c.id, own[c.id], c.summary, [], "summary")["rl"]
                                                   for c in test]))
            else:
                plan_lm = fit_lm(train, [], _cell_configs(config, axis, v, seed))
                row = plan_rouge_on_generated(plan_lm, summaries, test)
                if axis == "expert_strategy":
                    row["summary_rl"] = float(np.mean([
                        text_scores(c.id, summaries[c.id], c.summary, [], "summary")["rl"] for c in test]))
            row["seed"] = seed
            per_seed[v].append(row)
            log.info("ablation %s=%s seed %d %s", axis, v, seed, row)
    rows = []
    for v in values:
        keys = [k for k in per_seed[v][0] if k != "seed"]
        rows.append([v] + [float(np.mean([r[k] for r in per_seed[v]])) for k in keys])
    headers = [axis] + keys
    if out_dir is not None:
        write_table(out_dir, f"ablation_{axis}", headers, rows,
                    {"config_hash": config.hash, "config": config.to_dict(), "per_seed": per_seed})
    return [dict(zip(headers, r)) for r in rows]


# -- shared training --------------------------------------------------------

@dataclass
class SeedModels:
    seed: int
    train: list
    test: list
    summary: TrainedLM
    plan: TrainedLM
    seg: TrainedSeg


def train_stack(config: RunConfig, seed: int) -> SeedModels:
    """Summary expert, plan expert and segmentation model for one seed."""
    train, test = corpus_split(config, seed)
    summary = fit_lm(train, [], config.lm_config("summary", config.summary_objective, seed))
    plan = fit_lm(train, [], config.lm_config("plan", config.plan_objective, seed))
    seg = fit_seg(train, plan, config.seg_config(config.seg_objective, seed))
    return SeedModels(seed, train, test, summary, plan, seg)


def stage_report(report: MetricsReport) -> str:
    return format_table(["metric", "point", "ci_low", "ci_high", "n"], report.table_rows())
