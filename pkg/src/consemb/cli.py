"""Command-line entry point."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import ConsembError
from .finetune import LMTrainConfig, fit_lm, load_lm, save_lm
from .metrics.report import EvalConfig, build_report, mask_scores, rubric_scores, text_scores
from .pipeline import ABLATION_AXES, RunConfig, run_ablation_grid, run_cascade, run_consistency_analysis
from .seg.train import SegTrainConfig, fit_seg, load_seg, predict_logits, save_seg
from .synth import MaskTensor, crop_patch, generate_corpus
from .volio import read_corpus, read_volume, write_corpus, write_volume

OUT_ENV = "CONSEMB_OUT"
log = logging.getLogger("consemb")


def out_path(p) -> Path:
    """Relative output paths resolve under $CONSEMB_OUT when it is set."""
    p = Path(p)
    root = os.environ.get(OUT_ENV)
    return p if p.is_absolute() or not root else Path(root) / p


def _dims(text) -> tuple:
    parts = tuple(int(x) for x in str(text).replace("x", ",").split(","))
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three dims, got {text!r}")
    return parts


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seeds", None):
        cfg = RunConfig.from_dict({**cfg.to_dict(), "seeds": args.seeds})
    return cfg


def _split(cases, val_fraction):
    k = int(round(len(cases) * (1 - val_fraction)))
    return cases[:k], cases[k:]


def cmd_gen_data(args):
    cases = generate_corpus(args.n, args.seed, include_bilateral=args.include_bilateral)
    if args.patch_dims:
        # fails early if the patch cannot be cropped from these volumes
        crop_patch(cases[0].volume, cases[0].mask, args.patch_dims, args.seed)
    out = out_path(args.out_dir)
    path = write_corpus(cases, out)
    manifest = {"n": args.n, "seed": args.seed, "include_bilateral": args.include_bilateral,
                "patch_dims": list(args.patch_dims) if args.patch_dims else None,
                "volume_dims": list(cases[0].volume.data.shape)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {len(cases)} cases to {path}")


def cmd_train_lm(args):
    from .plotting import plot_curves
    cases = read_corpus(args.corpus)
    train, val = _split(cases, args.val_fraction)
    cfg = LMTrainConfig(role=args.role, objective=args.objective, seed=args.seed, epochs=args.epochs,
                        alpha=args.alpha, noise_distribution=args.noise_distribution,
                        lam=args.lam, consistency_norm=args.consistency_norm,
                        relaxation=args.relaxation, encoder_mode=args.encoder_mode,
                        finetuning=args.finetuning, plan_input=args.plan_input)
    trained = fit_lm(train, val, cfg)
    out = out_path(args.out)
    ref = save_lm(trained, out)
    plot_curves({f"{args.role}/{args.objective}": trained.curve}, out.with_suffix(".curve.png"))
    print(json.dumps({"checkpoint": str(ref.path), "config_hash": ref.config_hash,
                      "weights_hash": ref.weights_hash, "final": trained.curve[-1]}))


def cmd_train_seg(args):
    from .plotting import plot_curves
    cases = read_corpus(args.corpus)
    lm_path = Path(args.lm)
    lm = load_lm(lm_path)
    objective = "default" if args.unimodal else args.objective
    cfg = SegTrainConfig(objective=objective, seed=args.seed, epochs=args.epochs, alpha=args.alpha,
                         lam=args.lam, n_prompts=args.prompts, levels=args.levels,
                         use_text=not args.unimodal, log_raw_cos=args.ceseg_literal,
                         train_on_generated=args.train_on_generated)
    seg = fit_seg(cases, lm, cfg, lm_path)
    out = out_path(args.out)
    save_seg(seg, out, lm_path.resolve())
    plot_curves({objective: seg.curve}, out.with_suffix(".curve.png"))
    print(json.dumps({"checkpoint": str(out), "final": seg.curve[-1]}))


def cmd_infer_seg(args):
    from .plotting import plot_mask_overlay
    seg = load_seg(args.checkpoint)
    cases = {c.id: c for c in read_corpus(args.corpus)}
    case = cases[args.case]
    plan = args.plan if args.plan is not None else case.plan
    window = args.window or case.volume.data.shape
    logits = predict_logits(seg, case.volume, plan, window, args.overlap)
    pred = MaskTensor((logits > 0).astype(np.uint8), case.volume.spacing_mm)
    out = out_path(args.out)
    write_volume(out / f"{case.id}.mask", pred)
    plot_mask_overlay(case.volume.data, case.mask.data, pred.data, out / f"{case.id}.png")
    scores = mask_scores(case.id, pred, case.mask, EvalConfig(surface_tolerance_mm=args.surface_tolerance), [])
    print(json.dumps({"case": case.id, **scores}))


def cmd_eval(args):
    from .plotting import plot_metric_ci
    cfg = EvalConfig(surface_tolerance_mm=args.surface_tolerance, metrics=tuple(args.metrics.split(",")),
                     n_resamples=args.bootstrap, level=args.level, seed=args.seed)
    gt = {c.id: c for c in read_corpus(args.gt_dir)}
    pred_dir = Path(args.pred_dir)
    texts = {}
    tp = pred_dir / "texts.jsonl"
    if tp.exists():
        texts = {r["id"]: r for r in map(json.loads, tp.read_text().splitlines()) if r}
    per_case, flags, rubrics = {}, [], []
    for cid, case in sorted(gt.items()):
        mask_file = next((p for p in (pred_dir / f"{cid}.mask", pred_dir / "masks" / f"{cid}.mask")
                          if p.exists()), None)
        if mask_file is not None and set(cfg.metrics) - {"rouge"}:
            for k, v in mask_scores(cid, read_volume(mask_file), case.mask, cfg, flags).items():
                per_case.setdefault(f"seg_{k}", []).append((cid, v))
        if cid in texts and "rouge" in cfg.metrics:
            for stage in ("summary", "plan"):
                if stage in texts[cid]:
                    ref = getattr(case, stage)
                    for k, v in text_scores(cid, texts[cid][stage], ref, flags, stage).items():
                        per_case.setdefault(f"{stage}_{k}", []).append((cid, v))
            if "plan" in texts[cid]:
                rubrics.append(rubric_scores(cid, texts[cid]["plan"], case.fields, flags))
    if not per_case:
        raise ConsembError(f"no predictions in {pred_dir} match cases in {args.gt_dir}")
    report = build_report(per_case, cfg, rubrics, flags, {"pred_dir": str(pred_dir)})
    out = out_path(args.out or pred_dir)
    report.write(out, "eval_report")
    plot_metric_ci(report, out / "eval_report.png")
    print((out / "eval_report.txt").read_text(), end="")


def _checkpoint_cases(args):
    cases = read_corpus(args.corpus)
    return cases[-args.n_cases:] if args.n_cases else cases


def cmd_cascade(args):
    from .plotting import plot_mask_overlay, plot_metric_ci
    cfg = _run_config(args)
    if args.bypass_summary:
        cfg = RunConfig.from_dict({**cfg.to_dict(), "bypass_summary": True})
    cases = _checkpoint_cases(args)
    out = out_path(args.out)
    trace, report = run_cascade(cfg, {"summary": args.summary, "plan": args.plan, "seg": args.seg},
                                cases, out)
    with open(out / "texts.jsonl", "w") as fh:
        for c in trace.cases:
            fh.write(json.dumps({"id": c.case_id, "summary": c.summary, "plan": c.plan}) + "\n")
    plot_metric_ci(report, out / "cascade_metrics.png",
                   [m for m in report.metrics if not m.endswith("hd95") and m != "plan_rubric_total"])
    first = trace.cases[0]
    if first.mask_ref:
        case = next(c for c in cases if c.id == first.case_id)
        pred = read_volume(out / first.mask_ref)
        plot_mask_overlay(case.volume.data, case.mask.data, pred.data, out / f"{case.id}_overlay.png")
    print((out / "cascade_report.txt").read_text(), end="")


def cmd_ablate(args):
    from .plotting import plot_grouped_bars
    cfg = _run_config(args)
    values = None
    if args.values:
        kind = type(ABLATION_AXES[args.axis][0])
        values = [kind(v) for v in args.values.split(",")]
    out = out_path(args.out)
    rows = run_ablation_grid(cfg, args.axis, values, out)
    keys = [k for k in rows[0] if k in ("r1", "r2", "rl")]
    plot_grouped_bars(rows, args.axis, keys, out / f"ablation_{args.axis}.png", "plan ROUGE")
    print((out / f"ablation_{args.axis}.txt").read_text(), end="")


def cmd_consistency(args):
    from .plotting import plot_grouped_bars
    cfg = _run_config(args)
    cases = _checkpoint_cases(args)
    summary_lm, plan_lm = load_lm(args.summary), load_lm(args.plan)
    plans = {c.id: plan_lm.generate("plan", summary_lm.generate("summary", c.report)) for c in cases}
    out = out_path(args.out)
    res = run_consistency_analysis(cfg, {"with_ceseg": load_seg(args.with_ceseg, plan_lm),
                                         "without_ceseg": load_seg(args.without_ceseg, plan_lm)},
                                   cases, plans, out)
    rows = [{"model": m, "ground_truth": d["dice"]["ground_truth"]["point"],
             "generated": d["dice"]["generated"]["point"]} for m, d in res["models"].items()]
    plot_grouped_bars(rows, "model", ["ground_truth", "generated"], out / "consistency.png", "Dice")
    print(res["table"], end="")


def cmd_print_config(args):
    print(json.dumps({"run": RunConfig().to_dict(), "lm": asdict(LMTrainConfig()),
                      "seg": asdict(SegTrainConfig())}, indent=2))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="consemb", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write a synthetic corpus")
    s.add_argument("--n", type=int, default=250)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--patch-dims", type=_dims, default=None)
    s.add_argument("--include-bilateral", action="store_true")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train-lm", help="train a summary, plan or unified expert")
    s.add_argument("--corpus", required=True)
    s.add_argument("--role", choices=("summary", "plan", "unified"), required=True)
    s.add_argument("--objective", choices=("vanilla", "neftune", "ceftune"), default="ceftune")
    s.add_argument("--alpha", type=float, default=5.0)
    s.add_argument("--lambda", dest="lam", type=float, default=1.0)
    s.add_argument("--consistency-norm", choices=("l1", "l2"), default="l2")
    s.add_argument("--relaxation", choices=("soft", "hard"), default="soft")
    s.add_argument("--noise-distribution", choices=("uniform", "gaussian"), default="uniform")
    s.add_argument("--encoder-mode", default="bag_of_embeddings")
    s.add_argument("--finetuning", choices=("full", "lora"), default="full")
    s.add_argument("--plan-input", choices=("ground_truth", "generated"), default="ground_truth")
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--val-fraction", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_lm)

    s = sub.add_parser("train-seg", help="train a text-conditioned segmentation model")
    s.add_argument("--corpus", required=True)
    s.add_argument("--lm", required=True, help="frozen plan-expert checkpoint")
    s.add_argument("--objective", choices=("default", "neseg", "ceseg"), default="ceseg")
    s.add_argument("--unimodal", action="store_true", help="ignore the plan text")
    s.add_argument("--alpha", type=float, default=5.0)
    s.add_argument("--lambda", dest="lam", type=float, default=1.0)
    s.add_argument("--prompts", type=int, default=8)
    s.add_argument("--levels", type=int, default=3)
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ceseg-literal", action="store_true",
                   help="log the raw cosine between noisy and clean embeddings")
    s.add_argument("--train-on-generated", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_seg)

    s = sub.add_parser("infer-seg", help="segment one case")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--case", required=True)
    s.add_argument("--plan", default=None, help="plan text (default: the case's reference plan)")
    s.add_argument("--window", type=_dims, default=None)
    s.add_argument("--overlap", type=float, default=0.5)
    s.add_argument("--surface-tolerance", type=float, default=3.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer_seg)

    s = sub.add_parser("eval", help="score predictions against a corpus")
    s.add_argument("--pred-dir", required=True)
    s.add_argument("--gt-dir", required=True)
    s.add_argument("--metrics", default="rouge,dice,hd95,surface_dice")
    s.add_argument("--bootstrap", type=int, default=1000)
    s.add_argument("--level", type=float, default=0.95)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--surface-tolerance", type=float, required=True)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_eval)

    for name, func, hlp in (("cascade", cmd_cascade, "summarize, plan and segment held-out cases"),
                            ("consistency-analysis", cmd_consistency,
                             "compare segmentation on clean and generated plans")):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("--corpus", required=True)
        s.add_argument("--summary", required=True)
        s.add_argument("--plan", required=True)
        s.add_argument("--n-cases", type=int, default=8, help="last N cases of the corpus; 0 for all")
        s.add_argument("--config", default=None)
        s.add_argument("--out", required=True)
        s.set_defaults(func=func)
        if name == "cascade":
            s.add_argument("--seg", required=True)
            s.add_argument("--bypass-summary", action="store_true",
                           help="feed reference summaries to the plan stage")
        else:
            s.add_argument("--with-ceseg", required=True)
            s.add_argument("--without-ceseg", required=True)

    s = sub.add_parser("ablate", help="train and score one ablation axis")
    s.add_argument("--axis", choices=sorted(ABLATION_AXES), required=True)
    s.add_argument("--values", default=None, help="comma-separated subset of the axis values")
    s.add_argument("--config", default=None)
    s.add_argument("--seeds", type=int, nargs="+", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("print-config", help="print default configs as JSON")
    s.set_defaults(func=cmd_print_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConsembError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
