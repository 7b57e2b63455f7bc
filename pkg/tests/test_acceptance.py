"""The ten acceptance criteria, each at its stated tolerance and time budget."""
import copy
import math
import time

import numpy as np
import torch

from conftest import mean_dice, micro_batch, micro_encoder, micro_lm, micro_vocab, record
from consemb.grammar import all_case_fields, corrupt, render_plan
from consemb.lm import ConsistencySpec, loss_ceftune, loss_neftune, loss_vanilla
from consemb.metrics.rubric import RUBRICS, score_plan_rubrics
from consemb.metrics.stats import bootstrap_ci
from consemb.metrics.text import rouge
from consemb.metrics.volume import dice_iou, hd95, surface_dice
from consemb.noise import NoiseSpec, inject_noise
from consemb.pipeline import run_cascade
from consemb.seg.train import ceseg_terms, infer_direct, sliding_window_infer
from consemb.synth import normalize_hu
from test_lm import central_fd, flat_grad, rel_err
from test_metrics import lcs_table, oracle_directed, random_mask_pair
from test_seg import micro_setup


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def test_criterion_01_reduction_chain():
    t = time.perf_counter()
    v = micro_vocab()
    enc = micro_encoder(v)
    worst = 0.0
    for i in range(20):
        rng = np.random.default_rng(i)
        m = micro_lm(len(v), seed=i)
        b = micro_batch(v, rng, n=int(rng.integers(1, 5)))
        ns = NoiseSpec(5.0, seed=i)
        worst = max(worst,
                    _rel(loss_ceftune(m, b, ns, ConsistencySpec(lam=0.0), enc).item(),
                         loss_neftune(m, b, ns).item()),
                    _rel(loss_neftune(m, b, NoiseSpec(0.0, seed=i)).item(), loss_vanilla(m, b).item()))
    dt = time.perf_counter() - t
    ok = worst <= 1e-12 and dt < 10
    record(1, ok, f"max relative difference {worst:.1e} over 20 batches in {dt:.1f}s")
    assert ok


def test_criterion_02_stop_gradient():
    t = time.perf_counter()
    v = micro_vocab()
    lm = micro_lm(len(v), seed=1)
    teacher = copy.deepcopy(lm)
    b = micro_batch(v, np.random.default_rng(5))
    enc = micro_encoder(v)
    ns, cs = NoiseSpec(5.0, seed=2), ConsistencySpec()
    params = list(lm.parameters())
    g = flat_grad(loss_ceftune(lm, b, ns, cs, enc), params)
    fd = central_fd(lambda: loss_ceftune(lm, b, ns, cs, enc, teacher=teacher), params)
    err_lm = rel_err(g, fd)
    exact_lm = torch.equal(g, flat_grad(loss_ceftune(lm, b, ns, cs, enc, teacher=teacher), params))
    loss_ceftune(lm, b, ns, cs, enc, teacher=teacher).backward()
    teacher_clean = all(p.grad is None for p in teacher.parameters())

    slm, model, prompts, batch = micro_setup(seed=2)
    fixed = prompts.prompts.detach().clone()
    ns = NoiseSpec(5.0, seed=3)

    def seg_loss(clean=None):
        s, r = ceseg_terms(model, slm, prompts, batch, ns, clean_prompts=clean)
        return s + r

    sparams = [prompts.prompts] + list(model.parameters())
    gs = flat_grad(seg_loss(), sparams)
    err_seg = rel_err(gs, central_fd(lambda: seg_loss(fixed), sparams))
    exact_seg = torch.equal(gs, flat_grad(seg_loss(fixed), sparams))
    n_lm = sum(p.numel() for p in params)
    n_seg = sum(p.numel() for p in sparams)
    dt = time.perf_counter() - t
    ok = (err_lm <= 1e-3 and err_seg <= 1e-3 and exact_lm and exact_seg and teacher_clean
          and n_lm <= 1000 and n_seg <= 1000 and dt < 60)
    record(2, ok, f"FD rel err LM {err_lm:.1e} ({n_lm} params), seg {err_seg:.1e} ({n_seg} params); "
                  f"clean-branch and shadow contributions exactly zero: {exact_lm and exact_seg}; {dt:.1f}s")
    assert ok


def test_criterion_03_noise_scale_law():
    t = time.perf_counter()
    alpha, L, C = 5.0, 25, 40
    x = torch.zeros(100, L, C, dtype=torch.float64)
    eps = inject_noise(x, NoiseSpec(alpha, seed=0)).flatten()
    bound = alpha / math.sqrt(L * C)
    n = eps.numel()
    mx = eps.abs().max().item()
    sigma = bound / math.sqrt(3) / math.sqrt(n)
    mean = eps.mean().item()
    dt = time.perf_counter() - t
    ok = n >= 10**5 and mx <= bound and mx >= 0.99 * bound and abs(mean) <= 3 * sigma and dt < 10
    record(3, ok, f"{n} draws, max/bound {mx / bound:.5f}, |mean|/sigma {abs(mean) / sigma:.2f}, {dt:.2f}s")
    assert ok


def test_criterion_04_metric_oracles():
    t = time.perf_counter()
    rng = np.random.default_rng(11)
    words = list("abcdefg")
    rouge_ok = True
    for _ in range(100):
        a = list(rng.choice(words, rng.integers(1, 21)))
        b = list(rng.choice(words, rng.integers(1, 21)))
        lcs = lcs_table(a, b)
        p, r = lcs / len(a), lcs / len(b)
        f = 2 * p * r / (p + r) if p + r else 0.0
        rouge_ok &= rouge(" ".join(a), " ".join(b), "rl")["f1"] == f
    worst = 0.0
    for _ in range(50):
        p, g, sp = random_mask_pair(rng)
        d_pg, d_gp = oracle_directed(p, g, sp)
        pooled = np.concatenate([d_pg, d_gp])
        worst = max(worst, abs(hd95(p, g, spacing=sp) - np.percentile(pooled, 95)))
        expected = ((d_pg <= 3.0).sum() + (d_gp <= 3.0).sum()) / len(pooled)
        worst = max(worst, abs(surface_dice(p, g, 3.0, spacing=sp) - expected))
    ci = bootstrap_ci([0.42] * 25)
    degenerate = ci["low"] == ci["high"] == 0.42
    dt = time.perf_counter() - t
    ok = rouge_ok and worst <= 1e-9 and degenerate and dt < 120
    record(4, ok, f"ROUGE-L exact on 100 pairs: {rouge_ok}; boundary max abs err {worst:.1e} mm on 50 pairs; "
                  f"degenerate bootstrap zero width: {degenerate}; {dt:.1f}s")
    assert ok


FIELD_RUBRIC = {"laterality": "r1_laterality", "surgery": "r2_surgery_aim",
                "nodal_involvement": "r3_scope", "dose_scheme": "r4_dose_scheme"}


def test_criterion_05_rubric_round_trip():
    t = time.perf_counter()
    n, bad = 0, []
    for f in all_case_fields():
        n += 1
        if score_plan_rubrics(render_plan(f), f).total != 5:
            bad.append(("render", f))
        for field, rub in FIELD_RUBRIC.items():
            res = score_plan_rubrics(render_plan(corrupt(f, field)), f)
            if any(getattr(res, r) != (0 if r == rub else 1) for r in RUBRICS):
                bad.append((field, f))
    dt = time.perf_counter() - t
    ok = not bad and dt < 10
    record(5, ok, f"{n} field combinations x 4 corruptions, {len(bad)} mismatches, {dt:.1f}s")
    assert ok


def test_criterion_06_multimodal_necessity(desk):
    gains, rows = [], []
    for d in desk:
        clean = {c.id: c.plan for c in d.test}
        ce = mean_dice(d.segs["ceseg"], d.test, clean)
        uni = mean_dice(d.segs["unimodal"], d.test, clean)
        gains.append(ce - uni)
        rows.append(f"seed {d.seed}: ceseg {ce:.3f} vs unimodal {uni:.3f}")
    minutes = sum(d.timings[k] for d in desk
                  for k in ("summary_lm", "plan_lm", "seg_unimodal", "seg_ceseg")) / 60
    gain = float(np.mean(gains))
    ok = gain >= 0.15 and minutes < 20
    record(6, ok, f"mean Dice gain {gain:.3f} (need >= 0.15); " + "; ".join(rows)
           + f"; training time {minutes:.1f} min")
    assert ok


def test_criterion_07_consistency_gap(desk):
    wins, rows = 0, []
    for d in desk:
        clean = {c.id: c.plan for c in d.test}
        gaps = {}
        for name in ("ceseg", "neseg"):
            gaps[name] = abs(mean_dice(d.segs[name], d.test, clean)
                             - mean_dice(d.segs[name], d.test, d.gen_plans))
        wins += gaps["ceseg"] <= gaps["neseg"]
        rows.append(f"seed {d.seed}: gap with {gaps['ceseg']:.4f} vs without {gaps['neseg']:.4f}")
    ok = wins >= 2
    record(7, ok, f"CESEG gap <= no-CESEG gap in {wins}/3 seeds; " + "; ".join(rows))
    assert ok


def test_criterion_08_ceftune_robustness(desk):
    wins, rows = 0, []
    for d in desk:
        scores = {}
        for name, lm in (("ceftune", d.plan), ("vanilla", d.plan_vanilla)):
            scores[name] = float(np.mean([
                rouge(lm.generate("plan", d.gen_summaries[c.id]), c.plan, "rl")["f1"] for c in d.test]))
        wins += scores["ceftune"] >= scores["vanilla"]
        rows.append(f"seed {d.seed}: ceftune {scores['ceftune']:.4f} vs vanilla {scores['vanilla']:.4f}")
    ok = wins >= 2
    record(8, ok, f"CEFTune ROUGE-L >= vanilla in {wins}/3 seeds; " + "; ".join(rows))
    assert ok


def test_criterion_09_preprocessing_and_tiling(desk):
    hu = normalize_hu(np.array([-1500.0, 0.0, 1000.0])).tolist()
    hu_ok = hu == [0.0, 0.5, 1.0]
    d = desk[0]
    seg = d.segs["ceseg"]
    window = d.config.window_dims
    agreement = []
    for c in d.test:
        tiled = sliding_window_infer(seg, c.volume, c.plan, window, d.config.overlap)
        direct = infer_direct(seg, c.volume, c.plan)
        agreement.append(dice_iou(tiled, direct)["dice"])
    mean_agree = float(np.mean(agreement))
    ok = hu_ok and mean_agree >= 0.99
    record(9, ok, f"HU map {hu}; tiled vs direct Dice mean {mean_agree:.4f}, min {min(agreement):.4f} "
                  f"over {len(agreement)} volumes, window {window}")
    assert ok


def test_criterion_10_cascade_smoke(desk, tmp_path):
    d = desk[0]
    cases = d.test[:8]
    ckpts = {"summary": d.summary, "plan": d.plan, "seg": d.segs["ceseg"]}
    t = time.perf_counter()
    trace, report = run_cascade(d.config, ckpts, cases, tmp_path / "a")
    dt = time.perf_counter() - t
    again, report2 = run_cascade(d.config, ckpts, cases, tmp_path / "b")
    expected = {f"{s}_{m}" for s in ("summary", "plan") for m in ("r1", "r2", "rl")}
    expected |= {"seg_dice", "seg_iou", "seg_hd95", "seg_surface_dice"}
    complete = expected <= set(report.metrics) and all(s.n == 8 for s in report.metrics.values())
    cis = report.config["eval"]["n_resamples"] == 1000
    same = again.content_hash() == trace.content_hash() and report2.to_dict() == report.to_dict()
    ok = complete and cis and same and dt < 300
    pts = ", ".join(f"{k} {report.metrics[k].point:.3f}" for k in ("summary_rl", "plan_rl", "seg_dice"))
    record(10, ok, f"8 cases in {dt:.1f}s; all metrics with 1000-resample CIs: {complete and cis}; "
                   f"deterministic: {same}; {pts}")
    assert ok
