import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from consemb.errors import ConfigurationError, DegenerateInputWarning, InvalidInputError
from consemb.grammar import all_case_fields, corrupt, render_plan
from consemb.metrics.report import (EvalConfig, MetricsReport, build_report, capture_flags,
                                    format_table, mask_scores, rubric_scores, summarize,
                                    write_table)
from consemb.metrics.rubric import RUBRICS, score_plan_rubrics
from consemb.metrics.stats import bootstrap_ci, pearson_r
from consemb.metrics.text import rouge, rouge_all, rouge_tokens
from consemb.metrics.volume import dice_iou, hd95, surface_dice, volume_diagonal
from consemb.synth import MaskTensor

# -- oracles ----------------------------------------------------------------


def lcs_table(a, b):
    T = np.zeros((len(a) + 1, len(b) + 1), dtype=int)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            T[i, j] = T[i - 1, j - 1] + 1 if a[i - 1] == b[j - 1] else max(T[i - 1, j], T[i, j - 1])
    return int(T[-1, -1])


def oracle_surface(mask):
    pts = []
    for idx in zip(*np.nonzero(mask)):
        for axis, step in itertools.product(range(3), (-1, 1)):
            n = list(idx)
            n[axis] += step
            if not 0 <= n[axis] < mask.shape[axis] or not mask[tuple(n)]:
                pts.append(idx)
                break
    return np.array(pts, dtype=float).reshape(-1, 3)


def oracle_directed(p, g, spacing):
    a = oracle_surface(p) * spacing
    b = oracle_surface(g) * spacing
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return d.min(1), d.min(0)


def random_mask_pair(rng):
    shape = tuple(rng.integers(2, 17, size=3))
    blobs = []
    for _ in range(2):
        m = np.zeros(shape, bool)
        for _ in range(rng.integers(1, 4)):
            lo = [rng.integers(0, n) for n in shape]
            hi = [min(n, l + rng.integers(1, 6)) for l, n in zip(lo, shape)]
            m[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True
        blobs.append(m)
    spacing = np.array([rng.choice([0.5, 1.0, 1.25]), rng.choice([1.0, 1.25]), rng.choice([2.0, 3.0])])
    return blobs[0], blobs[1], spacing


# -- ROUGE ------------------------------------------------------------------


def test_rouge_examples():
    assert rouge("a b c", "a b d", "r1")["f1"] == pytest.approx(2 / 3)
    assert rouge("a b c", "a b d", "rl")["f1"] == pytest.approx(2 / 3)
    assert rouge_all("x y z", "x y z") == {"r1": 1.0, "r2": 1.0, "rl": 1.0}
    assert rouge_all("a b", "c d") == {"r1": 0.0, "r2": 0.0, "rl": 0.0}


def test_rouge_clips_counts():
    assert rouge("the the the", "the cat", "r1")["precision"] == pytest.approx(1 / 3)


def test_rouge_tokens_keep_decimals():
    assert rouge_tokens("Dose: 40.05 Gy in 15 fx.") == ["dose", "40.05", "gy", "in", "15", "fx"]


def test_rouge_empty_reference():
    with pytest.warns(DegenerateInputWarning):
        assert rouge("a", "", "rl")["f1"] == 0.0
    with pytest.raises(InvalidInputError):
        rouge("a", "a", "r3")


def test_rouge_l_matches_lcs_oracle():
    rng = np.random.default_rng(0)
    words = list("abcdef")
    for _ in range(100):
        a = list(rng.choice(words, rng.integers(1, 21)))
        b = list(rng.choice(words, rng.integers(1, 21)))
        lcs = lcs_table(a, b)
        p, r = lcs / len(a), lcs / len(b)
        f = 2 * p * r / (p + r) if p + r else 0.0
        assert rouge(" ".join(a), " ".join(b), "rl")["f1"] == f


# -- overlap ----------------------------------------------------------------


def test_dice_iou_examples():
    p = np.zeros((2, 2, 1), bool)
    g = np.zeros((2, 2, 1), bool)
    p[0, 0, 0] = p[0, 1, 0] = True
    g[0, 1, 0] = g[1, 1, 0] = True
    out = dice_iou(p, g)
    assert out["dice"] == 0.5 and out["iou"] == pytest.approx(1 / 3)
    assert dice_iou(p, p) == {"dice": 1.0, "iou": 1.0}
    assert dice_iou(p, ~p)["dice"] == 0.0
    with pytest.warns(DegenerateInputWarning):
        assert dice_iou(np.zeros(3), np.zeros(3))["dice"] == 1.0
    with pytest.raises(InvalidInputError):
        dice_iou(np.zeros((2, 2)), np.zeros((2, 3)))


masks = st.integers(0, 2**27 - 1).map(lambda s: np.random.default_rng(s).random((4, 4, 3)) > 0.5)


@settings(max_examples=50)
@given(masks, masks)
def test_dice_symmetric_and_monotone(p, g):
    if not (p.any() or g.any()):
        return
    assert dice_iou(p, g)["dice"] == dice_iou(g, p)["dice"]
    missing = np.argwhere(g & ~p)
    if len(missing):
        q = p.copy()
        q[tuple(missing[0])] = True
        assert dice_iou(q, g)["dice"] >= dice_iou(p, g)["dice"]


# -- boundary distances -----------------------------------------------------


def test_hd95_single_voxels_along_z():
    p = np.zeros((3, 3, 8), bool)
    g = np.zeros((3, 3, 8), bool)
    p[1, 1, 1] = True
    g[1, 1, 6] = True
    assert hd95(p, g, spacing=(1.0, 1.0, 3.0)) == 15.0
    assert surface_dice(p, g, 3.0, spacing=(1.0, 1.0, 3.0)) == 0.0
    assert surface_dice(p, g, 1e9, spacing=(1.0, 1.0, 3.0)) == 1.0


def test_identity_and_symmetry():
    rng = np.random.default_rng(1)
    p, g, sp = random_mask_pair(rng)
    assert hd95(p, p, spacing=sp) == 0.0
    assert surface_dice(p, p, 0.1, spacing=sp) == 1.0
    assert hd95(p, g, spacing=sp) == hd95(g, p, spacing=sp)


def test_spacing_from_mask_tensor():
    p = MaskTensor(np.ones((2, 2, 2), np.uint8), (1.0, 1.0, 3.0))
    g = MaskTensor(np.pad(np.ones((2, 2, 1), np.uint8), ((0, 0), (0, 0), (0, 1))), (1.0, 1.0, 3.0))
    assert hd95(p, g) == pytest.approx(np.percentile([0.0] * 8 + [3.0] * 4, 95))
    with pytest.raises(InvalidInputError):
        hd95(np.ones((2, 2, 2)), np.ones((2, 2, 2)))


def test_empty_mask_conventions():
    e = np.zeros((4, 4, 2), bool)
    f = e.copy()
    f[1, 1, 1] = True
    sp = (1.0, 1.0, 3.0)
    with pytest.warns(DegenerateInputWarning):
        assert hd95(e, e, spacing=sp) == 0.0
    with pytest.warns(DegenerateInputWarning):
        assert hd95(f, e, spacing=sp) == volume_diagonal(e.shape, sp) == pytest.approx(math.sqrt(68))
    with pytest.warns(DegenerateInputWarning):
        assert surface_dice(e, e, 3.0, spacing=sp) == 1.0
    with pytest.warns(DegenerateInputWarning):
        assert surface_dice(e, f, 3.0, spacing=sp) == 0.0
    with pytest.raises(InvalidInputError):
        surface_dice(f, f, 0.0, spacing=sp)


def test_boundary_metrics_match_exhaustive_oracle():
    rng = np.random.default_rng(2)
    for _ in range(50):
        p, g, sp = random_mask_pair(rng)
        d_pg, d_gp = oracle_directed(p, g, sp)
        pooled = np.concatenate([d_pg, d_gp])
        assert abs(hd95(p, g, spacing=sp) - np.percentile(pooled, 95)) <= 1e-9
        mx = max(np.percentile(d_pg, 95), np.percentile(d_gp, 95))
        assert abs(hd95(p, g, spacing=sp, pooling="max") - mx) <= 1e-9
        tol = float(rng.choice([1.0, 2.5, 3.0]))
        expected = ((d_pg <= tol).sum() + (d_gp <= tol).sum()) / len(pooled)
        assert abs(surface_dice(p, g, tol, spacing=sp) - expected) <= 1e-9


def test_full_point_mode_uses_all_voxels():
    p = np.zeros((5, 5, 5), bool)
    p[1:4, 1:4, 1:4] = True
    g = p.copy()
    g[2, 2, 2] = False
    sp = (1.0, 1.0, 1.0)
    assert hd95(p, g, spacing=sp) == 0.0
    assert hd95(p, g, spacing=sp, points="full") == 0.0
    with pytest.raises(InvalidInputError):
        hd95(p, g, spacing=sp, points="edges")
    with pytest.raises(InvalidInputError):
        hd95(p, g, spacing=sp, pooling="mean")


# -- statistics -------------------------------------------------------------


def test_bootstrap_degenerate_and_determinism():
    assert bootstrap_ci([0.7] * 30) == {"low": 0.7, "high": 0.7}
    x = np.random.default_rng(0).random(40)
    assert bootstrap_ci(x, seed=3) == bootstrap_ci(x, seed=3)
    with pytest.raises(InvalidInputError):
        bootstrap_ci([])
    with pytest.raises(InvalidInputError):
        bootstrap_ci([1.0, 2.0], level=1.0)


def test_bootstrap_binary_sample():
    ci = bootstrap_ci([0.0] * 500 + [1.0] * 500, 1000)
    assert 0.45 <= ci["low"] <= 0.5 <= ci["high"] <= 0.55
    # normal-approximation half width for p=0.5, n=1000
    half = 1.96 * 0.5 / math.sqrt(1000)
    assert ci["high"] - ci["low"] == pytest.approx(2 * half, rel=0.15)


def test_bootstrap_width_shrinks_like_inverse_sqrt_n():
    rng = np.random.default_rng(4)
    small = bootstrap_ci(rng.normal(size=100))
    large = bootstrap_ci(rng.normal(size=10_000))
    ratio = (small["high"] - small["low"]) / (large["high"] - large["low"])
    assert 10 / 3 <= ratio <= 30


@settings(max_examples=30)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=15))
def test_bootstrap_contains_mean(values):
    ci = bootstrap_ci(values, n_resamples=200)
    m = float(np.mean(values))
    assert ci["low"] <= m + 1e-9 and m - 1e-9 <= ci["high"]


def test_pearson_examples():
    a = [1.0, 2.0, 3.0]
    assert pearson_r(a, a) == pytest.approx(1.0)
    assert pearson_r(a, [-v for v in a]) == pytest.approx(-1.0)
    assert pearson_r(a, [2, 4, 7]) == pytest.approx(0.9934, abs=1e-3)
    with pytest.warns(DegenerateInputWarning):
        assert math.isnan(pearson_r([1, 1, 1], a))
    with pytest.raises(InvalidInputError):
        pearson_r([1], [2])


# -- rubrics ----------------------------------------------------------------

FIELD_RUBRIC = {"laterality": "r1_laterality", "surgery": "r2_surgery_aim",
                "nodal_involvement": "r3_scope", "dose_scheme": "r4_dose_scheme"}


def test_rubric_round_trip_exhaustive():
    for f in all_case_fields():
        res = score_plan_rubrics(render_plan(f), f)
        assert res.total == 5 and not res.parse_failure


@pytest.mark.parametrize("field", list(FIELD_RUBRIC))
def test_single_field_corruption_drops_its_rubric(field):
    for f in all_case_fields():
        res = score_plan_rubrics(render_plan(corrupt(f, field)), f)
        for r in RUBRICS:
            assert getattr(res, r) == (0 if r == FIELD_RUBRIC[field] else 1), (f, field, r)


def test_rubric_hallucination_and_parse_failure():
    f = next(iter(all_case_fields()))
    res = score_plan_rubrics(render_plan(f) + " Consider proton therapy.", f)
    assert res.r5_hallucination == 0 and res.r1_laterality == 1
    bad = score_plan_rubrics("completely unrelated words", f)
    assert bad.parse_failure and bad.total == 0


# -- report -----------------------------------------------------------------


def test_eval_config_requires_tolerance():
    with pytest.raises(ConfigurationError):
        EvalConfig.from_dict({"metrics": ["dice"]})
    with pytest.raises(ConfigurationError):
        EvalConfig(3.0, metrics=("bleu",))
    with pytest.raises(ConfigurationError):
        EvalConfig(0.0)


def test_summarize_invariants():
    cfg = EvalConfig(3.0)
    s = summarize([0.2, 0.9, 0.4, 0.5], cfg)
    assert s.ci_low <= s.point <= s.ci_high and s.n == 4


def test_report_schema_and_round_trip(tmp_path):
    cfg = EvalConfig(3.0, n_resamples=200)
    flags = []
    p = np.zeros((4, 4, 2), bool)
    p[1:3, 1:3] = True
    per_case = {}
    for cid, m in [("b", p), ("a", np.zeros_like(p))]:
        for k, v in mask_scores(cid, MaskTensor(m.astype(np.uint8), (1, 1, 3)),
                                MaskTensor(p.astype(np.uint8), (1, 1, 3)), cfg, flags).items():
            per_case.setdefault(k, []).append((cid, v))
    f = next(iter(all_case_fields()))
    rubrics = [rubric_scores("b", render_plan(f), f, flags), rubric_scores("a", "nonsense", f, flags)]
    rep = build_report(per_case, cfg, rubrics, flags, {"seeds": [0]})
    d = rep.to_dict()
    assert set(d) == {"metrics", "rubrics", "flags", "config"}
    assert set(d["metrics"]) == {"dice", "iou", "hd95", "surface_dice"}
    assert [r["case_id"] for r in d["rubrics"]] == ["a", "b"]
    assert {fl["case_id"] for fl in d["flags"]} == {"a"}
    assert d["config"]["eval"]["surface_tolerance_mm"] == 3.0 and "config_hash" in d["config"]
    for s in rep.metrics.values():
        assert s.ci_low <= s.point <= s.ci_high and s.n == 2
    path = rep.write(tmp_path, "r")
    assert MetricsReport.from_dict(json.loads(path.read_text())).to_dict() == d
    lines = (tmp_path / "r.txt").read_text().splitlines()
    assert len({len(line) for line in lines}) == 1


def test_capture_flags_passes_other_warnings_through():
    flags = []
    with pytest.warns(RuntimeWarning):
        with capture_flags(flags, "c", "s"):
            import warnings
            warnings.warn("x", DegenerateInputWarning)
            warnings.warn("y", RuntimeWarning)
    assert flags == [{"case_id": "c", "stage": "s", "message": "x"}]


def test_write_table_json_and_text(tmp_path):
    path = write_table(tmp_path, "t", ["name", "value"], [["a", 0.5], ["bb", 1.0]], meta={"k": 1})
    data = json.loads(path.read_text())
    assert data["rows"] == [{"name": "a", "value": 0.5}, {"name": "bb", "value": 1.0}]
    assert data["meta"] == {"k": 1}
    assert format_table(["x"], [[1.23456]]).splitlines()[-1].strip() == "1.2346"
