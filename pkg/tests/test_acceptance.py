"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

C8-C10 train the standard desk-scale fits (2,000 iterations, 5 seeds, two
variants, 2D and 3D) and are marked slow; the runs are shared through a
module fixture.  Run with ``pytest tests/test_acceptance.py -v``.
"""

import dataclasses
import math
import time

import numpy as np
import pytest

from viscsplat import analysis, cli
from viscsplat.core import IMAGE2D, ORTHO3D, RawGaussian, logit
from viscsplat.field import impact_trace, total_impact_partial
from viscsplat.losses import confidence_loss, scale_loss
from viscsplat.optimizer import train
from viscsplat.splat import splat_closed_form

SEEDS = (0, 1, 2, 3, 4)

# final PSNR of the full method per seed, recorded from the pilot run of this module
# pilot values for the full variant: 2D final PSNR, 3D held-out PSNR
GOLDEN_PSNR = {
    IMAGE2D: {0: 48.009, 1: 47.630, 2: 48.444, 3: 48.236, 4: 48.111},
    ORTHO3D: {0: 40.829, 1: 39.551, 2: 38.959, 3: 40.646, 4: 39.603},
}
GOLDEN_TOL = 0.5


def test_c1_gradient_oracle(acceptance):
    t0 = time.process_time()
    reps = [analysis.gradient_suite(m, cases=200, seed=0) for m in (IMAGE2D, ORTHO3D)]
    cpu = time.process_time() - t0
    worst = max(max(r.worst.values()) for r in reps)
    nfail = sum(len(r.failures) for r in reps)
    ok = nfail == 0 and worst < 1e-4 and cpu < 60
    acceptance("C1 gradient oracle", ok, "2x200 cases, worst rel. error %.2e (< 1e-4), %d failures, "
               "%.1f s CPU (< 60 s)" % (worst, nfail, cpu))
    assert ok


def test_c2_splat_closed_form(acceptance):
    worst, fails = analysis.quadrature_suite(cases=500, seed=0, n_samples=20001)
    s1 = 0.23
    g = RawGaussian(np.zeros(3), np.zeros(3), 0.0, np.log([s1, 0.4, 0.1]), np.eye(3))
    from viscsplat.core import CameraOrtho
    cam = CameraOrtho((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0), 5, 5, 0.1)
    special = abs(splat_closed_form(g, cam, (2, 2)) - math.sqrt(2 * math.pi) * s1)
    ok = not fails and worst < 1e-6 and special <= 1e-12
    acceptance("C2 splat closed form", ok, "500 cases, worst rel. error %.2e (< 1e-6); "
               "no-rotation peak error %.1e (<= 1e-12)" % (worst, special))
    assert ok


def test_c3_total_impact(acceptance):
    dv = np.array([0.6, -1.1, 0.25])
    worst_partial = 0.0
    totals = []
    for lam in (0.5, 0.8, 0.9):
        tr = impact_trace(dv, lam, 500)
        sums = np.cumsum(tr, axis=0)
        for L in range(1, 501):
            worst_partial = max(worst_partial,
                                float(np.max(np.abs(sums[L - 1] - total_impact_partial(dv, lam, L)))))
        totals.append(sums[-1])
    spread = max(float(np.max(np.abs(a - b))) for a in totals for b in totals)
    ok = worst_partial <= 1e-12 and spread <= 1e-10
    acceptance("C3 total impact", ok, "partial-sum error %.1e (<= 1e-12); total spread across "
               "lambda_g %.1e (<= 1e-10)" % (worst_partial, spread))
    assert ok


def test_c4_fixed_point_oracle(acceptance):
    rows = cli.fixedpoint_rows(lambda_g=0.8, seed=0, sets=50, lambda_p=0.8)
    worst = max(r[3] for r in rows)
    ok = len(rows) == 50 and worst <= 1e-12
    acceptance("C4 fixed-point oracle", ok, "50 particle sets, worst |difference| %.1e (<= 1e-12)" % worst)
    assert ok


def test_c5_disabled_limit(acceptance):
    def run(**kw):
        cfg = cli.default_run(IMAGE2D)
        cfg.train = dataclasses.replace(cfg.train, iterations=100, deterministic=True, seed=3, **kw)
        prob = cli.build_problem(cfg.validate())
        return train(prob.scene, prob.targets, prob.views, cfg.train)
    a = run(lambda_g=1.0, lambda_p=1.0)
    b = run(pdeo=False)
    same = (a.scene.checksum() == b.scene.checksum()
            and [m.row() for m in a.metrics] == [m.row() for m in b.metrics])
    acceptance("C5 disabled-limit identity", same, "100 iterations, lambda_g = lambda_p = 1 vs baseline: "
               "%s" % ("bit-identical" if same else "DIFFERENT"))
    assert same


def test_c6_scaling_law(acceptance):
    t0 = time.process_time()
    rep = analysis.gradient_scaling_probe()
    cpu = time.process_time() - t0
    span = rep.scales.max() / rep.scales.min()
    ok = (-1.3 <= rep.slope <= -0.7 and np.all((rep.ratio >= 0.1) & (rep.ratio <= 10))
          and span >= 100 and cpu < 120)
    acceptance("C6 scaling law", ok, "slope %.3f in [-1.3, -0.7]; ratio range [%.3f, %.3f] within "
               "[0.1, 10]; %.0fx scale span; %.1f s" % (rep.slope, rep.ratio.min(), rep.ratio.max(),
                                                         span, cpu))
    assert ok


def test_c7_loss_units(acceptance):
    def logs(s):
        return np.log([[v, 0.5 * v] for v in s])
    got = [scale_loss(logs([0.5]), 0.6)[0], scale_loss(logs([1.0]), 0.6)[0],
           scale_loss(logs([0.8, 0.7]), 0.6)[0],
           confidence_loss(np.array([50.0]))[0], confidence_loss(np.array([0.0]))[0],
           confidence_loss(logit(np.array([0.01])))[0]]
    want = [0.0, 0.4, 0.15, 0.0, 0.25, 1e-4]
    err = max(abs(a - b) for a, b in zip(got, want))
    ok = err <= 1e-12
    acceptance("C7 loss units", ok, "scale (0, 0.4, 0.15) and confidence (~0, 0.25, 1e-4), "
               "max error %.1e (<= 1e-12)" % err)
    assert ok


# ---- desk-scale training runs --------------------------------------------

def _standard(mode, seed, variant):
    cfg = cli.default_run(mode)
    over = dict(cli.ABLATIONS[variant], seed=seed, deterministic=True)
    cfg.train = dataclasses.replace(cfg.train, **over)
    return cfg.validate()


@pytest.fixture(scope="module")
def standard_runs(tmp_path_factory):
    """{(mode, variant, seed): (scores, median smallest-quartile step, out dir)}"""
    root = tmp_path_factory.mktemp("standard")
    out = {}
    for mode in (IMAGE2D, ORTHO3D):
        for variant in ("full", "no-p2g-g2p"):
            for seed in SEEDS:
                cfg = _standard(mode, seed, variant)
                run_dir = root / ("%s_%s_%d" % (mode, variant, seed))
                result, prob = cli.run_fit(cfg, run_dir)
                scores = cli.final_scores(cfg, result, prob)
                q1 = [m.step_q1 for m in result.metrics if 500 <= m.iteration <= 1500]
                out[mode, variant, seed] = (scores, float(np.median(q1)), run_dir)
    return out


def _wins(runs, mode, key, better):
    rows = []
    for seed in SEEDS:
        a = runs[mode, "full", seed][0][key] if key else runs[mode, "full", seed][1]
        b = runs[mode, "no-p2g-g2p", seed][0][key] if key else runs[mode, "no-p2g-g2p", seed][1]
        rows.append((seed, a, b, better(a, b)))
    return rows


@pytest.mark.slow
def test_c8_direction(standard_runs, acceptance):
    ge = lambda a, b: a >= b  # noqa: E731
    d2 = _wins(standard_runs, IMAGE2D, "psnr", ge)
    d3 = _wins(standard_runs, ORTHO3D, "psnr_holdout", ge)
    d3_train = _wins(standard_runs, ORTHO3D, "psnr", ge)
    n2, n3, n3t = (sum(r[3] for r in d) for d in (d2, d3, d3_train))
    golden_dev = []
    for mode, key in ((IMAGE2D, "psnr"), (ORTHO3D, "psnr_holdout")):
        for seed, ref in GOLDEN_PSNR[mode].items():
            golden_dev.append(abs(standard_runs[mode, "full", seed][0][key] - ref))
    golden_ok = len(golden_dev) == 2 * len(SEEDS) and max(golden_dev) <= GOLDEN_TOL
    ok = n2 >= 4 and n3 >= 4 and golden_ok
    fmt = lambda d: " ".join("%.3f/%.3f" % (r[1], r[2]) for r in d)  # noqa: E731
    acceptance("C8 PSNR direction", ok,
               "full >= no-P2G/G2P on 2D %d/5 [%s]; 3D held-out %d/5 [%s] (need >= 4/5 each); "
               "3D train-view %d/5 (not gating); goldens %s"
               % (n2, fmt(d2), n3, fmt(d3), n3t,
                  "max dev %.3f dB (<= 0.5)" % max(golden_dev) if golden_ok or golden_dev
                  else "not recorded"))
    assert ok


@pytest.mark.slow
def test_c9_small_scale_stability(standard_runs, acceptance):
    lt = lambda a, b: a < b  # noqa: E731
    d2 = _wins(standard_runs, IMAGE2D, None, lt)
    d3 = _wins(standard_runs, ORTHO3D, None, lt)
    n2, n3 = sum(r[3] for r in d2), sum(r[3] for r in d3)
    ok = n2 >= 4
    acceptance("C9 small-scale step", ok,
               "median smallest-quartile |step| over iterations 500-1500 lower with PDEO on 2D %d/5 "
               "(need >= 4/5) [%s]; 3D %d/5 (not gating)"
               % (n2, " ".join("%.3g/%.3g" % (r[1], r[2]) for r in d2), n3))
    assert ok


@pytest.mark.slow
def test_c10_determinism(standard_runs, tmp_path, acceptance):
    mismatched = []
    for mode, cmd in ((IMAGE2D, "fit2d"), (ORTHO3D, "fit3d")):
        ref_dir = standard_runs[mode, "full", 0][2]
        cfg_path = ref_dir / "config.resolved"
        out = tmp_path / cmd
        assert cli.main([cmd, "--config", str(cfg_path), "--out", str(out), "--deterministic"]) == 0
        files = sorted(p.name for p in ref_dir.iterdir() if p.suffix in (".csv", ".ppm"))
        for name in files:
            if (ref_dir / name).read_bytes() != (out / name).read_bytes():
                mismatched.append("%s/%s" % (cmd, name))
    ok = not mismatched
    acceptance("C10 determinism", ok, "fit2d and fit3d reruns from config.resolved: %s"
               % ("all CSV/PPM byte-identical" if ok else "differ: " + ", ".join(mismatched)))
    assert ok
