"""``viscsplat`` command line: fits, oracles, probes and ablations.

Every run directory holds CSV, PPM and PNG outputs plus ``config.resolved``,
which is enough to reproduce the run.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import math
import sys
from pathlib import Path

import numpy as np

from . import analysis, plotting
from .config import RunConfig, TrainConfig, dump_config, load_config
from .core import IMAGE2D, ORTHO3D, ConfigError, ImageGrid, init_scene
from .field import VelocityField, impact_trace, total_impact_partial
from .imageio import read_ppm, write_ppm
from .metrics import psnr, ssim
from .optimizer import (METRIC_COLUMNS, PoisonedStepError, TrainingDiverged, save_checkpoint,
                        train)
from .splat import render_image
from .synth import scene_3d, target_2d, targets_3d, views_3d

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

ABLATIONS = {
    "full": {},
    "no-p2g-g2p": {"lambda_g": 1.0, "lambda_p": 1.0},
    "no-densification-criterion": {"densify_cosine_mode": "off"},
    "no-scale-loss": {"omega_s": 0.0},
    "no-confidence-loss": {"omega_t": 0.0},
}
PROBES = ("scaling", "impact", "decay", "fixedpoint")


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.9g" % x


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def default_run(mode: str) -> RunConfig:
    cfg = RunConfig(train=TrainConfig(mode=mode))
    if mode == ORTHO3D:
        cfg.width = cfg.height = 32
    return cfg


# ---- problem setup -------------------------------------------------------

@dataclasses.dataclass
class Problem:
    scene: object
    targets: list
    views: list
    holdout: list


def build_problem(cfg: RunConfig, base_dir: Path | None = None) -> Problem:
    """Initial scene, training targets/views and held-out pairs for a config."""
    tc = cfg.train
    if tc.mode == IMAGE2D:
        lo, hi = tc.bbox
        grid = ImageGrid(cfg.width, cfg.height, lo, hi)
        if cfg.target == "synthetic":
            target = target_2d(cfg.width, cfg.height, cfg.target_seed)
        else:
            path = Path(cfg.target)
            if not path.is_absolute() and base_dir is not None:
                path = base_dir / path
            try:
                target = read_ppm(path)
            except (OSError, ValueError) as exc:
                raise ConfigError("cannot read target %s: %s" % (path, exc)) from None
            if target.shape[:2] != (cfg.height, cfg.width):
                raise ConfigError("target is %dx%d but width x height is %dx%d"
                                  % (target.shape[1], target.shape[0], cfg.width, cfg.height))
        return Problem(init_scene(tc, tc.seed), [target], [grid], [])
    if cfg.target != "synthetic":
        raise ConfigError("ortho3d runs only support target = synthetic")
    truth = scene_3d(cfg.target_count, cfg.target_seed, tc.bbox)
    train_views, hold_views = views_3d(cfg.views, cfg.holdout_views, cfg.width, cfg.height)
    bg = tc.background_rgb
    targets = targets_3d(truth, train_views, bg)
    holdout = list(zip(hold_views, targets_3d(truth, hold_views, bg)))
    return Problem(init_scene(tc, tc.seed), targets, train_views, holdout)


def run_fit(cfg: RunConfig, out: Path | None = None, base_dir: Path | None = None):
    """Train one config; with ``out`` set, write the full run directory."""
    prob = build_problem(cfg, base_dir)
    tc = cfg.train
    cull = None if math.isinf(tc.cull_sigma) else tc.cull_sigma
    bg = tc.background_rgb

    def render(scene, view):
        return np.clip(render_image(scene, view, cull, bg), 0.0, 1.0)

    progress = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved").write_text(dump_config(cfg))
        write_ppm(out / "target.ppm", prob.targets[0])

        def progress(it, metric, scene):
            done = it + 1
            if cfg.checkpoint_interval > 0 and done % cfg.checkpoint_interval == 0:
                write_ppm(out / ("render_%06d.ppm" % done), render(scene, prob.views[0]))

    result = train(prob.scene, prob.targets, prob.views, tc, prob.holdout or None,
                   progress=progress)
    if out is not None:
        with_hold = bool(prob.holdout)
        header = list(METRIC_COLUMNS) + (["psnr_holdout"] if with_hold else [])
        write_csv(out / "metrics.csv", header, (m.row(with_hold) for m in result.metrics))
        write_ppm(out / "final.ppm", render(result.scene, prob.views[0]))
        for k, (view, _) in enumerate(prob.holdout):
            write_ppm(out / ("holdout_%d.ppm" % k), render(result.scene, view))
        save_checkpoint(out / "checkpoint.npz", result.scene, result.state)
        if result.metrics:
            plotting.plot_metrics(result.metrics, out / "metrics.png")
    return result, prob


def final_scores(cfg: RunConfig, result, prob) -> dict:
    """PSNR/SSIM of the final scene on every training view (mean) and held-out views."""
    tc = cfg.train
    cull = None if math.isinf(tc.cull_sigma) else tc.cull_sigma
    imgs = [np.clip(render_image(result.scene, v, cull, tc.background_rgb), 0, 1) for v in prob.views]
    out = {"psnr": float(np.mean([psnr(i, t) for i, t in zip(imgs, prob.targets)])),
           "ssim": float(np.mean([ssim(i, t) for i, t in zip(imgs, prob.targets)])),
           "gaussians": len(result.scene), "psnr_holdout": None}
    if prob.holdout:
        out["psnr_holdout"] = float(np.mean([
            psnr(np.clip(render_image(result.scene, v, cull, tc.background_rgb), 0, 1), t)
            for v, t in prob.holdout]))
    return out


# ---- subcommands ---------------------------------------------------------

def _load(args, mode: str | None) -> RunConfig:
    defaults = default_run(mode or IMAGE2D)
    cfg = load_config(args.config, defaults) if args.config else defaults.validate()
    if mode is not None and cfg.train.mode != mode:
        raise ConfigError("%s needs mode = %s, config has %s" % (args.command, mode, cfg.train.mode))
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg.seeds = (args.seed,)
    if args.deterministic:
        cfg.train.deterministic = True
    if mode == ORTHO3D and cfg.views < 3:
        raise ConfigError("fit3d needs views >= 3, config has %d" % cfg.views)
    return cfg.validate()


def _base_dir(args):
    return Path(args.config).resolve().parent if args.config else None


def cmd_fit(args, mode: str) -> int:
    cfg = _load(args, mode)
    out = Path(args.out)
    result, prob = run_fit(cfg, out, _base_dir(args))
    if result.metrics:
        last = result.metrics[-1]
        line = "%d iterations, %d Gaussians, PSNR %.3f dB" % (len(result.metrics), len(result.scene), last.psnr)
        if last.psnr_holdout is not None:
            line += ", held-out PSNR %.3f dB" % last.psnr_holdout
        print(line)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    failed = False
    rows = []
    for mode in (IMAGE2D, ORTHO3D):
        rep = analysis.gradient_suite(mode, args.cases, args.seed or 0)
        for attr in sorted(rep.worst):
            print("%-8s %-4s max rel. error %.3e" % (mode, attr, rep.worst[attr]))
            rows.append((mode, attr, rep.worst[attr], analysis.GRAD_RTOL))
        for case, g, attr, comp, a, n in rep.failures:
            failed = True
            print("FAIL %s case %d gaussian %d attribute %s component %s: analytic %.9g numeric %.9g"
                  % (mode, case, g, attr, comp, a, n))
    worst, fails = analysis.quadrature_suite(args.quad_cases, args.seed or 0)
    print("splat    quad max rel. error %.3e" % worst)
    rows.append(("splat", "quadrature", worst, analysis.QUAD_RTOL))
    for case, exact, quad in fails:
        failed = True
        print("FAIL splat case %d: closed form %.12g quadrature %.12g" % (case, exact, quad))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "gradcheck.csv", ["mode", "attribute", "max_rel_error", "tolerance"], rows)
    return EXIT_FAIL if failed else EXIT_OK


def cmd_probe(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / ("probe_%s.csv" % args.kind)
    lam = args.lambda_g
    if args.kind == "scaling":
        rep = analysis.gradient_scaling_probe()
        rows = [("probe",) + r for r in rep.rows()]
        rows.append(("slope", rep.slope, rep.slope_ci[0], rep.slope_ci[1], "", "", "", ""))
        write_csv(path, ["row", "scale_px", "grad_mu", "grad_c", "grad_o", "grad_s",
                         "ratio", "footprint_px"], rows)
        plotting.plot_scaling(rep, out / "probe_scaling.png")
        print("slope %.4f, 95%% CI [%.4f, %.4f]" % (rep.slope, *rep.slope_ci))
    elif args.kind == "impact":
        lam = 0.8 if lam is None else lam
        trace = impact_trace(1.0, lam, args.steps)[:, 0]
        steps = np.arange(1, args.steps + 1)
        partial = np.cumsum(trace)
        closed = total_impact_partial(1.0, lam, steps)
        write_csv(path, ["step", "field_velocity", "partial_sum", "closed_form"],
                  zip(steps, trace, partial, closed))
        plotting.plot_series(steps, {"field velocity": trace, "partial sum": partial},
                             out / "probe_impact.png", ylabel="share of injected update")
    elif args.kind == "decay":
        lam = 0.8 if lam is None else lam
        rng = np.random.default_rng(args.seed or 0)
        fld = VelocityField.zeros(np.zeros(3), 1.0, (8, 8, 8), lam)
        fld = dataclasses.replace(fld, velocities=rng.standard_normal(fld.velocities.shape))
        series = analysis.energy_decay_probe(fld, args.steps)
        steps = np.arange(len(series))
        write_csv(path, ["step", "max_speed", "predicted"], zip(steps, series, series[0] * lam ** steps))
        plotting.plot_series(steps, {"max speed": series}, out / "probe_decay.png",
                             ylabel="max voxel speed", logy=lam < 1)
    else:
        rows = fixedpoint_rows(0.8 if lam is None else lam, args.seed or 0)
        write_csv(path, ["set", "particles", "occupied_voxels", "max_abs_diff"], rows)
        print("worst fixed-point deviation %.3e" % max(r[3] for r in rows))
    return EXIT_OK


def fixedpoint_rows(lambda_g, seed, sets=50, lambda_p=0.8):
    """Fixed-point blend vs the direct neighbour average on random particle sets."""
    rng = np.random.default_rng([seed, 4])
    rows = []
    for k in range(sets):
        d = 2 if k % 2 == 0 else 3
        n = int(rng.integers(2, 60))
        fld = VelocityField.covering((np.zeros(d), np.ones(d)), int(rng.integers(1, 5)), lambda_g)
        pos = rng.uniform(0.0, 1.0, (n, d))
        upd = rng.standard_normal((n, d)) * 1e-3
        blended, _ = analysis.fixed_point_blend(pos, upd, fld, lambda_p)
        ref = analysis.viscous_reference_update(pos, upd, lambda_p, fld)
        occ = len({tuple(c) for c in fld.voxel_index(pos)})
        rows.append((k, n, occ, float(np.max(np.abs(blended - ref)))))
    return rows


def cmd_ablate(args) -> int:
    cfg = _load(args, None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(dump_config(cfg))
    rows = []
    for name, overrides in ABLATIONS.items():
        for seed in cfg.seeds:
            var = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=seed, **overrides))
            result, prob = run_fit(var, None, _base_dir(args))
            scores = final_scores(var, result, prob)
            rows.append({"variant": name, "seed": seed, **scores})
            print("%-28s seed %d  PSNR %.3f  SSIM %.4f  n=%d" % (name, seed, scores["psnr"],
                                                                 scores["ssim"], scores["gaussians"]))
    header = ["variant", "seed", "psnr", "ssim", "gaussians", "psnr_holdout"]
    write_csv(out / "ablation.csv", header, ([r[h] for h in header] for r in rows))
    key = "psnr_holdout" if cfg.train.mode == ORTHO3D and cfg.holdout_views else "psnr"
    plotting.plot_ablation(rows, out / "ablation.png", key)
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="viscsplat", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--out", default="run", help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--deterministic", action="store_true",
                        help="record wall_ms as 0 so outputs are byte-identical across runs")

    common(sub.add_parser("fit2d", help="fit Gaussians to a 2D image"))
    common(sub.add_parser("fit3d", help="fit a 3D Gaussian cloud from orthographic views"))
    g = sub.add_parser("gradcheck", help="analytic gradients and splats vs numerical oracles")
    common(g, config=False)
    g.set_defaults(out=None)
    g.add_argument("--cases", type=int, default=200)
    g.add_argument("--quad-cases", type=int, default=500)
    pr = sub.add_parser("probe", help="run a diagnostic probe and write probe_<kind>.csv")
    pr.add_argument("kind", choices=PROBES)
    common(pr, config=False)
    pr.add_argument("--lambda-g", type=float, help="field retention (impact, decay, fixedpoint)")
    pr.add_argument("--steps", type=int, default=500)
    common(sub.add_parser("ablate", help="variant grid over seeds"))
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        if args.command == "fit2d":
            return cmd_fit(args, IMAGE2D)
        if args.command == "fit3d":
            return cmd_fit(args, ORTHO3D)
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        if args.command == "probe":
            return cmd_probe(args)
        return cmd_ablate(args)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, PoisonedStepError) as exc:
        print("diverged: %s" % exc, file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
