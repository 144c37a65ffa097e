"""Training loop: per-attribute steps, velocity-field position updates, densification.

Position updates go through the voxel field when ``cfg.pdeo`` is on:

1. P2G folds the raw per-particle updates into the voxel velocities.
2. G2P blends each raw update with its voxel's new velocity.
3. The blended update is added to the position.

Every other attribute takes its raw update directly.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .config import TrainConfig
from .core import IMAGE2D, Scene, activate_opacity
from .field import VelocityField, g2p_blend, p2g_update
from .losses import LossReport, confidence_loss, photometric_l2, scale_loss
from .metrics import psnr, ssim
from .splat import GradientSet, backward_image, render_forward, render_image

SPLIT_DIVISOR = 1.6
KEY_JITTER = 1e-6
NONE, CLONE, SPLIT = 0, 1, 2

ATTRIBUTES = ("mu", "c", "o", "s", "rot")
_SCENE_ARRAY = {"mu": "mu", "c": "color", "o": "opacity", "s": "log_scale", "rot": "rot"}


class PoisonedStepError(FloatingPointError):
    def __init__(self, gaussian: int, attribute: str):
        super().__init__("non-finite gradient for attribute %r of Gaussian %d" % (attribute, gaussian))
        self.gaussian = gaussian
        self.attribute = attribute


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, report: LossReport):
        super().__init__("non-finite loss at iteration %d (photometric=%r scale=%r confidence=%r)"
                         % (iteration, report.photometric, report.scale_term, report.confidence_term))
        self.iteration = iteration


def _attr_shapes(scene: Scene):
    n, d = len(scene), scene.dim
    shapes = {"mu": (n, d), "c": (n, 3), "o": (n,), "s": (n, d)}
    if scene.mode == IMAGE2D:
        shapes["rot"] = (n,)
    return shapes


@dataclass
class OptimizerState:
    m: dict
    v: dict
    steps: np.ndarray
    grad_accum: np.ndarray
    grad_count: np.ndarray
    field: VelocityField | None
    last_raw: np.ndarray
    last_step: np.ndarray
    last_voxel_v: np.ndarray

    @classmethod
    def fresh(cls, scene: Scene, cfg: TrainConfig) -> "OptimizerState":
        shapes = _attr_shapes(scene)
        n, d = len(scene), scene.dim
        fld = None
        if cfg.pdeo:
            fld = VelocityField.covering(scene.bbox, cfg.grid_cells_per_axis, cfg.lambda_g)
        return cls({k: np.zeros(s) for k, s in shapes.items()},
                   {k: np.zeros(s) for k, s in shapes.items()},
                   np.zeros(n, dtype=np.int64), np.zeros(n), np.zeros(n, dtype=np.int64),
                   fld, np.zeros((n, d)), np.zeros((n, d)), np.zeros((n, d)))

    def _per_gaussian(self):
        yield from (("m." + k, a) for k, a in self.m.items())
        yield from (("v." + k, a) for k, a in self.v.items())
        for name in ("steps", "grad_accum", "grad_count", "last_raw", "last_step", "last_voxel_v"):
            yield name, getattr(self, name)

    def reindex(self, keep: np.ndarray, n_new: int) -> "OptimizerState":
        """Keep rows ``keep`` (in order) and append ``n_new`` zeroed rows."""
        def go(a):
            extra = np.zeros((n_new,) + a.shape[1:], dtype=a.dtype)
            return np.concatenate([a[keep], extra])
        return OptimizerState({k: go(a) for k, a in self.m.items()},
                              {k: go(a) for k, a in self.v.items()},
                              go(self.steps), go(self.grad_accum), go(self.grad_count),
                              self.field, go(self.last_raw), go(self.last_step),
                              go(self.last_voxel_v))


def base_step(grads: GradientSet, state: OptimizerState, cfg: TrainConfig) -> dict:
    """Raw descent updates per attribute group (state moments updated in place)."""
    lrs = {"mu": cfg.lr_position, "c": cfg.lr_color, "o": cfg.lr_opacity,
           "s": cfg.lr_scale, "rot": cfg.lr_rotation}
    gdict = dict(grads.items())
    for name, g in gdict.items():
        bad = ~np.isfinite(g)
        if np.any(bad):
            row = int(np.argwhere(bad)[0][0])
            raise PoisonedStepError(row, name)
    out = {}
    if cfg.base_optimizer == "plain_sgd":
        for name, g in gdict.items():
            out[name] = -lrs[name] * g
        return out
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    state.steps += 1
    t = state.steps.astype(np.float64)
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in gdict.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        shape = (-1,) + (1,) * (g.ndim - 1)
        m_hat = m / c1.reshape(shape)
        v_hat = v / c2.reshape(shape)
        out[name] = -lrs[name] * m_hat / (np.sqrt(v_hat) + eps)
    return out


def pdeo_position_step(positions, field: VelocityField, raw, lambda_p):
    """P2G with the raw updates, then G2P blend, then move.

    Returns (new positions, applied updates, updated field, voxel velocity per particle).
    """
    field = p2g_update(field, positions, raw)
    voxel_v = field.sample(positions)
    applied = g2p_blend(raw, voxel_v, lambda_p)
    return positions + applied, applied, field, voxel_v


def _cosine(a, b):
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    ok = (na > 1e-12) & (nb > 1e-12)
    cos = np.zeros_like(na)
    cos[ok] = np.sum(a[ok] * b[ok], axis=-1) / (na[ok] * nb[ok])
    return np.clip(cos, -1.0, 1.0), ok


def densify_decide(grad_stat, step, voxel_v, max_scale, median_scale, cfg: TrainConfig):
    """Per-Gaussian action: NONE, CLONE or SPLIT.

    Candidates have a large mean positional gradient or (unless disabled) a
    particle/voxel velocity angle beyond ``theta_p``.  Small candidates clone,
    the rest split.
    """
    grad_stat = np.asarray(grad_stat, dtype=np.float64)
    candidate = grad_stat > cfg.grad_threshold
    if cfg.densify_cosine_mode != "off":
        cos, ok = _cosine(np.atleast_2d(step), np.atleast_2d(voxel_v))
        limit = math.cos(math.radians(cfg.theta_p))
        if cfg.densify_cosine_mode == "disagree":
            candidate |= ok & (cos < limit)
        else:
            candidate |= ok & (cos > -limit)
    action = np.where(candidate, np.where(np.asarray(max_scale) < median_scale, CLONE, SPLIT), NONE)
    return action.astype(np.int64)


def _jitter(rng, n):
    return rng.uniform(-KEY_JITTER, KEY_JITTER, size=n)


def clone(scene: Scene, idx, offsets, rng) -> Scene:
    """Copies of ``idx`` moved by ``offsets``; depth keys jittered by 1e-6."""
    idx = np.asarray(idx, dtype=np.int64)
    child = scene.take(idx)
    child.mu = child.mu + np.asarray(offsets).reshape(len(idx), scene.dim)
    child.depth_key = child.depth_key + _jitter(rng, len(idx))
    return child


def split(scene: Scene, idx, rng) -> Scene:
    """Two children per parent, sampled from the parent density, scales / 1.6."""
    idx = np.asarray(idx, dtype=np.int64)
    parents = scene.take(np.repeat(idx, 2))
    z = rng.standard_normal((len(parents), scene.dim))
    local = z * parents.scales()
    parents.mu = parents.mu + np.einsum("nij,nj->ni", parents.rotations(), local)
    parents.log_scale = parents.log_scale - math.log(SPLIT_DIVISOR)
    parents.depth_key = parents.depth_key + _jitter(rng, len(parents))
    return parents


def prune_mask(scene: Scene, cfg: TrainConfig) -> np.ndarray:
    """True for Gaussians that survive pruning."""
    if len(scene) == 0:
        return np.zeros(0, dtype=bool)
    return (activate_opacity(scene.opacity) >= cfg.prune_opacity) & (scene.max_scale() <= scene.extent())


def prune(scene: Scene, cfg: TrainConfig) -> Scene:
    return scene.take(np.flatnonzero(prune_mask(scene, cfg)))


def densify_and_prune(scene: Scene, state: OptimizerState, cfg: TrainConfig, rng):
    n = len(scene)
    grad_stat = state.grad_accum / np.maximum(state.grad_count, 1)
    step = state.last_step if cfg.cosine_uses_blended else state.last_raw
    s_max = scene.max_scale()
    action = densify_decide(grad_stat, step, state.last_voxel_v, s_max, float(np.median(s_max)), cfg)
    cand = np.flatnonzero(action != NONE)
    budget = max(0, cfg.max_gaussians - n)
    if len(cand) > budget:
        pri = np.argsort(-grad_stat[cand], kind="stable")
        cand = np.sort(cand[pri[:budget]])
    clones = cand[action[cand] == CLONE]
    splits = cand[action[cand] == SPLIT]

    keep = np.setdiff1d(np.arange(n), splits)
    parts = [scene.take(keep)]
    if len(clones):
        parts.append(clone(scene, clones, state.last_step[clones], rng))
    if len(splits):
        parts.append(split(scene, splits, rng))
    new_scene = parts[0]
    for p in parts[1:]:
        new_scene = new_scene.concat(p)
    state = state.reindex(keep, len(new_scene) - len(keep))
    state.grad_accum[:] = 0.0
    state.grad_count[:] = 0

    alive = np.flatnonzero(prune_mask(new_scene, cfg))
    if len(alive) < len(new_scene):
        new_scene = new_scene.take(alive)
        state = state.reindex(alive, 0)
    return new_scene, state, {"clone": len(clones), "split": len(splits)}


METRIC_COLUMNS = ("iteration", "loss_total", "loss_photometric", "loss_scale", "loss_confidence",
                  "psnr", "ssim", "gaussians", "step_q1", "step_q2", "step_q3", "step_q4", "wall_ms")


@dataclass
class Metrics:
    iteration: int
    loss_total: float
    loss_photometric: float
    loss_scale: float
    loss_confidence: float
    psnr: float
    ssim: float
    gaussians: int
    step_q1: float
    step_q2: float
    step_q3: float
    step_q4: float
    wall_ms: float
    psnr_holdout: float | None = None

    def row(self, with_holdout: bool = False):
        vals = [getattr(self, c) for c in METRIC_COLUMNS]
        if with_holdout:
            vals.append(self.psnr_holdout)
        return vals


def step_quartiles(max_scale, step_norm):
    """Median applied step length within each scale quartile (smallest first)."""
    out = [math.nan] * 4
    if len(max_scale) == 0:
        return out
    order = np.argsort(max_scale, kind="stable")
    for q, chunk in enumerate(np.array_split(order, 4)):
        if len(chunk):
            out[q] = float(np.median(step_norm[chunk]))
    return out


@dataclass
class TrainResult:
    scene: Scene
    metrics: list
    state: OptimizerState
    events: list = dc_field(default_factory=list)


def _apply(scene: Scene, name: str, delta):
    arr = getattr(scene, _SCENE_ARRAY[name])
    arr += delta


def train(scene: Scene, targets, views, cfg: TrainConfig, holdout=None, state=None,
          progress=None) -> TrainResult:
    """Fit ``scene`` to ``targets`` (one image per view).

    Views are visited round-robin.  ``holdout`` is an optional list of
    (view, target) pairs whose mean PSNR is recorded every iteration.
    ``progress(it, metrics, scene)`` is called after each iteration.
    """
    cfg = cfg.validate()
    if len(targets) < 1 or len(targets) != len(views):
        raise ValueError("need one target image per view and at least one view")
    scene = scene.copy()
    state = state or OptimizerState.fresh(scene, cfg)
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    cull = None if math.isinf(cfg.cull_sigma) else cfg.cull_sigma
    bg = cfg.background_rgb
    metrics = []
    events = []
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        k = it % len(views)
        image, fwd = render_forward(scene, views[k], cull, bg)
        photo, residual = photometric_l2(image, targets[k])
        visible = fwd.visible
        vis_idx = np.flatnonzero(visible)
        l_s, g_s = scale_loss(scene.log_scale[vis_idx], cfg.beta)
        l_t, g_t = confidence_loss(scene.opacity[vis_idx])
        report = LossReport(photo, l_s, l_t, cfg.omega_s, cfg.omega_t)
        if not math.isfinite(report.total):
            raise TrainingDiverged(it, report)

        grads = backward_image(fwd, residual)
        grads.d_s[vis_idx] += cfg.omega_s * g_s
        grads.d_o[vis_idx] += cfg.omega_t * g_t
        state.grad_accum[vis_idx] += grads.mu_norm[vis_idx]
        state.grad_count[vis_idx] += 1

        updates = base_step(grads, state, cfg)
        raw = updates.pop("mu")
        if cfg.pdeo:
            new_mu, applied, state.field, voxel_v = pdeo_position_step(
                scene.mu, state.field, raw, cfg.lambda_p)
            scene.mu = new_mu
            state.last_voxel_v = voxel_v
        else:
            applied = raw
            scene.mu = scene.mu + raw
        state.last_raw = raw
        state.last_step = applied
        for name, delta in updates.items():
            _apply(scene, name, delta)

        shown = np.clip(image, 0.0, 1.0)
        quart = step_quartiles(scene.max_scale(), np.linalg.norm(applied, axis=1))
        hold = None
        if holdout:
            hold = float(np.mean([psnr(np.clip(render_image(scene, v, cull, bg), 0, 1), t)
                                  for v, t in holdout]))
        n_now = len(scene)
        done = it + 1
        if cfg.densify_start <= done < cfg.densify_stop and done % cfg.densify_interval == 0:
            scene, state, ev = densify_and_prune(scene, state, cfg, rng)
            events.append((done, ev["clone"], ev["split"], len(scene)))
        wall = 0.0 if cfg.deterministic else 1000.0 * (time.perf_counter() - t0)
        metrics.append(Metrics(it, report.total, photo, l_s, l_t, psnr(shown, targets[k]),
                               ssim(shown, targets[k]), n_now, *quart, wall, hold))
        if progress is not None:
            progress(it, metrics[-1], scene)
    return TrainResult(scene, metrics, state, events)


CHECKPOINT_VERSION = 1


def save_checkpoint(path, scene: Scene, state: OptimizerState) -> None:
    arrays = {
        "version": np.array(CHECKPOINT_VERSION),
        "mode": np.array(scene.mode),
        "bbox_lo": scene.bbox[0], "bbox_hi": scene.bbox[1],
        "scene.mu": scene.mu, "scene.color": scene.color, "scene.opacity": scene.opacity,
        "scene.log_scale": scene.log_scale, "scene.rot": scene.rot,
        "scene.depth_key": scene.depth_key,
    }
    for name, a in state._per_gaussian():
        arrays["state." + name] = a
    if state.field is not None:
        f = state.field
        arrays.update({"field.origin": f.origin, "field.cell_size": np.array(f.cell_size),
                       "field.dims": np.array(f.dims), "field.velocities": f.velocities,
                       "field.lambda_g": np.array(f.lambda_g)})
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        if int(z["version"]) != CHECKPOINT_VERSION:
            raise ValueError("unsupported checkpoint version %d" % int(z["version"]))
        scene = Scene(z["scene.mu"], z["scene.color"], z["scene.opacity"], z["scene.log_scale"],
                      z["scene.rot"], z["scene.depth_key"], str(z["mode"]),
                      (z["bbox_lo"], z["bbox_hi"]))
        s = {k[len("state."):]: z[k] for k in z.files if k.startswith("state.")}
        fld = None
        if "field.velocities" in z.files:
            fld = VelocityField(z["field.origin"], float(z["field.cell_size"]),
                                tuple(int(n) for n in z["field.dims"]), z["field.velocities"],
                                float(z["field.lambda_g"]))
    state = OptimizerState(
        {k[2:]: v for k, v in s.items() if k.startswith("m.")},
        {k[2:]: v for k, v in s.items() if k.startswith("v.")},
        s["steps"], s["grad_accum"], s["grad_count"], fld,
        s["last_raw"], s["last_step"], s["last_voxel_v"])
    return scene, state
