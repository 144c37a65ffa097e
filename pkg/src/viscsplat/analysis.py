"""Independent checks of the renderer gradients, the field transfers and the
gradient-magnitude scaling of small Gaussians.

Nothing here is used by training; these functions are the oracles that the
test suite and ``viscsplat gradcheck`` / ``viscsplat probe`` run.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import splat
from .core import IMAGE2D, CameraOrtho, ImageGrid, RawGaussian, Scene, random_rotation_3d
from .field import VelocityField, p2g_update
from .losses import photometric_l2
from .optimizer import pdeo_position_step

GRAD_RTOL = 1e-4
GRAD_FLOOR = 1e-8
QUAD_RTOL = 1e-6

_ATTR_ARRAY = {"mu": "mu", "c": "color", "o": "opacity", "s": "log_scale", "rot": "rot"}


def _loss(scene, view, target, cull_sigma, background):
    image = splat.render_image(scene, view, cull_sigma, background)
    return photometric_l2(image, target)[0]


def finite_diff_grad(scene: Scene, view, target, index: int, attribute: str, component=None,
                     eps: float = 1e-5, cull_sigma=None, background=(0.0, 0.0, 0.0)) -> float:
    """Central difference of the photometric loss in one raw attribute component."""
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    name = _ATTR_ARRAY[attribute]
    key = (index,) if component is None else (index, component)
    plus = scene.copy()
    getattr(plus, name)[key] += eps
    minus = scene.copy()
    getattr(minus, name)[key] -= eps
    return (_loss(plus, view, target, cull_sigma, background)
            - _loss(minus, view, target, cull_sigma, background)) / (2.0 * eps)


def relative_error(a, b, floor=GRAD_FLOOR) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def random_config(mode: str, rng: np.random.Generator, size: int = 12):
    """Small random scene, view and target with no alpha clamping anywhere.

    Scales stay within [0.08, 0.3] of a unit box and activated opacity below
    0.82, so every alpha stays well under the 0.999 clamp.
    """
    n = int(rng.integers(1, 6))
    d = 2 if mode == IMAGE2D else 3
    lo = np.zeros(d) if d == 2 else np.full(3, -0.5)
    mu = lo + rng.uniform(0.15, 0.85, (n, d))
    color = rng.uniform(0.0, 1.0, (n, 3))
    opacity = rng.uniform(-2.0, 1.5, n)
    log_scale = np.log(rng.uniform(0.08, 0.3, (n, d)))
    depth_key = rng.permutation(n).astype(np.float64)
    if d == 2:
        rot = rng.uniform(0.0, math.pi, n)
        view = ImageGrid(size, size)
    else:
        rot = random_rotation_3d(rng, n)
        view = CameraOrtho.looking(rng.standard_normal(3), size, size, 1.0 / size)
    scene = Scene(mu, color, opacity, log_scale, rot, depth_key, mode, (lo, lo + 1.0))
    target = rng.uniform(0.0, 1.0, (size, size, 3))
    return scene, view, target


@dataclass
class GradCheckReport:
    mode: str
    cases: int
    worst: dict = field(default_factory=dict)  # attribute -> max relative error
    failures: list = field(default_factory=list)  # (case, gaussian, attribute, component, analytic, numeric)

    @property
    def passed(self) -> bool:
        return not self.failures


def gradient_suite(mode: str, cases: int = 200, seed: int = 0, eps: float = 1e-5,
                   rtol: float = GRAD_RTOL) -> GradCheckReport:
    """Analytic backward pass against central differences for every attribute."""
    rng = np.random.default_rng([seed, 1 if mode == IMAGE2D else 2])
    report = GradCheckReport(mode, cases)
    for case in range(cases):
        scene, view, target = random_config(mode, rng)
        image, state = splat.render_forward(scene, view, cull_sigma=None)
        _, residual = photometric_l2(image, target)
        grads = splat.backward_image(state, residual)
        for attr, arr in grads.items():
            for idx in np.ndindex(arr.shape):
                comp = idx[1] if len(idx) > 1 else None
                num = finite_diff_grad(scene, view, target, idx[0], attr, comp, eps)
                err = relative_error(arr[idx], num)
                report.worst[attr] = max(report.worst.get(attr, 0.0), err)
                if err >= rtol:
                    report.failures.append((case, idx[0], attr, comp, float(arr[idx]), num))
    return report


def random_splat_case(rng: np.random.Generator):
    """One rotated Gaussian, camera and pixel for the closed-form/quadrature check."""
    R = random_rotation_3d(rng, 1)[0]
    g = RawGaussian(rng.uniform(-0.2, 0.2, 3), np.ones(3), 0.0,
                    np.log(rng.uniform(0.05, 0.4, 3)), R)
    cam = CameraOrtho.looking(rng.standard_normal(3), 16, 16, 1.0 / 16)
    pixel = (int(rng.integers(0, 16)), int(rng.integers(0, 16)))
    return g, cam, pixel


def quadrature_suite(cases: int = 500, seed: int = 0, n_samples: int = 20001,
                     rtol: float = QUAD_RTOL):
    """Worst relative error of splat_closed_form against trapezoidal quadrature."""
    rng = np.random.default_rng([seed, 3])
    worst = 0.0
    failures = []
    for case in range(cases):
        g, cam, pixel = random_splat_case(rng)
        exact = splat.splat_closed_form(g, cam, pixel)
        quad = splat.splat_quadrature(g, cam, pixel, n_samples)
        err = abs(exact - quad) / max(abs(quad), 1e-300)
        # weights below 1e-200 are far past the cull radius and carry no signal
        if quad < 1e-200 and exact < 1e-200:
            err = 0.0
        worst = max(worst, err)
        if err >= rtol:
            failures.append((case, exact, quad))
    return worst, failures


def viscous_reference_update(positions, updates, lam, field: VelocityField):
    """Direct neighbour average: d_i + (1 - lam) (mean_{j in N_i} d_j - d_i).

    N_i is every particle sharing i's voxel, i included.  Quadratic in the
    number of particles by design.
    """
    positions = np.asarray(positions, dtype=np.float64)
    updates = np.asarray(updates, dtype=np.float64)
    cells = [tuple(c) for c in field.voxel_index(positions)]
    out = np.empty_like(updates)
    for i in range(len(updates)):
        nbrs = [j for j in range(len(updates)) if cells[j] == cells[i]]
        mean = np.mean(updates[nbrs], axis=0)
        out[i] = updates[i] + (1.0 - lam) * (mean - updates[i])
    return out


def fixed_point_blend(positions, updates, field: VelocityField, lambda_p, tol=1e-13,
                      max_steps=100000):
    """Repeat the field step with the same updates until the field stops moving,
    then return the blended updates at that fixed point."""
    positions = np.asarray(positions, dtype=np.float64)
    for _ in range(max_steps):
        _, applied, new_field, _ = pdeo_position_step(positions, field, updates, lambda_p)
        change = float(np.max(np.abs(new_field.velocities - field.velocities)))
        field = new_field
        if change < tol:
            return applied, field
    raise RuntimeError("field did not settle in %d steps" % max_steps)


def energy_decay_probe(field: VelocityField, steps: int) -> np.ndarray:
    """Largest voxel speed after each of ``steps`` particle-free field updates."""
    d = field.dim
    series = [field.max_norm()]
    for _ in range(steps):
        field = p2g_update(field, np.zeros((0, d)), np.zeros((0, d)))
        series.append(field.max_norm())
    return np.array(series)


# 2D confidence bound: Mahalanobis^2 below the 0.99 quantile of chi^2(2)
CONFIDENCE_MASS = 0.99


@dataclass
class ScalingReport:
    scales: np.ndarray
    grad_mu: np.ndarray
    grad_c: np.ndarray
    grad_o: np.ndarray
    grad_s: np.ndarray
    footprint: np.ndarray  # pixels inside the confidence bound
    slope: float
    slope_ci: tuple

    @property
    def ratio(self) -> np.ndarray:
        """scale * |dL/dmu| / |dL/ds| per probe."""
        return self.scales * self.grad_mu / self.grad_s

    def rows(self):
        for k in range(len(self.scales)):
            yield (self.scales[k], self.grad_mu[k], self.grad_c[k], self.grad_o[k],
                   self.grad_s[k], self.ratio[k], self.footprint[k])


def _probe_once(scale, offset=(0.0, 0.0), aspect=0.7, angle=0.3, shift=0.5):
    """Footprint-normalised gradient magnitudes of one Gaussian of the given size.

    Sizes are in pixels.  The target is the same Gaussian displaced by
    ``shift`` scales with a different colour, so the residual pattern scales
    with the Gaussian and only discretisation breaks self-similarity.
    """
    s = np.array([scale, aspect * scale])
    half = int(math.ceil(3.2 * scale + shift * scale + 2))
    grid = ImageGrid(2 * half, 2 * half, (-half, -half), (half, half))
    center = np.asarray(offset, dtype=np.float64)
    probe = Scene(center[None, :], np.array([[0.8, 0.4, 0.2]]), np.array([math.log(0.7 / 0.3)]),
                  np.log(s)[None, :], np.array([angle]), np.zeros(1), IMAGE2D,
                  (grid.lo, grid.hi))
    truth = probe.copy()
    truth.mu = truth.mu + shift * scale * np.array([0.6, 0.8])
    truth.color = np.array([[0.3, 0.6, 0.5]])
    target = splat.render_image(truth, grid, cull_sigma=None)
    image, state = splat.render_forward(probe, grid, cull_sigma=None)
    xs, ys = grid.axes()
    X, Y = np.meshgrid(xs, ys)
    w = probe.gaussian(0)
    dens = np.exp(-0.5 * _mahalanobis2(w, X, Y))
    bound = stats.chi2.ppf(CONFIDENCE_MASS, df=2)
    mask = _mahalanobis2(w, X, Y) <= bound
    if mask.sum() < 4:
        return (math.nan,) * 4 + (int(mask.sum()),)
    residual = 2.0 * (image - target) * mask[..., None]
    g = splat.backward_image(state, residual)
    norm = float(np.sum(dens[mask]))
    return (float(np.linalg.norm(g.d_mu[0])) / norm, float(np.linalg.norm(g.d_c[0])) / norm,
            abs(float(g.d_o[0])) / norm, float(np.linalg.norm(g.d_s[0])) / norm, int(mask.sum()))


def _mahalanobis2(g: RawGaussian, X, Y):
    R = g.rotation_matrix()
    dx, dy = X - g.mu[0], Y - g.mu[1]
    lx = R[0, 0] * dx + R[1, 0] * dy
    ly = R[0, 1] * dx + R[1, 1] * dy
    s = np.exp(g.s)
    return (lx / s[0]) ** 2 + (ly / s[1]) ** 2


def gradient_scaling_probe(scales=None, offset=(0.0, 0.0)) -> ScalingReport:
    """Sweep a single Gaussian over ``scales`` (pixels) and fit log|dL/dmu| vs log scale."""
    if scales is None:
        scales = np.geomspace(1.5, 150.0, 10)
    kept = []
    for s in scales:
        res = _probe_once(float(s), offset)
        if res[4] < 4:
            warnings.warn("probe at scale %g covers %d pixels; skipped" % (s, res[4]))
            continue
        kept.append((float(s),) + res)
    if len(kept) < 2:
        raise ValueError("fewer than two usable probe scales")
    arr = np.array(kept)
    fit = stats.linregress(np.log(arr[:, 0]), np.log(arr[:, 1]))
    tcrit = stats.t.ppf(0.975, len(arr) - 2) if len(arr) > 2 else math.inf
    ci = (fit.slope - tcrit * fit.stderr, fit.slope + tcrit * fit.stderr)
    return ScalingReport(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4],
                         arr[:, 5].astype(int), float(fit.slope), ci)
