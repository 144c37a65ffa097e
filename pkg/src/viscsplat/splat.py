"""Forward alpha blending of splatted Gaussians and its analytic gradient.

In image2d mode the splat weight of a Gaussian at a pixel is its density at
the pixel centre.  In ortho3d mode it is the line integral of the 3D density
along the pixel's view ray, which has the closed form

    exp(-(x2^2/(2 s2^2) + x3^2/(2 s3^2)) + B^2/(4A)) * sqrt(pi/A)

in the Gaussian's local frame (see :func:`splat_closed_form`).  The rasteriser
evaluates the same quantity through the equivalent in-plane marginal: a 2D
conic plus the amplitude sqrt(2 pi / r^T Sigma^-1 r).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _kernels
from .core import (
    IMAGE2D,
    MIN_SCALE,
    CameraOrtho,
    ImageGrid,
    RawGaussian,
    Scene,
    SingularityError,
    UsageError,
    activate_opacity,
    eval_gaussian,
)

ALPHA_MAX = 0.999
DEFAULT_CULL_SIGMA = 4.0


class SplatCoeffs(NamedTuple):
    """A and the linear map B(x) = b . x for a local-frame offset x."""

    A: float
    b: np.ndarray

    def B(self, offset) -> float:
        x = np.asarray(offset, dtype=np.float64)
        if x.shape == (2,):
            return float(self.b[1] * x[0] + self.b[2] * x[1])
        return float(self.b @ x)


def _local_inv_var(g: RawGaussian) -> np.ndarray:
    scale = np.exp(np.asarray(g.s, dtype=np.float64))
    if np.any(scale < MIN_SCALE):
        raise SingularityError("activated scale below %g" % MIN_SCALE)
    return 1.0 / scale ** 2


def splat_coeffs(g: RawGaussian, r) -> SplatCoeffs:
    """Integration coefficients for a world-space unit view direction ``r``."""
    inv_var = _local_inv_var(g)
    r_loc = g.rotation_matrix().T @ np.asarray(r, dtype=np.float64)
    A = float(0.5 * np.sum(r_loc ** 2 * inv_var))
    return SplatCoeffs(A, r_loc * inv_var)


def splat_closed_form(g: RawGaussian, cam: CameraOrtho, pixel) -> float:
    """Exact integral of ``eval_gaussian`` along the pixel's view ray."""
    inv_var = _local_inv_var(g)
    R = g.rotation_matrix()
    r_loc = R.T @ cam.r
    x = R.T @ (cam.pixel_point(*pixel) - g.mu)
    # Slide the ray origin so the local coordinate along the dominant ray
    # component is zero; the remaining two components are the in-plane offset.
    k = int(np.argmax(np.abs(r_loc)))
    x = x - (x[k] / r_loc[k]) * r_loc
    rest = [j for j in range(3) if j != k]
    A = 0.5 * float(np.sum(r_loc ** 2 * inv_var))
    B = float(sum(r_loc[j] * x[j] * inv_var[j] for j in rest))
    exponent = -sum(0.5 * x[j] ** 2 * inv_var[j] for j in rest) + B * B / (4.0 * A)
    return math.exp(exponent) * math.sqrt(math.pi / A)


def splat_quadrature(g: RawGaussian, cam: CameraOrtho, pixel, n_samples: int = 20001) -> float:
    """Trapezoidal line integral of ``eval_gaussian`` over +-8 effective sigma."""
    if n_samples < 3 or n_samples % 2 == 0:
        raise ValueError("n_samples must be odd and >= 3")
    p = cam.pixel_point(*pixel)
    r = cam.r
    cov = g.covariance()
    sr = np.linalg.solve(cov, r)
    a = float(r @ sr)
    t_peak = float(sr @ (g.mu - p)) / a
    half = 8.0 / math.sqrt(a)
    t = np.linspace(t_peak - half, t_peak + half, n_samples)
    vals = eval_gaussian(g, p[None, :] + t[:, None] * r[None, :])
    return float(np.trapezoid(vals, t))


def render_pixel(colors, opacities, weights, background=(0.0, 0.0, 0.0)):
    """Blend already-sorted Gaussians at one pixel.

    ``opacities`` are activated.  Returns (color, final transmittance).
    """
    C = [0.0, 0.0, 0.0]
    T = 1.0
    for col, op, w in zip(colors, opacities, weights):
        a = op * w
        if a > ALPHA_MAX:
            a = ALPHA_MAX
        for ch in range(3):
            C[ch] += col[ch] * a * T
        T = T * (1.0 - a)
    for ch in range(3):
        C[ch] += T * background[ch]
    return np.array(C), T


@dataclass
class Projection:
    """Per-Gaussian image-plane quantities in blend order."""

    order: np.ndarray
    center: np.ndarray  # (N,2) plane coordinates
    conic: np.ndarray  # (N,3) k00, k01, k11
    cov2: np.ndarray  # (N,2,2) in-plane covariance
    amp: np.ndarray
    op: np.ndarray
    color: np.ndarray
    roi: np.ndarray  # (N,4) row0,row1,col0,col1 (exclusive ends)
    offsets: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    cutoff_q: float
    # mode-specific data kept for the chain rule
    rotations: np.ndarray
    inv_var: np.ndarray
    r_loc: np.ndarray | None = None
    a_ray: np.ndarray | None = None


@dataclass
class ForwardState:
    scene: Scene
    view: object
    proj: Projection
    trans: np.ndarray
    t_store: np.ndarray
    background: np.ndarray

    @property
    def visible(self) -> np.ndarray:
        """Mask over scene storage order: culling footprint touches the image."""
        roi = self.proj.roi
        vis_sorted = (roi[:, 1] > roi[:, 0]) & (roi[:, 3] > roi[:, 2])
        mask = np.zeros(len(self.scene), dtype=bool)
        mask[self.proj.order] = vis_sorted
        return mask


@dataclass
class GradientSet:
    """Per-Gaussian loss gradients, in scene storage order."""

    d_mu: np.ndarray
    d_c: np.ndarray
    d_o: np.ndarray
    d_s: np.ndarray
    d_rot: np.ndarray | None = None

    @property
    def mu_norm(self) -> np.ndarray:
        return np.linalg.norm(self.d_mu, axis=1)

    @classmethod
    def zeros(cls, scene: Scene) -> "GradientSet":
        n, d = len(scene), scene.dim
        return cls(np.zeros((n, d)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, d)),
                   np.zeros(n) if d == 2 else None)

    def __add__(self, other: "GradientSet") -> "GradientSet":
        rot = None if self.d_rot is None else self.d_rot + other.d_rot
        return GradientSet(self.d_mu + other.d_mu, self.d_c + other.d_c,
                           self.d_o + other.d_o, self.d_s + other.d_s, rot)

    def items(self):
        yield "mu", self.d_mu
        yield "c", self.d_c
        yield "o", self.d_o
        yield "s", self.d_s
        if self.d_rot is not None:
            yield "rot", self.d_rot

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for _, v in self.items())


def _check_view(scene: Scene, view):
    if scene.mode == IMAGE2D and not isinstance(view, ImageGrid):
        raise UsageError("image2d scenes render onto an ImageGrid")
    if scene.mode != IMAGE2D and not isinstance(view, CameraOrtho):
        raise UsageError("ortho3d scenes render through a CameraOrtho")


def _roi(center, cov2, xs, ys, cull_sigma):
    n = len(center)
    W, H = len(xs), len(ys)
    if cull_sigma is None or n == 0:
        roi = np.zeros((n, 4), dtype=np.int64)
        roi[:, 1] = H
        roi[:, 3] = W
        return roi
    dx = xs[1] - xs[0] if W > 1 else 1.0
    dy = ys[1] - ys[0] if H > 1 else 1.0
    rx = cull_sigma * np.sqrt(cov2[:, 0, 0])
    ry = cull_sigma * np.sqrt(cov2[:, 1, 1])
    c0 = np.ceil((center[:, 0] - rx - xs[0]) / dx)
    c1 = np.floor((center[:, 0] + rx - xs[0]) / dx) + 1
    r0 = np.ceil((center[:, 1] - ry - ys[0]) / dy)
    r1 = np.floor((center[:, 1] + ry - ys[0]) / dy) + 1
    roi = np.stack([np.clip(r0, 0, H), np.clip(r1, 0, H), np.clip(c0, 0, W), np.clip(c1, 0, W)], 1)
    roi = roi.astype(np.int64)
    roi[:, 1] = np.maximum(roi[:, 1], roi[:, 0])
    roi[:, 3] = np.maximum(roi[:, 3], roi[:, 2])
    return roi


def blend_order(scene: Scene, view) -> np.ndarray:
    """Front-to-back order: depth_key in 2D, ray depth of the centre in 3D."""
    if scene.mode == IMAGE2D:
        key = scene.depth_key
    else:
        key = (scene.mu - np.asarray(view.center)) @ view.r
    return np.argsort(key, kind="stable")


def project(scene: Scene, view, cull_sigma=DEFAULT_CULL_SIGMA) -> Projection:
    _check_view(scene, view)
    order = blend_order(scene, view)
    sc = scene.take(order)
    n = len(sc)
    scale = sc.scales() if n else np.zeros((0, sc.dim))
    if np.any(scale < MIN_SCALE):
        raise SingularityError("activated scale below %g" % MIN_SCALE)
    inv_var = 1.0 / scale ** 2
    R = sc.rotations()
    xs, ys = view.axes()
    r_loc = a_ray = None
    if scene.mode == IMAGE2D:
        center = sc.mu.copy()
        cov2 = np.einsum("nij,nj,nkj->nik", R, scale ** 2, R)
        amp = np.ones(n)
    else:
        c = np.asarray(view.center)
        P = np.stack([view.u, view.v], axis=1)  # (3,2)
        center = (sc.mu - c) @ P
        cov3 = np.einsum("nij,nj,nkj->nik", R, scale ** 2, R)
        cov2 = np.einsum("ia,nij,jb->nab", P, cov3, P)
        r_loc = np.einsum("nji,j->ni", R, view.r)
        a_ray = np.sum(r_loc ** 2 * inv_var, axis=1)
        amp = np.sqrt(2.0 * math.pi / a_ray)
    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] ** 2
    conic = np.stack([cov2[:, 1, 1] / det, -cov2[:, 0, 1] / det, cov2[:, 0, 0] / det], 1)
    roi = _roi(center, cov2, xs, ys, cull_sigma)
    sizes = (roi[:, 1] - roi[:, 0]) * (roi[:, 3] - roi[:, 2])
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(sizes, out=offsets[1:])
    cutoff = math.inf if cull_sigma is None else float(cull_sigma) ** 2
    return Projection(order, center, conic, cov2, amp, activate_opacity(sc.opacity) if n else np.zeros(0),
                      np.ascontiguousarray(sc.color), roi, offsets, xs, ys, cutoff, R, inv_var, r_loc, a_ray)


def render_forward(scene: Scene, view, cull_sigma=DEFAULT_CULL_SIGMA,
                   background=(0.0, 0.0, 0.0)) -> tuple[np.ndarray, ForwardState]:
    """Render and keep the per-pixel blend state needed by the backward pass."""
    proj = project(scene, view, cull_sigma)
    H, W = len(proj.ys), len(proj.xs)
    image = np.empty((H, W, 3))
    trans = np.empty((H, W))
    t_store = np.empty(int(proj.offsets[-1]))
    bg = np.asarray(background, dtype=np.float64)
    k = proj.conic
    _kernels.forward(proj.center[:, 0].copy(), proj.center[:, 1].copy(), k[:, 0].copy(),
                     k[:, 1].copy(), k[:, 2].copy(), proj.amp, proj.op, proj.color, proj.roi,
                     proj.offsets, proj.xs, proj.ys, proj.cutoff_q, ALPHA_MAX, bg,
                     image, trans, t_store)
    return image, ForwardState(scene, view, proj, trans, t_store, bg)


def render_image(scene: Scene, view, cull_sigma=DEFAULT_CULL_SIGMA,
                 background=(0.0, 0.0, 0.0)) -> np.ndarray:
    return render_forward(scene, view, cull_sigma, background)[0]


def pixel_weights(state: ForwardState, row: int, col: int):
    """(sorted index, weight) of every Gaussian whose footprint covers the pixel."""
    p = state.proj
    out = []
    for i in range(len(p.order)):
        r0, r1, c0, c1 = p.roi[i]
        if not (r0 <= row < r1 and c0 <= col < c1):
            continue
        dx = p.xs[col] - p.center[i, 0]
        dy = p.ys[row] - p.center[i, 1]
        q = p.conic[i, 0] * dx * dx + 2.0 * p.conic[i, 1] * dx * dy + p.conic[i, 2] * dy * dy
        if q <= p.cutoff_q:
            out.append((i, p.amp[i] * math.exp(-0.5 * q)))
    return out


def backward_image(state: ForwardState, residual: np.ndarray) -> GradientSet:
    """Exact gradient of the loss whose per-pixel colour derivative is ``residual``."""
    if state is None or not isinstance(state, ForwardState):
        raise UsageError("backward_image needs the ForwardState from render_forward")
    p = state.proj
    residual = np.ascontiguousarray(residual, dtype=np.float64)
    if residual.shape != state.trans.shape + (3,):
        raise UsageError("residual shape %s does not match image" % (residual.shape,))
    scene = state.scene
    n = len(p.order)
    g = {name: np.zeros(n) for name in ("cx", "cy", "k00", "k01", "k11", "amp", "op")}
    g_col = np.zeros((n, 3))
    k = p.conic
    _kernels.backward(p.center[:, 0].copy(), p.center[:, 1].copy(), k[:, 0].copy(),
                      k[:, 1].copy(), k[:, 2].copy(), p.amp, p.op, p.color, p.roi, p.offsets,
                      p.xs, p.ys, p.cutoff_q, ALPHA_MAX, state.background, state.trans,
                      state.t_store, residual, g["cx"], g["cy"], g["k00"], g["k01"], g["k11"],
                      g["amp"], g["op"], g_col)

    d_o = g["op"] * p.op * (1.0 - p.op)
    # gradient w.r.t. the symmetric conic matrix
    GK = np.empty((n, 2, 2))
    GK[:, 0, 0] = g["k00"]
    GK[:, 1, 1] = g["k11"]
    GK[:, 0, 1] = GK[:, 1, 0] = 0.5 * g["k01"]
    R = p.rotations
    d_rot = None
    if scene.mode == IMAGE2D:
        d_mu = np.stack([g["cx"], g["cy"]], 1)
        # conic = R diag(inv_var) R^T
        RtGR = np.einsum("nji,njk,nkl->nil", R, GK, R)
        d_s = -2.0 * p.inv_var * np.diagonal(RtGR, axis1=1, axis2=2)
        theta = scene.rot[p.order]
        c, s = np.cos(theta), np.sin(theta)
        dR = np.stack([np.stack([-s, -c], -1), np.stack([c, -s], -1)], -2)
        dK = np.einsum("nij,nj,nkj->nik", dR, p.inv_var, R)
        dK = dK + np.transpose(dK, (0, 2, 1))
        d_rot = np.einsum("nij,nij->n", GK, dK)
    else:
        view = state.view
        P = np.stack([view.u, view.v], axis=1)
        d_mu = g["cx"][:, None] * view.u + g["cy"][:, None] * view.v
        # conic = M^-1 with M = P^T R diag(s^2) R^T P
        GM = -np.einsum("nij,njk,nkl->nil", k_mat(p.conic), GK, k_mat(p.conic))
        W3 = np.einsum("nji,ja,nab,kb,nkl->nil", R, P, GM, P, R)
        d_s = 2.0 / p.inv_var * np.diagonal(W3, axis1=1, axis2=2)
        d_s += (g["amp"] * p.amp / p.a_ray)[:, None] * p.inv_var * p.r_loc ** 2

    inv = np.empty(n, dtype=np.int64)
    inv[p.order] = np.arange(n)
    return GradientSet(d_mu[inv], g_col[inv], d_o[inv], d_s[inv],
                       None if d_rot is None else d_rot[inv])


def k_mat(conic: np.ndarray) -> np.ndarray:
    K = np.empty((len(conic), 2, 2))
    K[:, 0, 0] = conic[:, 0]
    K[:, 0, 1] = K[:, 1, 0] = conic[:, 1]
    K[:, 1, 1] = conic[:, 2]
    return K
