"""Domain types, attribute activations and Gaussian density evaluation.

A scene is stored as a structure of arrays (one row per Gaussian) because
every hot path is vectorised over primitives.  :class:`RawGaussian` is the
per-primitive view used by the scalar reference functions and by tests.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

IMAGE2D = "image2d"
ORTHO3D = "ortho3d"
MODES = (IMAGE2D, ORTHO3D)

MIN_SCALE = 1e-12
# exp() overflows float64 just above this
_MAX_LOG_SCALE = 709.78


class DomainError(ValueError):
    """A numeric input lies outside the domain of an activation."""


class SingularityError(ValueError):
    """A Gaussian's covariance is numerically degenerate."""


class ConfigError(ValueError):
    """Invalid configuration value."""


class UsageError(RuntimeError):
    """An API was called with inconsistent arguments or missing state."""


def activate_opacity(o):
    """Sigmoid of the opacity logit, computed without overflow for either sign."""
    o = np.asarray(o, dtype=np.float64)
    if not np.all(np.isfinite(o)):
        raise DomainError("opacity logit must be finite")
    out = np.empty_like(o)
    pos = o >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-o[pos]))
    e = np.exp(o[~pos])
    out[~pos] = e / (1.0 + e)
    return out[()] if out.ndim == 0 else out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def activate_scale(s):
    """Componentwise exp of log-scales; raises OverflowError instead of returning inf."""
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise DomainError("log-scale must be finite")
    if np.any(s > _MAX_LOG_SCALE):
        raise OverflowError("log-scale %g overflows exp" % float(np.max(s)))
    return np.exp(s)


def rotation_2d(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def rotation_matrices_2d(theta: np.ndarray) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def random_rotation_3d(rng: np.random.Generator, n: int) -> np.ndarray:
    """n uniformly distributed proper rotations (QR of Gaussian matrices)."""
    a = rng.standard_normal((n, 3, 3))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diagonal(r, axis1=1, axis2=2))[:, None, :]
    flip = np.linalg.det(q) < 0
    q[flip, :, 0] *= -1.0
    return q


@dataclass
class RawGaussian:
    """One primitive's pre-activation attributes.

    ``rot`` is an angle in image2d mode and a fixed orthonormal 3x3 matrix in
    ortho3d mode.  ``depth_key`` only orders 2D blending.
    """

    mu: np.ndarray
    c: np.ndarray
    o: float
    s: np.ndarray
    rot: float | np.ndarray
    depth_key: float = 0.0

    @property
    def dim(self) -> int:
        return len(self.mu)

    def rotation_matrix(self) -> np.ndarray:
        if self.dim == 2:
            return rotation_2d(float(self.rot))
        return np.asarray(self.rot, dtype=np.float64)

    def covariance(self) -> np.ndarray:
        scale = activate_scale(self.s)
        if np.any(scale < MIN_SCALE):
            raise SingularityError("activated scale below %g" % MIN_SCALE)
        R = self.rotation_matrix()
        S = np.diag(scale)
        return R @ S @ S.T @ R.T


def eval_gaussian(g: RawGaussian, x) -> np.ndarray:
    """Unnormalised density exp(-0.5 (x-mu)^T Sigma^-1 (x-mu)); x may be batched."""
    cov = g.covariance()
    d = np.asarray(x, dtype=np.float64) - g.mu
    flat = d.reshape(-1, g.dim)
    sol = np.linalg.solve(cov, flat.T).T
    q = np.einsum("ij,ij->i", flat, sol)
    out = np.exp(-0.5 * q)
    return out.reshape(d.shape[:-1])[()] if d.ndim > 1 else float(out[0])


@dataclass
class Scene:
    """Ordered Gaussians as parallel arrays.

    mu (N,d), color (N,3), opacity (N,) logits, log_scale (N,d),
    rot (N,) angles in 2D or (N,3,3) matrices in 3D, depth_key (N,).
    """

    mu: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    log_scale: np.ndarray
    rot: np.ndarray
    depth_key: np.ndarray
    mode: str = IMAGE2D
    bbox: tuple[np.ndarray, np.ndarray] = field(
        default_factory=lambda: (np.zeros(2), np.ones(2)))

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError("unknown mode %r" % self.mode)
        self.bbox = (np.asarray(self.bbox[0], dtype=np.float64),
                     np.asarray(self.bbox[1], dtype=np.float64))

    @property
    def dim(self) -> int:
        return 2 if self.mode == IMAGE2D else 3

    def __len__(self) -> int:
        return len(self.opacity)

    @classmethod
    def empty(cls, mode=IMAGE2D, bbox=None) -> "Scene":
        d = 2 if mode == IMAGE2D else 3
        rot = np.zeros(0) if d == 2 else np.zeros((0, 3, 3))
        if bbox is None:
            bbox = (np.zeros(d), np.ones(d))
        return cls(np.zeros((0, d)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, d)),
                   rot, np.zeros(0), mode, bbox)

    @classmethod
    def from_gaussians(cls, gaussians, mode=IMAGE2D, bbox=None) -> "Scene":
        if not gaussians:
            return cls.empty(mode, bbox)
        d = gaussians[0].dim
        if bbox is None:
            mus = np.array([g.mu for g in gaussians], dtype=np.float64)
            bbox = (mus.min(0), mus.max(0))
        rot = np.array([g.rot for g in gaussians], dtype=np.float64)
        return cls(
            mu=np.array([g.mu for g in gaussians], dtype=np.float64).reshape(-1, d),
            color=np.array([g.c for g in gaussians], dtype=np.float64).reshape(-1, 3),
            opacity=np.array([g.o for g in gaussians], dtype=np.float64),
            log_scale=np.array([g.s for g in gaussians], dtype=np.float64).reshape(-1, d),
            rot=rot,
            depth_key=np.array([g.depth_key for g in gaussians], dtype=np.float64),
            mode=mode,
            bbox=bbox,
        )

    def gaussian(self, i: int) -> RawGaussian:
        return RawGaussian(self.mu[i].copy(), self.color[i].copy(), float(self.opacity[i]),
                           self.log_scale[i].copy(),
                           float(self.rot[i]) if self.dim == 2 else self.rot[i].copy(),
                           float(self.depth_key[i]))

    def __iter__(self):
        return (self.gaussian(i) for i in range(len(self)))

    def copy(self) -> "Scene":
        return Scene(self.mu.copy(), self.color.copy(), self.opacity.copy(),
                     self.log_scale.copy(), self.rot.copy(), self.depth_key.copy(),
                     self.mode, (self.bbox[0].copy(), self.bbox[1].copy()))

    def take(self, idx) -> "Scene":
        idx = np.asarray(idx)
        return Scene(self.mu[idx], self.color[idx], self.opacity[idx], self.log_scale[idx],
                     self.rot[idx], self.depth_key[idx], self.mode, self.bbox)

    def concat(self, other: "Scene") -> "Scene":
        return Scene(np.concatenate([self.mu, other.mu]),
                     np.concatenate([self.color, other.color]),
                     np.concatenate([self.opacity, other.opacity]),
                     np.concatenate([self.log_scale, other.log_scale]),
                     np.concatenate([self.rot, other.rot]),
                     np.concatenate([self.depth_key, other.depth_key]),
                     self.mode, self.bbox)

    def scales(self) -> np.ndarray:
        return activate_scale(self.log_scale)

    def max_scale(self) -> np.ndarray:
        return self.scales().max(axis=1) if len(self) else np.zeros(0)

    def rotations(self) -> np.ndarray:
        if self.dim == 2:
            return rotation_matrices_2d(self.rot)
        return self.rot

    def extent(self) -> float:
        return float(np.max(self.bbox[1] - self.bbox[0]))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in (self.mu, self.color, self.opacity, self.log_scale, self.rot, self.depth_key):
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class ImageGrid:
    """Pixel lattice for image2d mode: pixel (row, col) centre maps into bbox."""

    width: int
    height: int
    lo: tuple = (0.0, 0.0)
    hi: tuple = (1.0, 1.0)

    @property
    def pixel_size(self) -> tuple[float, float]:
        return ((self.hi[0] - self.lo[0]) / self.width, (self.hi[1] - self.lo[1]) / self.height)

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        """World x of each column centre and world y of each row centre."""
        px, py = self.pixel_size
        xs = self.lo[0] + (np.arange(self.width) + 0.5) * px
        ys = self.lo[1] + (np.arange(self.height) + 0.5) * py
        return xs, ys

    def pixel_center(self, row: int, col: int) -> np.ndarray:
        px, py = self.pixel_size
        return np.array([self.lo[0] + (col + 0.5) * px, self.lo[1] + (row + 0.5) * py])


@dataclass(frozen=True)
class CameraOrtho:
    """Orthographic camera; rays travel along ``view_dir`` through the image plane.

    Pixel (row, col) lies at center + a*basis_u + b*basis_v with
    a = (col + 0.5 - width/2) * pixel_scale and likewise b for rows.
    """

    view_dir: tuple
    basis_u: tuple
    basis_v: tuple
    width: int
    height: int
    pixel_scale: float
    center: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        r = np.asarray(self.view_dir, dtype=np.float64)
        u = np.asarray(self.basis_u, dtype=np.float64)
        v = np.asarray(self.basis_v, dtype=np.float64)
        gram = np.array([r, u, v]) @ np.array([r, u, v]).T
        if np.max(np.abs(gram - np.eye(3))) > 1e-12:
            raise ConfigError("camera basis is not orthonormal")
        if self.width < 1 or self.height < 1 or not self.pixel_scale > 0:
            raise ConfigError("camera needs positive size and pixel scale")

    @classmethod
    def looking(cls, direction, width, height, pixel_scale, center=(0.0, 0.0, 0.0),
                up=(0.0, 0.0, 1.0)) -> "CameraOrtho":
        r = np.asarray(direction, dtype=np.float64)
        r = r / np.linalg.norm(r)
        up = np.asarray(up, dtype=np.float64)
        if abs(np.dot(up, r)) > 0.99:
            up = np.array([1.0, 0.0, 0.0]) if abs(r[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        u = np.cross(up, r)
        u /= np.linalg.norm(u)
        v = np.cross(r, u)
        v /= np.linalg.norm(v)
        return cls(tuple(r), tuple(u), tuple(v), int(width), int(height), float(pixel_scale),
                   tuple(float(c) for c in center))

    @property
    def r(self) -> np.ndarray:
        return np.asarray(self.view_dir, dtype=np.float64)

    @property
    def u(self) -> np.ndarray:
        return np.asarray(self.basis_u, dtype=np.float64)

    @property
    def v(self) -> np.ndarray:
        return np.asarray(self.basis_v, dtype=np.float64)

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        """In-plane coordinates (along u) of column centres and (along v) of row centres."""
        a = (np.arange(self.width) + 0.5 - self.width / 2.0) * self.pixel_scale
        b = (np.arange(self.height) + 0.5 - self.height / 2.0) * self.pixel_scale
        return a, b

    def pixel_point(self, row: int, col: int) -> np.ndarray:
        a = (col + 0.5 - self.width / 2.0) * self.pixel_scale
        b = (row + 0.5 - self.height / 2.0) * self.pixel_scale
        return np.asarray(self.center) + a * self.u + b * self.v


def mean_nn_distance(points: np.ndarray) -> float:
    if len(points) < 2:
        return float("nan")
    dist, _ = cKDTree(points).query(points, k=2)
    return float(np.mean(dist[:, 1]))


def init_scene(cfg, seed: int) -> Scene:
    """Random scene from ``cfg.count``, ``cfg.mode`` and ``cfg.bbox``.

    Positions and colours are uniform, opacity is 0.1 and every scale is half
    the mean nearest-neighbour spacing.  Bit-identical for equal (cfg, seed).
    """
    n = int(cfg.count)
    if n <= 0:
        raise ConfigError("init count must be positive")
    if cfg.mode not in MODES:
        raise ConfigError("unknown mode %r" % cfg.mode)
    d = 2 if cfg.mode == IMAGE2D else 3
    lo = np.asarray(cfg.bbox[0], dtype=np.float64)
    hi = np.asarray(cfg.bbox[1], dtype=np.float64)
    if lo.shape != (d,) or hi.shape != (d,) or np.any(hi <= lo):
        raise ConfigError("bbox must be %d-dimensional with hi > lo" % d)
    rng = np.random.default_rng(seed)
    mu = rng.uniform(lo, hi, size=(n, d))
    color = rng.uniform(0.0, 1.0, size=(n, 3))
    if d == 2:
        rot = rng.uniform(0.0, math.pi, size=n)
    else:
        rot = random_rotation_3d(rng, n)
    depth_key = rng.uniform(0.0, 1.0, size=n)
    spacing = mean_nn_distance(mu)
    if not np.isfinite(spacing) or spacing <= 0:
        spacing = 0.2 * float(np.max(hi - lo))
    log_scale = np.full((n, d), math.log(0.5 * spacing))
    opacity = np.full(n, float(logit(0.1)))
    return Scene(mu, color, opacity, log_scale, rot, depth_key, cfg.mode, (lo, hi))
