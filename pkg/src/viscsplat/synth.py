"""Seeded synthetic targets: a 2D test image and a 3D Gaussian-cloud scene."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .core import ORTHO3D, CameraOrtho, Scene, logit, random_rotation_3d
from .splat import render_image


def target_2d(width: int, height: int, seed: int) -> np.ndarray:
    """Band-limited colour noise overlaid with discs, bars and a thin line.

    The smooth background and the hard edges give both low- and
    high-frequency content.
    """
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((height, width, 3))
    smooth = ndimage.gaussian_filter(noise, sigma=(max(width, height) / 10.0,) * 2 + (0,),
                                     mode="wrap")
    smooth = (smooth - smooth.min()) / max(smooth.max() - smooth.min(), 1e-12)
    img = 0.15 + 0.5 * smooth
    yy, xx = np.mgrid[0:height, 0:width]
    xx = (xx + 0.5) / width
    yy = (yy + 0.5) / height
    for _ in range(3):
        cx, cy = rng.uniform(0.2, 0.8, 2)
        rad = rng.uniform(0.08, 0.18)
        col = rng.uniform(0.0, 1.0, 3)
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 < rad ** 2
        img[mask] = col
    for _ in range(2):
        x0, y0 = rng.uniform(0.05, 0.6, 2)
        w, h = rng.uniform(0.1, 0.35, 2)
        col = rng.uniform(0.0, 1.0, 3)
        mask = (xx > x0) & (xx < x0 + w) & (yy > y0) & (yy < y0 + h)
        img[mask] = 0.5 * img[mask] + 0.5 * col
    ang = rng.uniform(0, math.pi)
    dist = np.abs((xx - 0.5) * math.sin(ang) - (yy - 0.5) * math.cos(ang))
    img[dist < 0.6 / max(width, height)] = rng.uniform(0.0, 1.0, 3)
    return np.clip(img, 0.0, 1.0)


def scene_3d(count: int, seed: int, bbox=((-0.5,) * 3, (0.5,) * 3)) -> Scene:
    """Ground-truth cloud of fairly opaque anisotropic Gaussians near the box centre."""
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(bbox[0], float), np.asarray(bbox[1], float)
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    mu = mid + rng.uniform(-0.6, 0.6, (count, 3)) * half
    color = rng.uniform(0.0, 1.0, (count, 3))
    opacity = logit(rng.uniform(0.5, 0.95, count))
    log_scale = np.log(rng.uniform(0.03, 0.12, (count, 3)) * float(np.max(hi - lo)))
    rot = random_rotation_3d(rng, count)
    return Scene(mu, color, opacity, log_scale, rot, np.zeros(count), ORTHO3D, (lo, hi))


def orbit_cameras(n: int, width: int, height: int, extent: float,
                  elevation_deg: float = 25.0, azimuth_offset_deg: float = 0.0):
    """n orthographic cameras evenly spaced in azimuth, all looking at the origin."""
    cams = []
    el = math.radians(elevation_deg)
    for k in range(n):
        az = math.radians(azimuth_offset_deg + 360.0 * k / n)
        eye = np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(CameraOrtho.looking(-eye, width, height, extent / max(width, height)))
    return cams


def views_3d(n_train: int, n_holdout: int, width: int, height: int, extent: float = 1.3):
    """Training orbit plus held-out cameras at a higher elevation and in-between azimuths."""
    train = orbit_cameras(n_train, width, height, extent)
    hold = orbit_cameras(n_holdout, width, height, extent, elevation_deg=40.0,
                         azimuth_offset_deg=180.0 / max(n_train, 1))
    return train, hold


def targets_3d(truth: Scene, cams, background=(0.0, 0.0, 0.0)):
    return [np.clip(render_image(truth, cam, background=background), 0.0, 1.0) for cam in cams]
