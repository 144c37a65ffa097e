"""Voxel velocity field with particle-to-grid and grid-to-particle transfers.

Each particle binds to exactly one voxel (the cell containing it, clamped to
the grid border).  P2G folds the mean update of a voxel's particles into the
stored velocity with decay ``lambda_g``; G2P mixes that velocity back into
each particle's own update with weight ``1 - lambda_p``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .core import UsageError


@dataclass(frozen=True)
class VelocityField:
    origin: np.ndarray
    cell_size: float
    dims: tuple
    velocities: np.ndarray  # dims + (d,)
    lambda_g: float = 0.8

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        if any(int(n) < 1 for n in self.dims):
            raise ValueError("every grid extent must be >= 1")
        if not 0.0 <= self.lambda_g <= 1.0:
            raise ValueError("lambda_g must lie in [0, 1]")
        if self.velocities.shape != tuple(self.dims) + (len(self.dims),):
            raise ValueError("velocity array shape does not match dims")

    @classmethod
    def zeros(cls, origin, cell_size, dims, lambda_g=0.8) -> "VelocityField":
        dims = tuple(int(n) for n in dims)
        return cls(np.asarray(origin, dtype=np.float64), float(cell_size), dims,
                   np.zeros(dims + (len(dims),)), float(lambda_g))

    @classmethod
    def covering(cls, bbox, cells_per_axis=64, lambda_g=0.8) -> "VelocityField":
        """Grid over ``bbox`` whose cell size is the bbox diagonal / cells_per_axis."""
        lo = np.asarray(bbox[0], dtype=np.float64)
        hi = np.asarray(bbox[1], dtype=np.float64)
        cell = float(np.linalg.norm(hi - lo)) / cells_per_axis
        dims = tuple(max(1, int(math.ceil(e / cell - 1e-9))) for e in hi - lo)
        return cls.zeros(lo, cell, dims, lambda_g)

    @property
    def dim(self) -> int:
        return len(self.dims)

    def voxel_index(self, pos) -> np.ndarray:
        """Integer voxel coordinates; positions outside bind to the border voxel."""
        pos = np.asarray(pos, dtype=np.float64)
        idx = np.floor((pos - self.origin) / self.cell_size).astype(np.int64)
        return np.clip(idx, 0, np.asarray(self.dims) - 1)

    def flat_index(self, pos) -> np.ndarray:
        idx = self.voxel_index(np.atleast_2d(pos))
        return np.ravel_multi_index(tuple(idx.T), self.dims)

    def sample(self, pos) -> np.ndarray:
        """Velocity of the voxel each position binds to."""
        flat = self.velocities.reshape(-1, self.dim)
        return flat[self.flat_index(pos)]

    def max_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.velocities, axis=-1))) if self.velocities.size else 0.0


def voxel_index(field: VelocityField, pos) -> np.ndarray:
    return field.voxel_index(pos)


def voxel_means(field: VelocityField, positions, updates):
    """Per-voxel mean update and occupancy count, flattened over voxels."""
    n_vox = int(np.prod(field.dims))
    d = field.dim
    sums = np.zeros((n_vox, d))
    counts = np.zeros(n_vox, dtype=np.int64)
    if len(positions):
        flat = field.flat_index(positions)
        counts = np.bincount(flat, minlength=n_vox)
        for j in range(d):
            sums[:, j] = np.bincount(flat, weights=updates[:, j], minlength=n_vox)
    occupied = counts > 0
    means = np.zeros_like(sums)
    means[occupied] = sums[occupied] / counts[occupied, None]
    return means, counts


def p2g_update(field: VelocityField, positions, updates) -> VelocityField:
    """v' = lambda_g v + (1 - lambda_g) mean(updates in voxel); empty voxels just decay."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, field.dim)
    updates = np.asarray(updates, dtype=np.float64).reshape(-1, field.dim)
    if len(positions) != len(updates):
        raise UsageError("%d positions but %d updates" % (len(positions), len(updates)))
    lam = field.lambda_g
    means, counts = voxel_means(field, positions, updates)
    v = field.velocities.reshape(-1, field.dim)
    new = lam * v
    occ = counts > 0
    new[occ] = lam * v[occ] + (1.0 - lam) * means[occ]
    return replace(field, velocities=new.reshape(field.velocities.shape))


def g2p_blend(delta_mu, v, lambda_p):
    """lambda_p * delta_mu + (1 - lambda_p) * v."""
    return lambda_p * np.asarray(delta_mu, dtype=np.float64) + (1.0 - lambda_p) * np.asarray(v, dtype=np.float64)


def total_impact_partial(delta_v, lambda_g, steps):
    """Share of an injected mean update released by the field after ``steps`` steps."""
    steps = np.asarray(steps)
    if np.any(steps < 0):
        raise ValueError("steps must be >= 0")
    return np.asarray(delta_v, dtype=np.float64) * (1.0 - lambda_g ** steps)


def impact_trace(delta_v, lambda_g, horizon, inject_step=0):
    """Simulate one voxel that receives ``delta_v`` once at ``inject_step``.

    Returns the field value after each step from the injection on; since the
    voxel starts at rest, each value is exactly the portion of the injected
    update still carried by the field at that step.
    """
    delta_v = np.atleast_1d(np.asarray(delta_v, dtype=np.float64))
    d = len(delta_v)
    field = VelocityField.zeros(np.zeros(d), 1.0, (1,) * d, lambda_g)
    inside = np.full((1, d), 0.5)
    series = []
    for step in range(inject_step + horizon):
        if step == inject_step:
            field = p2g_update(field, inside, delta_v[None, :])
        else:
            field = p2g_update(field, np.zeros((0, d)), np.zeros((0, d)))
        if step >= inject_step:
            series.append(field.velocities.reshape(d).copy())
    return np.array(series).reshape(horizon, d)


def export_snapshot(field: VelocityField) -> str:
    """Text dump: '#' metadata lines then 'ix iy [iz] vx vy [vz]' per nonzero voxel."""
    lines = [
        "# velocity-field v1",
        "# origin " + " ".join(repr(float(x)) for x in field.origin),
        "# cell_size %r" % float(field.cell_size),
        "# dims " + " ".join(str(n) for n in field.dims),
        "# lambda_g %r" % float(field.lambda_g),
    ]
    for idx in np.ndindex(*field.dims):
        v = field.velocities[idx]
        if np.any(v != 0.0):
            lines.append(" ".join([str(i) for i in idx] + [repr(float(x)) for x in v]))
    return "\n".join(lines) + "\n"


def import_snapshot(text: str) -> VelocityField:
    meta = {}
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if parts and parts[0] in ("origin", "cell_size", "dims", "lambda_g"):
                meta[parts[0]] = parts[1:]
            continue
        rows.append(line.split())
    dims = tuple(int(x) for x in meta["dims"])
    field = VelocityField.zeros([float(x) for x in meta["origin"]], float(meta["cell_size"][0]),
                                dims, float(meta["lambda_g"][0]))
    d = len(dims)
    for row in rows:
        idx = tuple(int(x) for x in row[:d])
        field.velocities[idx] = [float(x) for x in row[d:]]
    return field
