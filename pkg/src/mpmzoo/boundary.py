"""Boundary conditions applied to particles (before P2G) and grid nodes (before G2P)."""

import math
from dataclasses import dataclass

import torch

from . import tensor_math as tm
from .errors import ValidationError

GRID_KINDS = ("ground_plane_sticky", "ground_plane_slip", "domain_walls")
PARTICLE_KINDS = ("impulse", "constant_force")
KINDS = GRID_KINDS + PARTICLE_KINDS


@dataclass(frozen=True)
class BoundaryCondition:
    """One boundary condition.

    Planes use ``point``/``normal`` (nodes on the non-positive side are
    constrained). ``domain_walls`` acts on nodes within ``thickness`` nodes of
    each face. ``impulse`` spreads a total velocity change ``vector`` (m/s)
    over its time window; ``constant_force`` applies ``vector`` newtons to
    every particle inside the region ``lower``..``upper`` (whole domain when
    unset).
    """

    kind: str
    point: tuple = (0.0, 0.0, 0.0)
    normal: tuple = (0.0, 0.0, 1.0)
    thickness: int = 3
    lower: tuple = None
    upper: tuple = None
    start: float = 0.0
    end: float = math.inf
    vector: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown boundary condition kind '{self.kind}'")
        if not self.start >= 0:
            raise ValidationError("boundary condition start time must be non-negative")
        if not self.end >= self.start:
            raise ValidationError("boundary condition window must satisfy start <= end")
        if self.kind == "impulse" and not math.isfinite(self.end):
            raise ValidationError("impulse needs a finite time window")
        if self.kind.startswith("ground_plane") and math.hypot(*self.normal) == 0:
            raise ValidationError("ground plane normal must be non-zero")
        if self.thickness < 0:
            raise ValidationError("wall thickness must be non-negative")
        if (self.lower is None) != (self.upper is None):
            raise ValidationError("region needs both lower and upper corners")

    def active(self, t):
        return self.start <= t < self.end

    def _region_mask(self, x):
        if self.lower is None:
            return torch.ones(x.shape[0], dtype=torch.bool)
        lo, hi = tm.as_tensor(self.lower), tm.as_tensor(self.upper)
        return ((x >= lo) & (x <= hi)).all(-1)


def apply_particle_bcs(x, v, mass, bcs, t, dt):
    """Velocity changes from impulses and external forces on particles."""
    for bc in bcs:
        if bc.kind not in PARTICLE_KINDS or not bc.active(t):
            continue
        mask = bc._region_mask(x.detach())[:, None]
        vec = tm.as_tensor(bc.vector)
        if bc.kind == "impulse":
            dv = vec * (dt / (bc.end - bc.start))
            v = v + torch.where(mask, dv.expand_as(v), torch.zeros_like(v))
        else:
            v = v + torch.where(mask, dt * vec / mass[:, None], torch.zeros_like(v))
    return v


def apply_grid_bcs(velocity, grid, bcs, t, nodes=None):
    """Constrain node velocities.

    ``velocity`` holds one row per node of ``nodes`` (flat ids), or every node
    of the grid when ``nodes`` is None.
    """
    for bc in bcs:
        if bc.kind not in GRID_KINDS or not bc.active(t):
            continue
        if bc.kind == "domain_walls":
            velocity = _walls(velocity, grid, bc.thickness, nodes)
            continue
        n = tm.as_tensor(bc.normal)
        n = n / torch.linalg.vector_norm(n)
        pos = grid.node_positions() if nodes is None else grid.node_positions()[nodes]
        below = ((pos - tm.as_tensor(bc.point)) @ n <= 0)[:, None]
        if bc.kind == "ground_plane_sticky":
            velocity = torch.where(below, torch.zeros_like(velocity), velocity)
        else:
            normal_part = (velocity @ n)[:, None] * n
            velocity = torch.where(below, velocity - normal_part, velocity)
    return velocity


def _walls(velocity, grid, thickness, nodes=None):
    idx = grid.node_indices() if nodes is None else grid.node_indices()[nodes]
    res = grid.resolution
    outward = ((idx < thickness) & (velocity < 0)) | ((idx >= res - thickness) & (velocity > 0))
    return torch.where(outward, torch.zeros_like(velocity), velocity)
