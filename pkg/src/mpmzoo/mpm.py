"""Explicit MLS-MPM with APIC transfers on a quadratic B-spline grid."""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numba as nb
import numpy as np
import torch

from . import tensor_math as tm
from .boundary import apply_grid_bcs, apply_particle_bcs
from .constitutive import kirchhoff_stress, plastic_return
from .errors import OutOfDomain, UnstableStep, ValidationError

BSPLINE_DEGREE = 2
MASS_EPSILON = 1e-12
CLAMP_CELLS = 2

_OFFSETS = torch.stack(torch.meshgrid(*[torch.arange(3)] * 3, indexing="ij"), -1).reshape(27, 3)


@dataclass(frozen=True)
class GridSpec:
    """Cubic background grid with ``resolution`` nodes per axis at ``lower + i*dx``."""

    resolution: int = 25
    lower: tuple = (0.0, 0.0, 0.0)
    size: float = 1.0

    def __post_init__(self):
        if self.resolution < 2 * CLAMP_CELLS + 2:
            raise ValidationError(f"grid resolution must be at least {2 * CLAMP_CELLS + 2}")
        if not self.size > 0:
            raise ValidationError("domain size must be positive")

    @property
    def dx(self):
        return self.size / self.resolution

    @property
    def n_nodes(self):
        return self.resolution ** 3

    def clamp_bounds(self):
        lo = tm.as_tensor(self.lower) + CLAMP_CELLS * self.dx
        return lo, tm.as_tensor(self.lower) + self.size - CLAMP_CELLS * self.dx

    def node_indices(self):
        return _node_indices(self.resolution)

    def node_positions(self):
        return _node_positions(self.resolution, tuple(self.lower), self.size)

    def inside(self, x):
        lo = tm.as_tensor(self.lower)
        return ((x >= lo) & (x <= lo + self.size)).all(-1)


@lru_cache(maxsize=8)
def _node_positions(res, lower, size):
    return tm.as_tensor(lower) + _node_indices(res).to(tm.DTYPE) * (size / res)


@lru_cache(maxsize=8)
def _node_indices(res):
    r = torch.arange(res)
    return torch.stack(torch.meshgrid(r, r, r, indexing="ij"), -1).reshape(-1, 3)


@dataclass(frozen=True)
class StepParams:
    dt: float = 3e-4
    gravity: tuple = (0.0, 0.0, -9.8)
    threads: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValidationError("dt must be positive")
        if self.threads < 1:
            raise ValidationError("threads must be at least 1")


@dataclass
class ParticleState:
    x: torch.Tensor
    v: torch.Tensor
    F: torch.Tensor
    C: torch.Tensor
    mass: torch.Tensor
    volume: torch.Tensor
    step: int = 0

    def __len__(self):
        return self.x.shape[0]

    def detach(self):
        return replace(self, x=self.x.detach(), v=self.v.detach(), F=self.F.detach(), C=self.C.detach())

    def clone(self):
        return replace(self, x=self.x.clone(), v=self.v.clone(), F=self.F.clone(), C=self.C.clone())

    def momentum(self):
        return (self.mass[:, None] * self.v).sum(0)


@dataclass
class GridField:
    """Node quantities; ``nodes`` lists the flat node ids of the rows (all nodes when ``None``)."""

    mass: torch.Tensor
    momentum: torch.Tensor
    velocity: torch.Tensor
    nodes: torch.Tensor = None

    def dense(self, grid):
        if self.nodes is None:
            return self
        out = []
        for t in (self.mass, self.momentum, self.velocity):
            full = torch.zeros(grid.n_nodes, *t.shape[1:], dtype=t.dtype)
            out.append(full.index_copy(0, self.nodes, t))
        return GridField(*out)


@dataclass
class Stencil:
    """3x3x3 B-spline neighbourhood of each particle."""

    nodes: torch.Tensor    # (N, 27) flat node indices
    weights: torch.Tensor  # (N, 27)
    grads: torch.Tensor    # (N, 27, 3)
    offsets: torch.Tensor  # (N, 27, 3), x_i - x_p
    active: torch.Tensor = None  # sorted distinct node ids touched by any particle
    local: torch.Tensor = None   # (N, 27) row of each node in ``active``


def init_state(positions, masses, volumes, grid=GridSpec()):
    x = tm.as_tensor(positions).reshape(-1, 3)
    n = x.shape[0]
    masses = tm.as_tensor(masses).reshape(-1).expand(n).clone()
    volumes = tm.as_tensor(volumes).reshape(-1).expand(n).clone()
    if n and not bool(grid.inside(x).all()):
        raise OutOfDomain("particle positions outside the simulation domain")
    if n and not (bool((masses > 0).all()) and bool((volumes > 0).all())):
        raise ValidationError("particle masses and volumes must be positive")
    lo, hi = grid.clamp_bounds()
    eye = torch.eye(3, dtype=tm.DTYPE).repeat(n, 1, 1)
    return ParticleState(
        x=torch.maximum(torch.minimum(x, hi), lo), v=torch.zeros(n, 3, dtype=tm.DTYPE),
        F=eye, C=torch.zeros(n, 3, 3, dtype=tm.DTYPE), mass=masses, volume=volumes,
    )


def bspline_weights(fx):
    """Per-axis quadratic B-spline weights and derivatives for local coordinates ``fx`` in [0.5, 1.5)."""
    w = torch.stack([0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2], 1)
    dw = torch.stack([fx - 1.5, -2.0 * (fx - 1.0), fx - 0.5], 1)
    return w, dw


def bspline_stencil(x, grid):
    rel = (x - tm.as_tensor(grid.lower)) / grid.dx
    base = torch.floor(rel.detach() - 0.5).long()
    fx = rel - base.to(tm.DTYPE)
    w, dw = bspline_weights(fx)
    dw = dw / grid.dx
    a, b, c = _OFFSETS[:, 0], _OFFSETS[:, 1], _OFFSETS[:, 2]
    wa, wb, wc = w[:, a, 0], w[:, b, 1], w[:, c, 2]
    weights = wa * wb * wc
    grads = torch.stack([dw[:, a, 0] * wb * wc, wa * dw[:, b, 1] * wc, wa * wb * dw[:, c, 2]], -1)
    idx = base[:, None, :] + _OFFSETS[None]
    res = grid.resolution
    if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= res):
        raise OutOfDomain("particle stencil leaves the grid")
    nodes = (idx[..., 0] * res + idx[..., 1]) * res + idx[..., 2]
    offsets = (_OFFSETS[None].to(tm.DTYPE) - fx[:, None, :]) * grid.dx
    active, local = torch.unique(nodes, sorted=True, return_inverse=True)
    return Stencil(nodes, weights, grads, offsets, active, local)


_executors = {}


def _executor(threads):
    if threads not in _executors:
        _executors[threads] = ThreadPoolExecutor(max_workers=threads)
    return _executors[threads]


def scatter(nodes, values, n_nodes, threads=1):
    """Sum per-(particle, node) ``values`` into node buffers.

    With ``threads > 1`` each worker accumulates a contiguous particle chunk
    into a private buffer and the buffers are merged in chunk order.
    """
    k = values.shape[-1]
    if threads <= 1 or nodes.shape[0] < 2 * threads:
        return torch.zeros(n_nodes, k, dtype=values.dtype).index_add(0, nodes.reshape(-1), values.reshape(-1, k))
    bounds = [round(i * nodes.shape[0] / threads) for i in range(threads + 1)]

    def work(i):
        sl = slice(bounds[i], bounds[i + 1])
        return torch.zeros(n_nodes, k, dtype=values.dtype).index_add(
            0, nodes[sl].reshape(-1), values[sl].reshape(-1, k))

    parts = list(_executor(threads).map(work, range(threads)))
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total


def p2g(state, grid, stencil=None, threads=1):
    """APIC transfer of mass and momentum to the grid."""
    if stencil is None:
        stencil = bspline_stencil(state.x, grid)
    wm = stencil.weights * state.mass[:, None]
    affine = torch.einsum("nij,nkj->nki", state.C, stencil.offsets)
    mom = wm[..., None] * (state.v[:, None, :] + affine)
    acc = scatter(stencil.local, torch.cat([wm[..., None], mom], -1), len(stencil.active), threads)
    mass, momentum = acc[:, 0], acc[:, 1:]
    occupied = (mass >= MASS_EPSILON)[:, None]
    safe = torch.where(occupied[:, 0], mass, torch.ones_like(mass))[:, None]
    velocity = torch.where(occupied, momentum / safe, torch.zeros_like(momentum))
    return GridField(mass, momentum, velocity, stencil.active)


def grid_update(field, state, stress, grid, params, bcs=(), stencil=None, time=0.0):
    """Add internal (stress) and external (gravity) forces, then grid boundary conditions.

    ``stress`` is the Kirchhoff stress ``P F^T`` of each particle; with the
    rest volume it gives the nodal force ``-sum_p V_p tau_p grad w_ip``.
    """
    if stencil is None:
        stencil = bspline_stencil(state.x, grid)
    dt = params.dt
    force = -state.volume[:, None, None] * torch.einsum("nij,nkj->nki", stress, stencil.grads)
    f_node = scatter(stencil.local, force, len(stencil.active), params.threads)
    occupied = (field.mass >= MASS_EPSILON)[:, None]
    safe = torch.where(occupied[:, 0], field.mass, torch.ones_like(field.mass))[:, None]
    v = (field.momentum + dt * f_node) / safe + dt * tm.as_tensor(params.gravity)
    v = torch.where(occupied, v, torch.zeros_like(v))
    v = apply_grid_bcs(v, grid, bcs, time, stencil.active)
    return GridField(field.mass, field.momentum, v, stencil.active)


def g2p(field, state, grid, params, stencil=None):
    """Gather velocities back; returns the advected state whose ``F`` is the trial gradient."""
    if stencil is None:
        stencil = bspline_stencil(state.x, grid)
    vi = field.velocity[stencil.local]
    w = stencil.weights[..., None]
    v = (w * vi).sum(1)
    apic = 12.0 / (grid.dx ** 2 * (BSPLINE_DEGREE + 1))
    C = apic * torch.einsum("nk,nki,nkj->nij", stencil.weights, vi, stencil.offsets)
    grad_v = torch.einsum("nki,nkj->nij", vi, stencil.grads)
    x = state.x + params.dt * v
    lo, hi = grid.clamp_bounds()
    x = torch.maximum(torch.minimum(x, hi), lo)
    F_trial = state.F + params.dt * grad_v @ state.F
    return replace(state, x=x, v=v, C=C, F=F_trial)


# -- compiled forward path ------------------------------------------------------
# Same arithmetic as the tensor path above, one particle at a time. Used when no
# gradients are needed.

@nb.njit(cache=True, nogil=True)
def _weights(xp, lower, inv_dx, base, w, dw):
    for a in range(3):
        rel = (xp[a] - lower[a]) * inv_dx
        b = int(np.floor(rel - 0.5))
        fx = rel - b
        base[a] = b
        w[0, a] = 0.5 * (1.5 - fx) ** 2
        w[1, a] = 0.75 - (fx - 1.0) ** 2
        w[2, a] = 0.5 * (fx - 0.5) ** 2
        dw[0, a] = (fx - 1.5) * inv_dx
        dw[1, a] = -2.0 * (fx - 1.0) * inv_dx
        dw[2, a] = (fx - 0.5) * inv_dx


@nb.njit(cache=True, nogil=True)
def _p2g_kernel(x, v, C, mass, volume, stress, lower, dx, res, start, end, out):
    """Accumulate node mass, momentum and stress force (columns 0, 1:4, 4:7)."""
    inv_dx = 1.0 / dx
    base = np.empty(3, np.int64)
    w = np.empty((3, 3))
    dw = np.empty((3, 3))
    for p in range(start, end):
        _weights(x[p], lower, inv_dx, base, w, dw)
        m = mass[p]
        vol = volume[p]
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    wijk = w[i, 0] * w[j, 1] * w[k, 2]
                    g0 = dw[i, 0] * w[j, 1] * w[k, 2]
                    g1 = w[i, 0] * dw[j, 1] * w[k, 2]
                    g2 = w[i, 0] * w[j, 1] * dw[k, 2]
                    d0 = (base[0] + i) * dx + lower[0] - x[p, 0]
                    d1 = (base[1] + j) * dx + lower[1] - x[p, 1]
                    d2 = (base[2] + k) * dx + lower[2] - x[p, 2]
                    node = ((base[0] + i) * res + base[1] + j) * res + base[2] + k
                    wm = wijk * m
                    out[node, 0] += wm
                    for a in range(3):
                        out[node, 1 + a] += wm * (v[p, a] + C[p, a, 0] * d0 + C[p, a, 1] * d1 + C[p, a, 2] * d2)
                        out[node, 4 + a] -= vol * (stress[p, a, 0] * g0 + stress[p, a, 1] * g1 + stress[p, a, 2] * g2)


@nb.njit(cache=True, nogil=True)
def _g2p_kernel(x, F, gv, lower, dx, res, dt, lo, hi, start, end, x_out, v_out, C_out, F_out):
    inv_dx = 1.0 / dx
    apic = 12.0 / (dx * dx * (2 + 1))
    base = np.empty(3, np.int64)
    w = np.empty((3, 3))
    dw = np.empty((3, 3))
    gradv = np.empty((3, 3))
    for p in range(start, end):
        _weights(x[p], lower, inv_dx, base, w, dw)
        for a in range(3):
            v_out[p, a] = 0.0
            for b in range(3):
                C_out[p, a, b] = 0.0
                gradv[a, b] = 0.0
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    wijk = w[i, 0] * w[j, 1] * w[k, 2]
                    g0 = dw[i, 0] * w[j, 1] * w[k, 2]
                    g1 = w[i, 0] * dw[j, 1] * w[k, 2]
                    g2 = w[i, 0] * w[j, 1] * dw[k, 2]
                    d0 = (base[0] + i) * dx + lower[0] - x[p, 0]
                    d1 = (base[1] + j) * dx + lower[1] - x[p, 1]
                    d2 = (base[2] + k) * dx + lower[2] - x[p, 2]
                    node = ((base[0] + i) * res + base[1] + j) * res + base[2] + k
                    for a in range(3):
                        va = gv[node, a]
                        v_out[p, a] += wijk * va
                        C_out[p, a, 0] += apic * wijk * va * d0
                        C_out[p, a, 1] += apic * wijk * va * d1
                        C_out[p, a, 2] += apic * wijk * va * d2
                        gradv[a, 0] += va * g0
                        gradv[a, 1] += va * g1
                        gradv[a, 2] += va * g2
        for a in range(3):
            xa = x[p, a] + dt * v_out[p, a]
            x_out[p, a] = min(max(xa, lo[a]), hi[a])
            for b in range(3):
                acc = F[p, a, b]
                for c in range(3):
                    acc += dt * gradv[a, c] * F[p, c, b]
                F_out[p, a, b] = acc


def _chunks(n, threads):
    parts = threads if threads > 1 and n >= 2 * threads else 1
    return [(round(i * n / parts), round((i + 1) * n / parts)) for i in range(parts)]


def _check_stencil_range(x, grid):
    if len(x):
        rel = (x - np.asarray(grid.lower)) / grid.dx
        if np.floor(rel - 0.5).min() < 0 or np.floor(rel - 0.5).max() + 2 >= grid.resolution:
            raise OutOfDomain("particle stencil leaves the grid")


def _fast_transfer(state, stress, grid, params, bcs, t):
    """P2G, grid update and G2P without autograd; returns (trial state, grid field)."""
    x, v, C, F = (np.ascontiguousarray(a.numpy()) for a in (state.x, state.v, state.C, state.F))
    mass, volume = state.mass.numpy(), state.volume.numpy()
    tau = np.ascontiguousarray(stress.numpy())
    lower = np.asarray(grid.lower, dtype=np.float64)
    _check_stencil_range(x, grid)
    chunks = _chunks(len(x), params.threads)

    def scatter_chunk(bounds):
        buf = np.zeros((grid.n_nodes, 7))
        _p2g_kernel(x, v, C, mass, volume, tau, lower, grid.dx, grid.resolution, bounds[0], bounds[1], buf)
        return buf

    if len(chunks) == 1:
        acc = scatter_chunk(chunks[0])
    else:
        parts = list(_executor(params.threads).map(scatter_chunk, chunks))
        acc = parts[0]
        for part in parts[1:]:
            acc = acc + part
    acc = torch.from_numpy(acc)
    vel = _grid_velocity(acc, grid, params, bcs, t)
    gv = np.ascontiguousarray(vel.numpy())

    lo, hi = (b.numpy() for b in grid.clamp_bounds())
    outs = [np.empty_like(x), np.empty_like(v), np.empty_like(C), np.empty_like(F)]

    def gather_chunk(bounds):
        _g2p_kernel(x, F, gv, lower, grid.dx, grid.resolution, params.dt, lo, hi, bounds[0], bounds[1], *outs)

    if len(chunks) == 1:
        gather_chunk(chunks[0])
    else:
        list(_executor(params.threads).map(gather_chunk, chunks))
    xo, vo, Co, Fo = (torch.from_numpy(a) for a in outs)
    return replace(state, x=xo, v=vo, C=Co, F=Fo), GridField(acc[:, 0], acc[:, 1:4], vel)


def _grid_velocity(acc, grid, params, bcs, t):
    """Node velocities from accumulated mass, momentum and force columns."""
    nmass, momentum, force = acc[:, 0], acc[:, 1:4], acc[:, 4:7]
    occupied = (nmass >= MASS_EPSILON)[:, None]
    safe = torch.where(occupied[:, 0], nmass, torch.ones_like(nmass))[:, None]
    vel = (momentum + params.dt * force) / safe + params.dt * tm.as_tensor(params.gravity)
    vel = torch.where(occupied, vel, torch.zeros_like(vel))
    return apply_grid_bcs(vel, grid, bcs, t)


# -- compiled transfers with gradients ----------------------------------------------
# Reverse-mode kernels for the two transfers. ``h`` holds the second derivatives
# of the per-axis weights, needed because the weight gradients move with x_p.

@nb.njit(cache=True)
def _hessian_weights(xp, lower, inv_dx, base, w, dw, h):
    _weights(xp, lower, inv_dx, base, w, dw)
    c = inv_dx * inv_dx
    for a in range(3):
        h[0, a] = c
        h[1, a] = -2.0 * c
        h[2, a] = c


@nb.njit(cache=True)
def _stencil_node(w, dw, h, i, j, k, g, hess):
    g[0] = dw[i, 0] * w[j, 1] * w[k, 2]
    g[1] = w[i, 0] * dw[j, 1] * w[k, 2]
    g[2] = w[i, 0] * w[j, 1] * dw[k, 2]
    hess[0, 0] = h[i, 0] * w[j, 1] * w[k, 2]
    hess[1, 1] = w[i, 0] * h[j, 1] * w[k, 2]
    hess[2, 2] = w[i, 0] * w[j, 1] * h[k, 2]
    hess[0, 1] = hess[1, 0] = dw[i, 0] * dw[j, 1] * w[k, 2]
    hess[0, 2] = hess[2, 0] = dw[i, 0] * w[j, 1] * dw[k, 2]
    hess[1, 2] = hess[2, 1] = w[i, 0] * dw[j, 1] * dw[k, 2]
    return w[i, 0] * w[j, 1] * w[k, 2]


@nb.njit(cache=True)
def _p2g_backward_kernel(x, v, C, mass, volume, stress, lower, dx, res, g_acc, gx, gv, gC, gtau):
    inv_dx = 1.0 / dx
    base = np.empty(3, np.int64)
    w = np.empty((3, 3))
    dw = np.empty((3, 3))
    h = np.empty((3, 3))
    g = np.empty(3)
    hess = np.empty((3, 3))
    d = np.empty(3)
    mom = np.empty(3)
    for p in range(x.shape[0]):
        _hessian_weights(x[p], lower, inv_dx, base, w, dw, h)
        m = mass[p]
        vol = volume[p]
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    wijk = _stencil_node(w, dw, h, i, j, k, g, hess)
                    d[0] = (base[0] + i) * dx + lower[0] - x[p, 0]
                    d[1] = (base[1] + j) * dx + lower[1] - x[p, 1]
                    d[2] = (base[2] + k) * dx + lower[2] - x[p, 2]
                    node = ((base[0] + i) * res + base[1] + j) * res + base[2] + k
                    G = g_acc[node]
                    for a in range(3):
                        mom[a] = v[p, a] + C[p, a, 0] * d[0] + C[p, a, 1] * d[1] + C[p, a, 2] * d[2]
                    for c in range(3):
                        acc = m * g[c] * G[0]
                        for a in range(3):
                            acc += m * (g[c] * mom[a] - wijk * C[p, a, c]) * G[1 + a]
                            f = 0.0
                            for b in range(3):
                                f += stress[p, a, b] * hess[b, c]
                            acc -= vol * f * G[4 + a]
                        gx[p, c] += acc
                    for a in range(3):
                        gm = wijk * m * G[1 + a]
                        gv[p, a] += gm
                        for b in range(3):
                            gC[p, a, b] += gm * d[b]
                            gtau[p, a, b] -= vol * g[b] * G[4 + a]


@nb.njit(cache=True)
def _g2p_backward_kernel(x, F, gvel, lower, dx, res, dt, x_out, lo, hi, g_x, g_v, g_C, g_F,
                         g_grid, gx, gF):
    inv_dx = 1.0 / dx
    apic = 12.0 / (dx * dx * (2 + 1))
    base = np.empty(3, np.int64)
    w = np.empty((3, 3))
    dw = np.empty((3, 3))
    h = np.empty((3, 3))
    g = np.empty(3)
    hess = np.empty((3, 3))
    d = np.empty(3)
    gradv = np.empty((3, 3))
    g_veff = np.empty(3)
    g_gradv = np.empty((3, 3))
    for p in range(x.shape[0]):
        _hessian_weights(x[p], lower, inv_dx, base, w, dw, h)
        for a in range(3):
            for b in range(3):
                gradv[a, b] = 0.0
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    _stencil_node(w, dw, h, i, j, k, g, hess)
                    node = ((base[0] + i) * res + base[1] + j) * res + base[2] + k
                    for a in range(3):
                        for b in range(3):
                            gradv[a, b] += gvel[node, a] * g[b]
        for a in range(3):
            inside = lo[a] < x_out[p, a] < hi[a]
            gxa = g_x[p, a] if inside else 0.0
            g_veff[a] = g_v[p, a] + dt * gxa
            gx[p, a] += gxa
            for c in range(3):
                acc = 0.0
                for b in range(3):
                    acc += g_F[p, a, b] * F[p, c, b]
                g_gradv[a, c] = dt * acc
        for c in range(3):
            for b in range(3):
                acc = g_F[p, c, b]
                for a in range(3):
                    acc += dt * gradv[a, c] * g_F[p, a, b]
                gF[p, c, b] += acc
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    wijk = _stencil_node(w, dw, h, i, j, k, g, hess)
                    d[0] = (base[0] + i) * dx + lower[0] - x[p, 0]
                    d[1] = (base[1] + j) * dx + lower[1] - x[p, 1]
                    d[2] = (base[2] + k) * dx + lower[2] - x[p, 2]
                    node = ((base[0] + i) * res + base[1] + j) * res + base[2] + k
                    for a in range(3):
                        va = gvel[node, a]
                        acc = wijk * g_veff[a]
                        for b in range(3):
                            acc += apic * wijk * g_C[p, a, b] * d[b] + g_gradv[a, b] * g[b]
                        g_grid[node, a] += acc
                        for c in range(3):
                            t = g_veff[a] * g[c] + apic * g_C[p, a, c] * (-wijk)
                            for b in range(3):
                                t += apic * g_C[p, a, b] * g[c] * d[b] + g_gradv[a, b] * hess[b, c]
                            gx[p, c] += va * t


def _np(t):
    return np.ascontiguousarray(t.detach().numpy())


class _P2G(torch.autograd.Function):
    """Node mass, momentum and stress force (columns 0, 1:4, 4:7) of the dense grid."""

    @staticmethod
    def forward(ctx, x, v, C, stress, mass, volume, grid):
        args = [_np(t) for t in (x, v, C, mass, volume, stress)]
        lower = np.asarray(grid.lower, dtype=np.float64)
        _check_stencil_range(args[0], grid)
        acc = np.zeros((grid.n_nodes, 7))
        _p2g_kernel(*args, lower, grid.dx, grid.resolution, 0, len(args[0]), acc)
        ctx.args, ctx.grid = args, grid
        return torch.from_numpy(acc)

    @staticmethod
    def backward(ctx, g_acc):
        x, v, C, mass, volume, stress = ctx.args
        grid = ctx.grid
        outs = [np.zeros_like(x), np.zeros_like(v), np.zeros_like(C), np.zeros_like(stress)]
        _p2g_backward_kernel(x, v, C, mass, volume, stress, np.asarray(grid.lower, dtype=np.float64), grid.dx,
                             grid.resolution, _np(g_acc), *outs)
        gx, gv, gC, gtau = (torch.from_numpy(o) for o in outs)
        return gx, gv, gC, gtau, None, None, None


class _G2P(torch.autograd.Function):
    """Advected positions, velocities, affine matrices and trial deformation gradients."""

    @staticmethod
    def forward(ctx, velocity, x, F, grid, dt):
        xs, Fs, gv = _np(x), _np(F), _np(velocity)
        lower = np.asarray(grid.lower, dtype=np.float64)
        lo, hi = (b.numpy() for b in grid.clamp_bounds())
        outs = [np.empty_like(xs), np.empty_like(xs), np.empty_like(Fs), np.empty_like(Fs)]
        _g2p_kernel(xs, Fs, gv, lower, grid.dx, grid.resolution, dt, lo, hi, 0, len(xs), *outs)
        ctx.saved = (xs, Fs, gv, outs[0], lower, lo, hi)
        ctx.grid, ctx.dt = grid, dt
        return tuple(torch.from_numpy(o) for o in outs)

    @staticmethod
    def backward(ctx, g_x, g_v, g_C, g_F):
        xs, Fs, gv, x_out, lower, lo, hi = ctx.saved
        grid = ctx.grid
        grads = [_np(g) if g is not None else np.zeros(shape)
                 for g, shape in zip((g_x, g_v, g_C, g_F), (xs.shape, xs.shape, Fs.shape, Fs.shape))]
        g_grid, gx, gF = np.zeros_like(gv), np.zeros_like(xs), np.zeros_like(Fs)
        _g2p_backward_kernel(xs, Fs, gv, lower, grid.dx, grid.resolution, ctx.dt, x_out, lo, hi, *grads,
                             g_grid, gx, gF)
        return torch.from_numpy(g_grid), torch.from_numpy(gx), torch.from_numpy(gF), None, None


def _compiled_transfer(state, stress, grid, params, bcs, t):
    """Differentiable P2G, grid update and G2P on the compiled kernels."""
    acc = _P2G.apply(state.x, state.v, state.C, stress, state.mass, state.volume, grid)
    vel = _grid_velocity(acc, grid, params, bcs, t)
    x, v, C, F = _G2P.apply(vel, state.x, state.F, grid, params.dt)
    return replace(state, x=x, v=v, C=C, F=F)


def check_state(state, step):
    with torch.no_grad():
        finite = all(bool(torch.isfinite(t).all()) for t in (state.x, state.v, state.F, state.C))
        if not finite:
            raise UnstableStep("non-finite particle state (CFL violated?)", step=step)
        if len(state) and not bool((tm.det3(state.F) > 0).all()):
            raise UnstableStep("deformation gradient lost positive determinant", step=step)


def _needs_grad(state, materials):
    if not torch.is_grad_enabled():
        return False
    tensors = [state.x, state.v, state.F, state.C, state.mass, state.volume]
    tensors += [t for t in vars(materials).values() if isinstance(t, torch.Tensor)]
    return any(t.requires_grad for t in tensors)


def mpm_step(state, materials, grid, params, bcs=(), compiled=True):
    """One step: stress, particle BCs, P2G, grid update, G2P, plasticity return.

    With ``compiled`` the transfers run in numba kernels (threaded when no
    gradient is needed, with hand-written reverse passes otherwise). Setting it
    to False uses the plain tensor implementation, kept as the reference.
    """
    t = state.step * params.dt
    stress = kirchhoff_stress(state.F, materials)
    v = apply_particle_bcs(state.x, state.v, state.mass, bcs, t, params.dt)
    state = replace(state, v=v)
    if compiled and not _needs_grad(state, materials):
        with torch.no_grad():
            trial, _ = _fast_transfer(state, stress, grid, params, bcs, t)
    elif compiled:
        trial = _compiled_transfer(state, stress, grid, params, bcs, t)
    else:
        stencil = bspline_stencil(state.x, grid)
        field = p2g(state, grid, stencil, params.threads)
        field = grid_update(field, state, stress, grid, params, bcs, stencil, t)
        trial = g2p(field, state, grid, params, stencil)
    out = replace(trial, F=plastic_return(trial.F, materials), step=state.step + 1)
    check_state(out, out.step)
    return out


@dataclass
class Simulation:
    """Everything needed to advance a particle system."""

    state: ParticleState
    materials: object
    grid: GridSpec = field(default_factory=GridSpec)
    params: StepParams = field(default_factory=StepParams)
    bcs: tuple = ()

    def build(self):
        return self


@dataclass
class Trajectory:
    """Sampled particle states; ``x`` is ``(T, N, 3)`` and ``F`` is ``(T, N, 3, 3)``."""

    steps: list
    times: torch.Tensor
    x: torch.Tensor
    F: torch.Tensor = None

    def __len__(self):
        return len(self.steps)

    @property
    def n_particles(self):
        return self.x.shape[1]


def rollout(state, materials, grid, params, bcs, n_steps, sample_every=10, keep_F=True):
    """Advance ``n_steps`` and sample every ``sample_every`` steps plus the last one."""
    if n_steps < 0 or sample_every < 1:
        raise ValidationError("n_steps must be >= 0 and sample_every >= 1")
    steps, xs, Fs = [state.step], [state.x], [state.F]
    for k in range(1, n_steps + 1):
        state = mpm_step(state, materials, grid, params, bcs)
        if k % sample_every == 0 or k == n_steps:
            steps.append(state.step)
            xs.append(state.x)
            Fs.append(state.F)
    times = tm.as_tensor(steps) * params.dt
    traj = Trajectory(steps, times, torch.stack(xs), torch.stack(Fs) if keep_F else None)
    return traj, state


def simulate(scene, n_steps, sample_every=10):
    """Run a scene (a :class:`Simulation` or anything with ``build()``) and sample it.

    Returns ``ceil(n_steps / sample_every) + 1`` samples including the initial state.
    """
    sim = scene.build()
    with torch.no_grad():
        traj, _ = rollout(sim.state, sim.materials, sim.grid, sim.params, sim.bcs, n_steps, sample_every)
    return traj


def expected_samples(n_steps, sample_every):
    return math.ceil(n_steps / sample_every) + 1
