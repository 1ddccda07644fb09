"""Gaussian kernels carried by particles: deformation, frame files, preview splats."""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import tensor_math as tm
from .errors import IoError, ParseError, ShapeMismatch

FRAME_MAGIC = b"CGFR"
FRAME_VERSION = 1
_HEADER = struct.Struct("<4sIII")
_TRIU = (np.array([0, 0, 0, 1, 1, 2]), np.array([0, 1, 2, 1, 2, 2]))


def deform_covariance(sigma, f):
    """``F sigma F^T``, symmetrized."""
    sigma, f = tm.as_tensor(sigma), tm.as_tensor(f)
    return tm.sym(f @ sigma @ f.transpose(-1, -2))


def rotate_view_dir(d, f):
    """Bring a view direction into the kernel's rest frame: ``R^T d`` with ``F = R S``."""
    r, _ = tm.polar_decompose(f)
    return (r.transpose(-1, -2) @ tm.as_tensor(d)[..., None])[..., 0]


@dataclass
class Frames:
    """Deformed kernels over time; ``centers`` is ``(T, N, 3)``, ``covariances`` ``(T, N, 3, 3)``."""

    times: np.ndarray
    centers: np.ndarray
    covariances: np.ndarray
    opacities: np.ndarray

    def __len__(self):
        return len(self.times)

    @property
    def n_kernels(self):
        return self.centers.shape[1]


def frames_from_trajectory(traj, covariances, opacities=None):
    """Deform rest covariances by every sampled ``F`` of a trajectory."""
    n = traj.x.shape[1]
    cov = tm.as_tensor(covariances)
    if cov.shape != (n, 3, 3):
        raise ShapeMismatch(f"{cov.shape[0] if cov.dim() else 0} kernels for {n} particles")
    opacities = np.ones(n) if opacities is None else np.asarray(opacities, dtype=np.float64)
    if opacities.shape != (n,):
        raise ShapeMismatch(f"{opacities.shape[0]} opacities for {n} particles")
    with torch.no_grad():
        deformed = deform_covariance(cov[None], traj.F)
    return Frames(np.asarray(traj.times, dtype=np.float64), traj.x.detach().numpy(),
                  deformed.numpy(), opacities)


def export_frames(frames, path):
    """Write frames in the little-endian frame-file layout documented in FORMATS.md."""
    t, n = len(frames), frames.n_kernels
    if frames.covariances.shape != (t, n, 3, 3) or frames.opacities.shape != (n,) or len(frames.times) != t:
        raise ShapeMismatch("frame arrays disagree on frame or kernel count")
    body = np.empty((t, 1 + 9 * n), dtype="<f4")
    body[:, 0] = frames.times
    per_kernel = np.concatenate([frames.centers, frames.covariances[..., _TRIU[0], _TRIU[1]]], -1)
    body[:, 1:] = per_kernel.reshape(t, 9 * n)
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(FRAME_MAGIC, FRAME_VERSION, t, n))
            fh.write(np.asarray(frames.opacities, dtype="<f4").tobytes())
            fh.write(body.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write frames to {path}: {exc}") from exc


def read_frames(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read frame file {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise ParseError(f"{path}: truncated header")
    magic, version, t, n = _HEADER.unpack_from(raw)
    if magic != FRAME_MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}")
    if version != FRAME_VERSION:
        raise ParseError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * n + 4 * t * (1 + 9 * n)
    if len(raw) != expected:
        raise ParseError(f"{path}: expected {expected} bytes for {t} frames x {n} kernels, got {len(raw)}")
    opac = np.frombuffer(raw, "<f4", n, _HEADER.size).astype(np.float64)
    body = np.frombuffer(raw, "<f4", t * (1 + 9 * n), _HEADER.size + 4 * n).reshape(t, 1 + 9 * n)
    body = body.astype(np.float64)
    per = body[:, 1:].reshape(t, n, 9)
    cov = np.empty((t, n, 3, 3))
    cov[..., _TRIU[0], _TRIU[1]] = per[..., 3:]
    cov[..., _TRIU[1], _TRIU[0]] = per[..., 3:]
    return Frames(body[:, 0].copy(), per[..., :3].copy(), cov, opac)


_AXES = {"x": (1, 2), "y": (0, 2), "z": (0, 1)}


def splat_preview(centers, covariances, opacities, axis="z", resolution=256, lower=(0, 0, 0), size=1.0):
    """Orthographic splat of Gaussian footprints looking down ``axis``.

    Each kernel adds ``opacity * exp(-d^T S^-1 d / 2)`` inside its 3-sigma
    ellipse, with ``S`` the projected 2x2 covariance. Returns a float image
    with rows running along the second in-plane axis, top row highest.
    """
    a, b = _AXES[axis]
    img = np.zeros((resolution, resolution))
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    if len(centers) == 0:
        return img
    cov = np.asarray(covariances, dtype=np.float64).reshape(-1, 3, 3)
    opac = np.asarray(opacities, dtype=np.float64).reshape(-1)
    px = size / resolution
    reg = 0.3 * px * px
    lo = np.asarray(lower, dtype=np.float64)
    for c, s, o in zip(centers, cov, opac):
        s2 = np.array([[s[a, a] + reg, s[a, b]], [s[b, a], s[b, b] + reg]])
        inv = np.linalg.inv(s2)
        u = (c[a] - lo[a]) / px - 0.5
        v = (c[b] - lo[b]) / px - 0.5
        ru, rv = 3 * np.sqrt(s2[0, 0]) / px, 3 * np.sqrt(s2[1, 1]) / px
        i0, i1 = max(int(np.floor(u - ru)), 0), min(int(np.ceil(u + ru)), resolution - 1)
        j0, j1 = max(int(np.floor(v - rv)), 0), min(int(np.ceil(v + rv)), resolution - 1)
        if i0 > i1 or j0 > j1:
            continue
        du = (np.arange(i0, i1 + 1) - u) * px
        dv = (np.arange(j0, j1 + 1) - v) * px
        q = (inv[0, 0] * du[:, None] ** 2 + 2 * inv[0, 1] * du[:, None] * dv[None]
             + inv[1, 1] * dv[None] ** 2)
        img[i0:i1 + 1, j0:j1 + 1] += np.where(q <= 9.0, o * np.exp(-0.5 * q), 0.0)
    return img.T[::-1].copy()


def write_pgm(path, img, vmax=None):
    """Save a float image as 8-bit binary PGM, scaled so ``vmax`` (default: max) maps to 255."""
    vmax = float(img.max()) if vmax is None else vmax
    data = np.zeros(img.shape, np.uint8) if vmax <= 0 else np.clip(img / vmax * 255 + 0.5, 0, 255).astype(np.uint8)
    h, w = data.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode())
            fh.write(data.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write image {path}: {exc}") from exc


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=3)
    if parts[0] != b"P5":
        raise ParseError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(raw[len(raw) - w * h:], np.uint8).reshape(h, w)
