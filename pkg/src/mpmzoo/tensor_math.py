"""Batched 3x3 kernels: SVD, polar decomposition, diagonal log/exp.

Everything works on ``(..., 3, 3)`` float64 tensors. The SVD itself runs in a
numba kernel (cyclic Jacobi on ``A^T A`` followed by a Givens QR of ``A V``);
differentiable consumers go through :func:`isotropic_map`, whose backward pass
uses divided differences that stay finite when singular values coincide.
"""

import numba as nb
import numpy as np
import torch

from .errors import NonPositiveSingularValue, SingularInput

DTYPE = torch.float64
DEGENERATE_DET = 1e-10
_GAP_TOL = 1e-6


def as_tensor(x):
    return torch.as_tensor(x, dtype=DTYPE)


def eye_like(m):
    return torch.eye(3, dtype=m.dtype, device=m.device).expand(m.shape)


def sym(m):
    return 0.5 * (m + m.transpose(-1, -2))


def cofactor(m):
    """Cofactor matrix, ``det(m) * m^{-T}``, from cross products of the rows."""
    r0, r1, r2 = m[..., 0, :], m[..., 1, :], m[..., 2, :]
    return torch.stack([torch.linalg.cross(r1, r2), torch.linalg.cross(r2, r0), torch.linalg.cross(r0, r1)], -2)


def det3(m):
    return (m[..., 0, :] * torch.linalg.cross(m[..., 1, :], m[..., 2, :])).sum(-1)


@nb.njit(cache=True)
def _svd_one(a, u, s, v):
    m = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            acc = 0.0
            for k in range(3):
                acc += a[k, i] * a[k, j]
            m[i, j] = acc
    for i in range(3):
        for j in range(3):
            v[i, j] = 1.0 if i == j else 0.0
    scale = m[0, 0] + m[1, 1] + m[2, 2]
    tol = 1e-32 * scale * scale
    for _ in range(40):
        off = m[0, 1] * m[0, 1] + m[0, 2] * m[0, 2] + m[1, 2] * m[1, 2]
        if off <= tol:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = m[p, q]
            if apq == 0.0:
                continue
            theta = (m[q, q] - m[p, p]) / (2.0 * apq)
            sgn = 1.0 if theta >= 0.0 else -1.0
            t = sgn / (abs(theta) + np.sqrt(theta * theta + 1.0))
            c = 1.0 / np.sqrt(t * t + 1.0)
            sn = t * c
            for k in range(3):
                mkp = m[k, p]
                mkq = m[k, q]
                m[k, p] = c * mkp - sn * mkq
                m[k, q] = sn * mkp + c * mkq
            for k in range(3):
                mpk = m[p, k]
                mqk = m[q, k]
                m[p, k] = c * mpk - sn * mqk
                m[q, k] = sn * mpk + c * mqk
            for k in range(3):
                vkp = v[k, p]
                vkq = v[k, q]
                v[k, p] = c * vkp - sn * vkq
                v[k, q] = sn * vkp + c * vkq
    b = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            acc = 0.0
            for k in range(3):
                acc += a[i, k] * v[k, j]
            b[i, j] = acc
    # sort by column norm; each swap negates one column so det(v) stays +1
    n = np.empty(3)
    for j in range(3):
        n[j] = b[0, j] * b[0, j] + b[1, j] * b[1, j] + b[2, j] * b[2, j]
    for i in range(2):
        for j in range(2 - i):
            if n[j] < n[j + 1]:
                tmp = n[j]
                n[j] = n[j + 1]
                n[j + 1] = tmp
                for k in range(3):
                    tb = b[k, j]
                    b[k, j] = -b[k, j + 1]
                    b[k, j + 1] = tb
                    tv = v[k, j]
                    v[k, j] = -v[k, j + 1]
                    v[k, j + 1] = tv
    for i in range(3):
        for j in range(3):
            u[i, j] = 1.0 if i == j else 0.0
    # Givens QR of b; u accumulates proper rotations, the sign lands on s[2]
    for p, q in ((0, 1), (0, 2), (1, 2)):
        x = b[p, p]
        y = b[q, p]
        r = np.sqrt(x * x + y * y)
        if r == 0.0:
            continue
        c = x / r
        sn = y / r
        for k in range(3):
            bp = b[p, k]
            bq = b[q, k]
            b[p, k] = c * bp + sn * bq
            b[q, k] = -sn * bp + c * bq
        for k in range(3):
            up = u[k, p]
            uq = u[k, q]
            u[k, p] = c * up + sn * uq
            u[k, q] = -sn * up + c * uq
    s[0] = b[0, 0]
    s[1] = b[1, 1]
    s[2] = b[2, 2]


@nb.njit(cache=True)
def _svd_batch(a, u, s, v):
    for i in range(a.shape[0]):
        _svd_one(a[i], u[i], s[i], v[i])


def svd3(m):
    """SVD with ``det(u) = det(v) = +1``.

    Singular values come back sorted by magnitude, largest first; a negative
    determinant shows up as a negative last singular value.
    """
    m = as_tensor(m)
    batch = m.shape[:-2]
    a = np.ascontiguousarray(m.detach().reshape(-1, 3, 3).numpy())
    u = np.empty_like(a)
    v = np.empty_like(a)
    s = np.empty(a.shape[:-1])
    _svd_batch(a, u, s, v)
    return (
        torch.from_numpy(u).reshape(*batch, 3, 3),
        torch.from_numpy(s).reshape(*batch, 3),
        torch.from_numpy(v).reshape(*batch, 3, 3),
    )


def _check_det(f, what="matrix"):
    det = det3(f.detach())
    if not bool(torch.all(det >= DEGENERATE_DET)):
        raise SingularInput(f"{what} has det <= {DEGENERATE_DET:g}")
    return det


def polar_decompose(f):
    """Split ``f = r s`` into a proper rotation and a symmetric positive-definite stretch."""
    f = as_tensor(f)
    _check_det(f, "deformation gradient")
    u, sigma, v = svd3(f)
    r = u @ v.transpose(-1, -2)
    s = sym(v @ (sigma[..., :, None] * v.transpose(-1, -2)))
    return r, s


def diag_log(sigma):
    sigma = as_tensor(sigma)
    if not bool(torch.all(sigma > 0)):
        raise NonPositiveSingularValue("log of a non-positive singular value")
    return torch.log(sigma)


def diag_exp(sigma):
    return torch.exp(as_tensor(sigma))


class _IsotropicMap(torch.autograd.Function):
    """``U diag(z(sigma, *params)) V^T`` with a gradient that survives repeated singular values.

    With ``X = U^T dF V``, the off-diagonal part of ``U^T dG V`` is
    ``sym(X) * (z_i - z_j)/(s_i - s_j) + skew(X) * (z_i + z_j)/(s_i + s_j)``
    and the diagonal is ``dz/dsigma @ diag(X)``. Near-equal singular values
    switch the first quotient to its limit ``dz_i/ds_i - dz_i/ds_j``.
    """

    @staticmethod
    def forward(ctx, f, u, sigma, v, zfn, *params):
        derivatives = getattr(zfn, "derivatives", None)
        if derivatives is not None:
            shaped = [p.reshape(-1, 1) if p.dim() else p for p in params]
            z, jac, dz_dp = derivatives(sigma, *shaped)
            ctx.analytic = (sigma, z, jac, dz_dp, [p.shape for p in params])
            ctx.save_for_backward(u, v)
            return u @ (z[..., :, None] * v.transpose(-1, -2))
        ctx.analytic = None
        with torch.enable_grad():
            s_leaf = sigma.detach().requires_grad_(True)
            need = ctx.needs_input_grad[5:]
            leaves = [p.detach().requires_grad_(bool(n)) for p, n in zip(params, need)]
            shaped = [p.reshape(-1, 1) if p.dim() else p for p in leaves]
            z = zfn(s_leaf, *shaped)
        ctx.graph = (s_leaf, leaves, z)
        ctx.save_for_backward(u, v)
        return u @ (z.detach()[..., :, None] * v.transpose(-1, -2))

    @staticmethod
    def backward(ctx, grad):
        u, v = ctx.saved_tensors
        y = u.transpose(-1, -2) @ grad @ v
        diag_y = torch.diagonal(y, dim1=-2, dim2=-1)
        if ctx.analytic is not None:
            sig, zd, jac, dz_dp, shapes = ctx.analytic
            need = ctx.needs_input_grad[5:]
            param_grads = [_reduce_to((diag_y * d).sum(-1), shape) if n else None
                           for d, shape, n in zip(dz_dp, shapes, need)]
            grad_f = _assemble_grad(u, v, y, sig, zd, jac)
            return (grad_f, None, None, None, None, *param_grads)
        s_leaf, leaves, z = ctx.graph
        wanted = [p for p in leaves if p.requires_grad]
        if z.requires_grad:
            rows = []
            for k in range(3):
                cot = torch.zeros_like(z)
                cot[..., k] = 1.0
                g = torch.autograd.grad(z, s_leaf, cot, retain_graph=True, allow_unused=True)[0]
                rows.append(torch.zeros_like(z) if g is None else g)
            jac = torch.stack(rows, -2)
            grads = torch.autograd.grad(z, wanted, diag_y, retain_graph=True, allow_unused=True) if wanted else []
        else:
            grads = [None] * len(wanted)
            jac = torch.zeros(*z.shape, 3, dtype=z.dtype)
        grads = [torch.zeros_like(w) if g is None else g for g, w in zip(grads, wanted)]
        grad_f = _assemble_grad(u, v, y, s_leaf.detach(), z.detach(), jac)
        param_grads = []
        it = iter(grads)
        for p in leaves:
            param_grads.append(next(it) if p.requires_grad else None)
        return (grad_f, None, None, None, None, *param_grads)


def _reduce_to(g, shape):
    return g.sum().reshape(shape) if len(shape) == 0 else g.reshape(shape)


def _assemble_grad(u, v, y, sig, zd, jac):
    """``U M V^T`` with the off-diagonal quotients and the diagonal ``jac^T diag(y)``."""
    diag_y = torch.diagonal(y, dim1=-2, dim2=-1)
    diag_grad = (diag_y[..., :, None] * jac).sum(-2)
    si, sj = sig[..., :, None], sig[..., None, :]
    zi, zj = zd[..., :, None], zd[..., None, :]
    gap = si - sj
    scale = sig.abs().amax(-1, keepdim=True)[..., None].clamp_min(1e-300)
    close = gap.abs() <= _GAP_TOL * scale
    limit = torch.diagonal(jac, dim1=-2, dim2=-1)[..., :, None] - jac
    diff_q = torch.where(close, limit, (zi - zj) / torch.where(close, torch.ones_like(gap), gap))
    tot = si + sj
    tot = torch.where(tot.abs() < 1e-300, torch.full_like(tot, 1e-300), tot)
    sum_q = (zi + zj) / tot
    y_sym = 0.5 * (y + y.transpose(-1, -2))
    y_skw = 0.5 * (y - y.transpose(-1, -2))
    m = diff_q * y_sym + sum_q * y_skw
    off = 1.0 - torch.eye(3, dtype=m.dtype)
    m = m * off + torch.diag_embed(diag_grad)
    return u @ m @ v.transpose(-1, -2)


def isotropic_map(f, zfn, params=(), usv=None):
    """Evaluate ``U diag(zfn(sigma, *params)) V^T`` for a batch of matrices.

    ``zfn`` receives ``sigma`` of shape ``(N, 3)`` and each tensor parameter
    reshaped to ``(N, 1)``; it must be permutation-equivariant in ``sigma``.
    A precomputed ``usv = svd3(f)`` may be passed to share one SVD.
    """
    f = as_tensor(f)
    batch = f.shape[:-2]
    flat = f.reshape(-1, 3, 3)
    if usv is None:
        usv = svd3(flat)
    u, s, v = (t.reshape(-1, *t.shape[len(batch):]) for t in usv)
    params = tuple(as_tensor(p).reshape(-1) if as_tensor(p).dim() else as_tensor(p) for p in params)
    if torch.is_grad_enabled() and (flat.requires_grad or any(p.requires_grad for p in params)):
        out = _IsotropicMap.apply(flat, u, s, v, zfn, *params)
    else:
        z = zfn(s, *(p.reshape(-1, 1) if p.dim() else p for p in params))
        out = u @ (z[..., :, None] * v.transpose(-1, -2))
    return out.reshape(*batch, 3, 3)


def _ones(sigma):
    return torch.ones_like(sigma)


_ones.derivatives = lambda sigma: (torch.ones_like(sigma), torch.zeros(*sigma.shape, 3, dtype=sigma.dtype), [])


def rotation_part(f, usv=None):
    """Differentiable polar rotation ``U V^T`` (no singularity checks)."""
    return isotropic_map(f, _ones, (), usv)
