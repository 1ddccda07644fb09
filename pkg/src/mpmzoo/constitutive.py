"""Hyperelastic stress laws, plasticity return maps and the per-particle material field.

Stress functions return the first Piola-Kirchhoff stress ``P``; the solver
consumes the Kirchhoff stress ``P F^T``. Return maps take the trial
deformation gradient and return the corrected one.
"""

import math
from dataclasses import dataclass, field
from enum import IntEnum

import torch

from . import tensor_math as tm
from .errors import (
    DegenerateJacobian,
    InvalidPoissonRatio,
    NonPositiveSingularValue,
    ValidationError,
)

J_MIN = 0.05
_FLOW_EPS = 1e-12
_LOG_FLOOR = 1e-12


class ElasticModel(IntEnum):
    FIXED_COROTATED = 0
    NEO_HOOKEAN = 1
    STVK = 2


class PlasticModel(IntEnum):
    IDENTITY = 0
    DRUCKER_PRAGER = 1
    VON_MISES = 2
    FLUID = 3


def model_from_name(enum, name):
    if isinstance(name, enum):
        return name
    if isinstance(name, int):
        return enum(name)
    key = str(name).strip().upper().replace("-", "_").replace(" ", "_")
    aliases = {"FCR": "FIXED_COROTATED", "NEOHOOKEAN": "NEO_HOOKEAN", "ST_VK": "STVK",
               "DP": "DRUCKER_PRAGER", "SAND": "DRUCKER_PRAGER", "VM": "VON_MISES"}
    key = aliases.get(key, key)
    try:
        return enum[key]
    except KeyError:
        choices = ", ".join(m.name.lower() for m in enum)
        raise ValidationError(f"unknown {enum.__name__} '{name}' (choose from {choices})") from None


def lame_from_young_poisson(E, nu):
    """Shear modulus and Lame's first parameter from Young's modulus and Poisson's ratio."""
    if isinstance(E, torch.Tensor) or isinstance(nu, torch.Tensor):
        E_t, nu_t = tm.as_tensor(E), tm.as_tensor(nu)
        if not bool(torch.all(E_t > 0)):
            raise ValidationError("Young's modulus must be positive")
        if not bool(torch.all((nu_t >= 0) & (nu_t < 0.5))):
            raise InvalidPoissonRatio("Poisson's ratio must lie in [0, 0.5)")
        return _lame(E_t, nu_t)
    if not E > 0:
        raise ValidationError(f"Young's modulus must be positive, got {E}")
    if not 0 <= nu < 0.5:
        raise InvalidPoissonRatio(f"Poisson's ratio must lie in [0, 0.5), got {nu}")
    return _lame(E, nu)


def _lame(E, nu):
    return E / (2 * (1 + nu)), E * nu / ((1 + nu) * (1 - 2 * nu))


def drucker_prager_alpha(friction_angle):
    """Cone slope from a friction angle in degrees."""
    if isinstance(friction_angle, torch.Tensor):
        s = torch.sin(friction_angle * (math.pi / 180.0))
    else:
        s = math.sin(math.radians(friction_angle))
    return math.sqrt(2.0 / 3.0) * 2.0 * s / (3.0 - s)


@dataclass(frozen=True)
class PhysicalParams:
    E: float = 1e5
    nu: float = 0.3
    friction_angle: float = 30.0
    yield_stress: float = 1e3
    mu: float = field(init=False)
    lam: float = field(init=False)

    def __post_init__(self):
        mu, lam = lame_from_young_poisson(self.E, self.nu)
        if not 0 <= self.friction_angle < 90:
            raise ValidationError(f"friction_angle must lie in [0, 90) degrees, got {self.friction_angle}")
        if not self.yield_stress > 0:
            raise ValidationError(f"yield_stress must be positive, got {self.yield_stress}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "lam", lam)


@dataclass(frozen=True)
class MaterialSpec:
    elastic: ElasticModel = ElasticModel.FIXED_COROTATED
    plastic: PlasticModel = PlasticModel.IDENTITY
    params: PhysicalParams = field(default_factory=PhysicalParams)

    def __post_init__(self):
        object.__setattr__(self, "elastic", model_from_name(ElasticModel, self.elastic))
        object.__setattr__(self, "plastic", model_from_name(PlasticModel, self.plastic))


def _bcast(x):
    x = tm.as_tensor(x)
    return x[..., None, None] if x.dim() else x


# -- stress laws --------------------------------------------------------------

def _fixed_corotated(f, mu, lam, usv=None):
    r = tm.rotation_part(f, usv)
    j = tm.det3(f)
    return 2 * _bcast(mu) * (f - r) + _bcast(lam * (j - 1)) * tm.cofactor(f)


def _neo_hookean(f, mu, lam, clamp=True):
    j = tm.det3(f)
    finv_t = tm.cofactor(f) / j[..., None, None]
    log_j = torch.log(j.clamp_min(J_MIN)) if clamp else torch.log(j)
    return _bcast(mu) * (f - finv_t) + _bcast(lam * log_j) * finv_t


def _z_stvk(s, mu, lam):
    eps = torch.log(s.clamp_min(_LOG_FLOOR))
    return (2 * mu * eps + lam * eps.sum(-1, keepdim=True)) / s


def _d_stvk(s, mu, lam):
    """``z``, ``dz/ds`` and ``dz/d(mu, lam)`` of :func:`_z_stvk`."""
    eps = torch.log(s.clamp_min(_LOG_FLOOR))
    tr = eps.sum(-1, keepdim=True)
    z = (2 * mu * eps + lam * tr) / s
    lam_ = lam[..., None] if torch.is_tensor(lam) and lam.dim() else lam
    jac = lam_ / (s[..., :, None] * s[..., None, :]) + torch.diag_embed((2 * mu / s - z) / s)
    return z, jac, [2 * eps / s, tr / s]


_z_stvk.derivatives = _d_stvk


def _stvk(f, mu, lam, usv=None):
    return tm.isotropic_map(f, _z_stvk, (mu, lam), usv)


def fixed_corotated_piola(f, params):
    f = tm.as_tensor(f)
    tm._check_det(f, "deformation gradient")
    return _fixed_corotated(f, params.mu, params.lam)


def neo_hookean_piola(f, params):
    f = tm.as_tensor(f)
    if not bool(torch.all(tm.det3(f) > J_MIN)):
        raise DegenerateJacobian(f"det(F) <= J_min = {J_MIN}")
    return _neo_hookean(f, params.mu, params.lam, clamp=False)


def stvk_piola(f, params):
    f = tm.as_tensor(f)
    usv = tm.svd3(f)
    if not bool(torch.all(usv[1] > 0)):
        raise NonPositiveSingularValue("StVK needs positive singular values")
    return _stvk(f, params.mu, params.lam, usv)


def cauchy_from_piola(f, p):
    f = tm.as_tensor(f)
    j = tm._check_det(f, "deformation gradient")
    return tm.as_tensor(p) @ f.transpose(-1, -2) / j[..., None, None]


# -- return maps ----------------------------------------------------------------

def _deviatoric_log_strain(s):
    eps = torch.log(s.clamp_min(_LOG_FLOOR))
    tr = eps.sum(-1, keepdim=True)
    eps_hat = eps - tr / 3
    norm = torch.linalg.vector_norm(eps_hat, dim=-1, keepdim=True)
    flows = norm > _FLOW_EPS
    direction = eps_hat / torch.where(flows, norm, torch.ones_like(norm))
    return eps, tr, norm, torch.where(flows, direction, torch.zeros_like(direction))


def _z_drucker_prager(s, mu, lam, alpha):
    eps, tr, norm, direction = _deviatoric_log_strain(s)
    dgamma = norm + alpha * (3 * lam + 2 * mu) / (2 * mu) * tr
    projected = torch.exp(eps - dgamma * direction)
    z = torch.where(dgamma <= 0, s, projected)
    return torch.where(tr > 0, torch.ones_like(s), z)


def _z_von_mises(s, mu, yield_stress):
    eps, _, norm, direction = _deviatoric_log_strain(s)
    dgamma = norm - yield_stress / (2 * mu)
    return torch.where(dgamma <= 0, s, torch.exp(eps - dgamma * direction))


def _projection_jacobian(s, z, direction, norm, coef, flows):
    """``dz/ds`` for ``log z = tr/3 + coef * d`` where ``d`` is the unit deviatoric log strain."""
    eye = torch.eye(3, dtype=s.dtype)
    proj = eye - 1.0 / 3.0
    safe = torch.where(flows, norm, torch.ones_like(norm))[..., None]
    dd = (proj - direction[..., :, None] * direction[..., None, :]) / safe
    return z[..., :, None] * dd * coef[..., None] / s[..., None, :], z[..., :, None] / (3 * s[..., None, :])


def _d_von_mises(s, mu, yield_stress):
    """``z``, ``dz/ds`` and ``dz/d(mu, yield_stress)`` of :func:`_z_von_mises`."""
    eps, _, norm, direction = _deviatoric_log_strain(s)
    k = yield_stress / (2 * mu) * torch.ones_like(norm)
    dgamma = norm - k
    flows = norm > _FLOW_EPS
    plastic = (dgamma > 0) & flows
    z = torch.where(dgamma <= 0, s, torch.exp(eps - dgamma * direction))
    dev, vol = _projection_jacobian(s, z, direction, norm, k, flows)
    eye = torch.eye(3, dtype=s.dtype).expand_as(dev)
    jac = torch.where(plastic[..., None], dev + vol, eye)
    dz_dk = torch.where(plastic, z * direction, torch.zeros_like(z))
    return z, jac, [-dz_dk * k / mu, dz_dk / (2 * mu)]


_z_von_mises.derivatives = _d_von_mises


def _d_drucker_prager(s, mu, lam, alpha):
    """``z``, ``dz/ds`` and ``dz/d(mu, lam, alpha)`` of :func:`_z_drucker_prager`."""
    eps, tr, norm, direction = _deviatoric_log_strain(s)
    c = alpha * (3 * lam + 2 * mu) / (2 * mu) * torch.ones_like(norm)
    dgamma = norm + c * tr
    flows = norm > _FLOW_EPS
    expand = tr > 0
    plastic = (dgamma > 0) & flows & ~expand
    z = torch.where(expand, torch.ones_like(s), torch.where(dgamma <= 0, s, torch.exp(eps - dgamma * direction)))
    dev, vol = _projection_jacobian(s, z, direction, norm, -c * tr, flows)
    # the coefficient -c * tr also depends on s through tr
    jac_plastic = dev + vol - c[..., None] * z[..., :, None] * direction[..., :, None] / s[..., None, :]
    eye = torch.eye(3, dtype=s.dtype).expand_as(dev)
    jac = torch.where(plastic[..., None], jac_plastic, torch.where(expand[..., None], torch.zeros_like(dev), eye))
    dz_dc = torch.where(plastic, -z * tr * direction, torch.zeros_like(z))
    return z, jac, [dz_dc * (-3 * alpha * lam / (2 * mu * mu)), dz_dc * (3 * alpha / (2 * mu)),
                    dz_dc * ((3 * lam + 2 * mu) / (2 * mu))]


_z_drucker_prager.derivatives = _d_drucker_prager


def _drucker_prager(f, mu, lam, friction_angle, usv=None):
    alpha = drucker_prager_alpha(tm.as_tensor(friction_angle))
    return tm.isotropic_map(f, _z_drucker_prager, (mu, lam, alpha), usv)


def _von_mises(f, mu, yield_stress, usv=None):
    return tm.isotropic_map(f, _z_von_mises, (mu, yield_stress), usv)


def _fluid(f):
    j = tm.det3(f)
    return torch.sign(j)[..., None, None] * j.abs().pow(1.0 / 3.0)[..., None, None] * tm.eye_like(f)


def return_identity(f_trial):
    return f_trial


def return_drucker_prager(f_trial, params):
    f_trial = tm.as_tensor(f_trial)
    tm._check_det(f_trial, "trial deformation gradient")
    return _drucker_prager(f_trial, params.mu, params.lam, params.friction_angle)


def return_von_mises(f_trial, params):
    f_trial = tm.as_tensor(f_trial)
    tm._check_det(f_trial, "trial deformation gradient")
    return _von_mises(f_trial, params.mu, params.yield_stress)


def return_fluid(f_trial):
    f_trial = tm.as_tensor(f_trial)
    tm._check_det(f_trial, "trial deformation gradient")
    return _fluid(f_trial)


# -- per-particle field ---------------------------------------------------------

@dataclass
class MaterialField:
    """Per-particle expert weights and physical parameters.

    Weights are one-hot for fixed materials. When they carry gradients
    (straight-through selection) every expert is evaluated and mixed; the
    forward value is still that of the selected expert.
    """

    elastic_weights: torch.Tensor
    plastic_weights: torch.Tensor
    E: torch.Tensor
    nu: torch.Tensor
    friction_angle: torch.Tensor
    yield_stress: torch.Tensor

    @property
    def mu(self):
        return self.E / (2 * (1 + self.nu))

    @property
    def lam(self):
        return self.E * self.nu / ((1 + self.nu) * (1 - 2 * self.nu))

    def __len__(self):
        return self.E.shape[0]

    @classmethod
    def from_specs(cls, specs, index):
        """Expand a list of :class:`MaterialSpec` through a per-particle index."""
        index = torch.as_tensor(index, dtype=torch.long)
        el = torch.tensor([int(s.elastic) for s in specs], dtype=torch.long)
        pl = torch.tensor([int(s.plastic) for s in specs], dtype=torch.long)

        def col(name):
            return tm.as_tensor([getattr(s.params, name) for s in specs])[index]

        return cls(
            elastic_weights=torch.nn.functional.one_hot(el[index], len(ElasticModel)).to(tm.DTYPE),
            plastic_weights=torch.nn.functional.one_hot(pl[index], len(PlasticModel)).to(tm.DTYPE),
            E=col("E"), nu=col("nu"),
            friction_angle=col("friction_angle"), yield_stress=col("yield_stress"),
        )

    def elastic_ids(self):
        return self.elastic_weights.detach().argmax(-1)

    def plastic_ids(self):
        return self.plastic_weights.detach().argmax(-1)


def _mixed(weights):
    return torch.is_grad_enabled() and weights.requires_grad


def _assemble(weights, evaluate, like):
    """Sum ``w_j * expert_j`` over experts, restricted to particles that use them."""
    if _mixed(weights):
        return sum(weights[:, j, None, None] * evaluate(j, slice(None)) for j in range(weights.shape[1]))
    out = torch.zeros_like(like)
    for j in range(weights.shape[1]):
        mask = weights[:, j] != 0
        if not bool(mask.any()):
            continue
        if bool(mask.all()):
            out = out + weights[:, j, None, None] * evaluate(j, slice(None))
            continue
        idx = mask.nonzero().squeeze(-1)
        out = out.index_add(0, idx, weights[idx, j, None, None] * evaluate(j, idx))
    return out


def _uses_svd(weights, ids):
    if _mixed(weights):
        return True
    return bool((weights[:, list(ids)] != 0).any())


def piola_stress(F, field):
    """First Piola-Kirchhoff stress of every particle under its elastic expert."""
    w = field.elastic_weights
    mu, lam = field.mu, field.lam
    usv = tm.svd3(F) if _uses_svd(w, (ElasticModel.FIXED_COROTATED, ElasticModel.STVK)) else None

    def evaluate(j, sel):
        sub = None if usv is None else tuple(t[sel] for t in usv)
        if j == ElasticModel.FIXED_COROTATED:
            return _fixed_corotated(F[sel], mu[sel], lam[sel], sub)
        if j == ElasticModel.NEO_HOOKEAN:
            return _neo_hookean(F[sel], mu[sel], lam[sel], clamp=True)
        return _stvk(F[sel], mu[sel], lam[sel], sub)

    return _assemble(w, evaluate, F)


def kirchhoff_stress(F, field):
    return piola_stress(F, field) @ F.transpose(-1, -2)


def plastic_return(F_trial, field):
    """Apply each particle's return map to its trial deformation gradient."""
    w = field.plastic_weights
    usv = tm.svd3(F_trial) if _uses_svd(w, (PlasticModel.DRUCKER_PRAGER, PlasticModel.VON_MISES)) else None

    def evaluate(j, sel):
        sub = None if usv is None else tuple(t[sel] for t in usv)
        if j == PlasticModel.IDENTITY:
            return F_trial[sel]
        if j == PlasticModel.DRUCKER_PRAGER:
            return _drucker_prager(F_trial[sel], field.mu[sel], field.lam[sel], field.friction_angle[sel], sub)
        if j == PlasticModel.VON_MISES:
            return _von_mises(F_trial[sel], field.mu[sel], field.yield_stress[sel], sub)
        return _fluid(F_trial[sel])

    return _assemble(w, evaluate, F_trial)
