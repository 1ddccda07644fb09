import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mpmzoo import tensor_math as tm
from mpmzoo.errors import NonPositiveSingularValue, SingularInput

from .oracles import jacobi_svd, random_matrices, rotation_z

I3 = torch.eye(3, dtype=torch.float64)


def test_svd_identity():
    u, s, v = tm.svd3(I3)
    assert torch.equal(s, torch.ones(3, dtype=torch.float64))
    assert torch.allclose(u, I3) and torch.allclose(v, I3)


def test_svd_diagonal():
    u, s, v = tm.svd3(torch.diag(tm.as_tensor([2.0, 1.0, 1.0])))
    assert torch.allclose(s, tm.as_tensor([2.0, 1.0, 1.0]), atol=1e-15)
    assert torch.allclose(u, I3) and torch.allclose(v, I3)


def test_svd_reflection_matches_oracle():
    m = torch.diag(tm.as_tensor([-1.0, 1.0, 1.0]))
    u, s, v = tm.svd3(m)
    assert abs(float(tm.det3(u)) - 1) < 1e-12 and abs(float(tm.det3(v)) - 1) < 1e-12
    rec = u @ torch.diag(s) @ v.T
    assert float((rec - m).norm() / m.norm()) < 1e-7
    _, s_ref, _ = jacobi_svd(m.numpy())
    assert np.allclose(np.abs(s.numpy()), s_ref, atol=1e-12)
    assert float(s[2]) < 0


def test_svd_random_reconstruction_and_signs():
    m = torch.from_numpy(random_matrices(10_000, seed=1))
    u, s, v = tm.svd3(m)
    rec = u @ (s[..., None] * v.transpose(-1, -2))
    err = (rec - m).flatten(1).norm(dim=1) / m.flatten(1).norm(dim=1)
    assert float(err.max()) <= 1e-6
    assert float((tm.det3(u) - 1).abs().max()) <= 1e-8
    assert float((tm.det3(v) - 1).abs().max()) <= 1e-8
    assert bool((s[:, 0].abs() >= s[:, 1].abs()).all() and (s[:, 1].abs() >= s[:, 2].abs()).all())


def test_svd_agrees_with_jacobi_oracle():
    m = random_matrices(500, seed=2)
    _, s, _ = tm.svd3(torch.from_numpy(m))
    for i in range(len(m)):
        _, ref, _ = jacobi_svd(m[i])
        assert np.allclose(np.abs(s[i].numpy()), ref, rtol=1e-6, atol=1e-9)


def test_polar_examples():
    r, s = tm.polar_decompose(I3)
    assert torch.allclose(r, I3) and torch.allclose(s, I3)
    rz = rotation_z(math.radians(30))
    r, s = tm.polar_decompose(rz)
    assert torch.allclose(r, rz, atol=1e-12) and torch.allclose(s, I3, atol=1e-12)
    d = torch.diag(tm.as_tensor([1.1, 1.0, 1.0]))
    r, s = tm.polar_decompose(d)
    assert torch.allclose(r, I3, atol=1e-12) and torch.allclose(s, d, atol=1e-12)


def test_polar_random():
    m = torch.from_numpy(random_matrices(10_000, seed=3, positive=True))
    r, s = tm.polar_decompose(m)
    err = (r @ s - m).flatten(1).norm(dim=1) / m.flatten(1).norm(dim=1)
    assert float(err.max()) <= 1e-6
    orth = (r.transpose(-1, -2) @ r - I3).flatten(1).norm(dim=1)
    assert float(orth.max()) <= 1e-8
    assert float((tm.det3(r) - 1).abs().max()) <= 1e-8
    assert torch.equal(s, s.transpose(-1, -2))
    assert bool((torch.linalg.eigvalsh(s) > 0).all())


def test_polar_rejects_singular():
    with pytest.raises(SingularInput):
        tm.polar_decompose(torch.diag(tm.as_tensor([1.0, 1.0, 0.0])))
    with pytest.raises(SingularInput):
        tm.polar_decompose(torch.diag(tm.as_tensor([-1.0, 1.0, 1.0])))


def test_diag_log_exp():
    assert torch.equal(tm.diag_log([1.0, 1.0, 1.0]), torch.zeros(3, dtype=torch.float64))
    assert torch.allclose(tm.diag_log([math.e, 1.0, 1.0]), tm.as_tensor([1.0, 0.0, 0.0]), atol=1e-15)
    x = tm.as_tensor([1.2, 0.9, 1.05])
    assert float((tm.diag_exp(tm.diag_log(x)) - x).abs().max()) <= 1e-12
    with pytest.raises(NonPositiveSingularValue):
        tm.diag_log([1.0, 0.0, 1.0])


def test_cofactor_and_det():
    m = torch.from_numpy(random_matrices(200, seed=4))
    assert torch.allclose(tm.det3(m), torch.linalg.det(m), atol=1e-12)
    ref = torch.linalg.det(m)[:, None, None] * torch.linalg.inv(m).transpose(-1, -2)
    assert torch.allclose(tm.cofactor(m), ref, atol=1e-10)


def _z_power(s, a):
    return s ** a


@pytest.mark.parametrize("f", [
    I3.clone(),
    torch.diag(tm.as_tensor([1.3, 1.3, 0.8])),
    torch.diag(tm.as_tensor([1.2, 0.9, 1.05])) @ rotation_z(0.4),
])
def test_isotropic_map_gradcheck(f):
    f = f.clone().requires_grad_()
    a = tm.as_tensor([1.7]).requires_grad_()
    assert torch.autograd.gradcheck(lambda x, p: tm.isotropic_map(x[None], _z_power, (p,))[0], (f, a))


def test_rotation_part_gradcheck_repeated_singular_values():
    f = (torch.diag(tm.as_tensor([1.1, 1.1, 1.1])) @ rotation_z(0.3)).requires_grad_()
    assert torch.autograd.gradcheck(tm.rotation_part, (f,))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=9, max_size=9))
def test_svd_property(vals):
    m = tm.as_tensor(vals).reshape(3, 3)
    u, s, v = tm.svd3(m)
    assert torch.isfinite(u).all() and torch.isfinite(s).all() and torch.isfinite(v).all()
    scale = max(float(m.norm()), 1e-300)
    assert float((u @ torch.diag(s) @ v.T - m).norm()) <= 1e-7 * scale + 1e-300
    assert abs(float(tm.det3(u)) - 1) <= 1e-8 and abs(float(tm.det3(v)) - 1) <= 1e-8
