import numpy as np
import pytest

import gradcheck
from pdaf.dcm import AffineParams, init_projection, modulate, project_affine
from pdaf.errors import ContractError
from pdaf.tensor import RngStream, Tensor, mul, sum_all


def test_zero_init_is_identity():
    p = init_projection(4, 8)
    z = Tensor(RngStream(0).normal((2, 4, 3, 3)))
    aff = project_affine(p, z)
    assert np.all(aff.gamma.data == 1.0) and not aff.beta.data.any()
    h = Tensor(RngStream(1).normal((2, 8, 3, 3)))
    assert modulate(h, aff).data.tobytes() == h.data.tobytes()


def test_zero_latent_passes_only_bias():
    p = init_projection(2, 3)
    p["gamma.w"].data[...] = 5.0
    p["gamma.b"].data[...] = [0.1, 0.2, 0.3]
    p["beta.b"].data[...] = [-1.0, 0.0, 1.0]
    aff = project_affine(p, Tensor(np.zeros((1, 2, 2, 2))))
    np.testing.assert_array_equal(aff.gamma.data[0, :, 0, 0], [1.1, 1.2, 1.3])
    np.testing.assert_array_equal(aff.beta.data[0, :, 1, 1], [-1.0, 0.0, 1.0])


def test_modulate_arithmetic():
    aff = AffineParams(Tensor([[[[2.0]]]]), Tensor([[[[1.0]]]]))
    assert modulate(Tensor([[[[0.5]]]]), aff).item() == 2.0


def test_modulate_inverse_and_linearity():
    r = np.random.default_rng(0)
    h1, h2 = r.normal(size=(1, 3, 2, 2)), r.normal(size=(1, 3, 2, 2))
    g = r.uniform(0.5, 2.0, size=h1.shape) * r.choice([-1, 1], size=h1.shape)
    b = r.normal(size=h1.shape)
    fwd = modulate(Tensor(h1), AffineParams(Tensor(g), Tensor(b)))
    back = modulate(fwd, AffineParams(Tensor(1 / g), Tensor(-b / g)))
    np.testing.assert_allclose(back.data, h1, atol=1e-9)
    a, c = 0.7, -1.3
    lhs = modulate(Tensor(a * h1 + c * h2), AffineParams(Tensor(g), Tensor(b))).data
    rhs = (a * modulate(Tensor(h1), AffineParams(Tensor(g), Tensor(b))).data
           + c * modulate(Tensor(h2), AffineParams(Tensor(g), Tensor(b))).data - (a + c - 1) * b)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_contract_errors():
    p = init_projection(4, 8)
    with pytest.raises(ContractError):
        project_affine(p, Tensor(np.zeros((1, 3, 2, 2))))
    aff = project_affine(p, Tensor(np.zeros((1, 4, 2, 2))))
    with pytest.raises(ContractError):
        modulate(Tensor(np.zeros((1, 8, 3, 3))), aff)


def test_gamma_conv_gradient():
    p = init_projection(3, 4)
    r = RngStream(2)
    for t in p.values():
        t.data[...] = r.normal(t.shape) * 0.5
    z, h, w = (Tensor(r.normal(s)) for s in ((2, 3, 2, 2), (2, 4, 2, 2), (2, 4, 2, 2)))
    build = lambda: sum_all(mul(modulate(h, project_affine(p, z)), w))
    errs = gradcheck.check(build, {"gamma.w": p["gamma.w"], "gamma.b": p["gamma.b"]})
    assert max(errs.values()) < 1e-3
