import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transformesh import autodiff as ad
from transformesh.autodiff import Adam, Parameter, Tensor
from transformesh.errors import NonScalarError, ParseError, ShapeError
from transformesh.gradcheck import OP_TOLERANCE, op_checks


@pytest.mark.parametrize("check", op_checks(seed=3), ids=lambda c: c.name)
def test_op_finite_differences(check):
    assert check.error < OP_TOLERANCE


def test_gelu_zero_and_softmax_uniform():
    assert ad.gelu(np.zeros(3)).data.tolist() == [0.0, 0.0, 0.0]
    assert np.allclose(ad.softmax(np.zeros(3)).data, 1 / 3)


def test_masked_softmax_gives_zero_weight():
    p = ad.softmax(np.array([1.0, -np.inf, 2.0])).data
    assert p[1] == 0.0 and p.sum() == pytest.approx(1.0)


def test_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(np.ones((2, 3)), np.ones((4, 5)))
    with pytest.raises(ShapeError):
        ad.add(np.ones((2, 3)), np.ones((2,)))  # trailing broadcast is not allowed


def test_backward_simple_grads():
    p = Parameter(np.array([1.0, -2.0, 3.0]))
    ad.backward(ad.tsum(p))
    assert p.grad.tolist() == [1.0, 1.0, 1.0]
    p.grad = None
    ad.backward(ad.tsum(p * p))
    assert np.array_equal(p.grad, 2 * p.data)


def test_backward_accumulates():
    p = Parameter(np.array([1.0, 2.0]))
    ad.backward(ad.tsum(p))
    ad.backward(ad.tsum(p))
    assert p.grad.tolist() == [2.0, 2.0]


def test_shared_subexpression():
    p = Parameter(np.array([3.0]))
    y = p * p
    ad.backward(ad.tsum(y + y))  # d/dp 2p^2 = 4p
    assert p.grad.tolist() == [12.0]


def test_non_scalar_backward():
    with pytest.raises(NonScalarError):
        ad.backward(Parameter(np.ones(3)) * 2.0)


def test_no_grad_records_nothing():
    p = Parameter(np.ones(2))
    with ad.no_grad():
        y = p * 3.0
    assert y._backward is None and not y.requires_grad


def test_gather_filler_rows_are_zero_and_get_no_gradient():
    x = Parameter(np.arange(12.0).reshape(4, 3))
    out = ad.gather_rows(x, np.array([[0, -1], [-1, -1]]))
    assert np.array_equal(out.data[0, 1], np.zeros(3)) and not out.data[1].any()
    ad.backward(ad.tsum(out))
    assert x.grad[0].tolist() == [1.0, 1.0, 1.0]
    assert not x.grad[1:].any()


def test_gather_index_out_of_range():
    with pytest.raises(ShapeError):
        ad.gather_rows(np.ones((3, 2)), np.array([[0, 3]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(2, 9), st.floats(-1e3, 1e3), st.floats(1e-2, 1e3))
def test_layer_norm_statistics(rows, cols, shift, spread):
    z = np.random.default_rng(rows * cols).normal(size=(rows, cols))
    z = (z - z.mean(axis=-1, keepdims=True)) / z.std(axis=-1, keepdims=True)
    x = shift + spread * z  # row std exactly `spread`, far above eps
    y = ad.layer_norm(x, eps=1e-12).data
    assert np.all(np.abs(y.mean(axis=-1)) < 1e-10)
    assert np.all(np.abs(y.var(axis=-1) - 1) < 1e-6)


def test_adam_zero_gradient_keeps_params():
    p = [np.array([1.0, 2.0])]
    new, _ = ad.adam_step(p, [np.zeros(2)], ([np.zeros(2)], [np.zeros(2)]), step=1)
    assert np.array_equal(new[0], p[0])


def test_adam_first_step_magnitude_lr():
    g = np.array([0.3, -5.0, 1e-3])
    new, _ = ad.adam_step([np.zeros(3)], [g], ([np.zeros(3)], [np.zeros(3)]), lr=0.01, eps=1e-12, step=1)
    assert np.allclose(new[0], -0.01 * np.sign(g))


def test_adam_converges_on_quadratic():
    rng = np.random.default_rng(0)
    c = rng.normal(size=5)
    x = Parameter(rng.normal(size=5) * 3)
    opt = Adam([x], lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        d = x - c
        ad.backward(ad.tsum(d * d))
        opt.step()
    assert np.linalg.norm(x.data - c) < 1e-2


def test_adam_rejects_step_zero():
    with pytest.raises(ValueError):
        ad.adam_step([np.zeros(1)], [np.zeros(1)], ([np.zeros(1)], [np.zeros(1)]), step=0)


def test_checkpoint_byte_exact(tmp_path):
    rng = np.random.default_rng(1)
    arrays = [("a/w", rng.normal(size=(3, 4))), ("b", np.array([np.pi, -0.0, 1e-300]))]
    p = tmp_path / "x.ckpt"
    ad.save_checkpoint(p, arrays)
    back = ad.load_checkpoint(p)
    for name, arr in arrays:
        assert back[name].tobytes() == arr.tobytes() and back[name].shape == arr.shape


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ParseError):
        ad.load_checkpoint(p)


def test_relative_error_definition():
    assert ad.relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert ad.relative_error(np.array([1.0, 0]), np.array([0.0, 1])) == pytest.approx(np.sqrt(2))


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        w = Parameter(rng.normal(size=(4, 3)))
        opt = Adam([w], lr=0.01)
        x = rng.normal(size=(5, 4))
        for _ in range(20):
            opt.zero_grad()
            ad.backward(ad.tsum(ad.gelu(ad.matmul(x, w))))
            opt.step()
        return w.data.tobytes()

    assert run() == run()


def test_tensor_operators():
    a = Tensor(np.array([1.0, 2.0]))
    assert np.array_equal((a - 1.0).data, [0.0, 1.0])
    assert np.array_equal((2.0 * a).data, [2.0, 4.0])
    assert a.reshape(2, 1).shape == (2, 1)
