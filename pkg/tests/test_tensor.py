import numpy as np
import pytest

from amdc import tensor as T
from amdc.errors import ContractError, ShapeError


# ----------------------------------------------------------------------
# creation
# ----------------------------------------------------------------------

def test_zeros_and_full():
    assert np.array_equal(T.zeros((2, 2)).data, np.zeros((2, 2)))
    assert np.array_equal(T.full((3,), 1.5).data, np.array([1.5, 1.5, 1.5]))


def test_random_creation_deterministic():
    assert np.array_equal(T.uniform((4,), 7).data, T.uniform((4,), 7).data)
    assert np.array_equal(T.gaussian((4,), 7).data, T.gaussian((4,), 7).data)
    assert not np.array_equal(T.uniform((4,), 7).data, T.uniform((4,), 8).data)


def test_zero_extent_shape_rejected():
    with pytest.raises(ShapeError):
        T.zeros((0, 2))
    with pytest.raises(ShapeError):
        T.full((3, 0), 1.0)


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------

def test_add_and_scale_hand_values():
    assert np.array_equal(T.add(T.tensor([1., 2.]), T.tensor([3., 4.])).data, [4., 6.])
    assert np.array_equal(T.scale(T.tensor([2., 4.]), 0.5).data, [1., 2.])


def test_mul_gradient_is_product_rule():
    a = T.tensor([2.], requires_grad=True)
    b = T.tensor([3.], requires_grad=True)
    with T.Tape():
        out = T.sum_all(T.mul(a, b))
    gm = T.backward(out)
    assert np.array_equal(gm[a].data, [3.])
    assert np.array_equal(gm[b].data, [2.])


def test_no_implicit_broadcasting():
    with pytest.raises(ShapeError):
        T.add(T.zeros((2, 3)), T.zeros((3,)))
    with pytest.raises(ShapeError):
        T.mul(T.zeros((2,)), T.zeros((2, 1)))


# ----------------------------------------------------------------------
# matmul / conv
# ----------------------------------------------------------------------

def test_matmul_hand_values():
    eye = T.tensor(np.eye(2))
    m = T.tensor([[1., 2.], [3., 4.]])
    assert np.array_equal(T.matmul(eye, m).data, m.data)
    assert np.array_equal(T.matmul(T.tensor([[1., 2.]]), T.tensor([[3.], [4.]])).data,
                          [[11.]])


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(T.zeros((2, 3)), T.zeros((2, 3)))
    with pytest.raises(ShapeError):
        T.matmul(T.zeros((2,)), T.zeros((2, 2)))


def test_conv2d_identity_kernel():
    x = T.uniform((1, 3, 3), 0)
    k = T.tensor(np.ones((1, 1, 1, 1)))
    assert np.array_equal(T.conv2d(x, k).data, x.data)


def test_conv2d_all_ones_sums():
    x = T.tensor(np.ones((1, 3, 3)))
    k = T.tensor(np.ones((1, 1, 3, 3)))
    assert np.array_equal(T.conv2d(x, k).data, [[[9.]]])


def test_conv2d_shape_contract():
    with pytest.raises(ShapeError):                       # even kernel
        T.conv2d(T.zeros((1, 4, 4)), T.zeros((1, 1, 2, 2)))
    with pytest.raises(ShapeError):                       # non-integral output
        T.conv2d(T.zeros((1, 6, 6)), T.zeros((1, 1, 3, 3)), stride=2)


# ----------------------------------------------------------------------
# activations / normalization
# ----------------------------------------------------------------------

def test_sigmoid_softmax_values():
    assert T.sigmoid(T.tensor([0.])).data[0] == 0.5
    s = T.softmax(T.tensor([2., 2., 2.]), 0)
    assert np.allclose(s.data, 1 / 3)


def test_sigmoid_strictly_inside_unit_interval():
    s = T.sigmoid(T.tensor([-1e6, -50., 0., 50., 1e6]))
    assert s.data.min() > 0.0
    assert s.data.max() < 1.0


def test_softmax_sums_to_one():
    for seed in range(3):
        x = T.gaussian((4, 6), seed)
        s = T.softmax(x, 1)
        assert np.all(np.abs(s.data.sum(axis=1) - 1.0) < 1e-12)


def test_layer_norm_hand_values():
    g, b = T.full((2,), 1.0), T.zeros((2,))
    out = T.layer_norm(T.tensor([[1., 3.]]), 1, g, b)
    assert np.allclose(out.data, [[-1., 1.]], atol=1e-4)
    const = T.layer_norm(T.tensor([[5., 5., 5.]]), 1, T.full((3,), 1.0), T.zeros((3,)))
    assert np.allclose(const.data, 0.0)


# ----------------------------------------------------------------------
# remappings / resampling
# ----------------------------------------------------------------------

def test_window_partition_merge_inverse():
    x = T.uniform((3, 8, 8), 1)
    back = T.window_merge(T.window_partition(x, 4), 4, 8, 8)
    assert np.array_equal(back.data, x.data)


def test_window_indivisible_rejected():
    with pytest.raises(ShapeError):
        T.window_partition(T.zeros((1, 6, 6)), 4)


def test_roll_inverse():
    x = T.uniform((2, 5, 7), 2)
    back = T.roll(T.roll(x, axis=2, offset=3), axis=2, offset=-3)
    assert np.array_equal(back.data, x.data)


def test_up_down_inverse_and_hand_value():
    x = T.uniform((2, 4, 4), 3)
    assert np.array_equal(T.downsample(T.upsample(x, 2), 2).data, x.data)
    assert np.array_equal(T.upsample(T.tensor([[[1.]]]), 2).data,
                          np.ones((1, 2, 2)))


def test_downsample_indivisible_rejected():
    with pytest.raises(ShapeError):
        T.downsample(T.zeros((1, 5, 4)), 2)


# ----------------------------------------------------------------------
# backward contract
# ----------------------------------------------------------------------

def test_backward_of_sum_is_ones():
    x = T.tensor([1., 2., 3.], requires_grad=True)
    with T.Tape():
        out = T.sum_all(x)
    gm = T.backward(out)
    assert np.array_equal(gm[x].data, [1., 1., 1.])


def test_backward_of_mse_hand_value():
    x = T.tensor([2.], requires_grad=True)
    with T.Tape():
        diff = T.sub(x, 0.0)
        out = T.mean_all(T.mul(diff, diff))
    gm = T.backward(out)
    assert np.array_equal(gm[x].data, [4.])


def test_backward_requires_scalar_taped_root():
    x = T.tensor([1., 2.], requires_grad=True)
    with T.Tape():
        y = T.mul(x, x)
    with pytest.raises(ContractError):
        T.backward(y)                      # not scalar
    z = T.sum_all(T.tensor([1.0], requires_grad=True))  # no tape active
    with pytest.raises(ContractError):
        T.backward(z)


def test_fanout_accumulates_gradients():
    x = T.tensor([3.], requires_grad=True)
    with T.Tape():
        out = T.sum_all(T.add(T.mul(x, x), T.mul(x, x)))
    gm = T.backward(out)
    assert np.array_equal(gm[x].data, [12.])


# ----------------------------------------------------------------------
# gradient checks: every differentiable op, 3 seeds each
# ----------------------------------------------------------------------

ELEMENTWISE_TOL = 1e-5


def _sq(t):
    return T.sum_all(T.mul(t, t))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_check_elementwise(seed):
    a, b = T.uniform((3, 4), seed), T.uniform((3, 4), seed + 50)
    assert T.grad_check(lambda x, y: _sq(T.add(x, y)), [a, b]) < ELEMENTWISE_TOL
    assert T.grad_check(lambda x, y: _sq(T.sub(x, y)), [a, b]) < ELEMENTWISE_TOL
    assert T.grad_check(lambda x, y: _sq(T.mul(x, y)), [a, b]) < ELEMENTWISE_TOL
    assert T.grad_check(lambda x: _sq(T.scale(x, 1.7)), [a]) < ELEMENTWISE_TOL


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_check_matmul(seed):
    a = T.gaussian((3, 3), seed)
    assert T.grad_check(lambda x: T.sum_all(T.matmul(x, x)), [a]) < 1e-6


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_check_conv2d(seed):
    x = T.uniform((2, 5, 5), seed)
    k = T.gaussian((3, 2, 3, 3), seed + 10)
    assert T.grad_check(lambda a, b: _sq(T.conv2d(a, b, stride=1, pad=1)),
                        [x, k]) < 1e-5
    assert T.grad_check(lambda a, b: _sq(T.conv2d(a, b, stride=2, pad=1)),
                        [x, k]) < 1e-5


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_check_activations(seed):
    x = T.gaussian((3, 4), seed)
    assert T.grad_check(lambda a: _sq(T.sigmoid(a)), [x]) < ELEMENTWISE_TOL
    assert T.grad_check(lambda a: _sq(T.gelu(a)), [x]) < ELEMENTWISE_TOL
    assert T.grad_check(lambda a: _sq(T.softmax(a, 1)), [x]) < ELEMENTWISE_TOL
    # relu checked away from the kink
    xr = T.tensor(T.gaussian((3, 4), seed).data + 0.5)
    assert T.grad_check(lambda a: _sq(T.relu(a)), [xr]) < ELEMENTWISE_TOL


def test_grad_check_gelu_fixed_points():
    x = T.tensor([-2., -0.5, 0., 0.5, 2.])
    assert T.grad_check(lambda a: T.sum_all(T.gelu(a)), [x]) < 1e-6


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_check_layer_norm(seed):
    x = T.uniform((4, 8), seed)
    g = T.tensor(T.uniform((8,), seed + 1).data + 0.5)
    b = T.gaussian((8,), seed + 2)
    assert T.grad_check(lambda a, gg, bb: _sq(T.layer_norm(a, 1, gg, bb)),
                        [x, g, b]) < 1e-5


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_check_remaps_and_resample(seed):
    x = T.uniform((2, 4, 4), seed)
    assert T.grad_check(lambda a: _sq(T.permute(a, (2, 0, 1))), [x]) < 1e-10
    assert T.grad_check(lambda a: _sq(T.reshape(a, (8, 4))), [x]) < 1e-10
    assert T.grad_check(lambda a: _sq(T.roll(a, 1, 2)), [x]) < 1e-10
    assert T.grad_check(lambda a: _sq(T.window_partition(a, 2)), [x]) < 1e-10
    assert T.grad_check(lambda a: _sq(T.upsample(a, 2)), [x]) < 1e-6
    assert T.grad_check(lambda a: _sq(T.downsample(a, 2)), [x]) < 1e-6


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_check_reductions_bias_concat(seed):
    x = T.uniform((3, 4), seed)
    v = T.gaussian((4,), seed + 3)
    y = T.uniform((3, 4), seed + 4)
    assert T.grad_check(lambda a: T.mean_all(T.mul(a, a)), [x]) < 1e-6
    assert T.grad_check(lambda a: _sq(T.sum_axis(a, 1)), [x]) < 1e-6
    assert T.grad_check(lambda a: _sq(T.repeat_axis(a, 3, 0)), [x]) < 1e-6
    assert T.grad_check(lambda a, b: _sq(T.add_vec(a, b, 1)), [x, v]) < 1e-5
    assert T.grad_check(lambda a, b: _sq(T.concat([a, b], 0)), [x, y]) < 1e-5


def test_grad_check_flags_wrong_gradient():
    def broken(x):
        return T.custom_op("broken", x.data * x.data,
                           [(x, lambda g: g * 1.5 * x.data)])
    err = T.grad_check(lambda a: T.sum_all(broken(a)), [T.uniform((3,), 0)])
    assert err > 0.1


def test_grad_check_of_sum_is_exact():
    assert T.grad_check(T.sum_all, [T.uniform((5,), 0)]) == 0.0


# ----------------------------------------------------------------------
# composite determinism
# ----------------------------------------------------------------------

def test_composite_conv_gelu_grad():
    x = T.uniform((1, 4, 4), 5)
    k = T.gaussian((2, 1, 3, 3), 6)
    err = T.grad_check(lambda a, b: T.sum_all(T.gelu(T.conv2d(a, b, pad=1))), [x, k])
    assert err < 1e-5


def test_ops_deterministic_across_runs():
    x = T.uniform((4, 4), 9)
    k = T.gaussian((2, 4), 10)
    r1 = T.matmul(T.tensor(k.data), T.tensor(x.data)).data
    r2 = T.matmul(T.tensor(k.data), T.tensor(x.data)).data
    assert np.array_equal(r1, r2)
