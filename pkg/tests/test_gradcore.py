"""
Testes do motor de autodiff (gradcore)
"""

import numpy as np
import pytest

from modules import gradcore as gc
from modules.gradcore import Tensor


def _leaf(rng, shape, name):
    return Tensor(rng.normal(size=shape), requires_grad=True, name=name)


def test_product_sum_gradient():
    """d/da sum(a*b) = b"""
    rng = np.random.default_rng(1)
    a, b = _leaf(rng, (2, 3), 'a'), _leaf(rng, (2, 3), 'b')
    (a * b).sum().backward()
    np.testing.assert_allclose(a.grad, b.data)
    np.testing.assert_allclose(b.grad, a.data)


def test_gradients_accumulate_until_zeroed():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_allclose(x.grad, [6.0, 6.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(gc.ShapeError):
        (x * 2.0).backward()


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with gc.no_grad():
        y = x * 2.0
        assert not gc.is_grad_enabled()
    assert gc.is_grad_enabled()
    assert y.is_leaf and not y.requires_grad


def test_broadcast_gradient_is_reduced():
    rng = np.random.default_rng(2)
    a = _leaf(rng, (4, 3), 'a')
    bias = _leaf(rng, (3,), 'bias')
    ((a + bias) ** 2).sum().backward()
    assert bias.grad.shape == (3,)
    np.testing.assert_allclose(bias.grad, (2 * (a.data + bias.data)).sum(axis=0))


def test_ndarray_on_the_left():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = np.array([3.0, 4.0]) * x
    assert isinstance(y, Tensor)
    y.sum().backward()
    np.testing.assert_allclose(x.grad, [3.0, 4.0])


@pytest.mark.parametrize("trial", range(100))
def test_elementwise_gradient_check(trial):
    rng = np.random.default_rng(10 + trial)
    a = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)

    def f():
        return (gc.exp(a / b) + gc.log(a) * gc.sqrt(b) - a ** 3).mean()

    report = gc.gradient_check(f, {'a': a, 'b': b})
    assert report.passed(1e-4), report


def test_clip_min_and_relu_mask():
    x = Tensor([-1.0, 0.5, 2.0], requires_grad=True)
    gc.clip_min(x, 1.0).sum().backward()
    np.testing.assert_allclose(x.grad, [0.0, 0.0, 1.0])
    x.zero_grad()
    gc.relu(x).sum().backward()
    np.testing.assert_allclose(x.grad, [0.0, 1.0, 1.0])


def test_take_scatters_repeated_indices():
    x = Tensor(np.arange(4.0), requires_grad=True)
    x[np.array([0, 0, 3])].sum().backward()
    np.testing.assert_allclose(x.grad, [2.0, 0.0, 0.0, 1.0])


def test_concat_splits_gradient():
    rng = np.random.default_rng(3)
    a, b = _leaf(rng, (2, 3), 'a'), _leaf(rng, (1, 3), 'b')
    w = rng.normal(size=(3, 3))
    (gc.concat([a, b], axis=0) * w).sum().backward()
    np.testing.assert_allclose(a.grad, w[:2])
    np.testing.assert_allclose(b.grad, w[2:])


@pytest.mark.parametrize("padding,stride", [(0, 1), (1, 1), (1, 2)])
def test_conv1d_gradient_check(padding, stride):
    rng = np.random.default_rng(4)
    x = _leaf(rng, (2, 2, 7), 'x')
    k = _leaf(rng, (3, 2, 3), 'k')
    bias = _leaf(rng, (3,), 'bias')
    weights = rng.normal(size=gc.conv1d(x, k, bias, stride, padding).shape)

    def f():
        return (gc.conv1d(x, k, bias, stride=stride, padding=padding) * weights).sum()

    assert gc.gradient_check(f, {'x': x, 'k': k, 'bias': bias}).passed(1e-4)


def test_conv1d_matches_direct_correlation():
    x = np.arange(6.0).reshape(1, 1, 6)
    k = np.array([[[1.0, 0.0, -1.0]]])
    out = gc.conv1d(Tensor(x), Tensor(k)).data
    expected = np.array([x[0, 0, i] - x[0, 0, i + 2] for i in range(4)])
    np.testing.assert_allclose(out[0, 0], expected)


def test_conv1d_rejects_channel_mismatch():
    with pytest.raises(gc.ShapeError):
        gc.conv1d(Tensor(np.zeros((1, 2, 8))), Tensor(np.zeros((1, 3, 3))))


def test_dense_gradient_check():
    rng = np.random.default_rng(5)
    x, w, b = _leaf(rng, (4, 5), 'x'), _leaf(rng, (3, 5), 'w'), _leaf(rng, (3,), 'b')
    target = rng.normal(size=(4, 3))
    report = gc.gradient_check(lambda: ((gc.dense(x, w, b) - target) ** 2).mean(), {'x': x, 'w': w, 'b': b})
    assert report.passed(1e-4)


def test_maxpool_ties_go_to_earliest_index():
    x = Tensor(np.array([[[1.0, 1.0, 3.0, 2.0, 5.0]]]), requires_grad=True)
    out = gc.maxpool1d(x, 2)
    np.testing.assert_allclose(out.data, [[[1.0, 3.0, 5.0]]])
    out.sum().backward()
    np.testing.assert_allclose(x.grad, [[[1.0, 0.0, 1.0, 0.0, 1.0]]])


def test_gather1d_shape_check():
    with pytest.raises(gc.ShapeError):
        gc.gather1d(Tensor(np.zeros((2, 3, 4))), np.zeros((2, 2, 2), dtype=int))


def test_batchnorm_training_standardizes_and_updates_running():
    rng = np.random.default_rng(6)
    x = Tensor(rng.normal(3.0, 2.0, size=(16, 2, 5)))
    running = gc.RunningStats.fresh(2)
    out = gc.batchnorm1d(x, np.ones(2), np.zeros(2), running, training=True)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2)), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.data.var(axis=(0, 2)), 1.0, atol=1e-3)
    assert np.all(running.mean > 0.0)


def test_batchnorm_update_running_flag():
    x = Tensor(np.random.default_rng(7).normal(size=(8, 3)))
    running = gc.RunningStats.fresh(3)
    gc.batchnorm1d(x, np.ones(3), np.zeros(3), running, training=True, update_running=False)
    np.testing.assert_array_equal(running.mean, np.zeros(3))
    np.testing.assert_array_equal(running.var, np.ones(3))


def test_batchnorm_training_needs_two_samples():
    with pytest.raises(ValueError):
        gc.batchnorm1d(Tensor(np.ones((1, 3))), np.ones(3), np.zeros(3), gc.RunningStats.fresh(3), training=True)


def test_batchnorm_gradient_check():
    rng = np.random.default_rng(8)
    x = _leaf(rng, (5, 2, 3), 'x')
    gamma, beta = _leaf(rng, (2,), 'gamma'), _leaf(rng, (2,), 'beta')
    weights = rng.normal(size=(5, 2, 3))

    def f():
        out = gc.batchnorm1d(x, gamma, beta, gc.RunningStats.fresh(2), training=True)
        return (out * weights).sum()

    assert gc.gradient_check(f, {'x': x, 'gamma': gamma, 'beta': beta}).passed(1e-4)


def test_log_softmax_gradient_and_stability():
    rng = np.random.default_rng(9)
    x = _leaf(rng, (3, 4), 'x')
    weights = rng.normal(size=(3, 4))
    assert gc.gradient_check(lambda: (gc.log_softmax(x) * weights).sum(), {'x': x}).passed(1e-4)
    big = gc.softmax_array(np.array([[1000.0, 0.0]]))
    assert np.all(np.isfinite(big)) and big[0, 0] == pytest.approx(1.0)


def test_softmax_reference_values():
    np.testing.assert_array_equal(gc.softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    big = gc.softmax(Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(big))
    assert big[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_softmax_rows_sum_to_one_and_ignore_shifts():
    rng = np.random.default_rng(21)
    x = rng.normal(scale=20.0, size=(200, 6))
    probs = gc.softmax_array(x)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    shift = rng.normal(scale=50.0, size=(200, 1))
    np.testing.assert_allclose(gc.softmax_array(x + shift), probs, rtol=0, atol=1e-12)
    moderate = x / 10.0
    np.testing.assert_allclose(gc.log_softmax_array(moderate), np.log(gc.softmax_array(moderate)),
                               rtol=0, atol=1e-9)


def test_softmax_gradient_check():
    rng = np.random.default_rng(22)
    x = _leaf(rng, (4, 5), 'x')
    weights = rng.normal(size=(4, 5))
    assert gc.gradient_check(lambda: (gc.softmax(x) * weights).sum(), {'x': x}).passed(1e-4)


@pytest.mark.parametrize("padding,stride", [(0, 1), (1, 1), (2, 2)])
def test_conv1d_matches_nested_loops(padding, stride):
    rng = np.random.default_rng(23)
    x, k, bias = rng.normal(size=(2, 3, 8)), rng.normal(size=(4, 3, 3)), rng.normal(size=4)
    out = gc.conv1d(Tensor(x), Tensor(k), Tensor(bias), stride=stride, padding=padding).data

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    expected = np.zeros(out.shape)
    for b in range(2):
        for o in range(4):
            for i in range(out.shape[2]):
                total = bias[o]
                for c in range(3):
                    for j in range(3):
                        total += xp[b, c, i * stride + j] * k[o, c, j]
                expected[b, o, i] = total
    assert out.shape == (2, 4, (8 + 2 * padding - 3) // stride + 1)
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)


def test_dense_matches_triple_loop():
    rng = np.random.default_rng(24)
    x, w, bias = rng.normal(size=(3, 5)), rng.normal(size=(4, 5)), rng.normal(size=4)
    out = gc.dense(Tensor(x), Tensor(w), Tensor(bias)).data
    expected = np.zeros((3, 4))
    for b in range(3):
        for o in range(4):
            expected[b, o] = bias[o] + sum(x[b, i] * w[o, i] for i in range(5))
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)


def test_maxpool_gradient_goes_to_the_window_maximum_only():
    rng = np.random.default_rng(25)
    x = _leaf(rng, (2, 3, 9), 'x')
    out = gc.maxpool1d(x, 2)
    assert out.shape == (2, 3, 5)
    upstream = rng.normal(size=out.shape)
    (out * upstream).sum().backward()

    expected = np.zeros(x.shape)
    for b in range(2):
        for c in range(3):
            for w in range(5):
                window = x.data[b, c, 2 * w:2 * w + 2]
                expected[b, c, 2 * w + int(np.argmax(window))] = upstream[b, c, w]
    np.testing.assert_array_equal(x.grad, expected)
    assert np.count_nonzero(x.grad) == out.size


def test_batchnorm_training_output_moments():
    rng = np.random.default_rng(26)
    x = Tensor(rng.normal(-4.0, 10.0, size=(32, 3, 7)))
    out = gc.batchnorm1d(x, np.ones(3), np.zeros(3), gc.RunningStats.fresh(3), training=True).data
    assert np.all(np.abs(out.mean(axis=(0, 2))) < 1e-9)
    np.testing.assert_allclose(out.var(axis=(0, 2)), 1.0, rtol=0, atol=1e-6)


@pytest.mark.parametrize("trial", range(100))
def test_layer_chain_gradient_check(trial):
    rng = np.random.default_rng(1000 + trial)
    x = _leaf(rng, (3, 2, 6), 'x')
    k = _leaf(rng, (2, 2, 3), 'k')
    gamma = Tensor(rng.uniform(0.5, 1.5, size=2), requires_grad=True, name='gamma')
    beta = _leaf(rng, (2,), 'beta')
    w, b = _leaf(rng, (3, 8), 'w'), _leaf(rng, (3,), 'b')
    weights = rng.normal(size=(3, 3))

    def f():
        h = gc.batchnorm1d(gc.conv1d(x, k, padding=0), gamma, beta, gc.RunningStats.fresh(2), training=True)
        return (gc.log_softmax(gc.dense(gc.reshape(h, (3, 8)), w, b)) * weights).sum()

    params = {'x': x, 'k': k, 'gamma': gamma, 'beta': beta, 'w': w, 'b': b}
    report = gc.gradient_check(f, params, atol=1e-5)
    assert report.passed(1e-4), report


def test_log1p_sum_exp_matches_direct_form_and_empty_mask():
    rng = np.random.default_rng(10)
    x = _leaf(rng, (4, 3), 'x')
    mask = np.array([[1, 0, 1], [1, 1, 0], [0, 0, 0], [1, 0, 1]], dtype=bool)
    value = gc.log1p_sum_exp(x, mask, axis=0).data
    direct = np.log1p(np.where(mask, np.exp(x.data), 0.0).sum(axis=0))
    np.testing.assert_allclose(value, direct)
    assert gc.gradient_check(lambda: gc.log1p_sum_exp(x, mask, axis=0).sum(), {'x': x}).passed(1e-4)

    none = gc.log1p_sum_exp(Tensor(np.ones((2, 2))), np.zeros((2, 2), dtype=bool))
    np.testing.assert_allclose(none.data, [0.0, 0.0])


def test_adam_first_step_moves_by_lr():
    p = Tensor([1.0, -1.0], requires_grad=True)
    p.grad = np.array([0.5, -2.0])
    state = gc.AdamState(lr=0.1)
    gc.adam_step({'p': p}, state)
    np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-6)
    assert state.t == 1 and state.steps['p'] == 1


def test_adam_skips_missing_gradients():
    p, q = Tensor([1.0], requires_grad=True), Tensor([2.0], requires_grad=True)
    p.grad = np.array([1.0])
    state = gc.AdamState(lr=0.01)
    gc.adam_step({'p': p, 'q': q}, state)
    assert q.data[0] == 2.0
    assert 'q' not in state.m


def test_adam_rejects_non_finite_before_updating():
    p, q = Tensor([1.0], requires_grad=True), Tensor([2.0], requires_grad=True)
    p.grad, q.grad = np.array([1.0]), np.array([np.nan])
    with pytest.raises(gc.NonFiniteGradientError) as info:
        gc.adam_step({'p': p, 'q': q}, gc.AdamState(lr=0.1))
    assert info.value.name == 'q'
    assert p.data[0] == 1.0


def test_adam_minimizes_quadratic():
    p = Tensor([5.0, -3.0], requires_grad=True)
    state = gc.AdamState(lr=0.1)
    for _ in range(500):
        gc.zero_grad({'p': p})
        (p ** 2).sum().backward()
        gc.adam_step({'p': p}, state)
    assert np.all(np.abs(p.data) < 0.5)


def test_gradient_check_detects_wrong_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)

    def broken():
        # forward x^2, backward claims 3x
        return gc._result((x.data ** 2).sum(), (x,), lambda g: (3.0 * x.data * g,))

    report = gc.gradient_check(broken, {'x': x})
    assert not report.passed(1e-4)
    assert report.worst_coordinate[0] == 'x'


def test_checkpoint_round_trip(tmp_path):
    path = tmp_path / 'model.ckpt'
    arrays = {'w': np.arange(6.0).reshape(2, 3), 'scalar': np.array(3.5), 'empty': np.zeros((0, 4))}
    gc.save_checkpoint(path, arrays, {'note': 'ok', 't': 3})
    loaded, meta = gc.load_checkpoint(path)
    assert meta == {'note': 'ok', 't': 3}
    for name, value in arrays.items():
        np.testing.assert_array_equal(loaded[name], value)
        assert loaded[name].shape == value.shape


def test_checkpoint_errors(tmp_path):
    path = tmp_path / 'model.ckpt'
    gc.save_checkpoint(path, {'w': np.ones(8)}, {})
    blob = path.read_bytes()

    bad = tmp_path / 'bad.ckpt'
    bad.write_bytes(b'XXXXXX' + blob[6:])
    with pytest.raises(gc.CheckpointFormatError):
        gc.load_checkpoint(bad)

    bad.write_bytes(blob[:6] + (99).to_bytes(2, 'little') + blob[8:])
    with pytest.raises(gc.CheckpointVersionError):
        gc.load_checkpoint(bad)

    for cut in (12, 30, len(blob) - 1):
        bad.write_bytes(blob[:cut])
        with pytest.raises(gc.CheckpointTruncatedError):
            gc.load_checkpoint(bad)

    flipped = bytearray(blob)
    flipped[-12] ^= 0xFF
    bad.write_bytes(bytes(flipped))
    with pytest.raises(gc.CheckpointChecksumError):
        gc.load_checkpoint(bad)


def _flip(blob, index, mask=0xFF):
    out = bytearray(blob)
    out[index] ^= mask
    return bytes(out)


@pytest.mark.parametrize('where', ['metadata', 'array_count', 'payload_length', 'array_name'])
def test_checkpoint_byte_flips_are_checksum_errors(tmp_path, where):
    path = tmp_path / 'model.ckpt'
    gc.save_checkpoint(path, {'w': np.arange(4.0)}, {'note': 'hello'})
    blob = path.read_bytes()
    header = gc._CK_HEADER.size
    meta_len = len(b'{"note": "hello"}')
    index = {
        'metadata': header + 4 + 3,
        'array_count': header + 4 + meta_len,
        'payload_length': 8,
        'array_name': header + 4 + meta_len + 4 + 3,
    }[where]
    bad = tmp_path / 'bad.ckpt'
    for mask in (0x01, 0x80, 0xFF):
        bad.write_bytes(_flip(blob, index, mask))
        with pytest.raises(gc.CheckpointChecksumError):
            gc.load_checkpoint(bad)


def test_checkpoint_trailing_bytes_are_a_format_error(tmp_path):
    path = tmp_path / 'model.ckpt'
    gc.save_checkpoint(path, {'w': np.ones(3)}, {})
    path.write_bytes(path.read_bytes() + b'\x00\x00')
    with pytest.raises(gc.CheckpointFormatError):
        gc.load_checkpoint(path)
