import numpy as np
import pytest

from symrl import autodiff as ad
from symrl.autodiff import Tensor
from symrl.env import observe, reset
from symrl.maps import load_map
from symrl.net import (
    Adam,
    ArchSpec,
    CheckpointError,
    ParamNet,
    default_descriptor,
    load_checkpoint,
    masked_log_softmax,
    masked_policy,
    save_checkpoint,
    sgd_adam_step,
)

from oracles import fd_close, fd_gradient

TINY = "m=5;in=5;sc=2;conv=2,3;k=3;stride=2;pad=1;fc=8;act=tanh"


def rand_obs(rng, m=5, n=4):
    return rng.random((n, 5, m, m)), rng.random((n, 2))


# -- architecture ----------------------------------------------------------------


def test_descriptor_roundtrip():
    spec = ArchSpec.parse(TINY)
    assert ArchSpec.parse(spec.descriptor()) == spec
    assert ArchSpec.parse(default_descriptor(12)).m == 12


def test_descriptor_rejects_garbage():
    with pytest.raises(CheckpointError):
        ArchSpec.parse("m=5;nonsense")
    with pytest.raises(CheckpointError):
        ArchSpec.parse(TINY.replace("tanh", "relu6"))


def test_output_shapes_across_sizes():
    for m in (5, 6, 8, 12):
        net = ParamNet(default_descriptor(m), seed=0)
        rng = np.random.default_rng(m)
        layers, scalars = rng.random((3, 5, m, m)), rng.random((3, 2))
        logits, values = net.forward_batch(layers, scalars)
        assert logits.shape == (3, 7) and values.shape == (3,)
        assert np.isfinite(logits).all() and np.isfinite(values).all()


def test_forward_shape_mismatch_raises():
    net = ParamNet(TINY)
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        net.forward_batch(rng.random((2, 5, 6, 6)), rng.random((2, 2)))


def test_zero_params_equal_logits():
    net = ParamNet(TINY)
    net.set_params(np.zeros(net.n_params))
    rng = np.random.default_rng(1)
    layers, scalars = rand_obs(rng)
    logits, values = net.forward_batch(layers, scalars)
    assert np.all(logits == logits[:, :1])
    assert np.all(values == 0.0)
    probs = masked_policy(logits[0], np.array([1, 1, 0, 0, 1, 1, 0], bool))
    assert np.allclose(probs[[0, 1, 4, 5]], 0.25) and probs[[2, 3, 6]].sum() == 0


def test_forward_deterministic_and_pure():
    net = ParamNet(TINY, seed=3)
    rng = np.random.default_rng(2)
    layers, scalars = rand_obs(rng)
    a = net.forward_batch(layers, scalars)
    b = net.forward_batch(layers, scalars)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_param_roundtrip_lossless():
    net = ParamNet(TINY, seed=4)
    vec = net.get_params()
    vec2 = vec + 0.0
    net.set_params(vec2)
    assert np.array_equal(net.get_params(), vec)
    with pytest.raises(ValueError):
        net.set_params(np.zeros(3))


# -- masked policy ----------------------------------------------------------------


def test_masked_policy_examples():
    logits = np.zeros(7)
    mask = np.array([1, 1, 1, 1, 0, 0, 0], bool)
    probs = masked_policy(logits, mask)
    assert np.allclose(probs[:4], 0.25) and probs[4:].sum() == 0.0
    single = np.zeros(7, bool)
    single[5] = True
    assert masked_policy(logits, single)[5] == 1.0
    with pytest.raises(ValueError):
        masked_policy(logits, np.zeros(7, bool))


def test_masked_policy_equals_renormalized_softmax():
    rng = np.random.default_rng(5)
    for _ in range(100):
        logits = rng.normal(0, 3, 7)
        mask = rng.random(7) < 0.6
        if not mask.any():
            mask[0] = True
        probs = masked_policy(logits, mask)
        full = np.exp(logits - logits.max())
        full /= full.sum()
        renorm = np.where(mask, full, 0.0)
        renorm /= renorm.sum()
        assert np.allclose(probs, renorm, atol=1e-12)
        assert probs.sum() == pytest.approx(1.0, abs=1e-9)
        assert (probs[~mask] == 0).all()


def test_masked_log_softmax_consistent():
    rng = np.random.default_rng(6)
    logits = rng.normal(0, 2, (4, 7))
    mask = rng.random((4, 7)) < 0.7
    mask[:, 0] = True
    logp, p = masked_log_softmax(Tensor(logits), mask)
    assert np.allclose(np.where(mask, np.exp(logp.data), 0.0), p.data, atol=1e-12)
    assert np.allclose(p.data.sum(axis=1), 1.0, atol=1e-9)


# -- gradients ---------------------------------------------------------------------


def test_gradient_matches_fd_all_coordinates():
    net = ParamNet(TINY, seed=7)
    assert net.n_params < 5000
    rng = np.random.default_rng(7)
    layers, scalars = rand_obs(rng)
    mask = rng.random((4, 7)) < 0.7
    mask[:, 2] = True
    actions = np.array([2, 2, 2, 2])

    def loss_t(n):
        pt = n.param_tensors()
        logits, values = n.forward_t(pt, layers, scalars)
        logp, p = masked_log_softmax(logits, mask)
        return ad.tmean(values) + ad.tmean(ad.take_along(logp, actions)) + ad.tmean(
            ad.square(values - Tensor(0.3))
        )

    tape = net.gradient(loss_t(net))

    def f(v):
        return loss_t(ParamNet(TINY, params=v)).item()

    num = fd_gradient(f, net.get_params(), h=1e-5)
    assert fd_close(tape.grad, num)


def test_gradient_of_constant_is_zero():
    net = ParamNet(TINY, seed=8)
    loss = Tensor(np.array(3.0))
    tape = net.gradient(loss)
    assert tape.loss == 3.0 and not tape.grad.any()
    assert len(tape.grad) == net.n_params


def test_gradient_linearity():
    net = ParamNet(TINY, seed=9)
    rng = np.random.default_rng(9)
    layers, scalars = rand_obs(rng, n=2)

    def value_loss(n, w):
        pt = n.param_tensors()
        _, values = n.forward_t(pt, layers, scalars)
        return ad.tsum(values) * Tensor(w)

    g1 = net.gradient(value_loss(net, 1.0)).grad
    g2 = net.gradient(value_loss(net, 2.5)).grad
    both = net.gradient(value_loss(net, 1.0) + value_loss(net, 2.5)).grad
    assert np.allclose(both, g1 + g2, atol=1e-12)


def test_gradient_rejects_nonfinite():
    net = ParamNet(TINY)
    with pytest.raises(FloatingPointError):
        net.gradient(Tensor(np.array(np.nan)))


# -- optimizer ---------------------------------------------------------------------


def test_adam_zero_grad_no_change():
    net = ParamNet(TINY, seed=10)
    opt = Adam(net.n_params, lr=1e-3)
    before = net.get_params()
    from symrl.net import GradientTape

    sgd_adam_step(net, GradientTape(loss=0.0, grad=np.zeros(net.n_params)), opt)
    assert np.array_equal(net.get_params(), before)


def test_adam_descends_quadratic():
    opt = Adam(3, lr=0.05)
    x = np.float64(np.float32(np.array([1.0, -2.0, 3.0])))
    target = np.array([0.5, 0.5, 0.5])
    loss = lambda v: float(((v - target) ** 2).sum())
    before = loss(x)
    for _ in range(50):
        x = opt.step(x, 2 * (x - target))
    assert loss(x) < before * 0.2


def test_adam_bit_identical_runs():
    def run():
        net = ParamNet(TINY, seed=11)
        opt = Adam(net.n_params, lr=1e-3)
        rng = np.random.default_rng(11)
        layers, scalars = rand_obs(rng)
        for _ in range(5):
            pt = net.param_tensors()
            _, values = net.forward_t(pt, layers, scalars)
            tape = net.gradient(ad.tsum(ad.square(values)))
            net.params = opt.step(net.params, tape.grad)
        return net.get_params()

    assert run().tobytes() == run().tobytes()


# -- checkpoints -------------------------------------------------------------------


def test_checkpoint_bit_exact_roundtrip(tmp_path):
    net = ParamNet(TINY, seed=12)
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)
    blob = path.read_bytes()
    assert blob.startswith(b"SYMRL-CKPT v1\n")
    loaded = load_checkpoint(path)
    assert loaded.descriptor == net.descriptor
    assert np.array_equal(loaded.params, net.params)
    save_checkpoint(loaded, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == blob


def test_checkpoint_rejects_corruption(tmp_path):
    net = ParamNet(TINY)
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)
    blob = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"WRONG" + blob)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(blob[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.ckpt")


def test_training_params_stay_on_float32_grid(tmp_path):
    # optimizer output must round-trip the f32 checkpoint losslessly
    net = ParamNet(TINY, seed=13)
    opt = Adam(net.n_params, lr=1e-3)
    rng = np.random.default_rng(13)
    net.params = opt.step(net.params, rng.normal(size=net.n_params))
    assert np.array_equal(np.float64(np.float32(net.params)), net.params)
    save_checkpoint(net, tmp_path / "n.ckpt")
    assert np.array_equal(load_checkpoint(tmp_path / "n.ckpt").params, net.params)


def test_net_on_real_observation(open8, small_cfg):
    net = ParamNet(default_descriptor(8), seed=14)
    s = reset(open8, small_cfg, seed=3)
    logits, value = net.forward(observe(s, small_cfg))
    assert logits.shape == (7,) and np.isfinite(value)
