import math

import numpy as np
import pytest

from pfdnet.errors import DomainError, ShapeError
from pfdnet.penet import (
    PENet,
    PENetConfig,
    l2_loss_grad,
    loss_i2s,
    loss_s2s,
    penet_forward,
    psnr,
    psnr_report,
)
from pfdnet.optim import Adam
from pfdnet.tensor_core import Rng


def small_net(seed=0, width=1 / 16):
    return PENet(PENetConfig(width_mult=width), Rng(seed))


def test_zero_network_outputs_zero():
    net = PENet(PENetConfig(), zero_init=True)
    assert not penet_forward(np.zeros((1, 1, 64, 64), np.float32), "s", net).any()


def test_output_shape_image_branch(rng):
    out = penet_forward(rng.uniform(0, 1, (1, 3, 128, 192)), "image", small_net())
    assert out.shape == (1, 128, 192)
    assert out.min() >= 0


def test_shape_ladder():
    net = PENet(PENetConfig(width_mult=1 / 8))
    trace = net.shape_trace(128, 192)
    widths = [4, 8, 16, 32, 64, 128]
    for i, (c, h, w) in enumerate(trace[:6]):
        assert (c, h, w) == (widths[i], 128 >> (i + 1), 192 >> (i + 1))
    assert trace[-1] == (1, 128, 192)
    # the actual forward pass follows the ladder
    x = np.zeros((1, 1, 128, 192), np.float32)
    _, cache = net.forward(x, "s")
    assert [a.shape[1:] for a in cache["enc_in"][1:]] == [t for t in trace[:5]]
    assert [a.shape[1:] for a in cache["dec_in"]] == [trace[5]] + trace[6:11]


def test_shape_errors(rng):
    net = small_net()
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 1, 96, 64), np.float32), "s")
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 3, 64, 64), np.float32), "s")
    with pytest.raises(DomainError):
        net.forward(np.zeros((1, 1, 64, 64), np.float32), "depth")
    with pytest.raises(DomainError):
        net.set_phase("4")


def test_losses():
    a = np.zeros((1, 2, 2))
    assert loss_s2s(a, a, 1) == 0.0 and loss_i2s(a, a, 1) == 0.0
    assert loss_s2s(np.ones((1, 2, 2)), a, 1) == pytest.approx(2.0)
    with pytest.raises(ShapeError):
        loss_s2s(np.ones((1, 2, 2)), np.ones((1, 2, 3)), 1)


def test_loss_matches_double_loop(rng):
    p, t = rng.normal(0, 1, (3, 5, 4)), rng.normal(0, 1, (3, 5, 4))
    total = 0.0
    for b in range(3):
        for i in range(5):
            for j in range(4):
                total += (float(p[b, i, j]) - float(t[b, i, j])) ** 2
    assert loss_s2s(p, t, 3) == pytest.approx(total / 6, rel=1e-6)


def test_psnr():
    t = np.ones((4, 4))
    assert psnr(t, t, 1.0) == math.inf and psnr_report(psnr(t, t, 1.0)) == 99.0
    assert psnr(t + 2.0, t, 2.0) == pytest.approx(0.0)
    err = np.full((10, 10), math.sqrt(1e-3))
    assert psnr(err, np.zeros((10, 10)), 1.0) == pytest.approx(30.0)
    with pytest.raises(DomainError):
        psnr(t, t, 0.0)


def test_phase1_gradients_reach_encoder_and_decoder(rng):
    net = small_net(1)
    net.set_phase("1")
    x = rng.uniform(1, 4, (2, 1, 64, 64))
    pred, cache = net.forward(x, "s")
    grads, _ = net.backward(cache, l2_loss_grad(pred, x[:, 0] * 0.5, 2))
    assert any(np.abs(grads[k]).max() > 0 for k in net.names("enc_s"))
    assert any(np.abs(grads[k]).max() > 0 for k in net.names("dec"))
    assert set(net.trainable()) == set(net.names("enc_s") + net.names("dec"))


@pytest.mark.parametrize("phase", ["2", "3-supervised", "3-weak"])
def test_decoder_frozen_after_phase1(rng, phase):
    net = small_net(2)
    net.set_phase(phase)
    assert not set(net.trainable()) & set(net.names("dec"))
    before = {k: net.params[k].tobytes() for k in net.names("dec")}
    opt = Adam(lr=1e-2)
    x = rng.uniform(0, 1, (2, 3, 64, 64))
    target = rng.uniform(1, 4, (2, 64, 64))
    for _ in range(3):
        pred, cache = net.forward(x, "image")
        grads, _ = net.backward(cache, l2_loss_grad(pred, target, 2))
        assert all(not grads[k].any() for k in net.names("dec"))
        opt.step(net.params, grads, net.trainable())
    assert all(net.params[k].tobytes() == before[k] for k in net.names("dec"))


def test_image_standardization_is_scale_invariant(rng):
    net = small_net(3)
    x = rng.uniform(0, 1, (1, 3, 64, 64))
    a = net.forward(x, "image")[0]
    b = net.forward((x * 3 + 1).astype(np.float32), "image")[0]
    assert np.allclose(a, b, rtol=1e-4, atol=1e-5)
