import numpy as np
import pytest
import torch

from scenecomp import warp
from scenecomp.stn import RelativeSTN, stn_l1_loss
from fdcheck import check_grads_at


def rand_pair(b=2, size=32, seed=0):
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.uniform(-1, 1, size=(b, 3, size, size))).float()
    y = torch.from_numpy(rng.uniform(-1, 1, size=(b, 3, size, size))).float()
    return x, y


def test_identity_at_init():
    model = RelativeSTN(image_size=32)
    x, y = rand_pair()
    x_t, y_t, t1, t2 = model(x, y)
    assert (x_t - x).abs().max() <= 1e-5
    assert (y_t - y).abs().max() <= 1e-5
    ident = warp.identity_theta().expand(2, -1, -1)
    assert torch.allclose(t1, ident) and torch.allclose(t2, ident)


def test_hand_set_translation_matches_shift_oracle():
    size = 64
    model = RelativeSTN(image_size=size)
    shift_px = 16
    with torch.no_grad():
        # weights are zero at init, so the bias is the output
        model.fc2.bias[2] = 2.0 * shift_px / (size - 1)
    x, y = rand_pair(b=1, size=size, seed=1)
    x_t, y_t, _, _ = model(x, y)
    expected = torch.full_like(x[0], -1.0)
    expected[:, :, : size - shift_px] = x[0, :, :, shift_px:]
    assert (x_t[0] - expected).abs().max() <= 1e-5
    assert (y_t - y).abs().max() <= 1e-5


def test_deterministic_on_duplicate_inputs():
    model = RelativeSTN(image_size=32)
    with torch.no_grad():
        model.fc2.weight.normal_(0, 1e-3)
    x, y = rand_pair(b=1, size=32, seed=2)
    xx = torch.cat((x, x))
    yy = torch.cat((y, y))
    model.train()
    x_t, y_t, _, _ = model(xx, yy)
    assert torch.equal(x_t[0], x_t[1])
    assert torch.equal(y_t[0], y_t[1])


def test_resolution_mismatch_rejected():
    model = RelativeSTN(image_size=32)
    with pytest.raises(ValueError):
        model(torch.zeros(1, 3, 32, 32), torch.zeros(1, 3, 16, 16))


# --- stn_l1_loss -----------------------------------------------------------

def test_l1_zero_on_exact_match():
    x, y = rand_pair(seed=3)
    assert stn_l1_loss(x, y, x, y).item() == 0.0


def test_l1_constant_offset():
    x, y = rand_pair(seed=4)
    x_shifted = (x * 0.0) + 0.5
    target = torch.zeros_like(x)
    assert abs(stn_l1_loss(x_shifted, y, target, y).item() - 0.25) <= 1e-6


def test_l1_matches_scalar_loop_oracle():
    rng = np.random.default_rng(5)
    a, b, c, d = [torch.from_numpy(rng.uniform(-1, 1, size=(1, 3, 2, 2))).float() for _ in range(4)]
    got = stn_l1_loss(a, b, c, d).item()
    acc = []
    for p, q in ((a, c), (b, d)):
        for v1, v2 in zip(p.flatten().tolist(), q.flatten().tolist()):
            acc.append(abs(v1 - v2))
    assert abs(got - sum(acc) / len(acc)) <= 1e-6


def test_gradients_flow_and_match_finite_differences():
    torch.manual_seed(6)
    model = RelativeSTN(image_size=16, base=4, fc_dim=16).double()
    with torch.no_grad():
        model.fc2.weight.normal_(0, 1e-3)
        # generic affines: at the identity every sample coordinate sits on
        # an integral pixel coordinate, the excluded kink set of bilinear
        # interpolation
        model.fc2.bias.copy_(torch.tensor(
            [1.03, 0.012, 0.049, -0.008, 0.97, -0.031,
             0.96, 0.021, 0.041, 0.015, 1.04, -0.027], dtype=torch.float64))
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64) * 2 - 1
    y = torch.rand(1, 3, 16, 16, dtype=torch.float64) * 2 - 1
    # targets below the image range keep every |. - .| term away from its
    # kink, so the loss is differentiable inside the probe window
    x_c = torch.rand_like(x) * 0.2 - 2.5
    y_c = torch.rand_like(y) * 0.2 - 2.5

    def loss():
        x_t, y_t, _, _ = model(x, y)
        return stn_l1_loss(x_t, y_t, x_c, y_c)

    rng = np.random.default_rng(0)
    # small h: translation weights move every sample coordinate, and a large
    # step would straddle interpolation-cell boundaries
    for param in (model.fc2.weight, model.features[0].weight):
        idx = [tuple(rng.integers(0, s) for s in param.shape) for _ in range(10)]
        param.grad = None
        check_grads_at(loss, param, idx, h=1e-5, rel_tol=1e-2)
        grad_norm = param.grad.abs().max().item() if param.grad is not None else 0.0
        assert grad_norm > 0.0
