import numpy as np
import pytest

from bevinterp import autodiff as ad
from bevinterp.autodiff import Parameter, Tensor, finite_diff_gradient, tsum
from bevinterp.losses import (
    Discriminator,
    LossWeights,
    TrainingError,
    adversarial_losses,
    bce_with_logits,
    phase1_loss,
    phase2_loss,
    style_loss,
)
from bevinterp.training import Adam

from test_autodiff import rel_err

LN2 = float(np.log(2.0))


def rand_map(seed, shape=(4, 5, 5)):
    return np.random.default_rng(seed).normal(size=shape)


# -- style loss -----------------------------------------------------------------

def test_style_identity_zero():
    f = rand_map(0)
    assert style_loss(Tensor(f), Tensor(f.copy())).item() == 0.0


def test_style_constant_shift():
    f = rand_map(1)
    c = 0.7
    out = style_loss(Tensor(f + c), Tensor(f))
    np.testing.assert_allclose(out.item(), abs(c) * np.sqrt(f.shape[0]), atol=1e-10)


def test_style_scaling_zero_mean_fixture():
    f = rand_map(2)
    f -= f.mean(axis=(1, 2), keepdims=True)       # per-channel zero mean
    a = 1.8
    s = f.std(axis=(1, 2))                        # population std
    out = style_loss(Tensor(a * f), Tensor(f))
    np.testing.assert_allclose(out.item(), abs(a - 1) * np.linalg.norm(s), atol=1e-10)


def test_style_spatial_permutation_invariant():
    rng = np.random.default_rng(3)
    f = rand_map(4)
    ego = rand_map(5)
    base = style_loss(Tensor(f), Tensor(ego)).item()
    shuffled = f.reshape(4, -1)
    for ch in range(4):
        shuffled[ch] = shuffled[ch][rng.permutation(25)]
    assert abs(style_loss(Tensor(shuffled.reshape(4, 5, 5)), Tensor(ego)).item() - base) < 1e-12


def test_style_non_negative_random():
    for seed in range(10):
        v = style_loss(Tensor(rand_map(seed)), Tensor(rand_map(seed + 100))).item()
        assert v >= 0.0


def test_style_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        style_loss(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((3, 4, 5))))


def test_style_gradient_matches_fd():
    ego = Tensor(rand_map(6))
    p = Parameter("f", rand_map(7))

    def f(q):
        return style_loss(q.tensor, ego)

    f(p).backward()
    numeric = finite_diff_gradient(f, p, h=1e-5)
    assert rel_err(p.tensor.grad, numeric) < 1e-4


# -- adversarial ------------------------------------------------------------------

def test_bce_at_zero_logit():
    z = Tensor(np.zeros((1,)))
    assert abs(bce_with_logits(z, 1.0).item() - LN2) < 1e-12
    assert abs(bce_with_logits(z, 0.0).item() - LN2) < 1e-12


def test_discriminator_zero_logit_losses():
    d = Discriminator(4, seed=0)
    for p in d.parameters():
        p.tensor.data[:] = 0.0
    f_ego = Tensor(rand_map(8, (4, 8, 8)))
    f_g = Tensor(rand_map(9, (4, 8, 8)))
    loss_d, loss_gen = adversarial_losses(d, f_g, f_ego)
    np.testing.assert_allclose(loss_d.item(), 2 * LN2, atol=1e-12)
    np.testing.assert_allclose(loss_gen.item(), LN2, atol=1e-12)


def test_perfectly_separating_discriminator():
    assert bce_with_logits(Tensor([20.0]), 1.0).item() < 1e-6
    assert bce_with_logits(Tensor([-20.0]), 0.0).item() < 1e-6
    loss_gen = bce_with_logits(Tensor([-20.0]), 1.0).item()
    assert abs(loss_gen - 20.0) < 1e-6


def test_discriminator_gradients_match_fd():
    d = Discriminator(3, hidden=4, seed=1)
    x = Tensor(rand_map(10, (3, 8, 8)))
    for p in [d.conv1_w, d.conv2_b, d.fc_w]:
        def f(q, _p=p):
            return bce_with_logits(d.forward(x), 1.0)

        p.tensor.zero_grad()
        f(p).backward()
        numeric = finite_diff_gradient(f, p, h=1e-5)
        assert rel_err(p.tensor.grad, numeric) < 1e-4, p.name


def test_generator_loss_sees_live_graph_discriminator_loss_does_not():
    d = Discriminator(3, hidden=4, seed=2)
    src = Parameter("gen_feature", rand_map(11, (3, 8, 8)))
    f_g = src.tensor * 1.0
    f_ego = Tensor(rand_map(12, (3, 8, 8)))
    loss_d, loss_gen = adversarial_losses(d, f_g, f_ego)
    loss_d.backward()
    assert src.tensor.grad is None          # detached branch
    loss_gen.backward()
    assert src.tensor.grad is not None and np.linalg.norm(src.tensor.grad) > 0


def test_equilibrium_indistinguishable_classes():
    # identical inputs for both labels: optimal D predicts 0.5 -> loss 2 ln 2
    d = Discriminator(3, hidden=4, seed=3)
    x = Tensor(rand_map(13, (3, 8, 8)))
    opt = Adam(d.parameters(), lr=5e-3)
    for _ in range(300):
        opt.zero_grad()
        loss_d, _ = adversarial_losses(d, x, x)
        loss_d.backward()
        opt.step()
    final = adversarial_losses(d, x, x)[0].item()
    assert abs(final - 2 * LN2) < 0.05
    assert final >= 2 * LN2 - 1e-9


# -- composites -------------------------------------------------------------------

def ones_parts(keys):
    return {k: Tensor([[1.0]]) for k in keys}


def test_phase1_arithmetic():
    parts = ones_parts(["collab", "single", "style_s", "adv_gen", "style_g"])
    total, breakdown = phase1_loss(parts, LossWeights(0.5, 1.0, 1.0))
    assert abs(total.item() - 4.0) < 1e-12
    assert breakdown["total"] == total.item()


def test_phase1_weight_zeroing():
    parts = ones_parts(["collab", "single", "style_s", "adv_gen", "style_g"])
    total, _ = phase1_loss(parts, LossWeights(omega=0.5, lambda_s=0.0, lambda_g=0.0))
    assert abs(total.item() - 1.0) < 1e-12


def test_phase1_all_zero():
    parts = {k: Tensor([[0.0]]) for k in ["collab", "single", "style_s", "adv_gen", "style_g"]}
    total, _ = phase1_loss(parts, LossWeights())
    assert total.item() == 0.0


def test_phase2_arithmetic():
    parts = ones_parts(["collab", "single", "style_s"])
    total, _ = phase2_loss(parts, LossWeights(0.5, 1.0, 1.0))
    assert abs(total.item() - 2.5) < 1e-12


def test_phase2_equals_phase1_with_lambda_g_zero():
    keys = ["collab", "single", "style_s"]
    rng = np.random.default_rng(14)
    vals = {k: float(rng.uniform(0.1, 2.0)) for k in keys}
    p2 = {k: Tensor([[vals[k]]]) for k in keys}
    p1 = dict(p2, adv_gen=Tensor([[3.3]]), style_g=Tensor([[1.1]]))
    t2, _ = phase2_loss(p2, LossWeights(0.5, 1.0, 1.0))
    t1, _ = phase1_loss(p1, LossWeights(0.5, 1.0, 0.0))
    assert abs(t1.item() - t2.item()) < 1e-12


def test_non_finite_component_named():
    parts = ones_parts(["collab", "single", "style_s", "adv_gen", "style_g"])
    parts["style_s"] = Tensor([[np.nan]])
    with pytest.raises(TrainingError, match="style_s"):
        phase1_loss(parts, LossWeights())


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(omega=-0.1)
