import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evdet import autograd as F
from evdet.detect import make_anchors
from evdet.events import Box
from evdet.losses import LossCfg, build_targets, detection_loss, sparsity_loss
from evdet.optim import Adam, OneCycle, clip_grad_norm


def test_loss_cfg_validation():
    with pytest.raises(ValueError, match="focal_gamma"):
        LossCfg(focal_gamma=0)
    with pytest.raises(ValueError, match="neg_iou"):
        LossCfg(pos_iou=0.4, neg_iou=0.5)
    assert LossCfg(beta_sparse=0.0).beta_sparse == 0.0


def test_sparsity_loss_value():
    a = [np.array([[1.0, -2.0]]), np.array([0.5, 0.0, 3.0])]
    got = float(sparsity_loss([F.Var(x) for x in a], beta=0.04, N=2, T=3).data)
    assert got == pytest.approx(0.04 / 6 * (3.0 + 3.5))
    assert float(sparsity_loss({}, 0.04, 1, 1).data) == 0.0


@given(st.integers(0, 2**31))
def test_sparsity_step_never_increases_l1(seed):
    rng = np.random.default_rng(seed)
    x = F.param(rng.normal(size=(4, 5)))
    before = np.abs(x.data).sum()
    with F.Tape() as tape:
        loss = sparsity_loss([F.relu(x)], 0.04, 1, 1)
    tape.backward(loss)
    x.data = x.data - 1e-3 * x.grad
    assert np.abs(np.maximum(x.data, 0)).sum() <= np.abs(np.maximum(x.data + 1e-3 * x.grad, 0)).sum()
    assert np.abs(x.data).sum() <= before + 1e-12


def toy_targets():
    anchors = make_anchors([(4, 4)], (32, 32), [8], ratios=(1.0,), scales=(1.0,))
    gt = [[Box(8, 8, 8, 8)], []]
    return anchors, build_targets(anchors, gt, 2)


def test_targets():
    anchors, t = toy_targets()
    assert t.onehot.shape == (2, 16, 2) and t.n_pos == 1
    assert t.valid[1].all() and not t.positive[1].any()
    with pytest.raises(ValueError, match="class id"):
        build_targets(anchors, [[Box(0, 0, 4, 4, 5)]], 2)


def test_detection_loss_normalisation():
    anchors, t = toy_targets()
    z = np.zeros((2, 16, 2))
    loss, comp = detection_loss(F.Var(z), F.Var(np.zeros((2, 16, 4))), t)
    focal_all = float(F.focal_loss(F.Var(z), t.onehot, t.valid[..., None]).data)
    reg_all = float(F.smooth_l1(F.Var(np.zeros((2, 16, 4))), t.box, t.positive[..., None]).data)
    assert comp["cls"] == pytest.approx(focal_all / 1) and comp["reg"] == pytest.approx(reg_all)
    assert float(loss.data) == pytest.approx(comp["cls"] + comp["reg"])


def test_no_positives_means_no_regression():
    anchors = make_anchors([(2, 2)], (16, 16), [8], ratios=(1.0,), scales=(1.0,))
    t = build_targets(anchors, [[]], 1)
    _, comp = detection_loss(F.Var(np.zeros((1, 4, 1))), F.Var(np.ones((1, 4, 4))), t)
    assert comp["reg"] == 0.0


# ---------------------------------------------------------------- optimizer


def test_adam_first_step_matches_formula():
    p = F.param(np.array([1.0, -2.0]))
    p.grad = np.array([0.5, -0.1])
    opt = Adam({"p": p}, lr=0.1)
    opt.step()
    # bias-corrected first step moves each coordinate by lr * sign(g) (up to eps)
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-6)
    assert p.grad is None


def test_adam_state_round_trip():
    p = F.param(np.ones(3))
    opt = Adam({"p": p}, lr=0.01)
    for g in ([1, 2, 3], [0.1, -1, 0]):
        p.grad = np.array(g, float)
        opt.step()
    clone = Adam({"p": F.param(p.data.copy())}, lr=0.5)
    clone.load_state_dict(opt.state_dict())
    p.grad = clone.params["p"].grad = np.array([0.3, 0.3, -0.3])
    opt.step()
    clone.step()
    np.testing.assert_array_equal(p.data, clone.params["p"].data)


def test_one_cycle_shape():
    s = OneCycle(1e-3, 100)
    lrs = [s.lr(i) for i in range(100)]
    assert lrs[0] == pytest.approx(1e-3 / 25)
    assert max(lrs) == pytest.approx(1e-3) and int(np.argmax(lrs)) == 30
    assert np.all(np.diff(lrs[:31]) >= 0) and np.all(np.diff(lrs[30:]) <= 0)
    assert lrs[-1] == pytest.approx(1e-3 / 25 / 1e4)


def test_clip_grad_norm():
    a, b = F.param(np.zeros(2)), F.param(np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm({"a": a, "b": b}, 1.0) == pytest.approx(5.0)
    assert np.sqrt((a.grad ** 2).sum() + (b.grad ** 2).sum()) == pytest.approx(1.0)
    a.grad = np.array([0.1, 0.0])
    b.grad = None
    clip_grad_norm({"a": a, "b": b}, 1.0)
    np.testing.assert_array_equal(a.grad, [0.1, 0.0])


def test_adam_two_step_trajectory():
    # m1 = 0.05, v1 = 2.5e-4 -> 1 - 0.1; m2 = 0.025, v2 = 2.8975e-4 -> hand value below
    p = F.param(np.array([1.0]))
    opt = Adam({"p": p}, lr=0.1)
    for g in (0.5, -0.2):
        p.grad = np.array([g])
        opt.step()
    assert p.data[0] == pytest.approx(0.8654394181, abs=1e-9)


def test_one_cycle_midpoints():
    # warm-up and anneal are half cosines, so their midpoints sit halfway between the end values
    s = OneCycle(1.0, 21, pct_start=20 / 21 * 0.5)
    assert s.warm == 10
    assert s.lr(5) == pytest.approx((1.0 + 1.0 / 25) / 2)
    mid = s.warm + (s.total - 1 - s.warm) / 2
    assert s.lr(int(mid)) == pytest.approx((1.0 + 1.0 / 25 / 1e4) / 2, rel=1e-6)
