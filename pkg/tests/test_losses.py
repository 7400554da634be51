import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from dtlpnet import losses as L


def _probs(shape, g):
    return torch.softmax(2 * torch.randn(shape, generator=g, dtype=torch.float64), 1)


def _onehot(shape, g):
    B, K = shape[:2]
    lab = torch.randint(0, K, (B,) + shape[2:], generator=g)
    return torch.nn.functional.one_hot(lab, K).movedim(-1, 1).to(torch.float64)


def _perfect(oh, eps=1e-6):
    return oh.clamp(eps, 1 - eps) / oh.clamp(eps, 1 - eps).sum(1, keepdim=True)


# -- DiceCE -----------------------------------------------------------------

def test_dice_ce_two_voxel_hand_value():
    p = torch.full((2, 2, 1, 1), 0.5, dtype=torch.float64)
    q = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64).reshape(2, 2, 1, 1)
    ce = math.log(2)
    dice = 1 - (2 * 0.5 + L.SMOOTH) / (1 + 1 + L.SMOOTH)
    assert abs(L.dice_ce(p, q).item() - 0.5 * (ce + dice)) < 1e-12
    assert abs(L.dice_ce(p, q).item() - 0.5966) < 1e-4


def test_dice_ce_perfect_and_shape_error():
    g = torch.Generator().manual_seed(0)
    oh = _onehot((1, 3, 4, 4, 4), g)
    assert L.dice_ce(_perfect(oh), oh) < 0.01
    with pytest.raises(ValueError):
        L.dice_ce(oh[:, :2], oh)


def test_dice_ce_permutation_invariant():
    g = torch.Generator().manual_seed(1)
    p, q = _probs((1, 3, 4, 4, 4), g), _onehot((1, 3, 4, 4, 4), g)
    perm = torch.randperm(64, generator=g)
    ps = p.reshape(1, 3, -1)[..., perm].reshape(p.shape)
    qs = q.reshape(1, 3, -1)[..., perm].reshape(q.shape)
    assert abs(L.dice_ce(p, q).item() - L.dice_ce(ps, qs).item()) < 1e-12


def test_loss_deno_batch_mean_and_single():
    g = torch.Generator().manual_seed(2)
    p, q = _probs((2, 3, 3, 3, 3), g), _onehot((2, 3, 3, 3, 3), g)
    per = [L.dice_ce(p[i], q[i]).item() for i in range(2)]
    assert abs(L.loss_deno(p, q).item() - sum(per) / 2) < 1e-14
    assert L.loss_deno(p[:1], q[:1]).item() == L.dice_ce(p[0], q[0]).item()
    assert L.loss_deno(_perfect(q[:1]), q[:1]) < 0.01
    with pytest.raises(ValueError):
        L.loss_deno(p[:0], q[:0])


@pytest.mark.parametrize("fn", [L.loss_u, L.loss_mix, L.loss_mic])
def test_unsupervised_dice_ce_kernels(fn):
    g = torch.Generator().manual_seed(3)
    p, q = _probs((2, 3, 2, 2, 2), g), _onehot((2, 3, 2, 2, 2), g)
    assert fn(p, q).item() == L.loss_deno(p, q).item()
    assert fn(_perfect(q), q) < 0.01
    ref = sum(oracles.dice_ce(oracles.to_lists(p[i]), oracles.to_lists(q[i])) for i in range(2)) / 2
    assert abs(fn(p, q).item() - ref) <= 1e-6 * ref


# -- difficulty-aware supervision -----------------------------------------------

def test_per_class_oracle():
    g = torch.Generator().manual_seed(4)
    p, q = _probs((1, 3, 2, 2, 2), g), _onehot((1, 3, 2, 2, 2), g)
    got = L.per_class_dice_ce(p, q)[0].tolist()
    ref = oracles.per_class_dice_ce(oracles.to_lists(p[0]), oracles.to_lists(q[0]))
    np.testing.assert_allclose(got, ref, rtol=1e-10)


def test_loss_diff_unit_weights_and_linearity():
    g = torch.Generator().manual_seed(5)
    p, q = _probs((2, 3, 3, 3, 3), g), _onehot((2, 3, 3, 3, 3), g)
    per = L.per_class_dice_ce(p, q)
    base = L.loss_diff(p, q, [1.0, 1.0, 1.0])
    torch.testing.assert_close(base, per.mean())
    torch.testing.assert_close(L.loss_diff(p, q), base)
    doubled = L.loss_diff(p, q, [1.0, 2.0, 1.0])
    contrib = per[:, 1].mean() / 3
    assert abs((doubled - base).item() - contrib.item()) < 1e-14


def test_loss_diff_perfect_any_weights():
    g = torch.Generator().manual_seed(6)
    q = _onehot((1, 3, 4, 4, 4), g)
    for w in ([1, 1, 1], [3.0, 0.1, 2.5]):
        assert L.loss_diff(_perfect(q), q, w) < 0.01


# -- DRS ----------------------------------------------------------------------

def test_drs_hand_trace():
    t = L.DifficultyTracker(1)
    for v in (0.5, 0.4, 0.6):
        t.update([v])
    du, dl = t.accumulators()
    assert abs(du[0] - 0.02231) < 1e-4
    assert abs(dl[0] - 0.08109) < 1e-4
    assert abs(t.difficulty()[0] - 0.2751) < 1e-4


def test_drs_monotone_increase_floors():
    t = L.DifficultyTracker(2, w_min=0.1)
    for v in np.linspace(0.1, 0.9, 10):
        t.update([v, v])
    assert t.accumulators()[0] == [0.0, 0.0]
    assert t.weights() == [0.1, 0.1]


def test_drs_constant_degenerate():
    t = L.DifficultyTracker(2)
    for _ in range(5):
        t.update([0.5, 0.3])
    assert t.difficulty() == [0.0, 0.0]
    assert t.weights() == [0.1, 0.1]


def test_drs_cold_start_unit_weights():
    t = L.DifficultyTracker(3)
    assert t.weights() == [1.0, 1.0, 1.0]
    t.update([0.2, 0.3, 0.4])
    assert t.weights() == [1.0, 1.0, 1.0]


def test_drs_window_limits_history():
    t = L.DifficultyTracker(1, window=3)
    for v in (0.9, 0.1, 0.2, 0.3, 0.4):
        t.update([v])
    # the big drop left the window; only improvements remain
    assert t.accumulators()[0] == [0.0]


@settings(max_examples=30, deadline=None)
@given(seq=st.lists(st.floats(0.0, 1.0), min_size=2, max_size=40))
def test_drs_sign_gating(seq):
    t = L.DifficultyTracker(1, window=50)
    t.update([seq[0]])
    for v in seq[1:]:
        du0, dl0 = (a[0] for a in t.accumulators())
        prev = t.history[-1][0]
        t.update([v])
        du1, dl1 = (a[0] for a in t.accumulators())
        cur = t.history[-1][0]
        if cur > prev:
            assert du1 == du0 and dl1 >= dl0
        elif cur < prev:
            assert dl1 == dl0 and du1 >= du0
        else:
            assert (du1, dl1) == (du0, dl0)
    w = t.weights()
    assert all(math.isfinite(x) and x >= 0 for x in w)


def test_drs_inverse_dice_weight():
    t = L.DifficultyTracker(2, alpha=0.2, w_min=0.0)
    for v in ([0.5, 0.5], [0.4, 0.7], [0.6, 0.6]):
        t.update(v)
    du, dl = t.accumulators()
    d = [u / l for u, l in zip(du, dl)]
    inv = [0.4, 0.4]
    wl = [2 * x / sum(inv) for x in inv]
    np.testing.assert_allclose(t.weights(), [wl[k] * d[k] ** 0.2 for k in range(2)], rtol=1e-12)


def test_drs_state_round_trip():
    t = L.DifficultyTracker(2)
    for v in ([0.1, 0.2], [0.3, 0.1], [0.2, 0.5]):
        t.update(v)
    u = L.DifficultyTracker(2)
    u.load_state_dict(t.state_dict())
    assert u.weights() == t.weights()


# -- reconstruction / KD ------------------------------------------------------------

def test_loss_rec_cases():
    g = torch.Generator().manual_seed(7)
    t = torch.randn(2, 3, 2, 2, 2, generator=g, dtype=torch.float64)
    assert L.loss_rec(t.clone(), t).item() == 0
    assert L.loss_rec(torch.zeros_like(t), t).item() == 1.0
    s = torch.randn(2, 3, 2, 2, 2, generator=g, dtype=torch.float64)
    ref = sum(oracles.rec_ratio(oracles.to_lists(s[i]), oracles.to_lists(t[i])) for i in range(2)) / 2
    assert abs(L.loss_rec(s, t).item() - ref) <= 1e-10 * ref
    assert math.isfinite(L.loss_rec(s, torch.zeros_like(s)).item())


def test_loss_rec_teacher_detached():
    t = torch.randn(1, 2, 2, 2, 2, dtype=torch.float64, requires_grad=True)
    s = torch.randn(1, 2, 2, 2, 2, dtype=torch.float64, requires_grad=True)
    L.loss_rec(s, t).backward()
    assert t.grad is None and s.grad is not None


def test_soft_dice_hand_value():
    p = torch.tensor([0.6, 0.4], dtype=torch.float64).reshape(2, 1, 1, 1)
    q = torch.tensor([0.5, 0.5], dtype=torch.float64).reshape(2, 1, 1, 1)
    assert abs(L.soft_dice(p, q, eps=0.0).item() - 0.0204) < 1e-4
    assert abs(L.soft_dice(p, p).item()) < 1e-12
    a = torch.tensor([1.0, 0.0], dtype=torch.float64).reshape(2, 1, 1, 1)
    assert abs(L.soft_dice(a, 1 - a).item() - 1) < 1e-4


def test_loss_kd_cases():
    g = torch.Generator().manual_seed(8)
    p = _probs((2, 3, 2, 2, 2), g)
    assert L.loss_kd(p, p, p).item() < 1e-10
    q = _probs((2, 3, 2, 2, 2), g)
    expected = 2 * L.soft_dice_per_sample(p, q).mean()
    torch.testing.assert_close(L.loss_kd(p, q, q), expected)
    r = _probs((2, 3, 2, 2, 2), g)
    ref = sum(oracles.soft_dice(oracles.to_lists(p[i]), oracles.to_lists(q[i]))
              + oracles.soft_dice(oracles.to_lists(p[i]), oracles.to_lists(r[i])) for i in range(2)) / 2
    assert abs(L.loss_kd(p, q, r).item() - ref) <= 1e-10 * ref


# -- total ----------------------------------------------------------------------------

def test_total_la_weights():
    ones = dict.fromkeys(L.COMPONENTS, 1.0)
    w = L.LossWeights(alpha=2.0, beta=0.1, gamma=0.2, eta=1.2)
    assert abs(L.total_loss(ones, w) - 6.5) < 1e-12


def test_total_zero_weights():
    c = dict(deno=0.3, diff=0.4, u=9.0, mix=0.5, mic=7.0, kd=7.0, rec=7.0, corr=7.0)
    assert abs(L.total_loss(c, L.LossWeights(0, 0, 0, 0)) - 1.2) < 1e-12


def test_total_linear_in_each_weight():
    c = dict(deno=0.3, diff=0.4, u=0.1, mix=0.5, mic=0.7, kd=0.2, rec=0.9, corr=0.6)
    base = L.LossWeights()
    for name, comp in [("alpha", "mic"), ("beta", "kd"), ("gamma", "rec"), ("eta", "corr")]:
        bumped = L.LossWeights(**{**base.__dict__, name: getattr(base, name) + 1.0})
        assert abs(L.total_loss(c, bumped) - L.total_loss(c, base) - c[comp]) < 1e-12


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        L.LossWeights(alpha=-1.0)
    with pytest.raises(ValueError):
        L.LossWeights(eta=float("nan"))


def test_losses_nonnegative():
    g = torch.Generator().manual_seed(9)
    p, q = _probs((2, 3, 3, 3, 3), g), _onehot((2, 3, 3, 3, 3), g)
    for v in (L.dice_ce(p, q), L.loss_diff(p, q), L.soft_dice(p[0], q[0]), L.loss_kd(p, q, q),
              L.loss_rec(p, q)):
        assert v.item() >= 0
