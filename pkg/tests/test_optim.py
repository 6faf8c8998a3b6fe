"""Adam recurrence, cosine schedule, and flow-freeze rule."""

import numpy as np
import pytest

from vsrpp import Tensor
from vsrpp.errors import ConfigError
from vsrpp.optim import Adam, ParamGroup, collect_grads, cosine_lr, flow_frozen


def make_opt(values, lr=0.1):
    params = {f"p{i}": Tensor(np.asarray(v, dtype=np.float32), requires_grad=True)
              for i, v in enumerate(values)}
    group = ParamGroup("main", params, lr)
    return Adam([group]), group


def test_zero_gradients_leave_params_unchanged():
    opt, group = make_opt([np.ones(3)])
    before = group.params["p0"].data.copy()
    opt.step({"p0": np.zeros(3, np.float32)}, {"main": 0.1})
    assert np.array_equal(group.params["p0"].data, before)


def test_first_step_moves_by_lr():
    # g=1, lr=0.1, defaults: bias correction makes the first step ~= lr
    opt, group = make_opt([np.zeros(1)])
    opt.step({"p0": np.ones(1, np.float32)}, {"main": 0.1})
    delta = float(group.params["p0"].data[0])
    assert abs(delta + 0.1) < 1e-6


def test_hand_evaluated_two_steps():
    # recurrence transcribed by hand for g = [1, 0.5]
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.1
    m = v = 0.0
    p = 0.0
    for tstep, g in enumerate((1.0, 0.5), start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1 ** tstep)) / (np.sqrt(v / (1 - b2 ** tstep)) + eps)

    opt, group = make_opt([np.zeros(1)])
    opt.step({"p0": np.ones(1, np.float32)}, {"main": lr})
    opt.step({"p0": np.full(1, 0.5, np.float32)}, {"main": lr})
    assert abs(float(group.params["p0"].data[0]) - p) < 1e-6


def test_two_groups_update_at_own_rates():
    main = ParamGroup("main", {"a": Tensor(np.zeros(1), requires_grad=True)}, 1e-4)
    flow = ParamGroup("flow", {"f": Tensor(np.zeros(1), requires_grad=True)}, 2.5e-5)
    opt = Adam([main, flow])
    grads = {"a": np.ones(1, np.float32), "f": np.ones(1, np.float32)}
    opt.step(grads, {"main": main.lr_base, "flow": flow.lr_base})
    assert abs(float(main.params["a"].data[0]) + 1e-4) < 1e-9
    assert abs(float(flow.params["f"].data[0]) + 2.5e-5) < 1e-9


def test_missing_gradient_key_raises():
    opt, _ = make_opt([np.zeros(2)])
    with pytest.raises(KeyError):
        opt.step({}, {"main": 0.1})


def test_skip_groups_freezes_params_and_moments():
    flow = ParamGroup("flow", {"f": Tensor(np.ones(2), requires_grad=True)}, 1e-3)
    opt = Adam([flow])
    snap = flow.params["f"].data.copy()
    opt.step({"f": np.ones(2, np.float32)}, {"flow": 1e-3}, skip_groups=("flow",))
    assert np.array_equal(flow.params["f"].data, snap)
    assert np.all(opt._m["f"] == 0.0)


def test_determinism_bitwise(rng):
    def run():
        opt, group = make_opt([rng1.standard_normal(4)])
        for _ in range(5):
            opt.step({"p0": np.full(4, 0.3, np.float32)}, {"main": 0.05})
        return group.params["p0"].data.copy()

    rng1 = np.random.default_rng(7)
    a = run()
    rng1 = np.random.default_rng(7)
    b = run()
    assert np.array_equal(a, b)


def test_collect_grads_fills_missing_with_zeros():
    p = Tensor(np.zeros(3), requires_grad=True)
    group = ParamGroup("main", {"p": p}, 0.1)
    grads = collect_grads([group])
    assert np.array_equal(grads["p"], np.zeros(3, np.float32))
    p.grad = np.ones(3, np.float32)
    assert np.array_equal(collect_grads([group])["p"], np.ones(3, np.float32))


# ---------------------------------------------------------------------------
# cosine schedule


def test_cosine_endpoints_and_midpoint():
    assert cosine_lr(0, 100, 2e-4) == pytest.approx(2e-4)
    assert cosine_lr(100, 100, 2e-4) == pytest.approx(0.0, abs=1e-20)
    assert cosine_lr(50, 100, 2e-4) == pytest.approx(1e-4)


def test_cosine_monotone_non_increasing():
    vals = [cosine_lr(s, 37, 1.0) for s in range(38)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_cosine_clamps_beyond_end_with_warning():
    with pytest.warns(UserWarning):
        assert cosine_lr(101, 100, 1.0) == 0.0


def test_cosine_rejects_bad_args():
    with pytest.raises(ConfigError):
        cosine_lr(0, 0, 1.0)
    with pytest.raises(ConfigError):
        cosine_lr(-1, 10, 1.0)


# ---------------------------------------------------------------------------
# flow freeze window


def test_flow_freeze_boundaries():
    assert flow_frozen(0, 100)
    assert flow_frozen(99, 100)
    assert not flow_frozen(100, 100)
    assert not flow_frozen(0, 0)
