import math

import numpy as np
import pytest

from histo_ssl.errors import ConfigError, DimensionError, NumericError, ParameterError
from histo_ssl.optim import (
    EmaSchedule,
    OptimConfig,
    Optimizer,
    OptState,
    adamw_step,
    clip_grad_norm,
    cosine_schedule,
    ema_update,
    global_norm,
    lr_scale,
    no_weight_decay,
    stable_adamw_step,
    update_rms,
)


def test_lr_scale():
    assert lr_scale(2e-4, 1024) == pytest.approx(2e-4)
    assert lr_scale(2e-4, 4096) == pytest.approx(4e-4)
    assert lr_scale(2e-4, 256) == pytest.approx(1e-4)
    with pytest.raises(ParameterError):
        lr_scale(2e-4, 0)


def test_cosine_schedule():
    assert cosine_schedule(0, 100, 1.0, 0.1) == pytest.approx(1.0)
    assert cosine_schedule(50, 100, 1.0, 0.1) == pytest.approx(0.55)
    assert cosine_schedule(100, 100, 1.0, 0.1) == 0.1
    assert cosine_schedule(500, 100, 1.0, 0.1) == 0.1


def test_cosine_schedule_with_warmup():
    assert cosine_schedule(0, 110, 1.0, 0.0, warmup_steps=10) == 0.0
    assert cosine_schedule(5, 110, 1.0, 0.0, warmup_steps=10) == pytest.approx(0.5)
    assert cosine_schedule(10, 110, 1.0, 0.0, warmup_steps=10) == pytest.approx(1.0)
    assert cosine_schedule(60, 110, 1.0, 0.0, warmup_steps=10) == pytest.approx(0.5)


def test_cosine_schedule_rejects_negative_steps():
    with pytest.raises(ParameterError):
        cosine_schedule(-1, 100, 1.0, 0.0)


def test_clip_grad_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([[0.0], [3.0 * math.sqrt(3.0)]])}
    clipped, norm = clip_grad_norm(grads, 3.0)
    assert norm == pytest.approx(6.0)
    assert global_norm(clipped) == pytest.approx(3.0, abs=1e-6)
    np.testing.assert_allclose(clipped["a"], [1.5, 0.0])


def test_clip_grad_norm_leaves_small_gradients_alone():
    grads = {"a": np.array([1.0, 1.0])}
    clipped, norm = clip_grad_norm(grads, 3.0)
    assert clipped is grads
    assert norm == pytest.approx(math.sqrt(2.0))


def test_ema_update_extremes():
    teacher = {"w": np.array([1.0, 2.0])}
    student = {"w": np.array([5.0, 6.0])}
    np.testing.assert_array_equal(ema_update(teacher, student, 1.0)["w"], teacher["w"])
    np.testing.assert_array_equal(ema_update(teacher, student, 0.0)["w"], student["w"])
    np.testing.assert_allclose(ema_update(teacher, student, 0.75)["w"], [2.0, 3.0])


def test_ema_update_errors():
    teacher = {"w": np.zeros(2)}
    with pytest.raises(ParameterError):
        ema_update(teacher, teacher, 1.5)
    with pytest.raises(DimensionError):
        ema_update(teacher, {"w": np.zeros(3)}, 0.5)
    with pytest.raises(DimensionError):
        ema_update(teacher, {}, 0.5)


def test_ema_schedule():
    schedule = EmaSchedule(start=0.994, end=1.0, horizon=100)
    assert schedule(0) == pytest.approx(0.994)
    assert schedule(50) == pytest.approx(0.997)
    assert schedule(100) == 1.0
    with pytest.raises(ConfigError):
        EmaSchedule(start=1.2)


def test_adamw_first_step_moves_by_lr():
    cfg = OptimConfig()
    param = np.array([1.0, -1.0])
    grad = np.array([0.3, -7.0])
    updated, state = adamw_step(param, grad, OptState.zeros_like(param), 0.01, 0.0, cfg)
    np.testing.assert_allclose(updated, [0.99, -0.99], rtol=1e-6)
    assert state.t == 1


def test_adamw_weight_decay_is_decoupled():
    cfg = OptimConfig()
    param = np.array([2.0])
    updated, _ = adamw_step(param, np.zeros(1), OptState.zeros_like(param), 0.1, 0.5, cfg)
    np.testing.assert_allclose(updated, [2.0 - 0.1 * 0.5 * 2.0])


def test_adamw_rejects_non_finite_gradients():
    param = np.zeros(2)
    with pytest.raises(NumericError, match="gradient of w"):
        adamw_step(param, np.array([np.nan, 0.0]), OptState.zeros_like(param), 0.1, 0.0, OptimConfig(), "w")


def test_stable_adamw_matches_adamw_when_rms_is_small(rng):
    cfg = OptimConfig(rule="stable_adamw")
    param = rng.normal(size=(4, 4))
    state = OptState.zeros_like(param)
    for _ in range(5):
        grad = rng.normal(size=(4, 4))
        expected, expected_state = adamw_step(param, grad, state, 1e-3, 0.05, cfg)
        actual, state = stable_adamw_step(param, grad, state, 1e-3, 0.05, cfg)
        np.testing.assert_array_equal(actual, expected)
        np.testing.assert_array_equal(state.m, expected_state.m)
        param = actual


def test_stable_adamw_divides_lr_by_update_rms():
    cfg = OptimConfig(rule="stable_adamw")
    param = np.zeros(4)
    # stale first moment with no second moment gives a huge update
    state = OptState(m=np.full(4, 0.5), v=np.full(4, 1e-6), t=1)
    grad = np.zeros(4)
    plain, _ = adamw_step(param, grad, state, 1.0, 0.0, cfg)
    rms = update_rms(-plain)
    assert rms > 1.0
    stable, _ = stable_adamw_step(param, grad, state, 1.0, 0.0, cfg)
    np.testing.assert_allclose(stable, plain / rms)
    assert update_rms(-stable) == pytest.approx(1.0)


@pytest.mark.parametrize(
    "name, expected",
    [
        ("backbone.blocks.0.attn.qkv.b", True),
        ("backbone.blocks.0.norm1.g", True),
        ("backbone.patch_embed.w", False),
        ("dino_head.prototypes.v", False),
    ],
)
def test_no_weight_decay(name, expected):
    assert no_weight_decay(name) is expected


def test_optimizer_skips_decay_for_biases():
    params = {"layer.w": np.ones(2), "layer.b": np.ones(2)}
    zeros = {name: np.zeros(2) for name in params}
    updated = Optimizer(params, OptimConfig()).step(params, zeros, lr=0.1, wd=0.5)
    np.testing.assert_allclose(updated["layer.w"], [0.95, 0.95])
    np.testing.assert_array_equal(updated["layer.b"], params["layer.b"])


def test_optimizer_state_round_trip(rng):
    params = {"a.w": rng.normal(size=(3, 2)), "a.b": np.zeros(2)}
    grads = {name: rng.normal(size=value.shape) for name, value in params.items()}
    first = Optimizer(params, OptimConfig())
    params = first.step(params, grads, 1e-3, 0.04)
    tensors = first.state_tensors()
    assert set(tensors) == {"opt.m.a.w", "opt.v.a.w", "opt.m.a.b", "opt.v.a.b"}

    second = Optimizer(params, OptimConfig())
    second.load_state_tensors(tensors, t=1)
    np.testing.assert_array_equal(
        first.step(params, grads, 1e-3, 0.04)["a.w"],
        second.step(params, grads, 1e-3, 0.04)["a.w"],
    )


def test_optim_config_validation():
    with pytest.raises(ConfigError):
        OptimConfig(beta1=1.0)
    with pytest.raises(ConfigError):
        OptimConfig(base_lr=0.0)
    with pytest.raises(ValueError):
        OptimConfig(rule="sgd")
