import numpy as np
import pytest

from sparselab.errors import ScheduleError
from sparselab.models import ParamStore
from sparselab.optim import LrSchedule, SgdState, lr_at, reset_momentum, sgd_step


def make_store(values, mask=None, trainable=True):
    store = ParamStore()
    store.add("w", np.asarray(values, dtype=np.float32))
    store["w"].trainable = trainable
    if mask is not None:
        store.set_mask("w", np.asarray(mask, dtype=np.float32))
    return store


def test_lr_peak_at_warmup_end():
    s = LrSchedule(peak=0.5, warmup_end=20, total_steps=100)
    assert lr_at(s, 20) == pytest.approx(0.5, abs=0)


def test_lr_zero_at_end():
    s = LrSchedule(peak=0.5, warmup_end=20, total_steps=100)
    assert lr_at(s, 100) == 0.0


def test_lr_linear_midpoint_exact():
    s = LrSchedule(peak=0.4, warmup_end=20, total_steps=100)
    assert lr_at(s, 60) == pytest.approx(0.2, abs=0)


def test_lr_piecewise_linear_and_peak():
    s = LrSchedule(peak=0.3, warmup_end=10, total_steps=50)
    values = [lr_at(s, t) for t in range(51)]
    assert max(values) == pytest.approx(0.3)
    assert all(v >= 0 for v in values)
    # linearity on each segment
    for t in range(1, 10):
        assert values[t] == pytest.approx(0.3 * t / 10)
    for t in range(10, 51):
        assert values[t] == pytest.approx(0.3 * (50 - t) / 40)


def test_lr_out_of_range():
    s = LrSchedule(peak=0.1, warmup_end=0, total_steps=10)
    with pytest.raises(ScheduleError):
        lr_at(s, 11)
    with pytest.raises(ScheduleError):
        lr_at(s, -1)


def test_vanilla_sgd_step():
    store = make_store([1.0, 2.0])
    state = SgdState(store, LrSchedule(kind="constant", peak=0.5, total_steps=10), momentum=0.0, weight_decay=0.0)
    sgd_step(store, {"w": np.array([0.2, -0.4], dtype=np.float32)}, state, 0)
    w = store["w"].weights
    assert np.array_equal(w, np.float32([1.0, 2.0]) - np.float32(0.5) * np.float32([0.2, -0.4]))


def test_pure_decay_step():
    store = make_store([2.0])
    state = SgdState(store, LrSchedule(kind="constant", peak=1.0, total_steps=10), momentum=0.0, weight_decay=0.1)
    sgd_step(store, {"w": np.zeros(1, dtype=np.float32)}, state, 0)
    assert store["w"].weights[0] == pytest.approx(1.8, abs=1e-7)


def test_two_momentum_steps_hand_unrolled():
    # beta=0.9, g=1 constant, lr=0.1, w0=0: w2 = -0.1*1 - 0.1*1.9 = -0.29
    store = make_store([0.0])
    state = SgdState(store, LrSchedule(kind="constant", peak=0.1, total_steps=100), momentum=0.9, weight_decay=0.0)
    g = {"w": np.ones(1, dtype=np.float32)}
    sgd_step(store, g, state, 0)
    sgd_step(store, g, state, 1)
    assert store["w"].weights[0] == pytest.approx(-0.29, abs=1e-7)


def test_masked_entries_stay_exactly_zero():
    store = make_store([1.0, 0.0, 3.0], mask=[1, 0, 1])
    state = SgdState(store, LrSchedule(kind="constant", peak=0.1, total_steps=100), momentum=0.9, weight_decay=0.01)
    for step in range(20):
        sgd_step(store, {"w": np.ones(3, dtype=np.float32)}, state, step)
    assert store["w"].weights[1] == 0.0
    assert state.buffers["w"][1] == 0.0
    assert store["w"].weights[0] != 0.0


def test_frozen_entries_untouched():
    store = make_store([1.0, 2.0], trainable=False)
    state = SgdState(store, LrSchedule(kind="constant", peak=0.1, total_steps=100))
    before = store["w"].weights.copy()
    sgd_step(store, {"w": np.ones(2, dtype=np.float32)}, state, 0)
    assert np.array_equal(before, store["w"].weights)


def test_reset_momentum_single_entry():
    store = make_store([1.0, 2.0, 3.0])
    state = SgdState(store, LrSchedule(kind="constant", peak=0.1, total_steps=100), momentum=0.9)
    sgd_step(store, {"w": np.ones(3, dtype=np.float32)}, state, 0)
    assert np.all(state.buffers["w"] != 0.0)
    reset_momentum(state, {"w": np.array([False, True, False])})
    assert state.buffers["w"][1] == 0.0
    assert state.buffers["w"][0] != 0.0


def test_reset_momentum_empty_and_full():
    store = make_store([1.0, 2.0])
    state = SgdState(store, LrSchedule(kind="constant", peak=0.1, total_steps=100), momentum=0.9)
    sgd_step(store, {"w": np.ones(2, dtype=np.float32)}, state, 0)
    reset_momentum(state, {})
    assert np.all(state.buffers["w"] != 0.0)
    reset_momentum(state, {"w": np.ones(2, dtype=bool)})
    assert np.all(state.buffers["w"] == 0.0)


def test_cosine_schedule_endpoints():
    s = LrSchedule(kind="cosine", peak=0.2, warmup_end=5, total_steps=25)
    assert lr_at(s, 5) == pytest.approx(0.2)
    assert lr_at(s, 25) == pytest.approx(0.0, abs=1e-17)
