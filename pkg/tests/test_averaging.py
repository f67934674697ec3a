import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fatlab.averaging import QualitySnapshot, auto_ema_update, ema_update, init_ema, quality_ratio
from fatlab.models import ModelParams, ModelSpec, init_params

SPEC = ModelSpec(3, (2,), 2)


def const_params(value):
    return ModelParams.from_flat(SPEC, np.full(SPEC.total_count, float(value)))


def test_single_update_scalar_view():
    state = ema_update(init_ema(const_params(0.0), tau=0.9), const_params(1.0))
    np.testing.assert_allclose(state.theta_avg.flat(), 0.1, rtol=1e-15)
    assert state.updates_applied == 1


def test_fixed_point():
    p = init_params(SPEC, 0)
    assert ema_update(init_ema(p), p).theta_avg.equal(p)


def test_residual_after_n_constant_updates():
    tau, n = 0.9, 25
    state = init_ema(const_params(1.0), tau=tau)
    for _ in range(n):
        state = ema_update(state, const_params(0.0))
    np.testing.assert_allclose(state.theta_avg.flat(), tau ** n, rtol=1e-12)


def test_quality_ratio_examples():
    assert quality_ratio(50, 41, 50) == 0.82
    assert quality_ratio(30, 30, 50) == 1.0
    assert quality_ratio(0, 0, 50) == 1.0
    assert QualitySnapshot(50, 41, 50).delta_ratio == 0.82
    with pytest.raises(ValueError):
        QualitySnapshot(51, 0, 50)


def test_gate_open_and_closed():
    live = init_params(SPEC, 1)
    state = init_ema(init_params(SPEC, 2), threshold=0.82)
    opened = auto_ema_update(state, live, 0.5)
    assert opened.updates_applied == 1 and not opened.theta_avg.equal(state.theta_avg)
    closed = auto_ema_update(state, live, 0.95)
    assert closed.theta_avg.equal(state.theta_avg)
    assert closed.updates_skipped == 1
    at_threshold = auto_ema_update(state, live, QualitySnapshot(50, 41, 50))
    assert at_threshold.updates_applied == 1


def test_reversed_gate_direction():
    state = init_ema(init_params(SPEC, 2), gate="gt")
    assert auto_ema_update(state, init_params(SPEC, 1), 0.95).updates_applied == 1
    assert auto_ema_update(state, init_params(SPEC, 1), 0.5).updates_skipped == 1


def test_spec_mismatch_rejected():
    with pytest.raises(ValueError, match="spec mismatch"):
        ema_update(init_ema(init_params(SPEC, 0)), init_params(ModelSpec(3, (), 2), 0))


def test_invalid_parameters_rejected():
    with pytest.raises(ValueError):
        init_ema(init_params(SPEC, 0), tau=1.0)
    with pytest.raises(ValueError):
        init_ema(init_params(SPEC, 0), threshold=0.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(0.0, 1.0), st.integers(0, 1000)), min_size=1, max_size=12),
       st.floats(0.5, 0.99))
def test_stream_properties(stream, tau):
    start = init_params(SPEC, 0)
    auto = vanilla = open_auto = init_ema(start, tau=tau)
    applied = []
    for ratio, seed in stream:
        live = init_params(SPEC, seed)
        before = auto.theta_avg
        auto = auto_ema_update(auto, live, ratio)
        if ratio <= 0.82:
            applied.append(live)
        else:
            assert auto.theta_avg.equal(before)
        vanilla = ema_update(vanilla, live)
        open_auto = auto_ema_update(open_auto, live, 0.0)
    assert auto.calls == len(stream)
    assert open_auto.theta_avg.equal(vanilla.theta_avg)
    # convex-combination envelope
    pool = np.stack([start.flat()] + [p.flat() for p in applied])
    flat = auto.theta_avg.flat()
    assert np.all(flat >= pool.min(axis=0) - 1e-12) and np.all(flat <= pool.max(axis=0) + 1e-12)
