"""Online tracker: forward fits of new GD rows, backward refreshes and stream replay."""

from dataclasses import replace

import numpy as np
import pytest

from core.errors import ArgumentError, StreamError
from core.mtc_batch import fit
from core.mtc_online import TrackerState, advance, bp_step, fp_step, start, stream, track
from core.multiversion import EventLog, UpdateEvent, extend, ingest
from core.schemas import GeneratorConfig, SolverConfig
from core.synth import emit_events, generate
from core.tensor_core import FactorSet, reconstruct

EXACT = SolverConfig(rank=2, rho_a=0.0, rho=0.0)


def _planted_state(factors, log, horizon, cfg=EXACT):
    """Tracker sitting exactly on the planted factors at ``horizon``."""
    ds = ingest(log, 3, horizon, n_locations=4, n_features=3)
    theta = FactorSet(factors.A, factors.B, factors.C, factors.D[:horizon])
    return TrackerState(factors=theta, dataset=ds, cfg=cfg, scale=1.0)


def _ones_problem(c, cfg):
    """F = 1, all-ones A, B, C; the newest GD carries the constant c per update."""
    D = np.array([[1.0], [2.0], [c]])
    factors = FactorSet(np.ones((2, 1)), np.ones((3, 1)), np.ones((3, 1)), D)
    log, _ = emit_events(reconstruct(factors).values, horizon=3, K=3)
    ds = ingest(log, 3, 2, n_locations=2, n_features=3)
    state = TrackerState(factors=factors.replace(D=D[:2]), dataset=ds, cfg=cfg, scale=1.0)
    return state, extend(ds, log, 3)


def test_forward_step_recovers_planted_row(planted):
    factors, _, log = planted
    state = _planted_state(factors, log, 6)
    forward = fp_step(state, extend(state.dataset, log, 7))
    np.testing.assert_allclose(forward.d, factors.D[6], atol=1e-6)
    assert not forward.zero_slab


def test_forward_step_scalar_case():
    state, ds_next = _ones_problem(2.5, SolverConfig(rank=1, rho_a=0.0, rho=0.0))
    assert fp_step(state, ds_next).d[0] == pytest.approx(2.5, rel=1e-8)


def test_literal_forward_step_counts_missing_updates_as_zero():
    cfg = SolverConfig(rank=1, rho_a=0.0, rho=0.0, literal_fp=True)
    state, ds_next = _ones_problem(2.5, cfg)
    # only the first of three updates is loaded
    assert fp_step(state, ds_next).d[0] == pytest.approx(2.5 / 3, rel=1e-8)


def test_forward_step_on_zero_slab(planted):
    factors, X, _ = planted
    X = X.copy()
    X[..., 6] = 0.0
    log, _ = emit_events(X, horizon=7, K=3)
    state = _planted_state(factors, log, 6)
    forward = fp_step(state, extend(state.dataset, log, 7))
    assert forward.zero_slab and forward.iterations == 0
    assert not forward.d.any()


def test_forward_step_needs_exactly_one_new_gd(planted):
    factors, _, log = planted
    state = _planted_state(factors, log, 5)
    with pytest.raises(ArgumentError):
        fp_step(state, extend(state.dataset, log, 7))


def test_backward_step_is_fixed_point_on_stationary_stream(planted):
    factors, _, log = planted
    state = _planted_state(factors, log, 6)
    ds_next = extend(state.dataset, log, 7)
    new_state, residual = bp_step(state, ds_next, factors.D[6])
    # the refresh works in the unit-column gauge
    for got, want in zip(new_state.factors.as_list(), factors.normalized().as_list()):
        assert np.linalg.norm(got - want) <= 1e-6
    assert residual <= 1e-8
    assert new_state.S == 7 and new_state.arrivals == 1


def test_backward_step_keeps_observed_entries(planted, rng):
    factors, _, log = planted
    noisy = factors.replace(A=factors.A * rng.uniform(0.8, 1.2, size=factors.A.shape))
    state = _planted_state(noisy, log, 6)
    ds_next = extend(state.dataset, log, 7)
    new_state, _ = bp_step(state, ds_next, fp_step(state, ds_next).d)
    mask = ds_next.mask.dense()
    np.testing.assert_array_equal(new_state.Y[mask], ds_next.update_tensor.values[mask])
    assert new_state.factors.is_nonnegative()
    assert new_state.factors.A.shape == factors.A.shape
    assert new_state.factors.D.shape == (7, 2)


def test_backward_step_keeps_unit_profile_columns(planted, rng):
    factors, _, log = planted
    noisy = factors.replace(B=factors.B * rng.uniform(0.5, 2.0, size=factors.B.shape))
    state = _planted_state(noisy, log, 6)
    ds_next = extend(state.dataset, log, 7)
    new_state, _ = bp_step(state, ds_next, fp_step(state, ds_next).d)
    for M in new_state.factors.as_list()[:3]:
        np.testing.assert_allclose(np.linalg.norm(M, axis=0), 1.0, rtol=1e-12)


def test_duplicated_arrival_leaves_the_new_row_unchanged(planted, rng):
    factors, _, log = planted
    noisy = factors.replace(A=factors.A * rng.uniform(0.8, 1.2, size=factors.A.shape))
    state = _planted_state(noisy, log, 6)
    arrival = log.select(log.ld == 7)
    halves = EventLog(
        np.concatenate([arrival.location, arrival.location]),
        np.concatenate([arrival.feature, arrival.feature]),
        np.concatenate([arrival.gd, arrival.gd]),
        np.concatenate([arrival.ld, arrival.ld]),
        np.concatenate([arrival.count / 2, arrival.count / 2]),
    )
    once = fp_step(state, extend(state.dataset, arrival, 7))
    split = fp_step(state, extend(state.dataset, halves, 7))
    again = fp_step(state, extend(state.dataset, arrival, 7))
    np.testing.assert_allclose(split.d, once.d, rtol=0, atol=EXACT.fp_tol)
    np.testing.assert_allclose(again.d, once.d, rtol=0, atol=EXACT.fp_tol)

    # the forward fit reads observed entries only
    scrambled = replace(state, Y=rng.uniform(size=state.dataset.update_tensor.dims))
    np.testing.assert_allclose(fp_step(scrambled, extend(state.dataset, arrival, 7)).d, once.d, rtol=0, atol=0)


def test_backward_step_rejects_wrong_rank(planted):
    factors, _, log = planted
    state = _planted_state(factors, log, 6)
    with pytest.raises(ArgumentError):
        bp_step(state, extend(state.dataset, log, 7), np.ones(3))


def test_advance_reports_the_window(planted):
    factors, _, log = planted
    state = _planted_state(factors, log, 6)
    new_state, arrival = advance(state, log.select(log.ld == 7))
    assert arrival.ld == 7 and arrival.gd == 7
    assert arrival.window_gds.tolist() == [6, 7]
    assert arrival.estimate.shape == (4, 3, 2)
    assert arrival.events == int((log.ld == 7).sum())
    np.testing.assert_allclose(arrival.estimate, new_state.estimate()[..., 5:], rtol=1e-12)
    truth = reconstruct(factors).values.sum(axis=2)[..., 5:]
    np.testing.assert_allclose(arrival.estimate, truth, rtol=1e-6)


def test_advance_rejects_events_from_other_dates(planted):
    factors, _, log = planted
    state = _planted_state(factors, log, 5)
    with pytest.raises(StreamError):
        advance(state, log.select(log.ld == 7))


def test_stream_rejects_decreasing_loading_dates(planted):
    factors, _, log = planted
    state = _planted_state(factors, log, 5)
    events = [UpdateEvent(0, 0, 7, 7, 1.0), UpdateEvent(0, 0, 6, 6, 1.0)]
    with pytest.raises(StreamError, match="record 1"):
        list(stream(state, events))


def test_stream_rejects_replayed_dates(planted):
    factors, _, log = planted
    state = _planted_state(factors, log, 5)
    with pytest.raises(StreamError):
        list(stream(state, [UpdateEvent(0, 0, 5, 5, 1.0)]))


def test_empty_loading_dates_append_zero_rows(planted):
    factors, _, log = planted
    state = _planted_state(factors, log, 7)
    final, arrivals = track(state, EventLog.empty(), until=10)
    assert [a.ld for a in arrivals] == [8, 9, 10]
    assert all(a.zero_slab for a in arrivals)
    assert final.factors.D.shape == (10, 2)
    assert np.abs(final.factors.D[7:]).max() <= 1e-12
    assert np.abs(arrivals[-1].estimate[..., -1]).max() <= 1e-12


def test_shapes_and_signs_across_a_stream(small_data, small_ds, quick_solver):
    ds0 = ingest(small_data.events, 3, small_data.horizon - 3, n_locations=5, n_features=4)
    state = start(fit(ds0, None, quick_solver), ds0)
    shapes = [M.shape for M in state.factors.as_list()[:3]]
    later = small_data.events.select(small_data.events.ld > ds0.horizon).sorted_by_ld()
    final, arrivals = track(state, later)
    assert len(arrivals) == 3
    assert [M.shape for M in final.factors.as_list()[:3]] == shapes
    assert final.factors.D.shape == (small_ds.S, 2)
    assert final.factors.is_nonnegative()
    for arrival in arrivals:
        assert np.isfinite(arrival.estimate).all() and (arrival.estimate >= 0).all()
        assert arrival.fp_iters_used <= quick_solver.fp_iters
    np.testing.assert_allclose(final.dataset.update_tensor.values, small_ds.update_tensor.values, atol=1e-12)


def test_replaying_a_static_dataset_stays_near_the_batch_fit():
    data = generate(GeneratorConfig(I=6, J=5, S=20, K=3, F=2, seed=4, noise_scale=0.3))
    cfg = SolverConfig(rank=2, max_outer_iters=300)
    full = ingest(data.events, 3, data.horizon, n_locations=6, n_features=5)
    ds0 = ingest(data.events, 3, 10, n_locations=6, n_features=5)
    state = start(fit(ds0, None, cfg), ds0)
    final, arrivals = track(state, data.events.select(data.events.ld > 10).sorted_by_ld())
    assert len(arrivals) == data.horizon - 10

    mask, X = full.mask.dense(), full.update_tensor.values

    def observed_error(values):
        return np.linalg.norm((values - X)[mask]) / np.linalg.norm(X[mask])

    online = observed_error(reconstruct(final.factors).values * final.scale)
    batch = observed_error(reconstruct(fit(full, None, cfg).factors).values)
    assert online <= 2 * batch


def test_stream_stops_at_until(small_data, quick_solver):
    ds0 = ingest(small_data.events, 3, 9, n_locations=5, n_features=4)
    state = start(fit(ds0, None, quick_solver), ds0)
    later = small_data.events.select(small_data.events.ld > 9).sorted_by_ld()
    final, arrivals = track(state, later, until=10)
    assert len(arrivals) == 1 and final.dataset.horizon == 10


def test_resync_runs_on_schedule(small_data, quick_solver):
    cfg = quick_solver.model_copy(update={"resync_every": 2})
    ds0 = ingest(small_data.events, 3, 9, n_locations=5, n_features=4)
    state = start(fit(ds0, None, cfg), ds0)
    later = small_data.events.select(small_data.events.ld > 9).sorted_by_ld()
    _, arrivals = track(state, later)
    assert [a.resynced for a in arrivals] == [False, True, False]


def test_start_rejects_mismatched_dataset(small_data, small_ds, quick_solver):
    result = fit(small_ds, None, quick_solver)
    other = ingest(small_data.events, 3, small_data.horizon - 1, n_locations=5, n_features=4)
    with pytest.raises(ArgumentError):
        start(result, other)


def test_start_imputes_from_the_fit(small_ds, quick_solver):
    result = fit(small_ds, None, quick_solver)
    state = start(result, small_ds)
    mask = small_ds.mask.dense()
    np.testing.assert_allclose(state.Y[mask] * state.scale, small_ds.update_tensor.values[mask], rtol=1e-12)
    np.testing.assert_allclose(state.estimate(), result.estimate, rtol=1e-10, atol=1e-12)
