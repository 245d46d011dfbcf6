import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dilocolab.engine import (
    DivergenceError,
    Hyperparams,
    OuterState,
    ReplicaState,
    RunConfig,
    RunRecord,
    adamw_step,
    clip_global,
    lr_at,
    nesterov_outer_step,
    outer_gradient,
    shard_batch,
    train,
)
from dilocolab.objectives import NoisyQuadratic, TinyMLP


def hp(**kw):
    base = dict(inner_lr=0.05, global_batch=8, warmup_steps=10)
    base.update(kw)
    return Hyperparams(**base)


# -- schedule -------------------------------------------------------------


def test_lr_schedule_anchor_points():
    assert lr_at(1000, 5000, 2.0) == 2.0
    assert lr_at(5000, 5000, 2.0) == pytest.approx(0.1)
    assert lr_at(500, 5000, 2.0) == 1.0
    assert lr_at(0, 5000, 2.0) == 0.0


def test_lr_schedule_cosine_midpoint():
    # halfway through the decay the cosine sits halfway between peak and floor
    assert lr_at(3000, 5000, 1.0) == pytest.approx(0.05 + 0.95 * 0.5)


def test_lr_schedule_rejects_out_of_range():
    with pytest.raises(ValueError):
        lr_at(5001, 5000, 1.0)
    with pytest.raises(ValueError):
        lr_at(5, 10, 1.0, warmup=10)


def test_lr_schedule_monotone_after_warmup():
    values = [lr_at(t, 400, 1.0, warmup=40) for t in range(40, 401)]
    assert all(a >= b for a, b in zip(values, values[1:]))


# -- clipping -------------------------------------------------------------


def test_clip_leaves_small_gradient():
    g = np.array([0.3, 0.4])
    assert clip_global(g, 1.0) is g


def test_clip_scales_large_gradient():
    g = np.array([0.0, 4.0])
    np.testing.assert_allclose(clip_global(g, 1.0), [0.0, 1.0])


def test_clip_zero_vector():
    np.testing.assert_array_equal(clip_global(np.zeros(3), 1.0), np.zeros(3))


@given(arrays(np.float64, st.integers(1, 50), elements=st.floats(-1e6, 1e6)))
def test_clip_bound(g):
    assert np.linalg.norm(clip_global(g, 1.0)) <= 1.0 + 1e-12


# -- AdamW ----------------------------------------------------------------


def test_adamw_zero_gradient_no_decay():
    state = ReplicaState.fresh(np.array([1.0, -2.0]))
    out = adamw_step(state, np.zeros(2), 0.1, hp())
    np.testing.assert_array_equal(out.theta, state.theta)


def test_adamw_first_step_is_sign_step():
    theta = np.array([0.5, 0.5, 0.5])
    g = np.array([3.0, -0.2, 1e-3])
    out = adamw_step(ReplicaState.fresh(theta), g, 0.01, hp())
    # bias-corrected moments are g and g**2, so the step is lr * g / (|g| + eps)
    np.testing.assert_allclose(theta - out.theta, 0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    np.testing.assert_allclose(theta - out.theta, 0.01 * np.sign(g), rtol=1e-5)


def test_adamw_weight_decay_shrinks():
    theta = np.array([2.0, -4.0])
    T = 250
    out = adamw_step(ReplicaState.fresh(theta), np.zeros(2), 0.1, hp(), weight_decay=1 / T)
    np.testing.assert_allclose(theta - out.theta, 0.1 * theta / T)


def test_adamw_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        adamw_step(ReplicaState.fresh(np.zeros(2)), np.array([np.nan, 0.0]), 0.1, hp())


def test_adamw_does_not_mutate_input():
    state = ReplicaState.fresh(np.ones(3))
    before = state.theta.copy()
    adamw_step(state, np.ones(3), 0.1, hp())
    np.testing.assert_array_equal(state.theta, before)
    assert state.step_count == 0


# -- outer step -----------------------------------------------------------


def test_outer_gradient_cases():
    prev = np.array([1.0, 2.0, 3.0])
    u = np.array([0.5, -1.0, 2.0])
    np.testing.assert_array_equal(outer_gradient(prev, [prev.copy(), prev.copy()]), np.zeros(3))
    np.testing.assert_array_equal(outer_gradient(prev, [prev - u]), u)
    np.testing.assert_allclose(outer_gradient(prev, [prev + u, prev - u]), np.zeros(3), atol=1e-15)
    with pytest.raises(ValueError):
        outer_gradient(prev, [])


def test_nesterov_plain_average():
    prev = np.array([1.0, -1.0])
    reps = [np.array([0.0, 0.0]), np.array([1.0, 3.0])]
    delta = outer_gradient(prev, reps)
    out = nesterov_outer_step(OuterState.fresh(prev), delta, 1.0, 0.0)
    np.testing.assert_allclose(out.theta_global, np.mean(reps, axis=0))


def test_nesterov_zero_delta():
    out = nesterov_outer_step(OuterState.fresh(np.ones(2)), np.zeros(2), 0.7, 0.9)
    np.testing.assert_array_equal(out.theta_global, np.ones(2))


def test_nesterov_two_steps_constant_delta():
    delta = np.array([1.0, -2.0])
    s1 = nesterov_outer_step(OuterState.fresh(np.zeros(2)), delta, 1.0, 0.9)
    s2 = nesterov_outer_step(s1, delta, 1.0, 0.9)
    # hand recursion: buf1 = d, step1 = d + .9 d = 1.9 d; buf2 = 1.9 d, step2 = d + .9*1.9 d = 2.71 d
    np.testing.assert_allclose(-s1.theta_global, 1.9 * delta)
    np.testing.assert_allclose(s1.theta_global - s2.theta_global, 2.71 * delta)


# -- sharding -------------------------------------------------------------


def test_shard_identity_and_split():
    batch = np.arange(16.0).reshape(8, 2)
    assert len(shard_batch(batch, 1)) == 1
    np.testing.assert_array_equal(shard_batch(batch, 1)[0], batch)
    shards = shard_batch(batch, 4)
    assert [len(s) for s in shards] == [2, 2, 2, 2]
    with pytest.raises(ValueError):
        shard_batch(batch, 3)


@given(st.integers(1, 8), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_shards_partition_batch(m, per, seed):
    batch = np.random.default_rng(seed).integers(0, 5, size=(m * per, 1)).astype(float)
    shards = shard_batch(batch, m)
    assert sorted(np.concatenate(shards).ravel()) == sorted(batch.ravel())
    assert all(len(s) == per for s in shards)


# -- hyperparameters ------------------------------------------------------


def test_hyperparams_validation():
    with pytest.raises(ValueError):
        Hyperparams(inner_lr=0.1, global_batch=6, replicas=4)
    with pytest.raises(ValueError):
        Hyperparams(inner_lr=-1, global_batch=8)


def test_data_parallel_needs_single_replica():
    with pytest.raises(ValueError):
        RunConfig(NoisyQuadratic.create(4), hp(replicas=2), algorithm="data-parallel")


# -- training loop --------------------------------------------------------


def quad_config(algorithm="diloco", **kw):
    obj = NoisyQuadratic.create(8, seed=1, sigma=0.5)
    return RunConfig(obj, hp(**kw), algorithm=algorithm, overtrain_lambda=10)


def test_train_accounting():
    rec = train(quad_config(replicas=2, cadence=5))
    assert rec.tokens == 20 * 8 * 10
    assert rec.steps * rec.b >= rec.tokens > (rec.steps - 1) * rec.b
    assert rec.weight_decay == 1 / rec.steps
    assert rec.final_loss == rec.loss_curve[-1][1]
    assert rec.loss_curve[-1][0] == rec.steps
    assert rec.max_inner_norm <= 1.0 + 1e-12


def test_weight_decay_halves_with_batch():
    a = train(quad_config(global_batch=8))
    b = train(quad_config(global_batch=4))
    assert b.steps == 2 * a.steps
    assert b.weight_decay == a.weight_decay / 2


def test_explicit_weight_decay_kept():
    assert train(quad_config(weight_decay=0.0)).weight_decay == 0.0


def test_train_converges_on_quadratic():
    cfg = quad_config(algorithm="data-parallel", inner_lr=0.05)
    start = cfg.objective.value(cfg.objective.init(np.random.default_rng([0, 0])))
    rec = train(cfg)
    assert rec.final_loss < 0.1 * start


def test_diloco_m1_h1_matches_data_parallel():
    dp_traj, dl_traj = [], []
    train(quad_config("data-parallel"), lambda t, o, r: dp_traj.append(r[0].theta.copy()))
    train(quad_config("diloco", cadence=1, outer_lr=1.0, outer_momentum=0.0),
          lambda t, o, r: dl_traj.append(o.theta_global.copy()))
    assert len(dp_traj) == len(dl_traj)
    for a, b in zip(dp_traj, dl_traj):
        np.testing.assert_allclose(b, a, rtol=1e-9, atol=1e-12)


def test_identical_replicas_match_single_replica():
    obj = NoisyQuadratic.create(6, sigma=0.0)
    runs = []
    for m in (1, 2):
        cfg = RunConfig(obj, hp(replicas=m, cadence=1, outer_lr=1.0, outer_momentum=0.0), algorithm="diloco",
                        overtrain_lambda=10)
        traj = []
        train(cfg, lambda t, o, r: traj.append(o.theta_global.copy()))
        runs.append(traj)
    for a, b in zip(*runs):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_broadcast_after_sync():
    seen = []

    def check(t, outer, replicas):
        if t % 4 == 0:
            seen.append(all(np.array_equal(r.theta, outer.theta_global) for r in replicas))
            assert outer.last_sync_step == t

    train(quad_config(replicas=4, cadence=4), check)
    assert seen and all(seen)


def test_inner_state_persists_across_sync():
    counts = []
    train(quad_config(replicas=2, cadence=3), lambda t, o, r: counts.append(r[0].step_count))
    assert counts == list(range(1, len(counts) + 1))
    moments = []
    train(quad_config(replicas=2, cadence=3), lambda t, o, r: moments.append(r[1].adam_v.copy()))
    assert np.any(moments[3] != 0)


def test_eval_uses_global_model_between_syncs():
    cfg = quad_config(replicas=2, cadence=7)
    cfg.eval_every = 1
    globals_ = {}
    rec = train(cfg, lambda t, o, r: globals_.__setitem__(t, o.theta_global.copy()))
    for t, value in rec.loss_curve:
        assert value == cfg.objective.value(globals_[t])


def test_deterministic_and_parallel_equivalent():
    a = train(quad_config(replicas=4, cadence=3))
    b = train(quad_config(replicas=4, cadence=3))
    cfg = quad_config(replicas=4, cadence=3)
    cfg.workers = 4
    c = train(cfg)
    assert a.to_dict() == b.to_dict() == c.to_dict()


def test_repartition_flag_changes_streams_not_accounting():
    fixed = train(quad_config(replicas=2, cadence=3))
    cfg = quad_config(replicas=2, cadence=3)
    cfg.repartition = True
    rep = train(cfg)
    assert rep.steps == fixed.steps and rep.tokens == fixed.tokens
    assert rep.final_loss != fixed.final_loss


def test_repartition_m1_equals_fixed_stream():
    fixed = train(quad_config(replicas=1, cadence=3))
    cfg = quad_config(replicas=1, cadence=3)
    cfg.repartition = True
    assert train(cfg).to_dict() == fixed.to_dict()


def test_divergence_reported():
    obj = NoisyQuadratic.create(4, sigma=0.0)
    obj.curvature[:] = np.inf
    with pytest.raises(DivergenceError) as info:
        train(RunConfig(obj, hp(), algorithm="data-parallel", overtrain_lambda=10))
    assert info.value.record.status == "diverged"


def test_warmup_longer_than_run_rejected():
    with pytest.raises(ValueError):
        train(quad_config(warmup_steps=10_000))


def test_mlp_training_reduces_loss():
    obj = TinyMLP(seed=3)
    cfg = RunConfig(obj, hp(inner_lr=0.02, global_batch=16, replicas=2, cadence=5), overtrain_lambda=8)
    rec = train(cfg)
    assert rec.loss_curve[-1][1] < rec.loss_curve[0][1]


def test_record_round_trip():
    rec = train(quad_config(replicas=2, cadence=5))
    again = RunRecord.from_dict(rec.to_dict())
    assert again == rec and again.key == rec.key
