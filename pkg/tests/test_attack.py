import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradlab.attack import (
    MULTISTEP_SAMPLINGS,
    AttackProblem,
    BatchAttackProblem,
    Distance,
    MultiStepProblem,
    ScheduleConfig,
    _direct_search,
    batch_cache_view,
    distance_values,
    grad_distance,
    hfgm_batch,
    hfgm_multistep,
    hfgm_reconstruct,
    initial_guess,
    make_objective,
    multistep_delta,
    sample_unit_vectors,
    total_variation,
    update_schedule,
)
from gradlab.errors import ConfigError, InfeasibleAlignment, ShapeMismatch, ZeroGradient
from gradlab.model import ModelConfig, init_model, loss_and_grad

TINY = ModelConfig(2, (3,), 2)  # one linear layer, d=2, |L|=2


def tiny_problem(seed, k=4, **kw):
    p = init_model(TINY, seed)
    truth = np.random.default_rng(100 + seed).uniform(-1, 1, (2, 2))
    _, g = loss_and_grad(p, truth, [0, 1])
    sched = kw.pop("schedule", ScheduleConfig(samplings=k))
    return AttackProblem(p, g.flat, [0, 1], 2, schedule=sched, init_seed=seed, ground_truth=truth, **kw)


def small_model(seed=0, activation="tanh"):
    return init_model(ModelConfig(3, (6, 3), 2, activation=activation), seed)


# -- unit vectors ----------------------------------------------------------------

def test_unit_vectors_contract():
    v = sample_unit_vectors(500, 7, 4, np.random.default_rng(0))
    assert v.shape == (500, 7, 4)
    np.testing.assert_allclose(np.linalg.norm(v.reshape(500, -1), axis=1), 1.0, atol=1e-12)
    nonzero_rows = (np.abs(v).sum(axis=2) > 0).sum(axis=1)
    assert np.all(nonzero_rows == 1)


def test_unit_vector_frames_uniform():
    T = 10
    v = sample_unit_vectors(100_000, T, 3, np.random.default_rng(1))
    counts = np.bincount(np.argmax(np.abs(v).sum(axis=2), axis=1), minlength=T)
    expected = 100_000 / T
    chi2 = ((counts - expected) ** 2 / expected).sum()
    # chi-square with 9 dof: mean 9, sd sqrt(18); 9 + 3 * 4.24 ~ 21.7
    assert chi2 < 21.7
    assert np.all(np.abs(counts - expected) < 3 * np.sqrt(expected))


def test_unit_vector_directions_isotropic():
    v = sample_unit_vectors(50_000, 1, 3, np.random.default_rng(2))[:, 0]
    np.testing.assert_allclose(v.mean(axis=0), 0.0, atol=0.02)
    np.testing.assert_allclose(np.cov(v.T), np.eye(3) / 3, atol=0.01)


def test_default_samplings():
    assert ScheduleConfig().samplings == 128
    assert MULTISTEP_SAMPLINGS == 8
    assert MultiStepProblem.__dataclass_fields__["schedule"].default.samplings == 8


# -- schedule ----------------------------------------------------------------------

def test_schedule_threshold_arithmetic():
    s = ScheduleConfig()
    assert update_schedule(1.0, 1.0, 0.96, s) == 0.5
    assert update_schedule(1.0, 1.0, 0.90, s) == 1.0
    assert update_schedule(0.125, 1.0, 0.99, s) is None
    assert update_schedule(0.25, 1.0, 1.0, s) == 0.125


def test_schedule_validation():
    with pytest.raises(ConfigError):
        ScheduleConfig(initial_step=0.1)
    with pytest.raises(ConfigError):
        ScheduleConfig(improvement_threshold=1.0)


def test_step_sequence_under_default_schedule():
    # an objective that never improves halves at every window boundary
    flat = lambda xs: np.ones(len(xs))
    x, trace = _direct_search(np.zeros((3, 2)), flat, ScheduleConfig(), np.random.default_rng(0), None)
    assert trace.steps_visited == [1.0, 0.5, 0.25, 0.125]
    assert trace.stop_reason == "terminal_step"
    assert trace.iterations == 4 * 2500
    np.testing.assert_array_equal(x, np.zeros((3, 2)))


def test_step_sequence_real_attack():
    _, trace = hfgm_reconstruct(tiny_problem(0, schedule=ScheduleConfig(tolerance=0.0)))
    assert trace.steps_visited == [1.0, 0.5, 0.25, 0.125]
    assert trace.stop_reason == "terminal_step"


# -- distances ----------------------------------------------------------------------

def test_cosine_endpoints():
    t = np.array([1.0, 2.0, -1.0])
    views = np.stack([t, -t, np.array([2.0, -1.0, 0.0]), 3 * t])
    d = distance_values(views, t, Distance())
    np.testing.assert_allclose(d, [0.0, 2.0, 1.0, 0.0], atol=1e-15)


def test_euclidean_and_tv():
    t = np.array([1.0, 2.0])
    assert distance_values(np.array([[0.0, 0.0]]), t, Distance("euclidean"))[0] == 5.0
    xs = np.array([[[0.0, 0.0], [1.0, -2.0], [1.0, 0.0]]])
    assert total_variation(xs)[0] == 5.0
    d = distance_values(np.array([t]), t, Distance("cosine_tv", 0.5), xs)
    assert d[0] == pytest.approx(2.5)


def test_zero_gradients_reported():
    p = small_model()
    x = np.random.default_rng(0).normal(size=(4, 3))
    _, g = loss_and_grad(p, x, [0])
    with pytest.raises(ZeroGradient):
        distance_values(np.ones((1, g.flat.size)), np.zeros(g.flat.size), Distance())
    saturated = init_model(ModelConfig(3, (6, 3), 2), 0)
    saturated.layers[-1][0][...] = 0.0
    saturated.layers[-1][1][...] = [1000.0, 0.0, 0.0]
    # one frame, transcript [0]: softmax is exactly one-hot on the target, so the gradient vanishes
    prob = AttackProblem(saturated, g.flat, [0], 1)
    with pytest.raises(ZeroGradient):
        grad_distance(x[:1], prob)
    assert distance_values(np.zeros((1, g.flat.size)), g.flat, Distance())[0] == np.inf


def test_self_match_and_scale_invariance():
    p = small_model()
    x = np.random.default_rng(1).normal(size=(5, 3))
    _, g = loss_and_grad(p, x, [0, 1])
    prob = AttackProblem(p, g.flat, [0, 1], 5)
    assert abs(grad_distance(x, prob)) < 1e-12
    x2 = np.random.default_rng(2).normal(size=(5, 3))
    scaled = AttackProblem(p, 7.0 * g.flat, [0, 1], 5)
    assert grad_distance(x2, prob) == pytest.approx(grad_distance(x2, scaled), abs=1e-14)


def test_problem_validation():
    p = small_model()
    with pytest.raises(InfeasibleAlignment):
        AttackProblem(p, np.ones(3), [0, 1, 0], 2)
    prob = AttackProblem(p, np.ones(21), [0], 4)
    with pytest.raises(ShapeMismatch):
        grad_distance(np.zeros((3, 3)), prob)


# -- single-sample search -------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 2, 3])
def test_tiny_instance_reconstructs(seed):
    x, trace = hfgm_reconstruct(tiny_problem(seed))
    # pilot (k=4): D <= 4.3e-4 and MAE <= 0.025 on these seeds
    assert trace.final_objective < 1e-3
    assert np.abs(x - trace_truth(seed)).mean() < 0.1


def trace_truth(seed):
    return np.random.default_rng(100 + seed).uniform(-1, 1, (2, 2))


def test_fixed_point():
    p = small_model()
    x0 = initial_guess(4, 3, np.random.default_rng(5))
    _, g = loss_and_grad(p, x0, [1])
    x, trace = hfgm_reconstruct(AttackProblem(p, g.flat, [1], 4, init_seed=5))
    assert trace.iterations == 0
    assert trace.stop_reason == "tolerance"
    assert trace.final_objective <= 1e-12
    np.testing.assert_array_equal(x, x0)


def test_deterministic_and_trace_shape(tmp_path):
    prob = tiny_problem(1, schedule=ScheduleConfig(samplings=4, max_iterations=300, log_every=50))
    x1, t1 = hfgm_reconstruct(prob)
    x2, t2 = hfgm_reconstruct(prob)
    np.testing.assert_array_equal(x1, x2)
    assert [r.objective for r in t1.rows] == [r.objective for r in t2.rows]
    its = [r.iteration for r in t1.rows]
    assert its == sorted(set(its))
    assert t1.rows[0].frame_mae.shape == (2,)
    t1.write_csv(tmp_path / "a.csv")
    t2.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "iteration,D,alpha,mae_mean,mae_frame_0,mae_frame_1"


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 32), step=st.sampled_from([1.0, 0.5, 0.125]))
def test_acceptance_soundness(seed, k, step):
    """Replaying one iteration: exactly the moves that help alone are summed into x."""
    p = small_model(seed % 7)
    rng_truth = np.random.default_rng(seed)
    truth = rng_truth.normal(size=(4, 3))
    _, g = loss_and_grad(p, truth, [0, 1])
    sched = ScheduleConfig(initial_step=step, terminal_step=step / 4, samplings=k, max_iterations=1)
    prob = AttackProblem(p, g.flat, [0, 1], 4, schedule=sched, init_seed=seed)
    x1, _ = hfgm_reconstruct(prob)

    rng = np.random.default_rng(seed)
    x0 = initial_guess(4, 3, rng)
    moves = sample_unit_vectors(k, 4, 3, rng)
    objective = make_objective(p, [0, 1], g.flat, Distance())
    current = objective(x0[None])[0]
    alone = np.array([objective((x0 + step * v)[None])[0] for v in moves])
    expected = x0 + step * moves[alone < current].sum(axis=0)
    np.testing.assert_allclose(x1, expected, rtol=0, atol=1e-15)
    assert x1.shape == (4, 3)


def test_guarded_mode_monotone():
    prob = tiny_problem(2, schedule=ScheduleConfig(samplings=32, guarded=True, max_iterations=2000, log_every=1))
    _, trace = hfgm_reconstruct(prob)
    d = [r.objective for r in trace.rows]
    assert all(b <= a for a, b in zip(d, d[1:]))


def test_cosine_iterates_invariant_to_target_scale():
    a = tiny_problem(3, schedule=ScheduleConfig(samplings=4, max_iterations=500, log_every=1))
    b = tiny_problem(3, schedule=ScheduleConfig(samplings=4, max_iterations=500, log_every=1))
    b.target = 123.0 * b.target
    xa, ta = hfgm_reconstruct(a)
    xb, tb = hfgm_reconstruct(b)
    # iterates are bit-identical; logged D may differ in the last ulp from normalizing the target
    np.testing.assert_array_equal(xa, xb)
    np.testing.assert_allclose([r.objective for r in ta.rows], [r.objective for r in tb.rows], rtol=1e-13)


# -- batch ---------------------------------------------------------------------------------

def test_batch_of_one_equals_single():
    prob = tiny_problem(0, schedule=ScheduleConfig(samplings=4, max_iterations=3000))
    x, trace = hfgm_reconstruct(prob)
    bprob = BatchAttackProblem(prob.params, prob.target, [prob.transcript], [prob.length],
                               schedule=prob.schedule, init_seed=prob.init_seed,
                               ground_truths=[prob.ground_truth])
    xs, btrace = hfgm_batch(bprob)
    np.testing.assert_array_equal(xs[0], x)
    assert [r.objective for r in btrace.rows] == [r.objective for r in trace.rows]
    assert [r.mae_mean for r in btrace.rows] == [r.mae_mean for r in trace.rows]


@pytest.mark.parametrize("seed", [0, 2, 3])
def test_batch_of_two_tiny_instance(seed):
    # pilot (k=4 and k=8, transcripts [0,1]/[1,0] and [0,1]/[0,1]): MAE 0.4-1.2 per sample;
    # the averaged last-layer gradient does not pin down which frame belongs to which sample
    p = init_model(TINY, seed)
    rng = np.random.default_rng(100 + seed)
    ys = [[0, 1], [1, 0]]
    truths = [rng.uniform(-1, 1, (2, 2)) for _ in ys]
    target = np.mean([loss_and_grad(p, x, y)[1].flat for x, y in zip(truths, ys)], axis=0)
    xs, _ = hfgm_batch(BatchAttackProblem(p, target, ys, [2, 2], schedule=ScheduleConfig(samplings=4),
                                          init_seed=seed, ground_truths=truths))
    maes = [np.abs(x - t).mean() for x, t in zip(xs, truths)]
    assert max(maes) < 0.2, maes


def test_batch_cache_matches_recompute():
    p = small_model()
    rng = np.random.default_rng(0)
    truths = [rng.normal(size=(T, 3)) for T in (4, 6, 5)]
    ys = [[0], [1, 0], [0, 1]]
    views = [loss_and_grad(p, x, y)[1].flat for x, y in zip(truths, ys)]
    target = np.mean(views, axis=0)
    prob = BatchAttackProblem(p, target, ys, [4, 6, 5], init_seed=3,
                              schedule=ScheduleConfig(samplings=8, max_iterations=200))
    np.testing.assert_allclose(batch_cache_view(prob, truths), target, rtol=0, atol=1e-12)
    xs, trace = hfgm_batch(prob)
    recomputed = distance_values(batch_cache_view(prob, xs)[None], target, Distance())[0]
    assert recomputed == pytest.approx(trace.final_objective, abs=1e-12)


def test_batch_validation():
    p = small_model()
    with pytest.raises(ConfigError):
        BatchAttackProblem(p, np.ones(3), [], [])
    with pytest.raises(ConfigError):
        BatchAttackProblem(p, np.ones(3), [[0]], [4, 5])


# -- multi-step --------------------------------------------------------------------------

def test_one_step_delta_is_scaled_gradient():
    p = small_model()
    x = np.random.default_rng(0).normal(size=(4, 3))
    _, g = loss_and_grad(p, x, [0, 1])
    np.testing.assert_allclose(multistep_delta(p, x, [0, 1], 1, 1e-5), -1e-5 * g.flat, rtol=1e-12)


def test_two_step_delta_replays_sgd():
    from gradlab.model import sgd_step
    p = small_model()
    x = np.random.default_rng(0).normal(size=(4, 3))
    _, g0 = loss_and_grad(p, x, [0])
    p1 = sgd_step(p, g0.full, 0.1)
    _, g1 = loss_and_grad(p1, x, [0])
    np.testing.assert_allclose(multistep_delta(p, x, [0], 2, 0.1), -0.1 * (g0.flat + g1.flat), rtol=1e-12)


def test_one_step_multistep_matches_gradient_matching():
    single = tiny_problem(2, schedule=ScheduleConfig(samplings=8, max_iterations=400, log_every=1))
    target = multistep_delta(single.params, single.ground_truth, single.transcript, 1, 1e-5)
    mprob = MultiStepProblem(single.params, target, single.transcript, single.length, steps=1,
                             schedule=single.schedule, init_seed=single.init_seed,
                             ground_truth=single.ground_truth)
    xm, tm = hfgm_multistep(mprob)
    xs, ts = hfgm_reconstruct(single)
    np.testing.assert_allclose(xm, xs, rtol=0, atol=1e-12)
    np.testing.assert_allclose([r.objective for r in tm.rows], [r.objective for r in ts.rows], atol=1e-12)


@pytest.mark.parametrize("seed", [0, 2, 3])
def test_two_step_tiny_instance(seed):
    # pilot: MAE 0.024-0.054 at k=4; the default k=8 also stays below 0.25
    single = tiny_problem(seed)
    target = multistep_delta(single.params, single.ground_truth, single.transcript, 2, 1e-5)
    x, _ = hfgm_multistep(MultiStepProblem(single.params, target, single.transcript, single.length, steps=2,
                                           init_seed=seed, ground_truth=single.ground_truth))
    assert np.abs(x - single.ground_truth).mean() < 0.25


def test_multistep_validation():
    with pytest.raises(ConfigError):
        MultiStepProblem(small_model(), np.ones(3), [0], 4, steps=0)
