import numpy as np
import pytest

from lowdiff import network
from lowdiff import numerics as nx
from lowdiff.cascade import (
    CascadeConfig,
    FullResolutionModel,
    NetModel,
    TrainState,
    default_cascade_config,
    initial_noise,
    prepare_condition_train,
    sample_cascade,
    sample_stage,
    sampler_step,
    single_stage_config,
    stage_schedule,
    train_step,
    with_stage,
)
from lowdiff.metrics import fit_gaussian, frechet, moment_fit
from lowdiff.network import NetConfig, ResolutionLadder
from lowdiff.oracle import OracleModel, mixture_denoiser, pool_matrix, smooth_mixture, upsample_matrix
from lowdiff.schedule import LossWeightConfig, loss_weight, perturb, sample_training_sigma


def small_net(resolutions=(8, 4), dtype="f64"):
    cfg = NetConfig(
        resolutions=resolutions,
        image_channels=1,
        base_channels=8,
        channel_mult=(1,) * max(len(resolutions), 2),
        blocks_per_level=1,
        embed_dim=8,
        dtype=dtype,
    )
    return network.build(cfg, 0)


# -- schedules -------------------------------------------------------------------------------


def test_stage_schedule_invariants():
    with pytest.raises(ValueError):
        stage_schedule(1, 10, 0.01, 50, T_trunc=10)
    with pytest.raises(ValueError):
        stage_schedule(1, 10, 0.01, 50, T_trunc=-1)
    s = stage_schedule(2, 35, 0.002, 80, T_trunc=19)
    assert s.steps == 16 and s.nfe == 32
    assert s.trunc_sigma == s.sigma_schedule.sigmas[16] > 0
    full = stage_schedule(1, 18, 0.002, 80)
    assert full.nfe == 35 and full.trunc_sigma == 0.0
    assert stage_schedule(1, 18, 0.002, 80, integrator="euler").nfe == 18


def test_default_cascade_nfe_split():
    cfg = default_cascade_config((32, 16, 8))
    assert [cfg.stage(i).nfe for i in (3, 2, 1)] == [18, 14, 17]
    assert cfg.stage(3).sigma_schedule.sigma_max == 80.0 and cfg.stage(3).sigma_schedule.sigma_min == 0.002
    assert cfg.stage(1).sigma_schedule.sigma_max == 50.0 and cfg.stage(1).sigma_schedule.sigma_min == 0.01
    assert cfg.stage(3).T_trunc == round(0.54 * 20) and cfg.stage(1).T_trunc == 0
    assert cfg.cond_sigma(1) == cfg.stage(2).trunc_sigma
    assert default_cascade_config((16,)).stage(1).nfe == 35


def test_cascade_config_validation():
    lad = ResolutionLadder((8, 4))
    s1 = stage_schedule(1, 9, 0.01, 50, conditional=True)
    s2 = stage_schedule(2, 20, 0.002, 80, T_trunc=11)
    CascadeConfig(lad, (s1, s2))
    with pytest.raises(ValueError):
        CascadeConfig(lad, (s1,))
    with pytest.raises(ValueError):
        CascadeConfig(lad, (stage_schedule(1, 9, 0.01, 50, T_trunc=3, conditional=True), s2))
    with pytest.raises(ValueError):
        CascadeConfig(lad, (s1, s2), jitter=(1.1, 1.3))


# -- integrator ------------------------------------------------------------------------------------


def test_identity_denoiser_is_a_fixed_point():
    x = np.random.default_rng(0).standard_normal(5)
    for integ in ("euler", "heun"):
        np.testing.assert_array_equal(sampler_step(lambda v, s: v, x, 2.0, 1.0, integ), x)


def test_linear_denoiser_euler_step():
    a, st_, sn = 0.3, 2.0, 1.5
    x = np.array([1.0, -2.0])
    expected = x + (sn - st_) * (1 - a) * x / st_
    np.testing.assert_allclose(sampler_step(lambda v, s: a * v, x, st_, sn, "euler"), expected, rtol=1e-15)


def test_heun_to_zero_equals_euler():
    den = lambda v, s: np.tanh(v) * s / (1 + s)  # noqa: E731
    x = np.random.default_rng(1).standard_normal(4)
    np.testing.assert_array_equal(sampler_step(den, x, 0.5, 0.0, "heun"), sampler_step(den, x, 0.5, 0.0, "euler"))
    with pytest.raises(ValueError):
        sampler_step(den, x, 0.5, 0.5)


def test_single_gaussian_heun_sampling_moments():
    sched = stage_schedule(1, 64, 0.002, 80)
    den = lambda x, s, c: 0.25 / (0.25 + s * s) * x  # noqa: E731
    res = sample_stage(den, sched, (1, 2, 2), seed=0, batch=10_000)
    flat = res.x.reshape(10_000, -1)
    sem = np.sqrt(0.25 / 10_000)
    assert np.all(np.abs(flat.mean(axis=0)) <= 4 * sem)
    np.testing.assert_allclose(flat.var(axis=0), 0.25, rtol=0.05)
    assert res.nfe == sched.nfe == 127


def test_sample_stage_loop_bounds_and_determinism():
    sched = stage_schedule(2, 12, 0.002, 80, T_trunc=11)
    calls = []

    def den(x, s, c):
        calls.append(s)
        return 0.5 * x

    res = sample_stage(den, sched, (1, 4, 4), seed=3, batch=2)
    assert res.nfe == 2 and calls == [80.0, sched.sigma_schedule.sigmas[1]]
    assert res.sigma_end == sched.sigma_schedule.sigmas[1]
    again = sample_stage(den, sched, (1, 4, 4), seed=3, batch=2)
    assert res.x.tobytes() == again.x.tobytes()
    with pytest.raises(ValueError):
        sample_stage(den, sched, (1, 4, 4), seed=3, batch=2, cond=np.zeros((2, 1, 4, 4)))


def test_noise_streams_are_per_element():
    a = initial_noise(5, 2, 4, (1, 3, 3))
    b = initial_noise(5, 2, 2, (1, 3, 3), start=2)
    np.testing.assert_array_equal(a[2:], b)
    assert not np.array_equal(a, initial_noise(5, 1, 4, (1, 3, 3)))


# -- cascade --------------------------------------------------------------------------------------


def test_single_rung_cascade_equals_sample_stage():
    m = smooth_mixture(1, 4, length_scale=1.5)
    cfg = single_stage_config(4, 10)
    model = OracleModel(m, cfg, 1)
    res = sample_cascade(model, cfg, seed=7, batch=6)
    ref = sample_stage(model.stage_denoiser(1), cfg.stage(1), (1, 4, 4), seed=7, batch=6)
    assert res.images.tobytes() == ref.x.tobytes()
    assert res.nfe == [19]


def test_cascade_nfe_bookkeeping_and_determinism():
    net = small_net((16, 8, 4))
    cfg = default_cascade_config((16, 8, 4), steps=(5, 6, 7))
    a = sample_cascade(NetModel(net), cfg, seed=1, batch=2)
    assert a.nfe == [cfg.stage(i).nfe for i in (1, 2, 3)]
    assert len(a.stages) == 3 and a.images.shape == (2, 1, 16, 16)
    b = sample_cascade(NetModel(net), cfg, seed=1, batch=2)
    assert a.images.tobytes() == b.images.tobytes()
    images, nfe = a
    assert nfe == a.nfe


def test_full_resolution_baseline_feeds_zero_condition():
    net = small_net((8, 4))
    seen = []
    base = FullResolutionModel(net)
    f = base.stage_denoiser(1)
    orig = net.denoise

    def spy(x, cond, sigma, stage, label=None):
        seen.append((stage, None if cond is None else float(np.abs(cond).max())))
        return orig(x, cond, sigma, stage, label)

    net.denoise = spy
    f(np.zeros((1, 1, 8, 8)), 1.0, None)
    assert seen == [(1, 0.0)]


def test_oracle_error_shrinks_with_final_stage_steps():
    m = smooth_mixture(1, 8, length_scale=2.0, variance=0.1, components=2, mean_scale=0.3)
    mu, cov = m.moments()
    truth = moment_fit(mu, cov)
    steps = (4, 8, 16, 32, 64)
    dist = np.zeros(len(steps))
    for seed in range(3):
        for k, t in enumerate(steps):
            cfg = default_cascade_config((8, 4), steps=(t, 20))
            res = sample_cascade(OracleModel(m, cfg, 1), cfg, seed=seed, batch=2000)
            dist[k] += frechet(fit_gaussian(res.images.reshape(2000, -1)), truth) / 3
    assert np.all(np.diff(dist) <= 1e-9), dist


# -- training ------------------------------------------------------------------------------------


def test_condition_preparation():
    c = np.full((2, 1, 8, 8), 0.4)
    np.testing.assert_allclose(prepare_condition_train(c, 0.0, np.random.default_rng(0)), 0.4, rtol=1e-14)
    x0 = np.random.default_rng(1).standard_normal((2, 1, 8, 8))
    ref = nx.upsample2(nx.avg_pool2(x0), "bilinear").data
    np.testing.assert_array_equal(prepare_condition_train(x0, 0.0, np.random.default_rng(2)), ref)


def test_condition_noise_independent_of_main_noise():
    rng = np.random.default_rng(3)
    zeros = np.zeros((25_000, 1, 4, 4))
    _, eps = perturb(zeros, 1.0, rng)
    cond = prepare_condition_train(zeros, 1.0, rng)
    unup = np.linalg.pinv(upsample_matrix(1, 2))
    eps_c = cond.reshape(25_000, -1) @ unup.T
    pooled = eps.reshape(25_000, -1) @ pool_matrix(1, 4).T
    a, b = eps_c.ravel(), (pooled * 2.0).ravel()
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.01
    assert a.size >= 100_000


def test_masked_update_and_loss_bookkeeping():
    net = small_net((8, 4))
    state = TrainState(net, default_cascade_config((8, 4)), rng=np.random.default_rng(0))
    before = net.params.snapshot()
    losses = train_step(state, np.random.default_rng(1).standard_normal((3, 1, 8, 8)))
    assert len(losses) == 2 and all(np.isfinite(losses))
    touched = set(net.active_params(1).names) | set(net.active_params(2).names)
    assert state.last_updated == touched
    for k in net.params.names():
        if k not in touched:
            assert net.params[k].data.tobytes() == before[k].tobytes()
    with pytest.raises(nx.ShapeError):
        train_step(state, np.zeros((3, 1, 4, 4)))


def test_single_rung_training_step_is_plain_denoising():
    net = small_net((8,))
    state = TrainState(net, single_stage_config(8, 10), rng=np.random.default_rng(4))
    x0 = np.random.default_rng(5).standard_normal((4, 1, 8, 8))
    ref_net = small_net((8,))
    rng = np.random.default_rng(4)
    sigma = sample_training_sigma(rng, LossWeightConfig(), size=4)
    x, _ = perturb(x0, sigma, rng)
    d = ref_net.denoise(x, None, sigma, 1)
    ref = np.mean(loss_weight(sigma).reshape(4, 1, 1, 1) * (d - x0) ** 2)
    (loss,) = train_step(state, x0)
    assert loss == pytest.approx(ref, rel=1e-12)


def test_training_is_deterministic_and_modes_differ():
    def run(mode):
        net = small_net((8, 4))
        state = TrainState(net, default_cascade_config((8, 4)), rng=np.random.default_rng(0), mode=mode)
        data = np.random.default_rng(1).standard_normal((4, 1, 8, 8))
        for _ in range(3):
            train_step(state, data)
        return net.params.snapshot()

    a, b = run("per_stage"), run("per_stage")
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    c = run("summed")
    assert any(a[k].tobytes() != c[k].tobytes() for k in a)


def test_with_stage_rebuilds_schedule():
    cfg = default_cascade_config((8, 4))
    new = with_stage(cfg, 1, T=30, sigma_max=60.0)
    assert new.stage(1).T == 30 and new.stage(1).sigma_schedule.sigma_max == 60.0
    assert new.stage(2) == cfg.stage(2)


def test_oracle_denoiser_wiring_matches_direct_call():
    m = smooth_mixture(1, 4, length_scale=1.5)
    cfg = single_stage_config(4, 10)
    f = OracleModel(m, cfg, 1).stage_denoiser(1)
    x = np.random.default_rng(0).standard_normal((3, 1, 4, 4))
    np.testing.assert_allclose(f(x, 0.9, None).reshape(3, -1), mixture_denoiser(m, x.reshape(3, -1), 0.9))
