import numpy as np
import pytest

from lowdiff import network
from lowdiff import numerics as nx
from lowdiff.cascade import TrainState, default_cascade_config, stage_loss, train_step
from lowdiff.network import NetConfig, ResolutionLadder
from lowdiff.numerics import ShapeError, backward
from lowdiff.schedule import edm_precond


def tiny(resolutions=(8, 4), **kw):
    cfg = dict(
        resolutions=resolutions,
        image_channels=2,
        base_channels=8,
        channel_mult=(1, 2) if len(resolutions) <= 2 else (1, 2, 2),
        blocks_per_level=1,
        embed_dim=8,
        dtype="f64",
    )
    cfg.update(kw)
    return network.build(NetConfig(**cfg), 0)


def randomize_outputs(net, seed=1):
    """Give the zero-initialized output convs random values so every path matters."""
    rng = np.random.default_rng(seed)
    for name in net.params.names():
        if name.startswith("io.out.") and name.endswith(".weight"):
            t = net.params[name]
            net.params.set(name, 0.1 * rng.standard_normal(t.shape))
        if name == "embed.res.weight":
            net.params.set(name, rng.standard_normal(net.params[name].shape))


def inputs(net, stage, bsz=2, seed=0):
    rng = np.random.default_rng(seed)
    c, r = net.config.image_channels, net.ladder[stage]
    x = rng.standard_normal((bsz, c, r, r))
    cond = rng.standard_normal((bsz, c, r, r)) if stage < net.ladder.n_stages else None
    return x, cond


# -- ladder ---------------------------------------------------------------------------------


def test_ladder_validation_and_indexing():
    lad = ResolutionLadder((32, 16, 8))
    assert lad.n_stages == 3 and lad[1] == 32 and lad[3] == 8
    for bad in [(), (16, 4), (12, 6), (8, 16), (16, 8, 8)]:
        with pytest.raises(ValueError):
            ResolutionLadder(bad)
    with pytest.raises(ValueError):
        lad.check_stage(4)


# -- build ------------------------------------------------------------------------------------


def test_build_is_deterministic():
    a, b = tiny(), tiny()
    assert a.params.names() == b.params.names()
    for k in a.params.names():
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()


def test_single_rung_has_no_conditioning_channels():
    net = tiny((8,), channel_mult=(1, 2))
    assert net.params["io.in.r8.weight"].shape[1] == 2
    x, _ = inputs(net, 1)
    assert net.denoise(x, None, 0.7, 1).shape == x.shape
    with pytest.raises(ValueError):
        net.forward(x, x, 0.7, 1)


def test_input_conv_channels_per_stage():
    net = tiny((16, 8, 4))
    assert net.params["io.in.r16.weight"].shape[1] == 4
    assert net.params["io.in.r8.weight"].shape[1] == 4
    assert net.params["io.in.r4.weight"].shape[1] == 2


def test_trunk_depth_must_cover_ladder():
    with pytest.raises(ValueError):
        network.build(NetConfig(resolutions=(16, 8, 4), channel_mult=(1, 2)), 0)


def test_default_config_overhead_below_one_percent():
    net = network.build(NetConfig(resolutions=(32, 16, 8)), 0)
    overhead = net.multires_overhead()
    trunk = net.params.count(net.trunk_names())
    assert overhead / trunk < 0.01
    assert overhead / net.params.count() < 0.01


# -- embeddings ------------------------------------------------------------------------------------


def test_resolution_embedding_is_a_column_of_the_map():
    net = tiny((16, 8, 4))
    for s in (1, 2, 3):
        np.testing.assert_array_equal(net.resolution_embed(s).data, 0.0)
    w = np.random.default_rng(3).standard_normal(net.params["embed.res.weight"].shape)
    net.params.set("embed.res.weight", w)
    for s in (1, 2, 3):
        np.testing.assert_array_equal(net.resolution_embed(s).data, w[:, s - 1])
    with pytest.raises(ValueError):
        net.resolution_embed(4)


def test_stage_embeddings_differ_after_one_training_step():
    net = tiny()
    randomize_outputs(net)
    net.params.set("embed.res.weight", np.zeros_like(net.params["embed.res.weight"].data))
    state = TrainState(net, default_cascade_config((8, 4)), rng=np.random.default_rng(0))
    train_step(state, np.random.default_rng(1).standard_normal((4, 2, 8, 8)))
    assert not np.array_equal(net.resolution_embed(1).data, net.resolution_embed(2).data)


# -- forward ------------------------------------------------------------------------------------------


def test_fresh_net_returns_c_skip_times_x():
    net = tiny()
    for stage in (1, 2):
        x, cond = inputs(net, stage)
        c_skip = edm_precond(np.array(0.8), 0.5)[0]
        np.testing.assert_array_equal(net.denoise(x, cond, 0.8, stage), x * c_skip)


def test_small_sigma_limit_is_identity():
    net = tiny()
    x, cond = inputs(net, 1)
    np.testing.assert_allclose(net.denoise(x, cond, 1e-8, 1), x, atol=1e-6)


def test_lowest_stage_shape_and_finiteness():
    net = tiny((16, 8))
    randomize_outputs(net)
    x, _ = inputs(net, 2, bsz=3)
    out = net.denoise(x, None, 2.0, 2)
    assert out.shape == (3, 2, 8, 8) and np.all(np.isfinite(out))


def test_forward_argument_errors():
    net = tiny()
    x, cond = inputs(net, 1)
    with pytest.raises(ValueError):
        net.forward(x, None, 1.0, 1)
    x2, _ = inputs(net, 2)
    with pytest.raises(ValueError):
        net.forward(x2, x2, 1.0, 2)
    with pytest.raises(ShapeError):
        net.forward(x2, None, 1.0, 1)
    with pytest.raises(ShapeError):
        net.forward(x, cond[:, :, :4, :4], 1.0, 1)
    with pytest.raises(ValueError):
        net.forward(x, cond, 0.0, 1)


def test_labels_required_iff_class_conditional():
    net = tiny(label_count=3)
    x, cond = inputs(net, 1)
    with pytest.raises(ValueError):
        net.forward(x, cond, 1.0, 1)
    with pytest.raises(ValueError):
        net.forward(x, cond, 1.0, 1, label=np.array([0, 5]))
    assert net.denoise(x, cond, 1.0, 1, label=np.array([0, 2])).shape == x.shape
    plain = tiny()
    with pytest.raises(ValueError):
        plain.forward(x, cond, 1.0, 1, label=np.array([0, 1]))


# -- active sets ---------------------------------------------------------------------------------


def test_active_set_algebra():
    net = tiny((16, 8, 4))
    sets = {s: net.active_params(s) for s in (1, 2, 3)}
    assert set().union(*(a.names for a in sets.values())) == set(net.params.names())
    trunk = {s: {n for n in a.names if n.startswith("trunk.")} for s, a in sets.items()}
    assert trunk[3] < trunk[2] < trunk[1]
    for i in (1, 2, 3):
        pin, pout = net.io_prefixes(i)
        io_i = {n for n in net.params.names() if n.startswith((pin, pout))}
        for j in (1, 2, 3):
            assert (io_i <= sets[j].names) == (i == j)
            if i != j:
                assert not io_i & sets[j].names


def test_parameters_outside_active_set_do_not_affect_output():
    net = tiny((16, 8, 4))
    randomize_outputs(net)
    for stage in (1, 2, 3):
        x, cond = inputs(net, stage)
        before = net.denoise(x, cond, 1.3, stage)
        active = net.active_params(stage)
        saved = net.params.snapshot()
        for name in net.params.names():
            if name not in active:
                net.params.set(name, saved[name] + 1.0)
        after = net.denoise(x, cond, 1.3, stage)
        for name, v in saved.items():
            net.params.set(name, v)
        assert before.tobytes() == after.tobytes()


def test_trunk_weights_are_shared_by_identity():
    net = tiny((16, 8, 4))
    randomize_outputs(net)
    name = "trunk.l2.enc0.conv1.weight"
    assert all(name in net.active_params(s) for s in (1, 2, 3))
    outs = {}
    for s in (1, 2, 3):
        x, cond = inputs(net, s)
        outs[s] = (x, cond, net.denoise(x, cond, 1.0, s))
    t = net.params[name]
    net.params.set(name, t.data * 1.5 + 0.01)
    for s, (x, cond, before) in outs.items():
        assert not np.array_equal(net.denoise(x, cond, 1.0, s), before)


def test_gradient_keys_equal_active_set():
    net = tiny((16, 8, 4), label_count=2)
    randomize_outputs(net)
    state = TrainState(net, default_cascade_config((16, 8, 4)), rng=np.random.default_rng(0))
    x0 = np.random.default_rng(5).standard_normal((2, 2, 16, 16))
    levels = [x0, nx.avg_pool2(x0).data]
    levels.append(nx.avg_pool2(levels[-1]).data)
    for stage in (1, 2, 3):
        tape, loss = stage_loss(state, levels[stage - 1], stage, labels=np.array([0, 1]))
        grads = backward(tape, loss)
        assert set(grads) == set(net.active_params(stage).names)
