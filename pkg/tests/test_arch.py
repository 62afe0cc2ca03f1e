import numpy as np
import pytest

from cec_cnn.arch import (ArchitectureError, ArchitectureSpec, ResBlockParams, build_network, channel_origins,
                          dblock_forward, direct_bp_audit, resblock_forward, shape_walk, ublock_forward)
from cec_cnn.ops import ConvParams
from cec_cnn.tensor import ShapeError, Tensor, backward

from oracles import gradcheck


def channel_law(c0, resolutions, parts=5):
    """Per-part {resolution: channels} from the U/D-Block channel rules alone."""
    part1 = {r: c0 * 2 ** s for s, r in enumerate(resolutions)}
    table = [part1]
    prev = part1
    for p in range(2, parts + 1):
        expanding = p % 2 == 0
        order = list(reversed(resolutions)) if expanding else list(resolutions)
        c = prev[order[0]]
        cur = {order[0]: c}
        for r in order[1:]:
            c = (c // 2 if expanding else c) + prev[r]
            cur[r] = c
        table.append(cur)
        prev = cur
    return table


def param_count_oracle(c0, resolutions, blocks_per_stage=2, classes=2):
    ident = lambda c: 11 * c * c + 6 * c  # 1x1, 3x3, 1x1 convs plus three BN affine pairs
    down = lambda c: 42 * c * c + 12 * c
    total = 9 * c0 + 2 * c0
    for s, r in enumerate(resolutions):
        c = c0 * 2 ** s
        if s == 0:
            total += blocks_per_stage * ident(c)
        else:
            total += down(c // 2) + (blocks_per_stage - 1) * ident(c)
    table = channel_law(c0, resolutions)
    for p in range(1, 5):
        expanding = (p + 1) % 2 == 0
        order = list(reversed(resolutions)) if expanding else list(resolutions)
        for r in order[:-1]:
            total += ident(table[p][r])  # refine block fed by the live map
    head = table[-1][resolutions[-1]]
    return total + ident(head) + head * classes + classes


def zero_residual(p: ResBlockParams):
    for conv in (p.conv1, p.conv2, p.conv3):
        conv.weight.data[:] = 0.0
    for bn in (p.bn1, p.bn2, p.bn3):
        bn.training = False
        bn.running_mean[:] = 0.0
        bn.running_var[:] = 1.0
    return p


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


def test_zero_weight_resblock_is_identity():
    p = zero_residual(ResBlockParams.create(np.random.default_rng(0), 8, dtype=np.float64))
    x = np.random.default_rng(1).normal(size=(2, 8, 6, 6))
    np.testing.assert_array_equal(resblock_forward(Tensor(x), p).data, x)


def test_zero_weight_resblock_gradient_is_ones():
    p = zero_residual(ResBlockParams.create(np.random.default_rng(0), 4, dtype=np.float64))
    x = Tensor(np.random.default_rng(2).normal(size=(1, 4, 5, 5)), requires_grad=True)
    backward(resblock_forward(x, p).sum())
    np.testing.assert_array_equal(x.grad, 1.0)


def test_downsample_resblock_shape():
    p = ResBlockParams.create(np.random.default_rng(0), 8, downsample=True)
    assert resblock_forward(Tensor(np.zeros((1, 8, 16, 16), np.float32)), p, downsample=True).shape == (1, 16, 8, 8)
    with pytest.raises(ShapeError):
        resblock_forward(Tensor(np.zeros((1, 8, 16, 16), np.float32)), p, downsample=False)


def test_ublock_shapes_and_constant_flow():
    rng = np.random.default_rng(3)
    p = ResBlockParams.create(rng, 16, dtype=np.float64)
    out = ublock_forward(Tensor(rng.normal(size=(1, 16, 8, 8))), Tensor(rng.normal(size=(1, 12, 16, 16))), p)
    assert out.shape == (1, 20, 16, 16)

    zero_residual(p)
    out = ublock_forward(Tensor(np.full((1, 16, 4, 4), 1.5)), Tensor(np.zeros((1, 0, 8, 8))), p)
    assert out.shape == (1, 8, 8, 8)
    np.testing.assert_array_equal(out.data, 3.0)

    with pytest.raises(ShapeError):
        ublock_forward(Tensor(np.zeros((1, 16, 8, 8))), Tensor(np.zeros((1, 4, 8, 8))), p)
    with pytest.raises(ShapeError):
        ublock_forward(Tensor(np.zeros((1, 15, 8, 8))), Tensor(np.zeros((1, 4, 16, 16))), p)


def test_ublock_gradient_split():
    rng = np.random.default_rng(4)
    p = ResBlockParams.create(rng, 4, dtype=np.float64)
    x = Tensor(rng.normal(size=(2, 4, 4, 4)), requires_grad=True)
    skip = Tensor(rng.normal(size=(2, 3, 8, 8)), requires_grad=True)
    backward(ublock_forward(x, skip, p).sum())
    np.testing.assert_array_equal(skip.grad, 1.0)
    assert np.any(x.grad != 0)


def test_dblock_shapes_and_constant_flow():
    rng = np.random.default_rng(5)
    p = ResBlockParams.create(rng, 16, dtype=np.float64)
    out = dblock_forward(Tensor(rng.normal(size=(1, 16, 16, 16))), Tensor(rng.normal(size=(1, 24, 8, 8))), p)
    assert out.shape == (1, 40, 8, 8)

    zero_residual(p)
    skip = rng.normal(size=(1, 5, 4, 4))
    out = dblock_forward(Tensor(np.full((1, 16, 8, 8), -0.5)), Tensor(skip), p).data
    np.testing.assert_array_equal(out[:, :16], -0.5)
    np.testing.assert_array_equal(out[:, 16:], skip)

    with pytest.raises(ShapeError):
        dblock_forward(Tensor(np.zeros((1, 16, 7, 7))), Tensor(np.zeros((1, 1, 3, 3))), p)
    with pytest.raises(ShapeError):
        dblock_forward(Tensor(np.zeros((1, 16, 8, 8))), Tensor(np.zeros((1, 1, 8, 8))), p)


def test_dblock_without_skip_is_refine_then_pool():
    from cec_cnn.ops import maxpool2x2

    rng = np.random.default_rng(6)
    p = ResBlockParams.create(rng, 4, dtype=np.float64)
    x = rng.normal(size=(2, 4, 6, 6))
    a = dblock_forward(Tensor(x), Tensor(np.zeros((2, 0, 3, 3))), p).data
    b = maxpool2x2(resblock_forward(Tensor(x), p)).data
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("kind", ["resblock", "ublock", "dblock"])
def test_block_gradcheck(kind):
    rng = np.random.default_rng(7)
    p = ResBlockParams.create(rng, 4, dtype=np.float64)
    for bn in (p.bn1, p.bn2, p.bn3):
        bn.gamma.data[:] = rng.uniform(0.5, 1.5, 4)
        bn.beta.data[:] = rng.normal(size=4)
    x = Tensor(rng.normal(size=(2, 4, 4, 4)), requires_grad=True)
    skip_hw = {"ublock": 8, "dblock": 2}.get(kind, 4)
    skip = Tensor(rng.normal(size=(2, 2, skip_hw, skip_hw)), requires_grad=True)
    fwd = {"resblock": lambda: resblock_forward(x, p), "ublock": lambda: ublock_forward(x, skip, p),
           "dblock": lambda: dblock_forward(x, skip, p)}[kind]
    r = rng.normal(size=fwd().shape)
    tensors = [x, p.conv1.weight, p.conv2.weight, p.conv3.weight, p.bn1.gamma, p.bn3.beta]
    if kind != "resblock":
        tensors.append(skip)
    assert gradcheck(lambda: (fwd() * Tensor(r)).sum(), tensors) < 1e-4


# ---------------------------------------------------------------------------
# spec validation
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("kwargs", [
    {"input_size": 48},
    {"num_parts": 4},
    {"resolutions": (32, 16, 6)},
    {"resolutions": (32, 8)},
    {"resolutions": (16, 8)},
    {"resolutions": (32,)},
    {"num_classes": 1},
])
def test_spec_validation(kwargs):
    with pytest.raises(ArchitectureError):
        ArchitectureSpec(**kwargs)


def test_spec_ini_round_trip_and_hash():
    spec = ArchitectureSpec(input_size=64, stem_channels=4)
    assert spec.resolutions == (64, 32, 16, 8)
    again = ArchitectureSpec.from_ini(spec.to_ini())
    assert again == spec and again.spec_hash() == spec.spec_hash()
    assert ArchitectureSpec().spec_hash() != spec.spec_hash()


# ---------------------------------------------------------------------------
# assembled network
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def default_model():
    return build_network(ArchitectureSpec(), seed=0)


def test_default_channel_table_matches_worked_example():
    table = channel_law(8, (32, 16, 8))
    assert table[0] == {32: 8, 16: 16, 8: 32}
    assert table[1] == {8: 32, 16: 32, 32: 24}
    assert table[2] == {32: 24, 16: 56, 8: 88}


@pytest.mark.parametrize("size", [32, 64])
def test_block_channels_follow_law(size):
    spec = ArchitectureSpec(input_size=size)
    model = build_network(spec, seed=0)
    table = channel_law(spec.stem_channels, spec.resolutions)
    shapes = shape_walk(model, (1, 1, size, size))
    seen = 0
    for b in model.blocks:
        c_in = shapes[b.input][1]
        c_out = shapes[b.output][1]
        if b.kind == "ublock":
            assert c_out == c_in // 2 + shapes[b.skip][1]
        elif b.kind == "dblock":
            assert c_out == c_in + shapes[b.skip][1]
        elif b.kind == "resblock_down":
            assert c_out == 2 * c_in
        if b.kind in ("ublock", "dblock"):
            r = shapes[b.output][2]
            assert c_out == table[b.part - 1][r]
            seen += 1
    assert seen == 4 * (len(spec.resolutions) - 1)
    head = table[-1][spec.resolutions[-1]]
    assert shapes[model.head_input] == (1, head, 8, 8)


@pytest.mark.parametrize("size", [32, 64])
def test_shape_walk_agrees_with_forward(size):
    model = build_network(ArchitectureSpec(input_size=size), seed=1)
    x = Tensor(np.random.default_rng(0).random((2, 1, size, size), dtype=np.float32))
    predicted = shape_walk(model, x.shape)
    acts = model.run(x, model.layer_names())
    assert set(predicted) == set(acts)
    for name, t in acts.items():
        assert t.shape == predicted[name], name


def test_forward_logits_shape(default_model):
    out = default_model(Tensor(np.zeros((2, 1, 32, 32), np.float32)))
    assert out.shape == (2, 2)


def test_builds_are_deterministic():
    a = build_network(ArchitectureSpec(), seed=5).state()
    b = build_network(ArchitectureSpec(), seed=5).state()
    c = build_network(ArchitectureSpec(), seed=6).state()
    assert [k for k, _ in a] == [k for k, _ in b]
    assert all(x.tobytes() == y.tobytes() for (_, x), (_, y) in zip(a, b))
    assert any(x.tobytes() != y.tobytes() for (_, x), (_, y) in zip(a, c))


@pytest.mark.parametrize("size", [32, 64])
def test_parameter_count(size):
    spec = ArchitectureSpec(input_size=size)
    assert build_network(spec, seed=0).num_parameters() == param_count_oracle(8, spec.resolutions)


def test_parameter_names_unique(default_model):
    names = [k for k, _ in default_model.parameters()]
    assert len(names) == len(set(names))


def test_graph_matches_functional_blocks(default_model):
    m = default_model
    m.eval()
    try:
        x = Tensor(np.random.default_rng(2).random((2, 1, 32, 32), dtype=np.float32))
        acts = m.run(x, m.layer_names())
        for b in m.blocks:
            if b.kind == "ublock":
                p = m.resblock_params[f"{b.name}.refine"]
                got = ublock_forward(acts[b.input], acts[b.skip], p)
            elif b.kind == "dblock":
                p = m.resblock_params[f"{b.name}.refine"]
                got = dblock_forward(acts[b.input], acts[b.skip], p)
            elif b.kind in ("resblock", "resblock_down"):
                got = resblock_forward(acts[b.input], m.resblock_params[b.name], b.kind == "resblock_down")
            else:
                continue
            np.testing.assert_array_equal(got.data, acts[b.output].data, err_msg=b.name)
    finally:
        m.train()


# ---------------------------------------------------------------------------
# direct-BP audit
# ---------------------------------------------------------------------------


def test_audit_passes_and_counts_paths(default_model):
    report = direct_bp_audit(default_model)
    assert report.passed and not report.failures
    stages = len(default_model.spec.resolutions)
    identity = (2 * stages - (stages - 1)) + 4 * (stages - 1) + 1
    ud = 4 * (stages - 1)
    assert report.path_count == identity + ud == 21
    kinds = [b.kind for b in default_model.blocks]
    assert report.path_count == kinds.count("ublock") + kinds.count("dblock") + sum(
        1 for n in default_model.nodes.values() if n.op == "add")


@pytest.mark.parametrize("which", [0, 7, -1])
def test_audit_detects_injected_skip_conv(which):
    model = build_network(ArchitectureSpec(), seed=0)
    concat_paths = [sp for sp in model.skip_paths if sp.kind == "concat"]
    sp = concat_paths[which]
    c = model.nodes[sp.source]
    shapes = shape_walk(model, (1, 1, 32, 32))
    ch = shapes[sp.source][1]
    w = Tensor(np.eye(ch, dtype=np.float32).reshape(ch, ch, 1, 1), requires_grad=True)
    model.insert_after("mutant.conv", "conv", c.name, ConvParams(w), consumers=[(sp.merge, sp.arm)])
    report = direct_bp_audit(model)
    assert not report.passed
    assert report.failures == [sp.name]
    # the mutant is numerically identical, so only the structural audit can catch it
    x = Tensor(np.random.default_rng(0).random((2, 1, 32, 32), dtype=np.float32))
    ref = build_network(ArchitectureSpec(), seed=0)
    np.testing.assert_allclose(model(x).data, ref(x).data, rtol=1e-5, atol=1e-5)


def test_audit_detects_conv_on_identity_arm():
    model = build_network(ArchitectureSpec(), seed=0)
    sp = next(s for s in model.skip_paths if s.kind == "identity")
    ch = model.nodes[model.nodes[sp.merge].inputs[0]].params.channels
    w = Tensor(np.eye(ch, dtype=np.float32).reshape(ch, ch, 1, 1), requires_grad=True)
    model.insert_after("mutant.conv", "conv", sp.source, ConvParams(w), consumers=[(sp.merge, sp.arm)])
    assert direct_bp_audit(model).failures == [sp.name]


def test_identity_flow_reaches_stem():
    model = build_network(ArchitectureSpec(), seed=0, dtype=np.float64)
    for p in model.resblock_params.values():
        zero_residual(p)
    model.nodes["stem.bn"].params.training = False
    x = Tensor(np.random.default_rng(3).random((1, 1, 32, 32)))
    stem = Tensor(model.run(x, ["stem.relu"])["stem.relu"].data, requires_grad=True)
    out = model.run(None, [model.output], feed={"stem.relu": stem})[model.output]
    backward(out.sum())
    g = np.abs(stem.grad[0])
    # every route from 32 px to the 8 px head crosses two max-pools, so each 4x4 window of
    # every stem channel keeps at least one live pixel
    windows = g.reshape(8, 8, 4, 8, 4).sum(axis=(2, 4))
    assert np.all(windows > 0)


def test_channel_origins_of_head_input(default_model):
    origins = channel_origins(default_model, default_model.head_input)
    assert len(origins) == 262
    assert set(origins[:174]) == {"p5.d8.refine.add"}
    assert set(origins[174:230]) == {"p3.d8.refine.add"}
    assert set(origins[230:]) == {"p1.r8.b1.add"}
