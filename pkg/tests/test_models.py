import numpy as np
import pytest

from scriptor_id import nn
from scriptor_id.aggregation import aggregate, aggregation_backward
from scriptor_id.errors import ShapeError, SpecError
from scriptor_id.models import (
    NetworkSpec,
    build_head,
    build_network,
    classify,
    ClassifierHead,
    extract_locals,
    forward_local,
    locals_backward,
    param_shapes,
    predict,
)

SMALL_SUB = NetworkSpec.sub_region((2, 4, 4, 8))
SMALL_CHAR = NetworkSpec.char_level((2, 4, 4), fc_width=8)


def test_sub_region_spatial_trace():
    assert NetworkSpec.sub_region().spatial_trace() == [64, 32, 16, 8, 4]
    assert NetworkSpec.sub_region().side == 4
    assert NetworkSpec.sub_region().depth == 1024


def test_char_level_trace_and_depth():
    spec = NetworkSpec.char_level()
    assert spec.spatial_trace() == [64, 32, 16, 8]
    assert spec.side == 1
    assert spec.depth == 1024
    shapes = dict(param_shapes(spec))
    assert shapes["fc.weight"] == (1024, 256 * 8 * 8)


def test_full_param_shapes():
    shapes = param_shapes(NetworkSpec.sub_region())
    assert [s for _, s in shapes[::2]] == [(32, 1, 5, 5), (64, 32, 5, 5), (256, 64, 5, 5), (1024, 256, 5, 5)]


@pytest.mark.parametrize("bad", [
    dict(variant="sub_region", block_filters=(8, 16, 32)),
    dict(variant="sub_region", block_filters=(8, 0, 32, 64)),
    dict(variant="char_level", block_filters=(8, 16, 32), fc_width=None),
    dict(variant="char_level", block_filters=()),
    dict(variant="sub_region", block_filters=(8, 16, 32, 64), fc_width=10),
    dict(variant="pixel", block_filters=(8,)),
])
def test_invalid_specs(bad):
    with pytest.raises(SpecError):
        NetworkSpec(**bad)


def test_spec_dict_round_trip():
    for spec in (NetworkSpec.sub_region((8, 16, 32, 64)), NetworkSpec.char_level()):
        assert NetworkSpec.from_dict(spec.to_dict()) == spec


def test_same_seed_same_params():
    a = build_network(SMALL_SUB, 3)
    b = build_network(SMALL_SUB, 3)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.params, b.params))
    c = build_network(SMALL_SUB, 4)
    assert any(x.tobytes() != y.tobytes() for x, y in zip(a.params, c.params))


def test_he_init_statistics():
    net = build_network(NetworkSpec.sub_region((8, 16, 32, 64)), 0)
    w = net.params[6]  # conv4, fan_in 32*25
    assert abs(w.std() - np.sqrt(2 / 800)) < 0.05 * np.sqrt(2 / 800)
    assert all(not b.any() for b in net.params[1::2])


@pytest.mark.parametrize("spec,side", [(SMALL_SUB, 4), (SMALL_CHAR, 1)])
def test_forward_local_shapes(spec, side):
    net = build_network(spec, 0)
    fm = forward_local(net, np.random.default_rng(0).random((1, 64, 64)))
    assert (fm.side, fm.depth) == (side, 8)


def test_forward_wrong_shape():
    net = build_network(SMALL_SUB, 0)
    with pytest.raises(ShapeError):
        forward_local(net, np.zeros((1, 32, 32)))
    with pytest.raises(ShapeError):
        extract_locals(net, np.zeros((2, 64, 64)))


@pytest.mark.parametrize("spec", [SMALL_SUB, SMALL_CHAR])
def test_zero_patch_gives_zero_features(spec):
    net = build_network(spec, 0)
    assert not forward_local(net, np.zeros((1, 64, 64))).values.any()


def test_batched_forward_matches_single():
    net = build_network(SMALL_SUB, 1)
    x = np.random.default_rng(1).random((3, 1, 64, 64))
    batch, _ = extract_locals(net, x)
    for i in range(3):
        np.testing.assert_allclose(batch[i], forward_local(net, x[i]).values, rtol=0, atol=1e-12)


def test_forward_is_deterministic():
    net = build_network(SMALL_SUB, 2)
    x = np.random.default_rng(2).random((1, 64, 64))
    assert forward_local(net, x).values.tobytes() == forward_local(net, x).values.tobytes()


def test_classify_examples():
    head = ClassifierHead(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]), np.zeros(3))
    logits = classify(np.array([2.0, 3.0]), head)
    np.testing.assert_array_equal(logits, [2, 3, 5])
    assert predict(logits) == 2
    ident = ClassifierHead(np.eye(4), np.zeros(4))
    g = np.array([0.5, -1.0, 2.0, 0.0])
    np.testing.assert_array_equal(classify(g, ident), g)
    biased = ClassifierHead(np.ones((2, 3)), np.array([0.25, -0.5]))
    np.testing.assert_array_equal(classify(np.zeros(3), biased), [0.25, -0.5])


def test_classify_mismatch():
    with pytest.raises(ShapeError):
        classify(np.zeros(3), build_head(5, 4, 0))


def test_predict_ties_lowest_index():
    assert predict(np.array([1.0, 3.0, 3.0])) == 1


def test_build_head_validation():
    with pytest.raises(SpecError):
        build_head(0, 4, 0)


def _end_to_end_errors(spec, seed, method="AA", k=None):
    rng = np.random.default_rng(seed)
    net = build_network(spec, seed)
    # random biases keep pre-activations off the ReLU kink on blank background
    for b in net.params[1::2]:
        b[...] = rng.normal(0, 0.1, b.shape)
    head = build_head(5, spec.depth, seed)
    x = rng.random((2, 1, 64, 64)) * (rng.random((2, 1, 64, 64)) < 0.3)
    label = seed % 5
    params = net.params + [head.weight, head.bias]

    def loss():
        locals_, _ = extract_locals(net, x)
        g, _ = aggregate(locals_, method, k)
        return nn.softmax_cross_entropy(classify(g, head), label)[0]

    locals_, caches = extract_locals(net, x)
    g, ctx = aggregate(locals_, method, k)
    logits, lc = nn.linear(g.values, head.weight, head.bias)
    _, dl = nn.softmax_cross_entropy(logits, label)
    lg = nn.linear_backward(lc, dl)
    grads = locals_backward(net, caches, aggregation_backward(ctx, lg.d_input)) + lg.d_params
    errs = []
    for p, gr in zip(params, grads):
        def f(v, p=p):
            old = p.copy()
            p[...] = v
            out = loss()
            p[...] = old
            return out
        errs.append(nn.relative_error(gr, nn.numeric_gradient(f, p.copy(), 1e-5)))
    return errs


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("spec", [SMALL_SUB, SMALL_CHAR], ids=["sub_region", "char_level"])
def test_end_to_end_backward_matches_finite_differences(spec, seed):
    assert max(_end_to_end_errors(spec, seed)) <= 1e-3


def test_end_to_end_backward_kma():
    assert max(_end_to_end_errors(SMALL_SUB, 7, "KMA", 5)) <= 1e-3
