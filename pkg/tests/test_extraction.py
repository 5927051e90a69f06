import numpy as np
import pytest

from apnlab import tensor as T
from apnlab.encoder import FeatureMapSet
from apnlab.extraction import (
    ComparisonSpec,
    ContextEncoder,
    ExtractionError,
    PredictionMatrices,
    ProjectionHead,
    RepresentationBatch,
    cpc_labels,
    extract_amdim,
    extract_amdim_batch,
    extract_cpc,
    extract_simclr,
    flatten_deepest,
    parse_comparison_spec,
)
from apnlab.oracles import cpc_label_oracle
from apnlab.tensor import Tensor


def fmap(rng, *shapes, batched=False):
    return FeatureMapSet([Tensor(rng.standard_normal(s)) for s in shapes], batched=batched)


# ---------------------------------------------------------------- comparison specs

@pytest.mark.parametrize("text,pairs", [
    ("last_only", [(-1, -1)]),
    ("amdim", [(-1, -2), (-1, -3), (-2, -2)]),
    ("same_level", [(-1, -1), (-2, -2), (-3, -3)]),
    ("-1:-1,-2:-2", [(-1, -1), (-2, -2)]),
    ("01, 02, 11", [(-1, -2), (-1, -3), (-2, -2)]),
    ("last_only + -2:-3", [(-1, -1), (-2, -3)]),
])
def test_parse_spec(text, pairs):
    assert list(parse_comparison_spec(text).pairs) == pairs


def test_last_random_is_seeded():
    a = parse_comparison_spec("last_random(seed=3)", depth=3)
    b = parse_comparison_spec("last_random(seed=3)", depth=3)
    assert a == b and a.pairs[0][0] == -1 and -3 <= a.pairs[0][1] <= -1
    draws = {parse_comparison_spec("last_random", depth=3, seed=s).pairs[0][1] for s in range(30)}
    assert draws == {-1, -2, -3}


@pytest.mark.parametrize("text,pos", [("-1:-1,, ", 6), ("bogus", 0), ("", 0), ("-1:-1 ?", 6)])
def test_parse_error_reports_position(text, pos):
    with pytest.raises(ExtractionError, match=f"position {pos}"):
        parse_comparison_spec(text)


def test_spec_deeper_than_encoder():
    with pytest.raises(ExtractionError):
        ComparisonSpec(((-1, -4),)).validate(3)


def test_spec_text_round_trip():
    spec = parse_comparison_spec("amdim")
    assert parse_comparison_spec(spec.to_text()) == spec


# ---------------------------------------------------------------- AMDIM

def test_amdim_counts(rng):
    Ma = fmap(rng, (4, 4, 4), (4, 2, 2))
    Mb = fmap(rng, (4, 4, 4), (4, 2, 2))
    negs = [fmap(rng, (4, 4, 4), (4, 2, 2)) for _ in range(2)]
    (batch,) = extract_amdim(Ma, Mb, negs, ComparisonSpec(((-1, -2),)))
    assert batch.anchors.shape == (4, 4)
    assert batch.positive_mask().sum(axis=1).tolist() == [16] * 4
    assert batch.negative_mask().sum(axis=1).tolist() == [32] * 4


@pytest.mark.parametrize("n_neg", [1, 3])
def test_amdim_negative_count_brute_force(rng, n_neg):
    shapes = [(3, 5, 5), (3, 3, 3), (3, 1, 1)]
    Ma, Mb = fmap(rng, *shapes), fmap(rng, *shapes)
    negs = [fmap(rng, *shapes) for _ in range(n_neg)]
    for batch, (j, k) in zip(extract_amdim(Ma, Mb, negs, parse_comparison_spec("amdim")), [(-1, -2), (-1, -3), (-2, -2)]):
        cells = shapes[k][1] * shapes[k][2]
        assert int(batch.negative_mask()[0].sum()) == n_neg * cells
        # every negative row is literally a cell of some negative image's map k
        pool = np.concatenate([n[k].data.reshape(3, -1).T for n in negs])
        got = batch.negatives(0).data
        assert all(any(np.array_equal(r, p) for p in pool) for r in got)


def test_amdim_three_batches_for_amdim_spec(rng):
    shapes = [(3, 5, 5), (3, 3, 3), (3, 1, 1)]
    out = extract_amdim(fmap(rng, *shapes), fmap(rng, *shapes), [fmap(rng, *shapes)], parse_comparison_spec("amdim"))
    assert len(out) == 3


def test_amdim_global_maps_degrade_to_simclr_style(rng):
    shapes = [(3, 4, 4), (5, 1, 1)]
    Ma, Mb = fmap(rng, *shapes), fmap(rng, *shapes)
    (b,) = extract_amdim(Ma, Mb, [fmap(rng, *shapes)], ComparisonSpec(((-1, -1),)))
    assert b.anchors.shape == (1, 5) and b.targets.shape == (2, 5)
    np.testing.assert_array_equal(b.anchors.data[0], Ma[-1].data.reshape(-1))


def test_amdim_needs_negatives(rng):
    with pytest.raises(ExtractionError):
        extract_amdim(fmap(rng, (2, 2, 2)), fmap(rng, (2, 2, 2)), [], ComparisonSpec(((-1, -1),)))


def test_amdim_sampled_anchor(rng):
    shapes = [(3, 4, 4)]
    out = extract_amdim(fmap(rng, *shapes), fmap(rng, *shapes), [fmap(rng, *shapes)], ComparisonSpec(((-1, -1),)),
                        sample_anchor=True, seed=2)
    assert out[0].anchors.shape == (1, 3)


def test_amdim_batch_uses_other_images_as_negatives(rng):
    Ma = fmap(rng, (4, 3, 6, 6), (4, 3, 2, 2), batched=True)
    Mb = fmap(rng, (4, 3, 6, 6), (4, 3, 2, 2), batched=True)
    (b,) = extract_amdim_batch(Ma, Mb, ComparisonSpec(((-1, -2),)))
    assert b.anchors.shape == (16, 3)
    assert b.positive_mask().sum(axis=1).tolist() == [36] * 16
    assert b.negative_mask().sum(axis=1).tolist() == [108] * 16


def test_width_mismatch_mentions_embed_dim(rng):
    Ma = fmap(rng, (2, 4, 4), (3, 2, 2))
    with pytest.raises(T.ShapeError, match="embed_dim"):
        extract_amdim(Ma, Ma, [Ma], ComparisonSpec(((-1, -2),)))


# ---------------------------------------------------------------- CPC

def test_cpc_labels_worked_example():
    np.testing.assert_array_equal(cpc_labels(1, 3, 2, 0), [2, 3, 4, 5])


@pytest.mark.parametrize("b", [1, 2, 3])
@pytest.mark.parametrize("h", [1, 2, 3])
@pytest.mark.parametrize("w", [1, 2, 3])
def test_cpc_labels_match_nested_loops(b, h, w):
    for i in range(h):
        np.testing.assert_array_equal(cpc_labels(b, h, w, i), cpc_label_oracle(b, h, w, i))


def test_extract_cpc_example(rng):
    H = Tensor(rng.standard_normal((1, 2, 3, 2)))
    ctx = ContextEncoder(2, seed=0)
    W = PredictionMatrices(2, offsets=(1,), seed=0)
    batch = extract_cpc(H, ctx, W, 0.1)
    assert batch.anchors.shape == (4, 2)
    np.testing.assert_array_equal(batch.labels, [2, 3, 4, 5])
    # anchor = embed_scale * W_1 c_{i,j}
    C = ctx(H).data[0].reshape(2, -1).T
    np.testing.assert_allclose(batch.anchors.data, 0.1 * C[:4] @ W.matrix(1).data, atol=1e-12)
    # positive of each anchor is the labelled target
    pos = batch.positive_mask()
    assert pos.sum(axis=1).tolist() == [1, 1, 1, 1]
    assert np.flatnonzero(pos[0]).tolist() == [2]


def test_extract_cpc_batched_labels_match_oracle(rng):
    b, c, h, w = 3, 2, 3, 3
    batch = extract_cpc(Tensor(rng.standard_normal((b, c, h, w))), ContextEncoder(c), PredictionMatrices(c, (1, 2)))
    expect = np.concatenate([cpc_label_oracle(b, h, w, 0), cpc_label_oracle(b, h, w, 1)])
    np.testing.assert_array_equal(batch.labels, expect)
    np.testing.assert_array_equal(batch.target_owner, np.repeat(np.arange(b), h * w))


def test_extract_cpc_skips_long_offsets(rng):
    batch = extract_cpc(Tensor(rng.standard_normal((1, 2, 2, 2))), ContextEncoder(2), PredictionMatrices(2, (1, 5)))
    assert batch.anchors.shape[0] == 2


def test_extract_cpc_single_row_grid(rng):
    with pytest.raises(ExtractionError, match="no prediction targets"):
        extract_cpc(Tensor(rng.standard_normal((1, 2, 1, 3))), ContextEncoder(2), PredictionMatrices(2))


@pytest.mark.parametrize("draw", range(100))
def test_context_causality(draw):
    g = np.random.default_rng(draw)
    c, h, w = int(g.integers(1, 4)), int(g.integers(2, 6)), int(g.integers(1, 5))
    ctx = ContextEncoder(c, seed=draw)
    for p in ctx.parameters():
        p.data = g.standard_normal(p.shape)
    x = g.standard_normal((2, c, h, w))
    i = int(g.integers(0, h - 1))
    y = x.copy()
    y[:, :, i + 1 :] = 0.0
    np.testing.assert_array_equal(ctx(Tensor(x)).data[:, :, : i + 1], ctx(Tensor(y)).data[:, :, : i + 1])


def test_prediction_unchanged_when_lower_rows_zeroed(rng):
    H = rng.standard_normal((1, 3, 4, 2))
    ctx, W = ContextEncoder(3, seed=1), PredictionMatrices(3, (1,), seed=1)
    a = extract_cpc(Tensor(H), ctx, W)
    H2 = H.copy()
    H2[:, :, 2:] = 0.0
    b = extract_cpc(Tensor(H2), ctx, W)
    # rows 0 and 1 of the context produce the first 2 * w anchors
    np.testing.assert_array_equal(a.anchors.data[:4], b.anchors.data[:4])


def test_prediction_offsets_validated():
    with pytest.raises(ExtractionError):
        PredictionMatrices(2, offsets=(0,))


# ---------------------------------------------------------------- SimCLR

def test_flatten_length(rng):
    assert flatten_deepest(fmap(rng, (8, 2, 2))).shape == (32,)


def test_simclr_counts(rng):
    Ma = fmap(rng, (2, 4, 2, 2), batched=True)
    Mb = fmap(rng, (2, 4, 2, 2), batched=True)
    batch = extract_simclr(Ma, Mb, ProjectionHead(16, seed=0))
    assert batch.anchors.shape == (4, 16)
    assert batch.positive_mask().sum(axis=1).tolist() == [1, 1, 1, 1]
    assert batch.negative_mask().sum(axis=1).tolist() == [2, 2, 2, 2]
    np.testing.assert_array_equal(batch.labels, [2, 3, 0, 1])
    np.testing.assert_allclose(np.linalg.norm(batch.anchors.data, axis=1), 1.0, atol=1e-12)


def test_identity_head_keeps_unit_vectors(rng):
    h = rng.standard_normal((3, 6))
    h /= np.linalg.norm(h, axis=1, keepdims=True)
    z = ProjectionHead(6, identity=True)(Tensor(h))
    np.testing.assert_allclose(z.data, h, atol=1e-15)


def test_head_preserves_width(rng):
    assert ProjectionHead(10, hidden=32)(Tensor(rng.standard_normal((2, 10)))).shape == (2, 10)


def test_simclr_permutation_equivariance(rng):
    a = rng.standard_normal((4, 3, 1, 2))
    b = rng.standard_normal((4, 3, 1, 2))
    head = ProjectionHead(6, seed=1)
    perm = np.array([2, 0, 3, 1])
    base = extract_simclr(FeatureMapSet([Tensor(a)], True), FeatureMapSet([Tensor(b)], True), head)
    moved = extract_simclr(FeatureMapSet([Tensor(a[perm])], True), FeatureMapSet([Tensor(b[perm])], True), head)
    np.testing.assert_allclose(moved.anchors.data[:4], base.anchors.data[:4][perm], atol=1e-12)
    np.testing.assert_allclose(moved.anchors.data[4:], base.anchors.data[4:][perm], atol=1e-12)


# ---------------------------------------------------------------- batches

def test_batch_shape_checks(rng):
    with pytest.raises(T.ShapeError):
        RepresentationBatch(Tensor(rng.standard_normal((2, 3))), Tensor(rng.standard_normal((2, 4))), [0, 1], [0, 1])
    with pytest.raises(ExtractionError):
        RepresentationBatch(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))), [0, 1], [0, 1], labels=[0, 5])
