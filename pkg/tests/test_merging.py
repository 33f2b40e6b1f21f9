"""Token readouts and weight-grid export: probability-vector invariants, the
average-pooling reduction, joint permutation equivariance, and PGM output.
"""

import numpy as np
import pytest

from mvt import tensor as T
from mvt.errors import ConfigError, DataFormatError, NumericsError
from mvt.init import Init
from mvt.merging import (AdaptiveMerge, MergeWeights, avg_pool_merge,
                         class_token_readout, export_weight_grids,
                         normalize_raw, weights_to_gray)
from mvt.pgm import read_pgm, read_ppm, write_pgm, write_ppm
from mvt.stems import Provenance
from mvt.tensor import Tensor


def tokens(seed, b=2, n=6, c=8):
    return Tensor(np.random.default_rng(seed).normal(size=(b, n, c)))


def randomized_merge(seed, channel=8, count=6):
    """AdaptiveMerge with non-degenerate (non-uniform) gate parameters."""
    init = Init(seed)
    merge = AdaptiveMerge(init, "merge", channel, count)
    rng = np.random.default_rng(seed + 1)
    merge.fc2_w.data[:] = rng.normal(0.0, 0.5, size=merge.fc2_w.data.shape)
    merge.fc2_b.data[:] = 0.1
    merge.global_logits.data[:] = rng.normal(0.0, 1.0, size=count)
    return merge


# ----------------------------------------------------------- simple readouts

def test_avg_pool_constant_and_symmetry():
    row = np.random.default_rng(0).normal(size=(1, 1, 5))
    same = Tensor(np.repeat(row, 4, axis=1))
    np.testing.assert_allclose(avg_pool_merge(same).data, row[:, 0], atol=1e-15)
    t = np.random.default_rng(1).normal(size=(1, 1, 5))
    pair = Tensor(np.concatenate([t, -t], axis=1))
    np.testing.assert_allclose(avg_pool_merge(pair).data, np.zeros((1, 5)), atol=1e-15)


def test_class_token_readout_is_index_zero():
    x = tokens(2, b=3, n=67, c=4)
    out = class_token_readout(x)
    assert out.shape == (3, 4)
    np.testing.assert_array_equal(out.data, x.data[:, 0])


# ------------------------------------------------------------ adaptive merge

def test_fresh_merge_equals_average_pooling():
    init = Init(3)
    merge = AdaptiveMerge(init, "merge", 8, 6)
    x = tokens(4)
    feature, records = merge(x)
    np.testing.assert_allclose(feature.data, avg_pool_merge(x).data, atol=1e-12)
    for rec in records:
        np.testing.assert_allclose(rec.weights, np.full(6, 1 / 6), atol=1e-15)
        np.testing.assert_array_equal(rec.adaptive_logits, np.zeros(6))


def test_weights_are_a_probability_vector():
    merge = randomized_merge(5)
    for seed in range(3):
        _, records = merge(tokens(seed + 10))
        for rec in records:
            assert rec.weights.min() >= 0.0
            assert abs(rec.weights.sum() - 1.0) < 1e-9
    # the global gate is shared: identical across batch entries
    _, records = merge(tokens(99, b=3))
    np.testing.assert_array_equal(records[0].global_logits, records[1].global_logits)
    assert isinstance(records[0], MergeWeights)


def test_one_hot_global_gate_selects_a_token():
    merge = randomized_merge(6)
    merge.global_logits.data[:] = -40.0
    merge.global_logits.data[2] = 40.0
    x = tokens(7, b=1)
    feature, records = merge(x)
    np.testing.assert_allclose(records[0].weights, np.eye(6)[2], atol=1e-12)
    np.testing.assert_allclose(feature.data[0], x.data[0, 2], atol=1e-9)


def test_degenerate_weights_raise():
    merge = randomized_merge(8)
    merge.global_logits.data[:] = -800.0
    with pytest.raises(NumericsError, match="cannot normalize"):
        merge(tokens(9))


def test_token_count_mismatch_raises():
    merge = randomized_merge(10, count=6)
    with pytest.raises(ConfigError):
        merge(tokens(11, n=5))
    with pytest.raises(ConfigError):
        AdaptiveMerge(Init(0), "m", 8, 0)


def test_normalization_is_scale_invariant():
    raw = Tensor(np.random.default_rng(12).uniform(0.1, 1.0, size=(2, 6, 1)))
    base = normalize_raw(raw).data
    for c in (1e-6, 3.7, 1e6):
        scaled = normalize_raw(raw * Tensor(np.array(c))).data
        np.testing.assert_allclose(scaled, base, atol=1e-12)


def test_joint_permutation_equivariance():
    merge = randomized_merge(13)
    x = tokens(14, b=2)
    feature, records = merge(x)
    perm = np.random.default_rng(15).permutation(6)
    merge.global_logits.data[:] = records[0].global_logits[perm]
    feature_p, records_p = merge(Tensor(x.data[:, perm]))
    np.testing.assert_allclose(feature_p.data, feature.data, atol=1e-9)
    for rec, rec_p in zip(records, records_p):
        np.testing.assert_allclose(rec_p.weights, rec.weights[perm], atol=1e-12)


def test_merge_is_deterministic():
    merge = randomized_merge(16)
    x = tokens(17)
    f1, r1 = merge(x)
    f2, r2 = merge(x)
    np.testing.assert_array_equal(f1.data, f2.data)
    for a, b in zip(r1, r2):
        np.testing.assert_array_equal(a.weights, b.weights)


def test_merge_gradcheck():
    merge = randomized_merge(18, channel=6, count=4)
    x = Tensor(np.random.default_rng(19).normal(size=(1, 4, 6)), requires_grad=True)
    r = Tensor(np.random.default_rng(20).normal(size=(1, 6)))

    def f(inp):
        feature, _ = merge(inp)
        return feature * r

    assert T.gradcheck(f, [x], step=1e-5) < 1e-6
    params = [merge.fc1_w.tensor, merge.fc2_w.tensor, merge.global_logits.tensor]
    assert T.gradcheck(lambda *_: f(x), params, step=1e-4) < 1e-6


# ------------------------------------------------------------------ PGM files

def test_pgm_roundtrip_and_header(tmp_path):
    gray = np.arange(12, dtype=np.uint8).reshape(3, 4)
    path = str(tmp_path / "g.pgm")
    write_pgm(path, gray)
    blob = open(path, "rb").read()
    assert blob.startswith(b"P5\n4 3\n255\n")
    np.testing.assert_array_equal(read_pgm(path), gray)
    with pytest.raises(DataFormatError):
        write_pgm(path, gray.astype(np.int64))


def test_ppm_roundtrip(tmp_path):
    rgb = np.random.default_rng(21).integers(0, 256, size=(3, 5, 4), dtype=np.uint8)
    path = str(tmp_path / "c.ppm")
    write_ppm(path, rgb)
    np.testing.assert_array_equal(read_ppm(path), rgb)
    with pytest.raises(DataFormatError):
        read_pgm(path)  # magic mismatch


def test_pgm_reader_skips_comments(tmp_path):
    path = str(tmp_path / "c.pgm")
    with open(path, "wb") as fh:
        fh.write(b"P5\n# a comment\n2 2\n255\n" + bytes([0, 64, 128, 255]))
    np.testing.assert_array_equal(read_pgm(path), [[0, 64], [128, 255]])
    bad = str(tmp_path / "short.pgm")
    with open(bad, "wb") as fh:
        fh.write(b"P5\n2 2\n255\n\x00")
    with pytest.raises(DataFormatError, match="raster"):
        read_pgm(bad)


def test_weights_to_gray_guard_and_range():
    uniform = np.full((7, 7), 1 / 49)
    np.testing.assert_array_equal(weights_to_gray(uniform), np.full((7, 7), 128, np.uint8))
    onehot = np.zeros((7, 7))
    onehot[2, 3] = 1.0
    gray = weights_to_gray(onehot)
    assert gray[2, 3] == 255
    assert gray.sum() == 255  # everything else black


def grid_provenance():
    prov = [Provenance(0, r, c) for r in range(2) for c in range(3)]
    prov += [Provenance(1, r, c) for r in range(2) for c in range(2)]
    prov += [Provenance(2, 0, 0)]
    return prov


def test_export_writes_one_file_per_branch(tmp_path):
    prov = grid_provenance()
    weights = np.random.default_rng(22).uniform(0.01, 1.0, size=11)
    weights /= weights.sum()
    paths = export_weight_grids(weights, prov, str(tmp_path), "img7")
    assert [p.split("/")[-1] for p in paths] == [
        "img7.branch0.pgm", "img7.branch1.pgm", "img7.branch2.pgm"]
    assert read_pgm(paths[0]).shape == (2, 3)
    assert read_pgm(paths[1]).shape == (2, 2)
    assert read_pgm(paths[2]).shape == (1, 1)
    # single-cell branch has no dynamic range -> mid-gray guard
    assert read_pgm(paths[2])[0, 0] == 128


def test_export_upsampling_and_onehot(tmp_path):
    prov = [Provenance(0, r, c) for r in range(2) for c in range(2)]
    weights = np.array([0.0, 0.0, 0.0, 1.0])
    paths = export_weight_grids(weights, prov, str(tmp_path), "x", scale=3)
    gray = read_pgm(paths[0])
    assert gray.shape == (6, 6)
    np.testing.assert_array_equal(gray, np.kron([[0, 0], [0, 255]], np.ones((3, 3), np.uint8)))
    with pytest.raises(ConfigError):
        export_weight_grids(weights[:3], prov, str(tmp_path), "x")
    with pytest.raises(ConfigError):
        export_weight_grids(weights, prov, str(tmp_path), "x", scale=0)
