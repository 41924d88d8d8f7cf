import math

import numpy as np
import pytest

from nsn2n.errors import CorruptFileError
from nsn2n.filters import LpfParams
from nsn2n.pairing import (
    DEFAULT_THRESHOLDS,
    build_training_set,
    compute_weight_matrix,
    load_training_set,
    parse_threshold,
    save_training_set,
    weight_diagnostics,
)
from nsn2n.synth import NoiseSpec, PhantomSpec, add_noise, make_phantom
from nsn2n.volume import Volume, save_volume

from oracles import median_reference, nlm_reference


@pytest.fixture(scope="module")
def noisy_phantom():
    clean = make_phantom(PhantomSpec())
    return clean, add_noise(clean, NoiseSpec("gaussian", 0.05, seed=1))


def reference_weights(a, b, th, h):
    la = median_reference(nlm_reference(a, h=h), 3)
    lb = median_reference(nlm_reference(b, h=h), 3)
    return (np.abs(la - lb) <= th).astype(np.uint8), np.abs(la - lb)


class TestWeightMatrix:
    def test_identical_slices_all_ones(self):
        x = np.random.default_rng(0).random((16, 16)).astype(np.float32)
        for th in (0.0, 0.01, 1.0):
            np.testing.assert_array_equal(compute_weight_matrix(x, x.copy(), th), 1)

    def test_constant_slices_all_zeros(self):
        a = np.zeros((16, 16), dtype=np.float32)
        b = np.full((16, 16), 0.5, dtype=np.float32)
        np.testing.assert_array_equal(compute_weight_matrix(a, b, 0.01), 0)

    def test_equality_counts_as_matched(self):
        a = np.zeros((16, 16), dtype=np.float32)
        b = np.full((16, 16), 0.25, dtype=np.float32)
        np.testing.assert_array_equal(compute_weight_matrix(a, b, 0.25), 1)

    def test_shifted_ellipse_band(self):
        r, c = np.mgrid[0:32, 0:32]
        a = (((r - 15.5) / 8) ** 2 + ((c - 13.5) / 6) ** 2 <= 1).astype(np.float32) * 0.7
        b = (((r - 15.5) / 8) ** 2 + ((c - 17.5) / 6) ** 2 <= 1).astype(np.float32) * 0.7
        params = LpfParams(h=0.03)
        w = compute_weight_matrix(a, b, 0.01, params)
        ref, _ = reference_weights(a, b, 0.01, 0.03)
        np.testing.assert_array_equal(w, ref)
        band = a != b
        assert np.all(w[band] == 0)
        # away from the symmetric difference (plus a 2 pixel blur margin) everything matches
        from scipy.ndimage import binary_dilation

        near = binary_dilation(band, iterations=2)
        assert np.all(w[~near] == 1)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            compute_weight_matrix(np.zeros((16, 16)), np.zeros((16, 17)), 0.01)

    def test_negative_threshold(self):
        with pytest.raises(ValueError):
            compute_weight_matrix(np.zeros((16, 16)), np.zeros((16, 16)), -1)

    def test_paper_threshold_defaults(self):
        assert DEFAULT_THRESHOLDS == {0.05: 0.01, 0.07: 0.03, 0.09: 0.05}

    def test_parse_threshold(self):
        assert math.isinf(parse_threshold("inf"))
        assert parse_threshold("0.02") == 0.02


@pytest.fixture(scope="module")
def pairs(noisy_phantom):
    _, noisy = noisy_phantom
    return [(noisy.data[i], noisy.data[i + 1]) for i in range(0, 30, 3)]


class TestWeightLaws:
    def test_binary_symmetric_monotone(self, pairs):
        params = LpfParams(h=0.03)
        for a, b in pairs:
            prev = None
            for th in (0.0, 0.005, 0.01, 0.02, 0.04, math.inf):
                w = compute_weight_matrix(a, b, th, params)
                assert w.dtype == np.uint8
                assert set(np.unique(w)) <= {0, 1}
                np.testing.assert_array_equal(w, compute_weight_matrix(b, a, th, params))
                if prev is not None:
                    assert np.all(prev <= w)
                prev = w
            assert np.all(prev == 1)

    def test_lpf_invariance(self):
        # an impulse that the median stage removes cannot change the weight map
        a = np.zeros((16, 16), dtype=np.float32)
        a[4:12, 4:12] = 0.5
        b = a.copy()
        a_spiked = a.copy()
        a_spiked[1, 1] = 0.9
        params = LpfParams(h=1e-4)
        np.testing.assert_array_equal(
            compute_weight_matrix(a_spiked, b, 0.01, params), compute_weight_matrix(a, b, 0.01, params)
        )


class TestTrainingSet:
    def test_count_and_contents(self, noisy_phantom):
        _, noisy = noisy_phantom
        pairs = build_training_set(noisy, 0.01, LpfParams(h=0.03))
        assert len(pairs) == 31
        for i, p in enumerate(pairs):
            assert p.index == i
            np.testing.assert_array_equal(p.slice_a, noisy.data[i])
            np.testing.assert_array_equal(p.slice_b, noisy.data[i + 1])

    def test_identical_slices(self):
        x = np.random.default_rng(0).random((16, 16)).astype(np.float32)
        pairs = build_training_set(Volume(np.stack([x] * 4)), 0.0)
        assert all(np.all(p.weights == 1) for p in pairs)

    def test_matched_fraction_on_noisy_phantom(self, noisy_phantom):
        _, noisy = noisy_phantom
        pairs = build_training_set(noisy, 0.01, LpfParams.for_noise_level(0.05))
        assert np.mean([p.weights.sum() / p.weights.size for p in pairs]) >= 0.5

    def test_weights_match_pairwise_computation(self, noisy_phantom):
        _, noisy = noisy_phantom
        params = LpfParams(h=0.03)
        pairs = build_training_set(noisy, 0.01, params)
        for i in (0, 15, 30):
            np.testing.assert_array_equal(
                pairs[i].weights, compute_weight_matrix(noisy.data[i], noisy.data[i + 1], 0.01, params)
            )

    def test_round_trip(self, noisy_phantom, tmp_path):
        _, noisy = noisy_phantom
        save_volume(noisy, tmp_path / "noisy.json")
        params = LpfParams(h=0.03)
        pairs = build_training_set(noisy, 0.01, params)
        save_training_set(pairs, tmp_path / "pairs", 0.01, params, tmp_path / "noisy.json")
        back, manifest = load_training_set(tmp_path / "pairs")
        assert manifest["th"] == 0.01
        assert LpfParams.from_dict(manifest["lpf"]) == params
        assert len(back) == len(pairs)
        for p, q in zip(pairs, back):
            np.testing.assert_array_equal(p.weights, q.weights)
            np.testing.assert_array_equal(p.slice_a, q.slice_a)

    def test_bitmap_layout(self, tmp_path):
        x = np.zeros((3, 4, 4), dtype=np.float32)
        x[1, 0, 0] = 1.0  # pair 0 and 1 differ at (0, 0) only after thresholding th=0
        identity = LpfParams(patch_radius=0, search_radius=0, h=1e-6, median_size=1)
        pairs = build_training_set(Volume(x), 0.0, identity)
        save_training_set(pairs, tmp_path, 0.0, identity)
        blob = (tmp_path / "weights.bin").read_bytes()
        assert len(blob) == 2 * 2  # 16 bits per map
        # msb-first: pixel (0, 0) is the top bit of byte 0
        assert blob[0] == 0b01111111 and blob[1] == 0xFF

    def test_corrupt_payload(self, noisy_phantom, tmp_path):
        _, noisy = noisy_phantom
        pairs = build_training_set(noisy, 0.01)
        save_training_set(pairs, tmp_path, 0.01, LpfParams())
        (tmp_path / "weights.bin").write_bytes(b"\x00" * 10)
        with pytest.raises(CorruptFileError):
            load_training_set(tmp_path, noisy)

    def test_depth_one_rejected(self):
        with pytest.raises(ValueError):
            build_training_set(np.zeros((1, 8, 8)), 0.01)


class TestDiagnostics:
    def test_extremes_and_monotone(self, noisy_phantom, tmp_path):
        _, noisy = noisy_phantom
        rows = weight_diagnostics(
            noisy, LpfParams(h=0.03), [0.0, 0.005, 0.01, 0.02, 0.04, "inf"], out_dir=tmp_path
        )
        fractions = [r["matched_fraction"] for r in rows]
        assert fractions[0] < 0.05
        assert fractions[-1] == 1.0
        assert all(a <= b for a, b in zip(fractions, fractions[1:]))
        for r in rows:
            assert sum(r["histogram"]["counts"]) == 31 * 64 * 64
            for name in r["png"]:
                assert (tmp_path / name).exists()

    def test_empty_candidates(self, noisy_phantom):
        with pytest.raises(ValueError):
            weight_diagnostics(noisy_phantom[1], LpfParams(), [])

    def test_agrees_with_training_set(self):
        x = np.random.default_rng(1).random((2, 16, 16)).astype(np.float32)
        rows = weight_diagnostics(Volume(x), LpfParams(h=0.2), [0.05])
        pairs = build_training_set(Volume(x), 0.05, LpfParams(h=0.2))
        assert rows[0]["matched_fraction"] == pytest.approx(pairs[0].weights.mean())
