import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatstyle.errors import ValidationError
from splatstyle.features import (
    FeatureExtractorSpec,
    FeatureMap,
    downsample_labels,
    extract,
    extract_adjoint,
    load_feature_map,
    read_tensor,
    write_tensor,
)

SPEC = FeatureExtractorSpec(kind="patch-stats", patch=8, stride=8)


def brute_force_patch_stats(image, patch, stride):
    h, w = image.shape[:2]
    hf = (h - patch) // stride + 1
    wf = (w - patch) // stride + 1
    out = np.zeros((hf, wf, 12))
    for i in range(hf):
        for j in range(wf):
            p = image[i * stride:i * stride + patch, j * stride:j * stride + patch]
            out[i, j, 0:3] = p.mean(axis=(0, 1))
            out[i, j, 3:6] = p.std(axis=(0, 1))
            out[i, j, 6:9] = np.abs(p[:, 1:] - p[:, :-1]).mean(axis=(0, 1))
            out[i, j, 9:12] = np.abs(p[1:] - p[:-1]).mean(axis=(0, 1))
    return out


class TestExtract:
    def test_constant_image(self):
        img = np.full((16, 16, 3), 0.37)
        fm = extract(img, SPEC)
        assert fm.grid.shape == (2, 2, 12)
        assert np.allclose(fm.grid[:, :, 0:3], 0.37)
        assert np.allclose(fm.grid[:, :, 3:], 0.0)

    def test_vertical_edge_localized(self):
        img = np.zeros((8, 24, 3))
        img[:, 12:] = 1.0  # edge inside the middle patch
        fm = extract(img, SPEC)
        assert np.all(fm.grid[0, 1, 6:9] > 0)     # |dx| responds in the edge patch
        assert np.allclose(fm.grid[0, 0, 6:9], 0)
        assert np.allclose(fm.grid[0, 2, 6:9], 0)
        assert np.allclose(fm.grid[0, :, 9:12], 0)  # no vertical structure

    def test_matches_brute_force(self, rng):
        img = rng.uniform(0, 1, (24, 32, 3))
        fm = extract(img, SPEC)
        expected = brute_force_patch_stats(img, 8, 8)
        assert np.allclose(fm.grid, expected, atol=1e-6)

    def test_strided_overlapping(self, rng):
        spec = FeatureExtractorSpec(kind="patch-stats", patch=8, stride=4)
        img = rng.uniform(0, 1, (16, 16, 3))
        fm = extract(img, spec)
        expected = brute_force_patch_stats(img, 8, 4)
        assert fm.grid.shape == (3, 3, 12)
        assert np.allclose(fm.grid, expected, atol=1e-10)

    def test_translation_consistency(self, rng):
        img = rng.uniform(0, 1, (32, 32, 3))
        shifted = np.roll(img, SPEC.stride, axis=1)
        a = extract(img, SPEC)
        b = extract(shifted, SPEC)
        assert np.allclose(a.grid[:, :-1], b.grid[:, 1:], atol=1e-12)

    def test_too_small_image(self):
        with pytest.raises(ValidationError, match="receptive field"):
            extract(np.zeros((4, 4, 3)), SPEC)

    def test_deterministic(self, rng):
        img = rng.uniform(0, 1, (16, 16, 3))
        assert np.array_equal(extract(img, SPEC).grid, extract(img, SPEC).grid)


class TestExtractAdjoint:
    def test_matches_finite_differences(self, rng):
        img = rng.uniform(0, 1, (16, 16, 3))
        g = rng.normal(size=(2, 2, 12))
        grad = extract_adjoint(img, SPEC, g)
        h = 1e-6
        flat = img.reshape(-1)
        idx = rng.choice(flat.size, size=60, replace=False)
        for k in idx:
            orig = flat[k]
            flat[k] = orig + h
            hi = float(np.sum(extract(img, SPEC).grid * g))
            flat[k] = orig - h
            lo = float(np.sum(extract(img, SPEC).grid * g))
            flat[k] = orig
            num = (hi - lo) / (2 * h)
            assert grad.reshape(-1)[k] == pytest.approx(num, rel=1e-4, abs=1e-9)

    def test_zero_grad(self, rng):
        img = rng.uniform(0, 1, (16, 16, 3))
        grad = extract_adjoint(img, SPEC, np.zeros((2, 2, 12)))
        assert np.all(grad == 0)

    def test_shape_mismatch(self, rng):
        img = rng.uniform(0, 1, (16, 16, 3))
        with pytest.raises(ValidationError, match="grad grid"):
            extract_adjoint(img, SPEC, np.zeros((3, 3, 12)))


class TestDownsampleLabels:
    def test_uniform(self):
        mask = np.full((16, 16), 3, dtype=np.int32)
        grid = downsample_labels(mask, (2, 2), 8, 8)
        assert np.all(grid == 3)

    def test_empty(self):
        grid = downsample_labels(np.zeros((16, 16), dtype=np.int32), (2, 2), 8, 8)
        assert np.all(grid == 0)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_matches_counting_oracle(self, seed):
        r = np.random.default_rng(seed)
        mask = r.integers(0, 4, size=(16, 24)).astype(np.int32)
        grid = downsample_labels(mask, (2, 3), 8, 8)
        for i in range(2):
            for j in range(3):
                cell = mask[i * 8:(i + 1) * 8, j * 8:(j + 1) * 8]
                counts = np.bincount(cell.reshape(-1), minlength=4)
                top = counts.max()
                winners = np.flatnonzero(counts == top)
                expected = winners[0] if winners.size == 1 else 0
                assert grid[i, j] == expected


class TestTensorIO:
    def test_round_trip(self, tmp_path, rng):
        arr = rng.normal(size=(4, 6, 12)).astype(np.float32)
        p = tmp_path / "t.fmap"
        write_tensor(p, arr)
        back = read_tensor(p)
        assert back.shape == (4, 6, 12)
        assert np.allclose(back, arr, atol=1e-7)

    def test_feature_map_round_trip(self, tmp_path, rng):
        arr = rng.normal(size=(3, 5, 12)).astype(np.float32)
        p = tmp_path / "fm.fmap"
        write_tensor(p, arr)
        fm = load_feature_map(p, stride=8, receptive_field=8)
        assert fm.grid.shape == (3, 5, 12)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.fmap"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValidationError, match="magic"):
            read_tensor(p)

    def test_zero_dimension(self, tmp_path):
        import struct
        p = tmp_path / "z.fmap"
        p.write_bytes(b"FMAP" + struct.pack("<II", 1, 3) + struct.pack("<3Q", 2, 0, 5))
        with pytest.raises(ValidationError, match="zero-sized"):
            read_tensor(p)

    def test_two_dims_rejected_for_feature_map(self, tmp_path, rng):
        p = tmp_path / "2d.fmap"
        write_tensor(p, rng.normal(size=(4, 4)).astype(np.float32))
        with pytest.raises(ValidationError, match="3 dimensions"):
            load_feature_map(p)

    def test_dim_overflow(self, tmp_path):
        import struct
        p = tmp_path / "huge.fmap"
        p.write_bytes(b"FMAP" + struct.pack("<II", 1, 3)
                      + struct.pack("<3Q", 1 << 40, 1 << 40, 3))
        with pytest.raises(ValidationError, match="overflow"):
            read_tensor(p)

    def test_truncated_payload(self, tmp_path, rng):
        p = tmp_path / "tr.fmap"
        write_tensor(p, rng.normal(size=(4, 4, 3)).astype(np.float32))
        raw = p.read_bytes()
        p.write_bytes(raw[:-8])
        with pytest.raises(ValidationError, match="truncated"):
            read_tensor(p)

    def test_non_finite_feature_map_rejected(self, tmp_path):
        arr = np.full((2, 2, 3), np.nan, dtype=np.float32)
        p = tmp_path / "nan.fmap"
        write_tensor(p, arr)
        with pytest.raises(ValidationError, match="non-finite"):
            load_feature_map(p)


class TestStyleFeatureIsolation:
    def test_end_to_end_mutation_invariance(self, rng):
        # style features selected by the region cell mask are bit-identical
        # under off-region pixel mutation
        from splatstyle.maskmatch import isolate_style_region
        img = rng.uniform(0, 1, (40, 40, 3))
        mask = np.zeros((40, 40), dtype=bool)
        mask[4:36, 2:30] = True

        def style_vectors(image):
            region = isolate_style_region(image, mask, mode="mirror", erosion_radius=2,
                                          feature_stride=8, receptive_field=8)
            fm = extract(region.completed_image, SPEC)
            sel = region.region_cell_mask[:fm.grid.shape[0], :fm.grid.shape[1]]
            return fm.grid[sel]

        v1 = style_vectors(img)
        mutated = img.copy()
        mutated[~mask] = rng.uniform(0, 1, ((~mask).sum(), 3))
        v2 = style_vectors(mutated)
        assert v1.size > 0
        assert np.array_equal(v1, v2)
