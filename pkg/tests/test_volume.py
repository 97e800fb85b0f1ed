import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wavinpaint.errors import DegenerateInputError, FormatError, ShapeError, ValidationError, VolumeIOError
from wavinpaint.volume import (
    NormRecord,
    apply_mask,
    denormalize,
    load_volume,
    nearest_rank,
    normalize,
    save_volume,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


class TestFileFormat:
    def test_round_trip_is_byte_exact(self, tmp_path, rng):
        vol = rng.normal(size=(8, 8, 8)).astype(np.float32)
        path = tmp_path / "a.fw3d"
        save_volume(vol, path)
        back = load_volume(path)
        assert back.tobytes() == vol.tobytes()

    def test_zero_volume_layout(self, tmp_path):
        path = tmp_path / "z.fw3d"
        save_volume(np.zeros((2, 2, 2), np.float32), path)
        raw = path.read_bytes()
        assert len(raw) == 24 + 8 * 4
        assert raw[:4] == b"FW3D"
        assert struct.unpack_from("<HBB3I", raw, 4) == (1, 0, 0, 2, 2, 2)
        assert raw[20:24] == b"\0" * 4
        assert raw[24:] == b"\0" * 32

    def test_axis2_is_fastest(self, tmp_path):
        vol = np.zeros((2, 2, 2), np.float32)
        vol[0, 0, 1] = 7.0
        save_volume(vol, tmp_path / "a.fw3d")
        payload = np.frombuffer((tmp_path / "a.fw3d").read_bytes()[24:], "<f4")
        assert payload[1] == 7.0

    def test_deterministic_bytes(self, tmp_path, rng):
        vol = rng.normal(size=(4, 6, 2)).astype(np.float32)
        save_volume(vol, tmp_path / "a.fw3d")
        save_volume(vol, tmp_path / "b.fw3d")
        assert (tmp_path / "a.fw3d").read_bytes() == (tmp_path / "b.fw3d").read_bytes()

    def test_nan_rejected(self, tmp_path):
        vol = np.zeros((2, 2, 2), np.float32)
        vol[1, 1, 1] = np.nan
        with pytest.raises(ValidationError):
            save_volume(vol, tmp_path / "a.fw3d")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "a.fw3d"
        save_volume(np.ones((2, 2, 2), np.float32), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_volume(path)

    @pytest.mark.parametrize("offset,value", [(4, b"\x02\x00"), (6, b"\x05")])
    def test_bad_version_or_dtype(self, tmp_path, offset, value):
        path = tmp_path / "a.fw3d"
        save_volume(np.ones((2, 2, 2), np.float32), path)
        raw = bytearray(path.read_bytes())
        raw[offset:offset + len(value)] = value
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_volume(path)

    def test_payload_length_mismatch(self, tmp_path):
        path = tmp_path / "a.fw3d"
        header = struct.pack("<4sHBB3I4s", b"FW3D", 1, 0, 0, 4, 4, 4, b"\0" * 4)
        path.write_bytes(header + np.zeros(100, "<f4").tobytes())
        with pytest.raises(VolumeIOError):
            load_volume(path)

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(VolumeIOError):
            save_volume(np.ones((2, 2, 2)), tmp_path / "missing" / "a.fw3d")

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float32, st.tuples(*(st.integers(1, 5),) * 3), elements=finite))
    def test_round_trip_property(self, tmp_path_factory, vol):
        path = tmp_path_factory.mktemp("rt") / "v.fw3d"
        save_volume(vol, path)
        assert load_volume(path).tobytes() == vol.tobytes()


class TestNormalize:
    def test_nearest_rank_matches_definition(self):
        values = np.arange(1001, dtype=np.float64)
        # rank = ceil(p * n), 1-based
        assert nearest_rank(values, 0.005) == 5.0
        assert nearest_rank(values, 0.995) == 995.0
        assert nearest_rank(values, 0.0) == 0.0

    def test_uniform_ramp_maps_to_unit_interval(self):
        vol = np.arange(1000, dtype=np.float32).reshape(10, 10, 10)
        out, rec = normalize(vol, 0.005)
        assert out.min() == -1.0 and out.max() == 1.0
        assert rec.clip_lo == 4.0 and rec.clip_hi == 994.0

    def test_values_0_to_1000(self):
        # 1001 values do not fill a cube; pad with copies of the median so the
        # clip quantiles move only by the inserted mass
        vals = np.arange(1001, dtype=np.float32)
        vol = np.concatenate([vals, np.full(1331 - 1001, 500.0, np.float32)]).reshape(11, 11, 11)
        out, rec = normalize(vol, 0.005)
        assert out.min() == -1.0 and out.max() == 1.0
        lo = np.sort(vol, axis=None)[int(np.ceil(0.005 * 1331)) - 1]
        assert rec.clip_lo == lo

    def test_fixed_point(self):
        vol = np.linspace(-1, 1, 64, dtype=np.float32).reshape(4, 4, 4)
        out, rec = normalize(vol, 0.0)
        assert rec.scale == 1.0 and rec.offset == 0.0
        np.testing.assert_array_equal(out, vol)

    def test_constant_volume_rejected(self):
        with pytest.raises(DegenerateInputError):
            normalize(np.full((4, 4, 4), 3.0), 0.005)

    @pytest.mark.parametrize("pct", [-0.1, 0.5, 0.7])
    def test_bad_pct(self, pct):
        with pytest.raises(ValidationError):
            normalize(np.arange(64.0).reshape(4, 4, 4), pct)

    def test_round_trip_on_unclipped_voxels(self, rng):
        vol = (rng.normal(size=(12, 12, 12)) * 50 + 300).astype(np.float32)
        out, rec = normalize(vol, 0.005)
        inside = (vol >= rec.clip_lo) & (vol <= rec.clip_hi)
        # independent double-precision affine pair
        fwd = (vol.astype(np.float64) - rec.clip_lo) * 2.0 / (rec.clip_hi - rec.clip_lo) - 1.0
        np.testing.assert_allclose(out[inside], fwd[inside], atol=1e-6)
        back = denormalize(out, rec)
        rel = np.abs(back[inside] - vol[inside]) / np.abs(vol[inside])
        assert rel.max() <= 1e-5

    def test_denormalize_endpoints(self):
        rec = NormRecord(scale=0.1, offset=-2.0, clip_lo=10.0, clip_hi=30.0)
        np.testing.assert_array_equal(denormalize(np.full((2, 2, 2), -1.0), rec), 10.0)
        np.testing.assert_array_equal(denormalize(np.full((2, 2, 2), 1.0), rec), 30.0)

    def test_norm_record_invariants(self):
        with pytest.raises(ValidationError):
            NormRecord(scale=0.0, offset=0.0, clip_lo=0.0, clip_hi=1.0)
        with pytest.raises(ValidationError):
            NormRecord(scale=1.0, offset=0.0, clip_lo=1.0, clip_hi=1.0)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float32, (4, 4, 4), elements=finite), st.floats(0.0, 0.2))
    def test_output_range_property(self, vol, pct):
        try:
            out, _ = normalize(vol, pct)
        except DegenerateInputError:
            return
        assert out.min() >= -1.0 and out.max() <= 1.0


class TestApplyMask:
    def test_empty_mask(self, rng):
        g = rng.normal(size=(4, 4, 4)).astype(np.float32)
        np.testing.assert_array_equal(apply_mask(g, np.zeros_like(g)), g)

    def test_full_mask(self, rng):
        g = rng.normal(size=(4, 4, 4)).astype(np.float32)
        np.testing.assert_array_equal(apply_mask(g, np.ones_like(g)), 0.0)

    def test_single_voxel(self, rng):
        g = rng.normal(size=(4, 4, 4)).astype(np.float32)
        m = np.zeros_like(g)
        m[1, 1, 1] = 1
        v = apply_mask(g, m)
        assert v[1, 1, 1] == 0.0
        keep = m == 0
        np.testing.assert_array_equal(v[keep], g[keep])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            apply_mask(np.zeros((4, 4, 4)), np.zeros((4, 4, 2)))

    def test_non_binary_mask(self):
        with pytest.raises(ValidationError):
            apply_mask(np.zeros((2, 2, 2)), np.full((2, 2, 2), 0.5))

    @settings(max_examples=40, deadline=None)
    @given(
        arrays(np.float32, (3, 4, 2), elements=finite),
        arrays(np.float32, (3, 4, 2), elements=st.sampled_from([0.0, 1.0])),
    )
    def test_idempotent(self, g, m):
        once = apply_mask(g, m)
        np.testing.assert_array_equal(apply_mask(once, m), once)
