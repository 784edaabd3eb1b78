import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embryoscore.sequences import (
    FRAMES_FILE,
    HEADER,
    TIMES_FILE,
    ContainerError,
    RawSequence,
    SequenceError,
    frame_grid,
    payload_size,
    read_container,
    sample_sequence,
    write_container,
)


def raw_regular(start=10.0, stop=120.0, step=0.25, focals=1, side=16, seed=0):
    rng = np.random.default_rng(seed)
    times = np.arange(start, stop + 1e-9, step)
    n = len(times) * focals
    frames = rng.integers(1, 256, (n, side, side), dtype=np.uint8)
    return RawSequence(
        "e", frames, np.repeat(times, focals), np.tile(np.arange(focals), len(times)), focals
    )


class TestGrid:
    def test_default(self):
        g = frame_grid()
        assert len(g) == 128 and g[0] == 12.0 and g[-1] == 139.0
        assert np.all(np.diff(g) == 1.0)
        assert g[-1] - g[0] == 127.0

    def test_offset(self):
        assert frame_grid(12.5, 3).tolist() == [12.5, 13.5, 14.5]

    def test_count_must_be_positive(self):
        with pytest.raises(SequenceError):
            frame_grid(12.0, 0)


class TestSample:
    def test_validity_over_raw_span(self):
        seq = sample_sequence(raw_regular(), frame_grid(), side=16)
        expected = [12 + i <= 120 for i in range(128)]
        assert seq.validity_mask.tolist() == expected

    def test_end_time_108_gives_97_valid(self):
        seq = sample_sequence(raw_regular(stop=140.0), frame_grid(), end_time=108.0, side=16)
        # explicit enumeration of grid points at or before 108
        assert seq.validity_mask.sum() == sum(1 for t in range(12, 140) if t <= 108) == 97

    def test_nearest_frame(self):
        frames = np.stack([np.full((4, 4), 10, np.uint8), np.full((4, 4), 20, np.uint8)])
        raw = RawSequence("e", frames, [49.9, 50.2], [0, 0], 1)
        seq = sample_sequence(raw, [50.0], side=4)
        assert seq.validity_mask[0] and np.all(seq.data[0] == 10)

    def test_equidistant_takes_earlier(self):
        frames = np.stack([np.full((4, 4), 10, np.uint8), np.full((4, 4), 20, np.uint8)])
        raw = RawSequence("e", frames, [49.75, 50.25], [0, 0], 1)
        assert np.all(sample_sequence(raw, [50.0], side=4).data[0] == 10)

    def test_gap_tolerance(self):
        frames = np.full((1, 4, 4), 7, np.uint8)
        raw = RawSequence("e", frames, [50.0], [0], 1)
        seq = sample_sequence(raw, [49.5, 49.49, 50.5, 50.51], side=4)
        assert seq.validity_mask.tolist() == [True, False, True, False]

    def test_padding_is_exactly_zero(self):
        seq = sample_sequence(raw_regular(), frame_grid(), end_time=110.0, side=16)
        assert np.all(seq.data[~seq.validity_mask] == 0)
        assert np.all(seq.data[seq.validity_mask].reshape(seq.validity_mask.sum(), -1).max(axis=1) > 0)

    def test_central_plane_and_clamping(self):
        # each plane is filled with its own index so the chosen plane is visible
        times = np.repeat(np.arange(10.0, 20.0), 3)
        focal = np.tile(np.arange(3), 10)
        frames = np.stack([np.full((4, 4), 100 + f, np.uint8) for f in focal])
        raw = RawSequence("e", frames, times, focal, 3)
        for offset, plane in [(0, 1), (-1, 0), (1, 2), (-5, 0), (5, 2)]:
            seq = sample_sequence(raw, [12.0], focal_offset=offset, side=4)
            assert np.all(seq.data[0] == 100 + plane)

    def test_missing_plane(self):
        raw = RawSequence("e", np.ones((2, 4, 4), np.uint8), [1.0, 2.0], [0, 0], 3)
        with pytest.raises(SequenceError):
            sample_sequence(raw, [1.0], side=4)

    def test_empty(self):
        raw = RawSequence("e", np.zeros((0, 4, 4), np.uint8), [], [], 3)
        with pytest.raises(SequenceError):
            sample_sequence(raw, [1.0], side=4)

    @pytest.mark.parametrize("end", [107.9, 140.1])
    def test_end_time_range(self, end):
        with pytest.raises(SequenceError):
            sample_sequence(raw_regular(), frame_grid(), end_time=end, side=16)

    def test_resize_bilinear_range_and_determinism(self):
        raw = raw_regular(side=40)
        a = sample_sequence(raw, frame_grid(), side=64)
        b = sample_sequence(raw, frame_grid(), side=64)
        assert a.data.shape == (128, 64, 64) and a.data.dtype == np.uint8
        assert np.array_equal(a.data, b.data)

    def test_constant_frame_resizes_to_constant(self):
        raw = RawSequence("e", np.full((1, 30, 30), 200, np.uint8), [12.0], [0], 1)
        assert np.all(sample_sequence(raw, [12.0], side=256).data == 200)


class TestRawInvariants:
    def test_non_increasing_times(self):
        with pytest.raises(SequenceError):
            RawSequence("e", np.zeros((2, 4, 4), np.uint8), [2.0, 2.0], [0, 0], 1)

    def test_interleaved_planes_ok(self):
        RawSequence("e", np.zeros((4, 4, 4), np.uint8), [1.0, 1.0, 2.0, 2.0], [0, 1, 0, 1], 3)

    def test_focal_out_of_range(self):
        with pytest.raises(SequenceError):
            RawSequence("e", np.zeros((1, 4, 4), np.uint8), [1.0], [3], 3)

    def test_dtype(self):
        with pytest.raises(SequenceError):
            RawSequence("e", np.zeros((1, 4, 4), np.float32), [1.0], [0], 1)


class TestContainer:
    def test_round_trip_three_frames(self, tmp_path):
        rng = np.random.default_rng(1)
        raw = RawSequence("e1", rng.integers(0, 256, (3, 64, 64), dtype=np.uint8), [12.25, 12.5, 12.75], [0, 0, 0], 1)
        write_container(tmp_path / "e1", raw)
        assert read_container(tmp_path / "e1").equals(raw)
        assert read_container(tmp_path / "e1", mmap=True).equals(raw)

    def test_byte_exact_rewrite(self, tmp_path):
        raw = raw_regular(stop=30.0, focals=3, side=12)
        write_container(tmp_path / "a", raw)
        write_container(tmp_path / "b", read_container(tmp_path / "a"))
        for name in (FRAMES_FILE, TIMES_FILE):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    @settings(max_examples=30, deadline=None)
    @given(
        st.integers(0, 6), st.integers(1, 9), st.integers(1, 9), st.integers(1, 11),
        st.integers(0, 2**32 - 1),
    )
    def test_round_trip_property(self, tmp_path_factory, n, h, w, focals, seed):
        rng = np.random.default_rng(seed)
        times = np.round(np.cumsum(rng.uniform(0.1, 1.0, n)), 3)
        raw = RawSequence("x", rng.integers(0, 256, (n, h, w), dtype=np.uint8), times, rng.integers(0, focals, n), focals)
        d = tmp_path_factory.mktemp("c") / "x"
        write_container(d, raw)
        assert read_container(d).equals(raw)

    def test_header_layout(self, tmp_path):
        raw = raw_regular(stop=11.0, focals=1, side=8)
        write_container(tmp_path / "e", raw)
        head = (tmp_path / "e" / FRAMES_FILE).read_bytes()[: HEADER.size]
        assert head[:4] == b"TLF1"
        assert struct.unpack("<HIHHH", head[4:]) == (1, len(raw), 1, 8, 8)

    def test_bad_magic(self, tmp_path):
        write_container(tmp_path / "e", raw_regular(stop=11.0, side=8))
        p = tmp_path / "e" / FRAMES_FILE
        b = bytearray(p.read_bytes())
        b[:4] = b"XXXX"
        p.write_bytes(bytes(b))
        with pytest.raises(ContainerError, match="magic"):
            read_container(tmp_path / "e")

    def test_truncated(self, tmp_path):
        write_container(tmp_path / "e", raw_regular(stop=11.0, side=8))
        p = tmp_path / "e" / FRAMES_FILE
        p.write_bytes(p.read_bytes()[:-1])
        with pytest.raises(ContainerError, match="truncated"):
            read_container(tmp_path / "e")

    def test_truncated_header(self, tmp_path):
        (tmp_path / "e").mkdir()
        (tmp_path / "e" / FRAMES_FILE).write_bytes(b"TLF1\x01")
        with pytest.raises(ContainerError):
            read_container(tmp_path / "e")

    def test_dimension_overflow(self, tmp_path):
        raw = RawSequence("e", np.zeros((1, 1, 70_000), np.uint8), [1.0], [0], 1)
        with pytest.raises(ContainerError, match="overflow"):
            write_container(tmp_path / "e", raw)

    def test_full_size_payload(self, tmp_path):
        assert payload_size(128, 256, 256) == 8_388_608 == 128 * 256 * 256
        raw = RawSequence("e", np.zeros((128, 256, 256), np.uint8), np.arange(128.0) + 12, np.zeros(128, int), 1)
        write_container(tmp_path / "e", raw)
        assert (tmp_path / "e" / FRAMES_FILE).stat().st_size == 8_388_608 + HEADER.size
