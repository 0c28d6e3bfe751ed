import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualfusion.ppm import (
    ImageBuffer,
    PpmError,
    image_to_model,
    model_to_image,
    quantize_u8,
    read_pgm,
    read_ppm,
    write_pgm,
    write_ppm,
)


def random_image(w, h, seed):
    rng = np.random.default_rng(seed)
    return ImageBuffer(w, h, rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8))


class TestRoundTrip:
    @given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 1000))
    @settings(max_examples=30, deadline=None)
    def test_ppm_bitwise(self, w, h, seed):
        import tempfile

        with tempfile.TemporaryDirectory() as d:
            path = f"{d}/img.ppm"
            img = random_image(w, h, seed)
            write_ppm(path, img)
            back = read_ppm(path)
            assert back.width == w and back.height == h
            assert np.array_equal(back.pixels, img.pixels)

    def test_white_pixel_byte_count(self, tmp_path):
        # header "P6\n1 1\n255\n" is 11 bytes, plus 3 payload bytes
        path = tmp_path / "white.ppm"
        write_ppm(path, ImageBuffer(1, 1, np.full((1, 1, 3), 255, dtype=np.uint8)))
        raw = path.read_bytes()
        assert raw.startswith(b"P6\n1 1\n255\n")
        assert len(raw) == 14

    def test_pgm_maps_to_unit(self, tmp_path):
        path = tmp_path / "mask.pgm"
        write_pgm(path, np.array([[0.0, 1.0], [0.5, 0.25]]))
        back = read_pgm(path)
        assert np.allclose(back, [[0.0, 1.0], [128 / 255, 64 / 255]])

    def test_comments_and_whitespace(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6 # comment\n# another\n 2\t1 \n255\n" + bytes(6))
        img = read_ppm(path)
        assert (img.width, img.height) == (2, 1)


class TestErrors:
    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.ppm"
        p.write_bytes(b"P3\n1 1\n255\n000")
        with pytest.raises(PpmError, match="bad magic"):
            read_ppm(p)

    def test_bad_maxval(self, tmp_path):
        p = tmp_path / "x.ppm"
        p.write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
        with pytest.raises(PpmError, match="maxval"):
            read_ppm(p)

    def test_short_payload(self, tmp_path):
        p = tmp_path / "x.ppm"
        p.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
        with pytest.raises(PpmError, match="short payload"):
            read_ppm(p)


class TestModelSpace:
    def test_range_mapping(self):
        img = ImageBuffer(2, 1, np.array([[[0, 128, 255], [64, 0, 255]]], dtype=np.uint8))
        arr = image_to_model(img)
        assert arr.shape == (3, 1, 2)
        assert arr.min() >= -1.0 and arr.max() <= 1.0
        assert np.isclose(arr[0, 0, 0], -1.0) and np.isclose(arr[2, 0, 0], 1.0)

    @given(st.integers(0, 5000))
    @settings(max_examples=20, deadline=None)
    def test_u8_round_trip(self, seed):
        img = random_image(4, 3, seed)
        back = model_to_image(image_to_model(img))
        assert np.array_equal(back.pixels, img.pixels)

    def test_round_half_up(self):
        assert quantize_u8(np.array([0.5, 1.49, 254.5, 300.0, -4.0])).tolist() == [1, 1, 255, 255, 0]

    def test_out_of_range_clips(self):
        img = model_to_image(np.array([[[1.5]], [[-2.0]], [[0.0]]]))
        assert img.pixels.reshape(3).tolist() == [255, 0, 128]
