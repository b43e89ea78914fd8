import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adnmar.arrays import (
    CTImage,
    HUWindow,
    NormalizedImage,
    denormalize_hu,
    normalize_hu,
    read_array,
    read_image,
    write_array,
    write_image,
)
from adnmar.errors import CorruptionError, FormatError


def make_image(values):
    return CTImage(np.asarray(values, dtype=np.float32))


def constant_image(value, shape=(16, 16)):
    return make_image(np.full(shape, value))


class TestNormalize:
    def test_lower_edge(self):
        out = normalize_hu(constant_image(-1000.0), HUWindow(-1000, 2000))
        assert np.all(out.pixels == -1.0)

    def test_upper_edge(self):
        out = normalize_hu(constant_image(2000.0), HUWindow(-1000, 2000))
        assert np.all(out.pixels == 1.0)

    def test_midpoint(self):
        out = normalize_hu(constant_image(500.0), HUWindow(-1000, 2000))
        assert np.all(out.pixels == 0.0)

    def test_clamps_outside_window(self):
        img = constant_image(5000.0)
        out = normalize_hu(img, HUWindow(-1000, 2000))
        assert np.all(out.pixels == 1.0)

    def test_degenerate_window_rejected(self):
        with pytest.raises(ValueError):
            HUWindow(100.0, 100.0)
        with pytest.raises(ValueError):
            HUWindow(100.0, -100.0)

    def test_denormalize_midpoint(self):
        out = denormalize_hu(NormalizedImage(np.zeros((16, 16), np.float32), HUWindow(-1000, 2000)))
        assert np.all(out.pixels == 500.0)

    def test_denormalize_edge(self):
        out = denormalize_hu(
            NormalizedImage(np.full((16, 16), -1.0, np.float32), HUWindow(-1000, 2000))
        )
        assert np.all(out.pixels == -1000.0)

    @settings(deadline=None, max_examples=50)
    @given(
        lo=st.floats(min_value=-1024, max_value=1000),
        width=st.floats(min_value=10.0, max_value=8000.0),
        data=st.data(),
    )
    def test_roundtrip_within_window(self, lo, width, data):
        window = HUWindow(lo, lo + width)
        rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
        hu = rng.uniform(window.lo, min(window.hi, 32767.0), (16, 16)).astype(np.float32)
        hu = np.clip(hu, -1024.0, 32767.0)
        img = make_image(hu)
        back = denormalize_hu(normalize_hu(img, window))
        assert np.all(np.abs(back.pixels - hu) <= 1e-5 * np.maximum(np.abs(hu), window.width))

    @settings(deadline=None, max_examples=30)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_output_always_in_range(self, seed):
        rng = np.random.default_rng(seed)
        hu = rng.uniform(-1024, 32767, (16, 16)).astype(np.float32)
        out = normalize_hu(make_image(hu), HUWindow(-500, 500))
        assert out.pixels.min() >= -1.0 and out.pixels.max() <= 1.0


class TestCTImageInvariants:
    def test_rejects_small_images(self):
        with pytest.raises(ValueError):
            CTImage(np.zeros((8, 8), np.float32))

    def test_rejects_nan(self):
        arr = np.zeros((16, 16), np.float32)
        arr[0, 0] = np.nan
        with pytest.raises(ValueError):
            CTImage(arr)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            CTImage(np.full((16, 16), 40000.0, np.float32))

    def test_ingest_clamps(self):
        arr = np.array([[np.nan, 50000.0], [-5000.0, 100.0]], np.float32)
        arr = np.tile(arr, (8, 8))
        img = CTImage.ingest(arr)
        assert img.pixels.min() >= -1024.0
        assert img.pixels.max() <= 32767.0
        assert np.isfinite(img.pixels).all()
        assert img.provenance == "ingested"


class TestContainer:
    def test_roundtrip_2d(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.standard_normal((64, 64)).astype(np.float32)
        path = tmp_path / "a.adnarr"
        write_array(path, arr, spacing_mm=0.8, provenance="ingested")
        back, meta = read_array(path)
        assert back.tobytes() == arr.tobytes()
        assert meta["shape"] == (64, 64)
        assert meta["spacing_mm"] == 0.8
        assert meta["provenance"] == "ingested"

    @settings(deadline=None, max_examples=25)
    @given(
        seed=st.integers(0, 2**32 - 1),
        shape=st.one_of(
            st.tuples(st.integers(1, 16), st.integers(1, 16)),
            st.tuples(st.integers(1, 6), st.integers(1, 12), st.integers(1, 12)),
        ),
    )
    def test_roundtrip_bitwise_any_shape(self, tmp_path_factory, seed, shape):
        rng = np.random.default_rng(seed)
        arr = (rng.standard_normal(shape) * 1e3).astype(np.float32)
        path = tmp_path_factory.mktemp("arr") / "x.adnarr"
        write_array(path, arr)
        back, _ = read_array(path)
        assert back.shape == arr.shape
        assert back.tobytes() == arr.tobytes()

    def test_payload_size_mismatch(self, tmp_path):
        path = tmp_path / "bad.adnarr"
        header = {"magic": "ADNARR1", "shape": [64, 64], "dtype": "f32le", "spacing_mm": 1.0, "provenance": "synthetic"}
        with open(path, "wb") as fh:
            fh.write(json.dumps(header).encode() + b"\n")
            fh.write(b"\x00" * (4095 * 4))
        with pytest.raises(CorruptionError):
            read_array(path)

    def test_unknown_dtype_tag(self, tmp_path):
        path = tmp_path / "bad.adnarr"
        header = {"magic": "ADNARR1", "shape": [2, 2], "dtype": "f64le", "spacing_mm": 1.0, "provenance": "synthetic"}
        with open(path, "wb") as fh:
            fh.write(json.dumps(header).encode() + b"\n")
            fh.write(b"\x00" * 32)
        with pytest.raises(FormatError):
            read_array(path)

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "bad.adnarr"
        with open(path, "wb") as fh:
            fh.write(b"not json at all\n")
        with pytest.raises(FormatError):
            read_array(path)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.adnarr"
        header = {"magic": "NOPE", "shape": [2, 2], "dtype": "f32le", "spacing_mm": 1.0, "provenance": "synthetic"}
        with open(path, "wb") as fh:
            fh.write(json.dumps(header).encode() + b"\n")
            fh.write(b"\x00" * 16)
        with pytest.raises(FormatError):
            read_array(path)

    def test_rejects_non_float32(self, tmp_path):
        with pytest.raises(ValueError):
            write_array(tmp_path / "x.adnarr", np.zeros((4, 4), np.float64))

    def test_image_roundtrip(self, tmp_path):
        img = CTImage(np.linspace(-1000, 1500, 256, dtype=np.float32).reshape(16, 16), pixel_spacing_mm=0.5)
        path = tmp_path / "img.adnarr"
        write_image(path, img)
        back = read_image(path)
        assert back.pixels.tobytes() == img.pixels.tobytes()
        assert back.pixel_spacing_mm == 0.5
        assert back.provenance == "synthetic"
