import numpy as np
import pytest
from hypothesis import given, strategies as st

from dntdf.data import (PNMError, Sample, augment, decode_pnm, encode_pnm, fit, flip_horizontal, load_samples,
                        nearest_multiple, read_pnm, rescale, save_samples, synth_generate, write_pnm)
from dntdf.loss import edge_weight_alpha


def test_p5_all_white_mask(tmp_path):
    (tmp_path / "img").mkdir()
    (tmp_path / "msk").mkdir()
    write_pnm(tmp_path / "img" / "a.ppm", np.zeros((32, 32, 3), np.uint8))
    write_pnm(tmp_path / "msk" / "a.pgm", np.full((32, 32), 255, np.uint8))
    (s,) = load_samples(tmp_path / "img", tmp_path / "msk")
    assert np.all(s.mask == 1)


def test_p6_normalisation():
    img = np.zeros((1, 1, 3), np.uint8)
    img[0, 0] = (255, 0, 0)
    arr, maxval = decode_pnm(encode_pnm(img))
    assert maxval == 255
    assert tuple(arr[0, 0] / maxval) == (1.0, 0.0, 0.0)


def test_header_comments_and_16bit():
    buf = b"P5\n# made by hand\n2 1\n# another\n65535\n" + np.array([0, 65535], ">u2").tobytes()
    arr, maxval = decode_pnm(buf)
    assert maxval == 65535 and arr.tolist() == [[0, 65535]]


@pytest.mark.parametrize("buf,offset", [(b"P3\n1 1\n255\n\x00", 0), (b"P5\n1 x\n255\n\x00", 5),
                                         (b"P5\n2 2\n255\n\x00", 11), (b"P5\n1 1\n", 7)])
def test_malformed_headers_report_byte_offset(buf, offset):
    with pytest.raises(PNMError, match=f"byte {offset}"):
        decode_pnm(buf)


def test_center_crop_offset(tmp_path):
    (tmp_path / "i").mkdir()
    (tmp_path / "m").mkdir()
    img = np.zeros((70, 70, 3), np.uint8)
    img[3, 3] = 255
    img[66, 66] = 255
    write_pnm(tmp_path / "i" / "x.ppm", img)
    write_pnm(tmp_path / "m" / "x.pgm", np.zeros((70, 70), np.uint8))
    (s,) = load_samples(tmp_path / "i", tmp_path / "m")
    assert s.image.shape == (3, 64, 64)
    assert s.image[0, 0, 0] == 1.0 and s.image[0, 63, 63] == 1.0
    assert s.image[0].sum() == 2.0


def test_padding_and_nearest_multiple():
    assert nearest_multiple(70) == 64 and nearest_multiple(90) == 96 and nearest_multiple(5) == 32
    out = fit(np.ones((1, 30, 30)), 32, 32)
    assert out.shape == (1, 32, 32) and out.sum() == 900 and out[0, 0, 0] == 0


def test_missing_pair_names_basename(tmp_path):
    (tmp_path / "i").mkdir()
    (tmp_path / "m").mkdir()
    write_pnm(tmp_path / "i" / "lonely.ppm", np.zeros((32, 32, 3), np.uint8))
    with pytest.raises(FileNotFoundError, match="lonely"):
        load_samples(tmp_path / "i", tmp_path / "m")


def test_synth_deterministic_and_constrained():
    a = synth_generate(30, 64, 3)
    b = synth_generate(30, 64, 3)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes()
    assert synth_generate(1, 64, 4)[0].image.tobytes() != a[0].image.tobytes()


def test_synth_foreground_fraction_and_flat_region():
    for s in synth_generate(1000, 64, 11):
        assert 0.05 <= s.mask.mean() <= 0.6
        assert (edge_weight_alpha(s.mask, 10) == 0).any()
        assert set(np.unique(s.mask)) <= {0.0, 1.0}


def test_synth_rejects_bad_size():
    with pytest.raises(ValueError):
        synth_generate(1, 50, 0)


def test_synth_roundtrip_through_files(tmp_path):
    samples = synth_generate(4, 64, 1)
    save_samples(samples, tmp_path)
    back = load_samples(tmp_path / "images", tmp_path / "masks")
    for s, t in zip(samples, back):
        assert s.ident == t.ident
        np.testing.assert_array_equal(s.image, t.image)
        np.testing.assert_array_equal(s.mask, t.mask)


def test_flip_involution():
    s = synth_generate(1, 64, 0)[0]
    twice = flip_horizontal(flip_horizontal(s))
    np.testing.assert_array_equal(twice.image, s.image)
    np.testing.assert_array_equal(twice.mask, s.mask)


def test_scale_one_is_identity():
    s = synth_generate(1, 64, 0)[0]
    assert rescale(s, 1.0) is s


@given(st.sampled_from([0.8, 0.9, 1.1, 1.2]), st.integers(0, 50))
def test_rescale_keeps_mask_binary_and_size(scale, seed):
    s = synth_generate(1, 64, seed)[0]
    out = rescale(s, scale)
    assert out.image.shape == (3, 64, 64) and out.mask.shape == (64, 64)
    assert set(np.unique(out.mask)) <= {0.0, 1.0}


def test_augment_deterministic_under_rng():
    s = synth_generate(1, 64, 0)[0]
    a = augment(s, np.random.default_rng(5))
    b = augment(s, np.random.default_rng(5))
    np.testing.assert_array_equal(a.image, b.image)


def test_sample_validation():
    with pytest.raises(ValueError):
        Sample(np.zeros((3, 4, 4)), np.zeros((4, 5)))
