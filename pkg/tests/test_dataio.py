import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nwflow import dataio
from nwflow.dataio import ImageFormatError, format_ppm, parse_ppm, rgb_to_ycbcr, ycbcr_to_rgb
from nwflow.numerics import ContractError


def _pixel(fn, rgb):
    return tuple(int(v) for v in fn(np.array(rgb, np.uint8).reshape(3, 1, 1)).ravel())


# colour ----------------------------------------------------------------------

def test_forward_triples():
    # [DERIVED] hand evaluation of the JPEG-2000 matrix, rounded and clamped
    assert _pixel(rgb_to_ycbcr, (255, 255, 255)) == (255, 128, 128)
    assert _pixel(rgb_to_ycbcr, (0, 0, 0)) == (0, 128, 128)
    assert _pixel(rgb_to_ycbcr, (255, 0, 0)) == (76, 85, 255)   # Y 76.245, Cb 84.98, Cr 255.5
    assert _pixel(rgb_to_ycbcr, (0, 255, 0)) == (150, 44, 21)   # 149.685, 43.52, 21.23
    assert _pixel(rgb_to_ycbcr, (0, 0, 255)) == (29, 255, 107)  # 29.07, 255.5, 107.27


def test_forward_matrix_values():
    # [PAPER] printed conversion matrix and offset
    assert dataio._RGB2YCC.tolist() == [[0.299, 0.587, 0.114], [-0.1687, -0.3313, 0.5],
                                        [0.5, -0.4187, -0.0813]]
    assert dataio._YCC2RGB.tolist() == [[1, 0, 1.402], [1, -0.34414, -0.71414], [1, 1.772, 0]]
    assert dataio._YCC2RGB_OFFSET[1:].tolist() == [135.45984, -226.816]


def test_inverse_offset_consistent_with_matrix():
    assert np.allclose(dataio._YCC2RGB_OFFSET, -dataio._YCC2RGB @ [0, 128, 128])


def test_inverse_triples():
    assert all(abs(a - b) <= 1 for a, b in zip(_pixel(ycbcr_to_rgb, (255, 128, 128)), (255,) * 3))
    assert all(abs(a - b) <= 1 for a, b in zip(_pixel(ycbcr_to_rgb, (0, 128, 128)), (0,) * 3))


def test_roundtrip_error(rng):
    rgb = rng.integers(0, 256, (3, 1, 100_000)).astype(np.uint8)
    back = ycbcr_to_rgb(rgb_to_ycbcr(rgb))
    assert np.max(np.abs(back.astype(int) - rgb)) <= 2


def test_colour_needs_three_channels():
    with pytest.raises(ContractError):
        rgb_to_ycbcr(np.zeros((1, 4, 4), np.uint8))


# PPM -------------------------------------------------------------------------

def test_ppm_roundtrip(rng, tmp_path):
    for c in (1, 3):
        img = rng.integers(0, 256, (c, 5, 7)).astype(np.uint8)
        path = tmp_path / f"x{c}.ppm"
        dataio.write_ppm(path, img)
        assert np.array_equal(dataio.read_ppm(path), img)
        assert format_ppm(parse_ppm(format_ppm(img))) == format_ppm(img)


def test_ppm_header_layout():
    img = np.arange(6, dtype=np.uint8).reshape(1, 2, 3)
    assert format_ppm(img) == b"P5\n3 2\n255\n" + bytes(range(6))
    rgb = np.zeros((3, 1, 1), np.uint8)
    rgb[:, 0, 0] = (1, 2, 3)
    assert format_ppm(rgb)[-3:] == bytes([1, 2, 3])


def test_ppm_comments_and_whitespace():
    data = b"P6 # a comment\n2\t1\n# another\n255\n" + bytes([10, 20, 30, 40, 50, 60])
    img = parse_ppm(data)
    assert img.shape == (3, 1, 2)
    assert img[:, 0, 1].tolist() == [40, 50, 60]


@pytest.mark.parametrize("data", [
    b"P3\n1 1\n255\n1 2 3",               # ASCII variant
    b"GIF89a",                            # not PNM at all
    b"P6\n2 2\n65535\n" + bytes(24),      # 16-bit
    b"P6\n2 2\n15\n" + bytes(12),         # maxval other than 255
    b"P6\n2 2\n255\n" + bytes(5),         # short raster
    b"P5\n2",                             # truncated header
    b"P5\n0 2\n255\n",                    # empty
    b"P5\nx 2\n255\n" + bytes(4),         # non-numeric
])
def test_ppm_errors(data):
    with pytest.raises(ImageFormatError):
        parse_ppm(data)


def test_ppm_writer_rejects_bad_arrays():
    with pytest.raises(ContractError):
        format_ppm(np.zeros((2, 4, 4), np.uint8))
    with pytest.raises(ContractError):
        format_ppm(np.zeros((3, 4, 4), np.int32))


@settings(max_examples=50, deadline=None)
@given(st.sampled_from([1, 3]), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31))
def test_ppm_roundtrip_property(c, h, w, seed):
    img = np.random.default_rng(seed).integers(0, 256, (c, h, w)).astype(np.uint8)
    assert np.array_equal(parse_ppm(format_ppm(img)), img)


# patches and corpora ------------------------------------------------------------

def test_patch_counts():
    img = np.zeros((3, 64, 64), np.uint8)
    assert len(dataio.extract_patches(img, 32)) == 4
    assert len(dataio.extract_patches(img, 32, stride=100)) == 1
    assert len(dataio.extract_patches(img, 16, stride=8)) == 49
    assert dataio.extract_patches(np.zeros((3, 8, 8)), 16) == []
    with pytest.raises(ContractError):
        dataio.extract_patches(img, 12)


def test_patch_content(rng):
    img = rng.integers(0, 256, (3, 8, 8)).astype(np.uint8)
    p = dataio.extract_patches(img, 4)
    assert np.array_equal(p[1], img[:, 0:4, 4:8]) and np.array_equal(p[2], img[:, 4:8, 0:4])


def test_corpus_iter(tmp_path):
    imgs = dataio.synthetic_corpus(5, 16, seed=3) + dataio.synthetic_corpus(3, 32, seed=4)
    dataio.write_corpus(tmp_path, imgs)
    batches = list(dataio.corpus_iter(str(tmp_path), 2, seed=1))
    assert sum(len(b) for b in batches) == 8
    assert all(len({x.shape for x in b}) == 1 for b in batches)
    again = list(dataio.corpus_iter(str(tmp_path), 2, seed=1))
    assert all(np.array_equal(a, b) for a, b in zip(batches, again))
    patches = list(dataio.corpus_iter(str(tmp_path), 100, patch_size=16))
    assert sum(len(b) for b in patches) == 5 + 3 * 4


def test_split_file(tmp_path):
    paths = dataio.write_corpus(tmp_path / "imgs", dataio.synthetic_corpus(3, 8, channels=1))
    split = tmp_path / "train.txt"
    split.write_text("# training images\n" + "\n".join(f"imgs/{p.split('/')[-1]}" for p in paths)
                     + "\n\n")
    listed = dataio.read_split(split)
    assert [p.split("/")[-1] for p in listed] == [p.split("/")[-1] for p in paths]
    assert all(dataio.read_ppm(p).shape == (1, 8, 8) for p in listed)


def test_synthetic_images_are_seeded():
    a = dataio.synthetic_corpus(2, 16, seed=5)
    b = dataio.synthetic_corpus(2, 16, seed=5)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert a[0].dtype == np.uint8 and a[0].shape == (3, 16, 16)
    assert dataio.synthetic_image(np.random.default_rng(0), (8, 32), 1).shape == (1, 8, 32)
