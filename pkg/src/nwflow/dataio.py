"""Images in and out: binary PGM/PPM, YCbCr, patches, corpora.

Images are numpy ``uint8`` arrays shaped ``[C, H, W]`` with C in {1, 3}.
"""
from __future__ import annotations

import os

import numpy as np

from .numerics import ContractError

_RGB2YCC = np.array([[0.299, 0.587, 0.114],
                     [-0.1687, -0.3313, 0.5],
                     [0.5, -0.4187, -0.0813]])
_RGB2YCC_OFFSET = np.array([0.0, 128.0, 128.0])
_YCC2RGB = np.array([[1.0, 0.0, 1.402],
                     [1.0, -0.34414, -0.71414],
                     [1.0, 1.772, 0.0]])
# equals -_YCC2RGB @ (0, 128, 128)
_YCC2RGB_OFFSET = np.array([-179.456, 135.45984, -226.816])


class ImageFormatError(ValueError):
    """Malformed or unsupported image file."""


# PGM / PPM ---------------------------------------------------------------------

def _tokens(data, count, pos):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out = []
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        out.append(data[start:pos])
    return out, pos


def parse_ppm(data):
    data = bytes(data)
    if data[:2] not in (b"P5", b"P6"):
        raise ImageFormatError("not a binary PGM/PPM file (magic must be P5 or P6)")
    channels = 1 if data[:2] == b"P5" else 3
    toks, pos = _tokens(data, 3, 2)
    try:
        width, height, maxval = (int(t) for t in toks)
    except ValueError:
        raise ImageFormatError("non-numeric header field") from None
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval} (only 255)")
    if width <= 0 or height <= 0:
        raise ImageFormatError("empty image")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageFormatError("missing whitespace after header")
    pos += 1
    size = width * height * channels
    raster = data[pos:pos + size]
    if len(raster) != size:
        raise ImageFormatError(f"raster has {len(raster)} of {size} bytes")
    return np.frombuffer(raster, np.uint8).reshape(height, width, channels).transpose(2, 0, 1).copy()


def read_ppm(path):
    with open(path, "rb") as f:
        return parse_ppm(f.read())


def format_ppm(image):
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3) or img.dtype != np.uint8:
        raise ContractError("expected a uint8 [C, H, W] image with C in {1, 3}")
    c, h, w = img.shape
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode() + img.transpose(1, 2, 0).tobytes()


def write_ppm(path, image):
    with open(path, "wb") as f:
        f.write(format_ppm(image))


# colour ----------------------------------------------------------------------

def _convert(image, matrix, offset):
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ContractError("colour conversion needs a 3-channel [3, H, W] image")
    v = np.einsum("ij,jhw->ihw", matrix, img.astype(np.float64)) + offset[:, None, None]
    return np.clip(np.floor(v + 0.5), 0, 255).astype(np.uint8)


def rgb_to_ycbcr(image):
    """JPEG-2000 YCbCr; rounded to nearest and clamped to 0..255."""
    return _convert(image, _RGB2YCC, _RGB2YCC_OFFSET)


def ycbcr_to_rgb(image):
    """Approximate inverse of :func:`rgb_to_ycbcr` (off by at most 2)."""
    return _convert(image, _YCC2RGB, _YCC2RGB_OFFSET)


# patches and corpora --------------------------------------------------------------

def extract_patches(image, size, stride=None):
    """All ``size`` x ``size`` patches at multiples of ``stride`` that fit."""
    if size < 1 or size & (size - 1):
        raise ContractError("patch size must be a power of two")
    stride = stride or size
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[None]
    _, h, w = img.shape
    return [img[:, y:y + size, x:x + size].copy()
            for y in range(0, h - size + 1, stride)
            for x in range(0, w - size + 1, stride)]


_EXTS = (".ppm", ".pgm", ".pnm")


def list_images(directory):
    return sorted(os.path.join(directory, f) for f in os.listdir(directory)
                  if f.lower().endswith(_EXTS))


def read_split(path):
    """Newline-separated image paths; blank lines and ``#`` lines ignored.
    Relative paths resolve against the split file's directory."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as f:
        lines = [ln.strip() for ln in f]
    return [ln if os.path.isabs(ln) else os.path.join(base, ln)
            for ln in lines if ln and not ln.startswith("#")]


def corpus_iter(source, batch, seed=0, patch_size=None):
    """Shuffled batches of images (or their patches) from a directory,
    split file or list of paths. Each batch is a ``[N, C, H, W]`` array of
    one geometry; the order depends only on ``seed``."""
    if isinstance(source, (list, tuple)):
        paths = list(source)
    elif os.path.isdir(source):
        paths = list_images(source)
    else:
        paths = read_split(source)
    if not paths:
        raise ContractError("corpus is empty")
    items = []
    for p in paths:
        img = read_ppm(p)
        items.extend(extract_patches(img, patch_size) if patch_size else [img])
    rng = np.random.default_rng(seed)
    groups = {}
    for i in rng.permutation(len(items)):
        groups.setdefault(items[i].shape, []).append(items[i])
    for shape in sorted(groups):
        g = groups[shape]
        for i in range(0, len(g), batch):
            yield np.stack(g[i:i + batch])


# synthetic data ----------------------------------------------------------------

def synthetic_image(rng, size, channels=3, slope=2.6, noise=1.0):
    """Natural-looking test image: 1/f^(slope/2) amplitude spectrum, correlated
    channels, mild sensor noise. ``size`` is an int or (H, W)."""
    h, w = (size, size) if np.isscalar(size) else size
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    f = np.sqrt(fx ** 2 + fy ** 2)
    f[0, 0] = 1.0
    amp = f ** (-slope / 2)
    amp[0, 0] = 0.0

    def field():
        spec = amp * (rng.standard_normal(amp.shape) + 1j * rng.standard_normal(amp.shape))
        v = np.fft.irfft2(spec, s=(h, w))
        return v / (v.std() + 1e-12)

    base = field()
    planes = [base + 0.35 * field() for _ in range(channels)]
    out = []
    contrast = rng.uniform(20, 40)
    for p in planes:
        v = 128 + rng.uniform(-30, 30) + contrast * p + noise * rng.standard_normal((h, w))
        out.append(np.clip(np.floor(v + 0.5), 0, 255))
    return np.stack(out).astype(np.uint8)


def synthetic_corpus(n, size, channels=3, seed=0):
    rng = np.random.default_rng(seed)
    return [synthetic_image(rng, size, channels) for _ in range(n)]


def write_corpus(directory, images, prefix="img"):
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        ext = ".pgm" if img.shape[0] == 1 else ".ppm"
        p = os.path.join(directory, f"{prefix}{i:05d}{ext}")
        write_ppm(p, img)
        paths.append(p)
    return paths
