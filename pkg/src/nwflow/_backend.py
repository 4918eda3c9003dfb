"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy /
pure-Python twins take over. Both produce bit-identical results.
"""
from . import _kernels_py

try:
    from . import _ext
except ImportError:  # extension not built
    _ext = None

_BACKENDS = {"python": _kernels_py}
if _ext is not None:
    _BACKENDS["compiled"] = _ext

_active = _BACKENDS.get("compiled", _kernels_py)


def available():
    return sorted(_BACKENDS)


def name():
    return "compiled" if _active is _ext and _ext is not None else "python"


def use(backend):
    """Switch the active backend ("compiled" or "python")."""
    global _active
    try:
        _active = _BACKENDS[backend]
    except KeyError:
        raise ValueError(f"backend {backend!r} not available; have {available()}") from None


def conv1d_valid(xp, w, b):
    return _active.conv1d_valid(xp, w, b)


def conv2d_valid(xp, w, b):
    return _active.conv2d_valid(xp, w, b)


def rans_encode(starts, freqs, precision):
    return _active.rans_encode(starts, freqs, precision)


def rans_decoder(data):
    return _active.RansDecoder(data)
