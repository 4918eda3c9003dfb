"""Compiled vs pure-Python kernels: convolution, rANS coding, full codec.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from nwflow import _backend, _kernels_py, codec, rans
from nwflow.dataio import synthetic_corpus
from nwflow.lifting import build_flow, init_legall
from nwflow.prior import Priors


def _cases(rng):
    x1 = rng.standard_normal((75, 16, 18)).astype(np.float32)
    w1 = rng.standard_normal((16, 16, 3)).astype(np.float32)
    x2 = rng.standard_normal((25, 16, 18, 18)).astype(np.float32)
    w2 = rng.standard_normal((16, 16, 3, 3)).astype(np.float32)
    b = rng.standard_normal(16).astype(np.float32)

    table = rans.build_table(np.exp(-np.arange(256) / 16.0))
    syms = rng.choice(256, 200_000, p=table.freqs / table.freqs.sum())
    starts = table.cum[syms].astype(np.uint32)
    freqs = table.freqs[syms].astype(np.uint32)
    bank = rans.TableBank([table])
    idx = np.zeros(len(syms), np.int64)
    stream = _kernels_py.rans_encode(starts, freqs, rans.PRECISION)

    flow = init_legall(build_flow(3, scheme=2, repeat=3, hidden_channels=16, n_hidden=1,
                                  rng=rng), rng=rng)
    priors = Priors(3)
    img = synthetic_corpus(1, 64, seed=1)[0]
    coded = codec.compress(img, flow, priors)

    return {
        "conv1d 75x16x18": lambda: _backend.conv1d_valid(x1, w1, b),
        "conv2d 25x16x18x18": lambda: _backend.conv2d_valid(x2, w2, b),
        "rANS encode 2e5": lambda: _backend.rans_encode(starts, freqs, rans.PRECISION),
        "rANS decode 2e5": lambda: rans.StreamDecoder(stream).decode_indices(bank, idx),
        "compress 64x64": lambda: codec.compress(img, flow, priors),
        "decompress 64x64": lambda: codec.decompress(coded, flow, priors),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    cases = _cases(np.random.default_rng(0))
    backends = _backend.available()
    print(f"{'case':24s}" + "".join(f"{b:>12s}" for b in backends) + "     speedup")
    for name, fn in cases.items():
        times = {}
        for b in backends:
            _backend.use(b)
            fn()
            times[b] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
        row = f"{name:24s}" + "".join(f"{times[b] * 1e3:10.2f}ms" for b in backends)
        if len(backends) == 2:
            row += f"  {times['python'] / times['compiled']:8.1f}x"
        print(row)


if __name__ == "__main__":
    main()
