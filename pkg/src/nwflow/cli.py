"""Command-line entry point ``nwflow``.

Exit codes: 0 success, 1 unexpected failure, 2 usage, 3 file I/O,
4 malformed input file, 5 model mismatch, 6 lifting overflow, 7 invalid
argument or geometry, 8 self-test failure, 9 truncated stream.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import _backend, analysis, codec, dataio, modelfile, rans, training
from .lifting import LiftingOverflow
from .numerics import ContractError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO, EXIT_FORMAT = 0, 1, 2, 3, 4
EXIT_MODEL, EXIT_OVERFLOW, EXIT_INVALID, EXIT_SELFTEST, EXIT_TRUNCATED = 5, 6, 7, 8, 9


class UsageError(Exception):
    pass


def _load_model(path):
    flow, priors, meta, _ = modelfile.load(path)
    return flow, priors, meta


def _read_input_image(path, ycbcr):
    img = dataio.read_ppm(path)
    return dataio.rgb_to_ycbcr(img) if ycbcr else img


def _write_output_image(path, img, colorspace):
    if colorspace == "ycbcr":
        img = dataio.ycbcr_to_rgb(img)
    dataio.write_ppm(path, img)


# commands ------------------------------------------------------------------------

def cmd_train(args):
    config = training.TrainConfig.from_file(args.config) if args.config else training.TrainConfig()
    paths = dataio.list_images(args.data) if os.path.isdir(args.data) else dataio.read_split(args.data)
    if not paths:
        raise ContractError(f"no images found in {args.data}")
    patches = []
    for p in paths:
        img = dataio.read_ppm(p)
        if config.colorspace == "ycbcr":
            img = dataio.rgb_to_ycbcr(img)
        patches.extend(dataio.extract_patches(img, config.patch_size))
    if not patches:
        raise ContractError("no patch fits inside the corpus images")
    if args.val:
        train_set = patches
        val_set = []
        for p in dataio.read_split(args.val):
            img = dataio.read_ppm(p)
            if config.colorspace == "ycbcr":
                img = dataio.rgb_to_ycbcr(img)
            val_set.extend(dataio.extract_patches(img, config.patch_size))
    else:
        train_set, val_set = training.split_corpus(patches, config.val_fraction, config.seed)
    log = None if args.quiet else (lambda s: print(s, flush=True))
    training.train(config, train_set, val_set, checkpoint=args.out, metrics=args.metrics,
                   resume=args.resume, log=log)
    return EXIT_OK


def cmd_compress(args):
    flow, priors, _ = _load_model(args.model)
    img = _read_input_image(args.input, args.ycbcr)
    colorspace = "ycbcr" if args.ycbcr else ("gray" if img.shape[0] == 1 else "rgb")
    data = codec.compress(img, flow, priors, colorspace)
    with open(args.out, "wb") as f:
        f.write(data)
    if args.verbose:
        print(f"{len(data)} bytes, {8 * len(data) / img.size:.4f} bpd")
    return EXIT_OK


def cmd_decompress(args):
    flow, priors, _ = _load_model(args.model)
    with open(args.input, "rb") as f:
        data = f.read()
    img = codec.decompress(data, flow, priors)
    _write_output_image(args.out, img, codec.header_of(data).colorspace)
    return EXIT_OK


def cmd_progressive(args):
    flow, priors, _ = _load_model(args.model)
    with open(args.input, "rb") as f:
        data = f.read()
    header = codec.header_of(data)
    if not 0 <= args.levels <= header.iterations:
        raise UsageError(f"--levels must lie in 0..{header.iterations}")
    res = codec.progressive_decode(data, flow, priors, args.levels)
    _write_output_image(args.out, res.image, header.colorspace)
    if args.verbose:
        print(f"used {res.bytes_used} of {len(data)} bytes")
    return EXIT_OK


def cmd_upsample(args):
    flow, priors, _ = _load_model(args.model)
    img = _read_input_image(args.input, args.ycbcr)
    big = codec.upsample(img, flow, priors, args.factor, args.seed, args.temperature)
    _write_output_image(args.out, big, "ycbcr" if args.ycbcr else "rgb")
    return EXIT_OK


def cmd_analyze(args):
    flow, priors, _ = _load_model(args.model)
    img = dataio.read_ppm(args.image)
    os.makedirs(args.out_dir, exist_ok=True)
    bank = analysis.extract_filters(flow.with_mode(False), img, args.row, args.channel)
    analysis.write_filters_csv(os.path.join(args.out_dir, "filters.csv"), bank)
    analysis.write_response_csv(os.path.join(args.out_dir, "response.csv"), bank, args.samples)
    pyr = flow.forward(img)
    mosaic = analysis.visualize_latents(pyr, priors, min(args.iterations, pyr.levels), flow)
    dataio.write_ppm(os.path.join(args.out_dir, "mosaic.ppm"), mosaic)
    return EXIT_OK


def selftest(out=print):
    """Wavelet oracles, codec round trips and an rANS fuzz run; True if all pass."""
    from .lifting import build_flow, init_haar, init_legall, round_nearest

    rng = np.random.default_rng(2024)
    ok = True

    def report(name, passed):
        nonlocal ok
        ok &= bool(passed)
        out(f"{'PASS' if passed else 'FAIL'} {name}")

    for name, init, oracle in (("haar", init_haar, _haar_oracle), ("legall", init_legall, _legall_oracle)):
        flow = init(build_flow(1, scheme=1, repeat=1, hidden_channels=10))
        sig = rng.integers(-255, 256, (200, 1, 32))
        s, d = flow.block.forward(sig[:, :, 0::2], sig[:, :, 1::2])
        es, ed = oracle(sig[:, 0, 0::2], sig[:, 0, 1::2], round_nearest)
        report(f"{name} lifting oracle", np.array_equal(s[:, 0], es) and np.array_equal(d[:, 0], ed))

    from .prior import Priors
    flow = build_flow(3, scheme=2, repeat=3, hidden_channels=8, n_hidden=1, rng=rng)
    init_legall(flow, rng=rng)
    priors = Priors(3)
    good = True
    for size in (4, 8, 16, 32):
        img = rng.integers(0, 256, (3, size, size)).astype(np.uint8)
        good &= np.array_equal(codec.decompress(codec.compress(img, flow, priors), flow, priors), img)
    report("codec round trip", good)

    tables = [rans.build_table(rng.random(int(rng.integers(2, 300))) ** 3) for _ in range(16)]
    which = rng.integers(0, 16, 20000)
    syms = [int(rng.integers(0, tables[i].n_symbols)) for i in which]
    data = rans.encode_symbols(syms, [tables[i] for i in which])
    dec = rans.StreamDecoder(data)
    back = dec.decode_symbols([tables[i] for i in which])
    report("rans fuzz", back == syms and dec.finished(len(data)))
    return ok


def _haar_oracle(o, e, rnd):
    d = e - o
    return o + rnd(d / 2), d


def _legall_oracle(o, e, rnd):
    o_next = np.concatenate([o[:, 1:], o[:, -1:]], axis=1)
    d = e - rnd((o + o_next) / 2)
    d_prev = np.concatenate([d[:, :1], d[:, :-1]], axis=1)
    return o + rnd((d_prev + d) / 4), d


def cmd_selftest(args):
    return EXIT_OK if selftest() else EXIT_SELFTEST


# parser ------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="nwflow", description="Neural wavelet flow lossless image codec.")
    p.add_argument("--backend", choices=["compiled", "python"], help="kernel implementation")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model on a directory of PPM/PGM images")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--data", required=True, help="image directory or split file")
    t.add_argument("--val", help="split file of validation images")
    t.add_argument("--out", required=True, help="model / checkpoint path")
    t.add_argument("--metrics", help="per-epoch CSV log")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compress", help="compress a PPM/PGM image")
    c.add_argument("input")
    c.add_argument("--model", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--ycbcr", action="store_true", help="code in YCbCr (decoding back to RGB is lossy)")
    c.add_argument("--verbose", action="store_true")
    c.set_defaults(func=cmd_compress)

    d = sub.add_parser("decompress", help="restore an image")
    d.add_argument("input")
    d.add_argument("--model", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_decompress)

    g = sub.add_parser("progressive", help="decode a low-pass preview")
    g.add_argument("input")
    g.add_argument("--model", required=True)
    g.add_argument("--levels", type=int, required=True, help="high-pass levels to decode")
    g.add_argument("--out", required=True)
    g.add_argument("--verbose", action="store_true")
    g.set_defaults(func=cmd_progressive)

    u = sub.add_parser("upsample", help="enlarge by sampling high-pass detail")
    u.add_argument("input")
    u.add_argument("--model", required=True)
    u.add_argument("--factor", type=int, required=True)
    u.add_argument("--seed", type=int, default=0)
    u.add_argument("--temperature", type=float, default=1.0)
    u.add_argument("--ycbcr", action="store_true")
    u.add_argument("--out", required=True)
    u.set_defaults(func=cmd_upsample)

    a = sub.add_parser("analyze", help="filters, frequency responses and latent mosaic")
    a.add_argument("--model", required=True)
    a.add_argument("--image", required=True)
    a.add_argument("--out-dir", required=True)
    a.add_argument("--row", type=int, default=0)
    a.add_argument("--channel", type=int, default=0)
    a.add_argument("--samples", type=int, default=256)
    a.add_argument("--iterations", type=int, default=2)
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("selftest", help="run the built-in oracle suites")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.backend:
            _backend.use(args.backend)
        return args.func(args)
    except UsageError as exc:
        print(f"nwflow: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except codec.ModelMismatch as exc:
        print(f"nwflow: model mismatch: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except codec.TruncatedStream as exc:
        print(f"nwflow: truncated stream: {exc}", file=sys.stderr)
        return EXIT_TRUNCATED
    except (codec.CodecError, dataio.ImageFormatError, modelfile.ModelFormatError,
            rans.DecodeError) as exc:
        print(f"nwflow: bad input file: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except LiftingOverflow as exc:
        print(f"nwflow: overflow: {exc}", file=sys.stderr)
        return EXIT_OVERFLOW
    except ContractError as exc:
        print(f"nwflow: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"nwflow: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        print(f"nwflow: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
