"""Desk-scale training: bits-per-dimension objective, Adamax, checkpoints.

Training runs the flow with straight-through rounding (forward rounds,
backward passes the gradient unchanged), so the trained weights drive the
integer codec directly.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import modelfile
from . import numerics as nx
from .lifting import LiftingOverflow, build_flow, init_haar, init_legall, n_iterations
from .numerics import AdamaxState, ContractError, Tensor
from .prior import Priors, UniformPrior

_LN2 = math.log(2.0)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 25
    scheme: int = 2
    repeat: int = 3
    n_hidden: int = 2
    hidden_channel: int = 64
    lr_base: float = 0.001
    decay: float = 0.99
    K: int = 5
    seed: int = 0
    colorspace: str = "rgb"
    patch_size: int = 32
    prior_net_enabled: bool = False
    init: str = "legall"
    init_noise: float = 0.05
    channels: int = 3
    val_fraction: float = 0.1

    def __post_init__(self):
        for name in ("epochs", "batch_size", "repeat", "hidden_channel", "K", "patch_size", "channels"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if self.n_hidden < 0 or self.seed < 0:
            raise ContractError("n_hidden and seed must be non-negative")
        if self.lr_base <= 0 or not 0 < self.decay <= 1:
            raise ContractError("need lr_base > 0 and 0 < decay <= 1")
        if self.scheme not in (1, 2):
            raise ContractError("scheme must be 1 or 2")
        if self.init not in ("legall", "haar", "zero"):
            raise ContractError("init must be legall, haar or zero")
        if self.scheme == 2 and self.init != "zero" and self.repeat < 3:
            raise ContractError("wavelet initialisation of scheme 2 needs repeat >= 3")
        if self.colorspace not in ("rgb", "ycbcr"):
            raise ContractError("colorspace must be rgb or ycbcr")
        if self.patch_size & (self.patch_size - 1) or self.patch_size < 4:
            raise ContractError("patch_size must be a power of two >= 4")
        if not 0 <= self.val_fraction < 1:
            raise ContractError("val_fraction must lie in [0, 1)")

    @classmethod
    def from_text(cls, text):
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"config line {n}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ContractError(f"config line {n}: unknown key {key!r}")
            values[key] = _parse_value(val, types[key], key)
        return cls(**values)

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read())

    def to_meta(self):
        return {k: str(v) for k, v in asdict(self).items()}


def _parse_value(val, typ, key):
    try:
        if typ in (bool, "bool"):
            if val.lower() in ("1", "true", "yes", "on"):
                return True
            if val.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(val)
        if typ in (int, "int"):
            return int(val)
        if typ in (float, "float"):
            return float(val)
        return val
    except ValueError:
        raise ContractError(f"bad value {val!r} for {key}") from None


def build_model(config):
    """Flow and priors for ``config``, initialised from its seed."""
    rng = np.random.default_rng([config.seed, 1 << 20])
    flow = build_flow(config.channels, config.scheme, config.repeat, config.hidden_channel,
                      config.n_hidden, rng=rng, init_scale=config.init_noise)
    if config.init == "legall":
        init_legall(flow, rng=rng, noise=config.init_noise)
    elif config.init == "haar":
        init_haar(flow, rng=rng, noise=config.init_noise)
    net = None
    if config.prior_net_enabled:
        c = config.channels
        net = nx.glow_net(c, 6 * c, config.hidden_channel, config.n_hidden, rng, config.init_noise)
    return flow, Priors(config.channels, config.K, net)


# objective ------------------------------------------------------------------------

def batch_tensor(batch, dtype=np.float32):
    x = np.asarray(batch)
    if x.ndim == 3:
        x = x[None]
    n_iterations(*x.shape[2:])
    return Tensor(x.astype(dtype))


def loss(batch, flow, priors, rounding="ste", dtype=np.float32):
    """Mean bits per dimension of ``batch`` ([N, C, H, W]) as a scalar Tensor.

    ``rounding="none"`` evaluates the continuous relaxation (used for
    gradient checks; training uses the straight-through default).
    """
    x = batch_tensor(batch, dtype)
    n, c, h, w = x.shape
    if isinstance(priors, UniformPrior):
        return Tensor(np.float32(math.log2(priors.hi - priors.lo + 1)))
    highs, lows, final = flow.forward_tensor(x, rounding=rounding)
    log_p = priors.log_prob_tensor(highs, lows, final)
    return nx.tsum(log_p) * (-1.0 / (n * c * h * w * _LN2))


def evaluate(images, flow, priors, batch_size=50):
    """Mean BPD over ``images`` (grouped by geometry), no gradients kept."""
    total, count = 0.0, 0
    for shape, group in _group(images).items():
        for i in range(0, len(group), batch_size):
            chunk = np.stack(group[i:i + batch_size])
            total += float(loss(chunk, flow, priors).data) * len(chunk)
            count += len(chunk)
    if count == 0:
        raise ContractError("nothing to evaluate")
    return total / count


def _group(images):
    groups = {}
    for img in images:
        groups.setdefault(np.shape(img), []).append(np.asarray(img))
    return groups


def mixed_batches(images, batch_size, rng):
    """Batches of one geometry each. The next batch comes from a geometry
    drawn with probability proportional to its remaining sample count."""
    groups = _group(images)
    keys = sorted(groups)
    order = {k: list(rng.permutation(len(groups[k]))) for k in keys}
    while True:
        remaining = np.array([len(order[k]) for k in keys], dtype=np.float64)
        if remaining.sum() == 0:
            return
        k = keys[int(rng.choice(len(keys), p=remaining / remaining.sum()))]
        take, order[k] = order[k][:batch_size], order[k][batch_size:]
        yield np.stack([groups[k][i] for i in take])


# loop --------------------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    train_bpd: float
    val_bpd: float
    lr: float


@dataclass
class TrainResult:
    flow: object
    priors: object
    history: list
    optimizer: AdamaxState


def probe_roundtrip(flow, image):
    """True when the integer flow inverts ``image`` exactly."""
    fl = flow.with_mode(True)
    try:
        return bool(np.array_equal(fl.inverse(fl.forward(np.asarray(image))), image))
    except LiftingOverflow:
        return False


def split_corpus(images, val_fraction, seed):
    rng = np.random.default_rng([seed, 7])
    idx = rng.permutation(len(images))
    n_val = int(round(len(images) * val_fraction))
    return [images[i] for i in idx[n_val:]], [images[i] for i in idx[:n_val]]


def train(config, train_images, val_images=None, checkpoint=None, metrics=None,
          resume=None, log=None):
    """Train from scratch or from a ``resume`` checkpoint path.

    ``checkpoint`` is rewritten after every epoch (model file with optimiser
    state). ``metrics`` receives one CSV row per epoch. Each epoch shuffles
    with a generator seeded by (seed, epoch), so resuming reproduces the
    metrics of an uninterrupted run.
    """
    if not train_images:
        raise ContractError("training corpus is empty")
    for img in train_images:
        n_iterations(*np.shape(img)[-2:])
    val_images = list(val_images or [])
    probe = np.asarray(val_images[0] if val_images else train_images[0])
    if resume is not None:
        flow, priors, _, state = modelfile.load(resume)
        if state is None:
            raise ContractError("checkpoint has no optimiser state")
    else:
        flow, priors = build_model(config)
        state = AdamaxState(lr_base=config.lr_base, decay=config.decay)
    params = flow.params() + priors.params()
    history = []
    if metrics is not None and resume is None:
        with open(metrics, "w", newline="") as f:
            csv.writer(f).writerow(["epoch", "train_bpd", "val_bpd", "lr"])
    for epoch in range(state.epoch, config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        lr = state.lr(epoch)
        total, count = 0.0, 0
        for batch in mixed_batches(train_images, config.batch_size, rng):
            for p in params:
                p.grad = None
            value = loss(batch, flow, priors)
            nx.backward(value)
            nx.adamax_step(state, params, [p.grad for p in params], epoch)
            total += float(value.data) * len(batch)
            count += len(batch)
        state.epoch = epoch + 1
        train_bpd = total / count
        val_bpd = evaluate(val_images, flow, priors) if val_images else float("nan")
        if not probe_roundtrip(flow, probe):
            raise RuntimeError(f"epoch {epoch}: integer round trip failed on the probe image")
        row = EpochMetrics(epoch, train_bpd, val_bpd, lr)
        history.append(row)
        if metrics is not None:
            with open(metrics, "a", newline="") as f:
                csv.writer(f).writerow([epoch, repr(train_bpd), repr(val_bpd), repr(lr)])
        if checkpoint is not None:
            tmp = checkpoint + ".tmp"
            modelfile.save(tmp, flow, priors, config.to_meta(), state)
            os.replace(tmp, checkpoint)
        if log is not None:
            log(f"epoch {epoch}: train {train_bpd:.4f} bpd, val {val_bpd:.4f} bpd, lr {lr:.3g}")
    return TrainResult(flow, priors, history, state)


def read_metrics(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [EpochMetrics(int(r["epoch"]), float(r["train_bpd"]), float(r["val_bpd"]), float(r["lr"]))
            for r in rows]
