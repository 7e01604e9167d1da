"""Initialization, the optimization schedule, the training loop, evaluation,
finite-difference gradient checking and gradient-magnitude histograms.

Training protocol: mini-batches of 3 drawn by a seeded per-epoch shuffle,
cross-entropy loss averaged over the batch, Adam updates under a step
schedule that starts at 0.02 and decays to 0.9 of its value every 500
updates. Training is a deterministic function of (config, seed, data).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import NumericError, softmax_cross_entropy
from .network import NetworkSpec, ParamStore, backward, forward

INIT_KINDS = ("gaussian", "uniform", "xavier", "msra")

GAUSSIAN_STD = 0.01
UNIFORM_BOUND = 0.01


@dataclass(frozen=True)
class InitMethod:
    kind: str = "gaussian"
    bias_constant: float = 0.01

    def __post_init__(self):
        if self.kind not in INIT_KINDS:
            raise ValueError(f"unknown init method {self.kind!r}")


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def msra_std(fan_in: int) -> float:
    return math.sqrt(2.0 / fan_in)


def _draw_weight(method: InitMethod, shape, rng) -> np.ndarray:
    c_out, c_in, kh, kw = shape
    fan_in, fan_out = c_in * kh * kw, c_out * kh * kw
    if method.kind == "gaussian":
        w = rng.normal(0.0, GAUSSIAN_STD, shape)
    elif method.kind == "uniform":
        w = rng.uniform(-UNIFORM_BOUND, UNIFORM_BOUND, shape)
    elif method.kind == "xavier":
        b = xavier_bound(fan_in, fan_out)
        w = rng.uniform(-b, b, shape)
    else:
        w = rng.normal(0.0, msra_std(fan_in), shape)
    return w.astype(np.float32)


def init_params(spec: NetworkSpec, method: InitMethod, rng) -> ParamStore:
    """Conv weights per method, all biases at the bias constant, batch norm
    at identity (gamma 1, beta 0, running mean 0, running var 1)."""
    store = ParamStore()
    for layer in spec.layers:
        if layer.kind == "conv":
            shape = (layer.out_channels, layer.in_channels, layer.kernel_size, layer.kernel_size)
            store.add(f"{layer.name}.weight", _draw_weight(method, shape, rng), True)
            store.add(f"{layer.name}.bias",
                      np.full(layer.out_channels, method.bias_constant, np.float32), True)
        elif layer.kind == "batchnorm":
            c = layer.in_channels
            store.add(f"{layer.name}.gamma", np.ones(c, np.float32), True)
            store.add(f"{layer.name}.beta", np.zeros(c, np.float32), True)
            store.add(f"{layer.name}.running_mean", np.zeros(c, np.float32), False)
            store.add(f"{layer.name}.running_var", np.ones(c, np.float32), False)
    return store


@dataclass(frozen=True)
class LrSchedule:
    initial: float = 0.02
    decay: float = 0.9
    interval: int = 500


def lr_at(schedule: LrSchedule, step: int) -> float:
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    return schedule.initial * schedule.decay ** (step // schedule.interval)


class AdamState:
    """First/second moment estimates with bias correction, one slot per
    trainable parameter."""

    def __init__(self, params: ParamStore, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.beta1, self.beta2, self.epsilon = beta1, beta2, epsilon
        self.t = 0
        self.m = {n: np.zeros_like(p.value) for n, p in params.items() if p.trainable}
        self.v = {n: np.zeros_like(p.value) for n, p in params.items() if p.trainable}


def adam_step(params: ParamStore, state: AdamState, lr: float) -> None:
    """One Adam update over the trainable parameters; zeroes the gradient
    slots afterwards. Frozen parameters are untouched."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, m in state.m.items():
        p = params[name]
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v = state.v[name]
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / np.float32(bc1)
        v_hat = v / np.float32(bc2)
        p.value -= np.float32(lr) * m_hat / (np.sqrt(v_hat) + np.float32(state.epsilon))
        g[...] = 0


@dataclass
class TrainConfig:
    batch_size: int = 3
    max_updates: int = 6000
    seed: int = 0
    transfer: bool = True
    init: InitMethod = field(default_factory=InitMethod)
    schedule: LrSchedule = field(default_factory=LrSchedule)
    record_grad_hist: bool = False
    hist_every: int = 50
    hist_layers: tuple = ()


@dataclass
class GradHistogram:
    update: int
    layer: str
    edges: np.ndarray  # 51 edges for 50 uniform bins over [0, p99.5 of |g|]
    counts: np.ndarray

    @property
    def median(self) -> float:
        half = self.counts.sum() / 2.0
        cum = np.cumsum(self.counts)
        i = int(np.searchsorted(cum, half))
        return float(0.5 * (self.edges[i] + self.edges[i + 1]))


def _capture_histogram(params: ParamStore, layer: str, update: int) -> GradHistogram:
    grads = [params[f"{layer}.{part}"].grad.ravel() for part in ("weight", "bias")]
    mags = np.abs(np.concatenate(grads)).astype(np.float64)
    hi = float(np.percentile(mags, 99.5))
    if hi <= 0.0:
        hi = max(float(mags.max()), 1e-12)
    edges = np.linspace(0.0, hi, 51)
    # Values above the top edge are clipped into the last bin so the counts
    # always total the layer's parameter count.
    counts, _ = np.histogram(np.minimum(mags, hi), bins=edges)
    return GradHistogram(update, layer, edges, counts.astype(np.uint64))


@dataclass
class TrainHistory:
    updates: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    grad_hists: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["update", "loss", "lr"])
            for u, loss, lr in zip(self.updates, self.losses, self.lrs):
                w.writerow([u, f"{loss:.6f}", f"{lr:.8f}"])

    def write_hist_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["update", "layer", "bin_lo", "bin_hi", "count"])
            for h in self.grad_hists:
                for lo, hi, c in zip(h.edges[:-1], h.edges[1:], h.counts):
                    w.writerow([h.update, h.layer, f"{lo:.8e}", f"{hi:.8e}", int(c)])


def train(spec: NetworkSpec, params: ParamStore, inputs, labels, cfg: TrainConfig, rng):
    """Runs the optimization loop over precomputed features (transfer mode) or
    preprocessed images (training the whole network). Returns (params, history).
    """
    labels = np.asarray(labels)
    m = len(labels)
    if m == 0:
        raise ValueError("empty dataset")
    if m < cfg.batch_size:
        raise ValueError(f"dataset of {m} images is smaller than one batch of {cfg.batch_size}")
    state = AdamState(params)
    history = TrainHistory()
    update = 0
    while update < cfg.max_updates:
        order = rng.permutation(m)
        for b in range(m // cfg.batch_size):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            x = np.ascontiguousarray(inputs[idx])
            out, tape = forward(spec, params, x, "train", rng)
            loss, _, grad_logits = softmax_cross_entropy(out, labels[idx])
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at update {update + 1}")
            backward(spec, params, tape, grad_logits)
            update += 1
            if cfg.record_grad_hist and update % cfg.hist_every == 0:
                for layer in cfg.hist_layers:
                    history.grad_hists.append(_capture_histogram(params, layer, update))
            lr = lr_at(cfg.schedule, update - 1)
            adam_step(params, state, lr)
            history.updates.append(update)
            history.losses.append(loss)
            history.lrs.append(lr)
            if update >= cfg.max_updates:
                break
    return params, history


def evaluate(spec: NetworkSpec, params: ParamStore, inputs, labels, batch_size: int = 32):
    """Eval-mode accuracy and the 6x6 confusion matrix (true class by row).
    Argmax ties resolve to the lowest class id."""
    labels = np.asarray(labels)
    k = spec.output_channels
    confusion = np.zeros((k, k), dtype=np.int64)
    for start in range(0, len(labels), batch_size):
        idx = slice(start, start + batch_size)
        x = np.ascontiguousarray(inputs[idx])
        out, _ = forward(spec, params, x, "eval")
        pred = out.argmax(axis=1)
        np.add.at(confusion, (labels[idx], pred), 1)
    accuracy = float(np.trace(confusion) / max(confusion.sum(), 1))
    return accuracy, confusion


@dataclass
class GradCheckResult:
    per_layer: dict

    @property
    def max_relative_error(self) -> float:
        return max(self.per_layer.values(), default=0.0)


def gradient_check(spec: NetworkSpec, params: ParamStore, x, labels, eps: float = 1e-3,
                   samples_per_layer: int = 200, rng=None) -> GradCheckResult:
    """Compares analytic gradients against central finite differences on a
    random sample of parameters per layer.

    The whole check runs on float64 copies so the finite-difference noise
    floor stays far below the tolerance; the production float32 path shares
    every line of kernel code with the shadow copies. Relative error is
    |a - n| / max(|a|, |n|, 1e-6).

    The loss surface is piecewise linear in the relu/max-pool gates, so a
    probe interval can straddle a kink where the two-sided difference stops
    estimating the point derivative. Samples whose error looks kink-dominated
    are re-probed at a smaller step, which shrinks the straddle probability
    without touching the analytic side.
    """
    rng = rng or np.random.default_rng(0)
    p64 = params.astype(np.float64)
    x64 = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    dropout_seed = 0x5EED

    def loss_value():
        out, _ = forward(spec, p64, x64, "train", np.random.default_rng(dropout_seed))
        return softmax_cross_entropy(out, labels)[0]

    out, tape = forward(spec, p64, x64, "train", np.random.default_rng(dropout_seed))
    _, _, grad_logits = softmax_cross_entropy(out, labels)
    p64.zero_grads()
    backward(spec, p64, tape, grad_logits)

    per_layer: dict[str, float] = {}
    for name, p in p64.items():
        if not p.trainable:
            continue
        layer = name.rsplit(".", 1)[0]
        n_samples = min(samples_per_layer, p.value.size)
        positions = rng.choice(p.value.size, size=n_samples, replace=False)
        flat = p.value.reshape(-1)
        worst = per_layer.get(layer, 0.0)
        for pos in positions:
            analytic = p.grad.reshape(-1)[pos]
            orig = flat[pos]
            err = math.inf
            step = eps
            for _ in range(3):
                flat[pos] = orig + step
                hi = loss_value()
                flat[pos] = orig - step
                lo = loss_value()
                flat[pos] = orig
                numeric = (hi - lo) / (2.0 * step)
                err = min(err, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6))
                if err < 1e-3:
                    break
                step /= 16.0
            worst = max(worst, err)
        per_layer[layer] = worst
    return GradCheckResult(per_layer)
