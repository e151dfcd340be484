"""Noise-prediction training, baselines, and weight persistence.

A training record is ``(x0, eps, k)``: the chain-normalized clean gradient,
the noise realization satisfying the marginal identity

    x_k = sqrt(abar_k) * x0 + sqrt(1 - abar_k) * eps,

and the schedule step.  The network is trained to recover ``eps`` from
``(x_k, k)`` by mean squared Frobenius loss.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng as rngmod
from .container import load_tensors, save_tensors
from .errors import FormatError, NumericalError, TrainingError, ValidationError
from .linalg import symmetrize
from .unet import (
    PARAM_ORDER,
    UNetSpec,
    backward_batch,
    forward_batch,
    init_params,
    spec_of_params,
)

WEIGHTS_META = "meta/arch"

# The network's raw output is interpreted either as the noise itself or as an
# estimate of the clean signal from which the noise prediction follows via
# the marginal identity.  The clean-estimate form keeps the regression target
# on the same scale at every step, which trains far better when per-step
# noise scales span orders of magnitude; the value of the training loss is
# the same L_simple either way.
MODE_EPS = 0
MODE_X0 = 1
MODE_KEY = "mode"


def param_mode(params):
    return int(params.get(MODE_KEY, np.zeros(1))[0])


def make_eps_model(params, schedule):
    """Noise-prediction closure ``(x, k) -> eps_hat`` for the reverse sampler."""
    from .unet import unet_forward

    if param_mode(params) == MODE_X0:
        def model(x, k):
            abar = schedule.alpha_bar_at(k)
            x0_hat = unet_forward(params, x, k)
            return (x - math.sqrt(abar) * x0_hat) / math.sqrt(1.0 - abar)

        return model
    return lambda x, k: unet_forward(params, x, k)


@dataclass(frozen=True)
class TrainingSet:
    """Aligned record arrays plus the schedule they were generated under."""

    x0: np.ndarray
    eps: np.ndarray
    k: np.ndarray
    schedule: object

    def __post_init__(self):
        if not (self.x0.shape == self.eps.shape and self.x0.ndim == 3):
            raise ValidationError("x0 and eps must be (records, l, l) arrays")
        if self.k.shape != (self.x0.shape[0],):
            raise ValidationError("one step index required per record")
        if np.any(self.k < 1) or np.any(self.k > self.schedule.t):
            raise ValidationError("record steps must lie in 1..T")

    @property
    def count(self):
        return self.x0.shape[0]

    @property
    def l(self):
        return self.x0.shape[1]

    def subset(self, idx):
        return TrainingSet(
            x0=self.x0[idx], eps=self.eps[idx], k=self.k[idx], schedule=self.schedule
        )

    def noisy_inputs(self, idx=None):
        """Reconstruct ``x_k`` for the selected records via the marginal identity."""
        if idx is None:
            idx = np.arange(self.count)
        abar = self.schedule.alpha_bar[self.k[idx] - 1]
        root = np.sqrt(abar)[:, None, None]
        return root * self.x0[idx] + np.sqrt(1.0 - abar)[:, None, None] * self.eps[idx]


def save_training_set(path, dataset):
    tensors = {}
    for i in range(dataset.count):
        tensors[f"x0/{i}"] = dataset.x0[i]
        tensors[f"eps/{i}"] = dataset.eps[i]
        tensors[f"k/{i}"] = np.array([float(dataset.k[i])])
    save_tensors(path, tensors)


def load_training_set(path, schedule):
    tensors = load_tensors(path)
    count = sum(1 for name in tensors if name.startswith("x0/"))
    if count == 0:
        raise FormatError(f"{path} holds no training records")
    x0 = np.stack([tensors[f"x0/{i}"] for i in range(count)])
    eps = np.stack([tensors[f"eps/{i}"] for i in range(count)])
    k = np.array([int(tensors[f"k/{i}"][0]) for i in range(count)])
    return TrainingSet(x0=x0, eps=eps, k=k, schedule=schedule)


def loss_simple(batch, params):
    """Mean squared Frobenius deviation between noise targets and predictions."""
    if batch.count == 0:
        raise ValidationError("empty batch")
    xk = batch.noisy_inputs()
    net = forward_batch(params, xk, batch.k)
    if param_mode(params) == MODE_X0:
        abar = batch.schedule.alpha_bar[batch.k - 1]
        root = np.sqrt(abar)[:, None, None]
        eps_hat = (xk - root * net) / np.sqrt(1.0 - abar)[:, None, None]
    else:
        eps_hat = net
    diff = eps_hat - batch.eps
    return float(np.mean(np.sum(diff * diff, axis=(1, 2))))


def zero_predictor_loss(batch):
    """Loss of the baseline that always predicts zero noise."""
    return float(np.mean(np.sum(batch.eps * batch.eps, axis=(1, 2))))


def _loss_and_grads(params, x0, eps, k, schedule, dtype=np.float32):
    abar = schedule.alpha_bar[k - 1]
    root = np.sqrt(abar)[:, None, None]
    noise_amp = np.sqrt(1.0 - abar)[:, None, None]
    xk = root * x0 + noise_amp * eps
    net, cache = forward_batch(params, xk, k, want_cache=True, dtype=dtype)
    n = x0.shape[0]
    if param_mode(params) == MODE_X0:
        # eps_hat = (xk - sqrt(abar) net) / sqrt(1 - abar); chain rule folds
        # the per-record coefficient into the output gradient.
        coeff = root / noise_amp
        diff = coeff * (x0 - net)  # equals eps_hat - eps
        loss = float(np.mean(np.sum(diff * diff, axis=(1, 2))))
        dnet = (-2.0 / n) * coeff * diff
    else:
        diff = net - eps
        loss = float(np.mean(np.sum(diff * diff, axis=(1, 2))))
        dnet = (2.0 / n) * diff
    grads = backward_batch(params, cache, dnet.astype(dtype))
    return loss, grads


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 1e-3
    batch: int = 32
    steps: int = 2000
    seed: int = 0
    val_fraction: float = 0.1
    clip_norm: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    mode: int = MODE_X0

    def __post_init__(self):
        if self.lr <= 0 or self.batch < 1 or self.steps < 1:
            raise ValidationError("lr, batch and steps must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValidationError("validation fraction must lie in [0, 1)")
        if self.mode not in (MODE_EPS, MODE_X0):
            raise ValidationError(f"unknown prediction mode {self.mode}")


@dataclass
class TrainState:
    """Adam state; carrying it between calls resumes an identical trajectory."""

    params: dict
    adam_m: dict
    adam_v: dict
    step: int


@dataclass
class TrainResult:
    params: dict
    log: list = field(repr=False)
    val_loss: float = math.nan
    zero_loss: float = math.nan
    state: Optional[TrainState] = None


def _fresh_state(spec, seed, mode):
    params = init_params(spec, seed)
    params[MODE_KEY] = np.array([float(mode)])
    zeros = {n: np.zeros_like(params[n]) for n in PARAM_ORDER}
    return TrainState(
        params=params,
        adam_m={n: z.copy() for n, z in zeros.items()},
        adam_v={n: z.copy() for n, z in zeros.items()},
        step=0,
    )


def train(dataset, hyper, spec=UNetSpec(), state=None, total_steps=None):
    """Adam training with cosine decay and global-norm clipping.

    The batch drawn at optimizer step ``s`` depends only on
    ``(hyper.seed, s)``, so resuming from a checkpointed :class:`TrainState`
    reproduces the exact trajectory of an uninterrupted run.
    """
    if dataset.count < 2:
        raise ValidationError("need at least two records to split off validation")
    val_count = max(1, int(round(dataset.count * hyper.val_fraction)))
    if hyper.val_fraction == 0.0:
        val_count = 0
    train_count = dataset.count - val_count
    if train_count < 1:
        raise ValidationError("validation split leaves no training records")
    if state is None:
        state = _fresh_state(spec, hyper.seed, hyper.mode)
    if total_steps is None:
        total_steps = state.step + hyper.steps
    b1, b2 = hyper.adam_beta1, hyper.adam_beta2
    log = []
    last_good = None
    for _ in range(hyper.steps):
        s = state.step
        gen = rngmod.stream(hyper.seed, rngmod.TRAIN_BATCH, s)
        idx = gen.integers(0, train_count, size=hyper.batch)
        try:
            loss, grads = _loss_and_grads(
                state.params,
                dataset.x0[idx],
                dataset.eps[idx],
                dataset.k[idx],
                dataset.schedule,
            )
        except NumericalError as exc:
            raise TrainingError(
                f"training diverged at step {s}: {exc}", checkpoint=last_good
            ) from exc
        if not math.isfinite(loss):
            raise TrainingError(
                f"training diverged at step {s}", checkpoint=last_good
            )
        gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if hyper.clip_norm > 0 and gnorm > hyper.clip_norm:
            scale = hyper.clip_norm / gnorm
            grads = {n: g * scale for n, g in grads.items()}
        lr = hyper.lr * 0.5 * (1.0 + math.cos(math.pi * s / max(1, total_steps)))
        t = s + 1
        for n in PARAM_ORDER:
            g = grads[n]
            state.adam_m[n] = b1 * state.adam_m[n] + (1 - b1) * g
            state.adam_v[n] = b2 * state.adam_v[n] + (1 - b2) * (g * g)
            mhat = state.adam_m[n] / (1 - b1**t)
            vhat = state.adam_v[n] / (1 - b2**t)
            state.params[n] = state.params[n] - lr * mhat / (
                np.sqrt(vhat) + hyper.adam_eps
            )
        state.step = t
        log.append({"step": s, "loss": loss, "lr": lr, "grad_norm": gnorm})
        last_good = {n: state.params[n].copy() for n in PARAM_ORDER}
    result = TrainResult(params=state.params, log=log, state=state)
    if val_count > 0:
        val = dataset.subset(np.arange(train_count, dataset.count))
        result.val_loss = _batched_loss(state.params, val)
        result.zero_loss = zero_predictor_loss(val)
    return result


def _batched_loss(params, dataset, chunk=64):
    total = 0.0
    for lo in range(0, dataset.count, chunk):
        idx = np.arange(lo, min(lo + chunk, dataset.count))
        sub = dataset.subset(idx)
        total += loss_simple(sub, params) * idx.size
    return total / dataset.count


def gaussian_kernel1d(sigma):
    radius = int(math.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=float)
    w = np.exp(-0.5 * (xs / sigma) ** 2)
    return w / w.sum()


def gaussian_filter_precondition(g, kernel_sigma):
    """Separable Gaussian blur of a matrix viewed as an image, then symmetrize.

    Kernel radius is ``ceil(3 sigma)``; padding reflects about the edge
    sample (numpy mode ``symmetric``), which conserves the total entry sum
    for symmetric kernels.
    """
    if kernel_sigma <= 0:
        raise ValidationError(f"kernel sigma must be > 0, got {kernel_sigma}")
    g = np.asarray(g, dtype=float)
    w = gaussian_kernel1d(kernel_sigma)
    r = (w.size - 1) // 2
    if r == 0:
        return symmetrize(g.copy())
    padded = np.pad(g, ((r, r), (0, 0)), mode="symmetric")
    rows = np.empty_like(g)
    for i in range(g.shape[0]):
        rows[i] = w @ padded[i : i + w.size]
    padded = np.pad(rows, ((0, 0), (r, r)), mode="symmetric")
    out = np.empty_like(g)
    for j in range(g.shape[1]):
        out[:, j] = padded[:, j : j + w.size] @ w
    return symmetrize(out)


def gaussian_noise_predictor(xk, k, schedule, kernel_sigma):
    """Filter-based noise estimate used as the classical baseline.

    Treats the blurred input as the (scaled) clean signal and reads the noise
    off the marginal identity:
    ``eps_hat = (x_k - blur(x_k)) / sqrt(1 - abar_k)``.
    """
    abar = schedule.alpha_bar_at(k)
    smooth = gaussian_filter_precondition(xk, kernel_sigma)
    return (xk - smooth) / math.sqrt(1.0 - abar)


def save_params(path, params):
    """Persist weights; widths and prediction mode ride along as a meta tensor."""
    spec = spec_of_params(params)
    meta = [spec.c1, spec.c2, spec.c3, spec.d_emb, param_mode(params)]
    tensors = {WEIGHTS_META: np.array(meta, float)}
    for n in PARAM_ORDER:
        tensors[n] = params[n]
    save_tensors(path, tensors)


def load_params(path):
    tensors = load_tensors(path)
    if WEIGHTS_META not in tensors:
        raise FormatError(f"{path}: missing architecture record")
    if tensors[WEIGHTS_META].shape != (5,):
        raise FormatError(f"{path}: malformed architecture record")
    c1, c2, c3, d_emb, mode = (int(v) for v in tensors[WEIGHTS_META])
    spec = UNetSpec(c1=c1, c2=c2, c3=c3, d_emb=d_emb)
    reference = init_params(spec, seed=0)
    params = {MODE_KEY: np.array([float(mode)])}
    for n in PARAM_ORDER:
        if n not in tensors:
            raise FormatError(f"{path}: missing tensor {n!r}")
        if tensors[n].shape != reference[n].shape:
            raise FormatError(
                f"{path}: tensor {n!r} has shape {tensors[n].shape}, "
                f"expected {reference[n].shape}"
            )
        params[n] = tensors[n]
    return params
