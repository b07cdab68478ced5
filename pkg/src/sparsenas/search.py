"""Bi-level architecture search.

Inner-loop weight training, architecture-parameter updates via either a
first-order gradient step (softmax-mixed baseline) or a zeroth-order
two-point estimate along a Gaussian direction, temperature annealing, early
stopping on stably one-hot edges, and an analytic hypergradient oracle for
quadratic bi-level test problems.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .data import Dataset, BatchStream
from .errors import ContractError, ParameterError, SearchAbort, ValidationError
from .simplex import AnnealSchedule
from .supernet import (Genotype, Mixing, Supernet, SupernetConfig, DerivedNet,
                       NUM_EDGES, NUM_OPS, discretize, instantiate)
from .tensor import Tensor, softmax_cross_entropy


class Algorithm(Enum):
    DARTS_1ST = "darts-1st"
    ZO_DARTS = "zo-darts"
    ZO_DARTS_PLUS = "zo-darts-plus"


ALGORITHM_MIXING = {
    Algorithm.DARTS_1ST: Mixing.SOFTMAX_TAU,
    Algorithm.ZO_DARTS: Mixing.SPARSEMAX,
    Algorithm.ZO_DARTS_PLUS: Mixing.ANNEALED_SPARSEMAX,
}


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class SGDMomentum:
    def __init__(self, params: List[Tensor], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v


class Adam:
    def __init__(self, params: List[Tensor], lr: float,
                 betas: Tuple[float, float] = (0.5, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self):
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad ** 2
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def cosine_lr(base: float, min_lr: float, epoch: int, total: int) -> float:
    if total <= 1:
        return base
    frac = min(epoch, total - 1) / (total - 1)
    return min_lr + 0.5 * (base - min_lr) * (1 + np.cos(np.pi * frac))


# ---------------------------------------------------------------------------
# Configuration and trace
# ---------------------------------------------------------------------------

@dataclass
class EarlyStopConfig:
    enabled: bool = True
    patience: int = 3
    onehot_eps: float = 1e-6

    def __post_init__(self):
        if self.patience < 1:
            raise ParameterError(f"patience must be >= 1, got {self.patience}")


@dataclass
class SearchConfig:
    algorithm: Algorithm = Algorithm.ZO_DARTS_PLUS
    epochs: int = 50
    inner_steps: int = 10
    mu: float = 1e-3
    lr_w: float = 0.025
    lr_w_min: float = 0.001
    lr_alpha: float = 3e-4
    optimizer_w: str = "sgd_momentum"
    optimizer_alpha: str = "adam"
    schedule: AnnealSchedule = field(default_factory=AnnealSchedule)
    early_stop: EarlyStopConfig = field(default_factory=EarlyStopConfig)
    seed: int = 0
    zo_directions: int = 1
    zo_adapt_steps: int = 1
    batch_size: int = 32
    alpha_init_scale: float = 1e-3
    supernet: SupernetConfig = field(default_factory=SupernetConfig)

    def __post_init__(self):
        if isinstance(self.algorithm, str):
            self.algorithm = Algorithm(self.algorithm)
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.inner_steps < 1:
            raise ParameterError(f"inner_steps must be >= 1, got {self.inner_steps}")
        if self.mu <= 0:
            raise ParameterError(f"mu must be positive, got {self.mu}")
        if self.zo_directions < 1:
            raise ParameterError(f"zo_directions must be >= 1, got {self.zo_directions}")
        if self.zo_adapt_steps < 0:
            raise ParameterError(f"zo_adapt_steps must be >= 0, got {self.zo_adapt_steps}")
        if self.optimizer_w not in ("sgd_momentum", "adam"):
            raise ParameterError(f"unknown optimizer_w {self.optimizer_w!r}")
        if self.optimizer_alpha not in ("adam", "sgd"):
            raise ParameterError(f"unknown optimizer_alpha {self.optimizer_alpha!r}")


TRACE_SCHEMA_VERSION = 1


@dataclass
class EpochRecord:
    epoch: int
    temperature: float
    probs: list  # [6][5] per-edge mixing probabilities
    train_loss: float
    val_loss: float
    val_acc: float
    seconds: float
    alpha: list  # [6][5] snapshot
    inner_steps: int
    alpha_updates: int
    stop_reason: Optional[str] = None

    def to_json(self) -> dict:
        return {
            "schema_version": TRACE_SCHEMA_VERSION,
            "epoch": self.epoch,
            "temperature": self.temperature,
            "probs": self.probs,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "val_acc": self.val_acc,
            "seconds": self.seconds,
            "alpha": self.alpha,
            "inner_steps": self.inner_steps,
            "alpha_updates": self.alpha_updates,
            "stop_reason": self.stop_reason,
        }

    @classmethod
    def from_json(cls, d: dict) -> "EpochRecord":
        if d.get("schema_version") != TRACE_SCHEMA_VERSION:
            raise ValidationError(f"unknown trace schema version {d.get('schema_version')!r}")
        return cls(**{k: v for k, v in d.items() if k != "schema_version"})


@dataclass
class SearchTrace:
    records: List[EpochRecord] = field(default_factory=list)

    @property
    def stop_reason(self) -> Optional[str]:
        return self.records[-1].stop_reason if self.records else None

    def total_seconds(self) -> float:
        return self.records[-1].seconds if self.records else 0.0

    def to_jsonl(self, path) -> None:
        Path(path).write_text(
            "".join(json.dumps(r.to_json()) + "\n" for r in self.records))

    @classmethod
    def from_jsonl(cls, path) -> "SearchTrace":
        records = [EpochRecord.from_json(json.loads(line))
                   for line in Path(path).read_text().splitlines() if line.strip()]
        return cls(records)


# ---------------------------------------------------------------------------
# Inner loop and architecture steps
# ---------------------------------------------------------------------------

def inner_train_steps(net: Supernet, alpha: np.ndarray, batches, steps: int,
                      w_opt, epoch: int = 0):
    """Consume up to `steps` train batches, updating w with alpha frozen.

    Returns (consumed, mean train loss, last batch).
    """
    if steps < 1:
        raise ParameterError(f"steps must be >= 1, got {steps}")
    alpha = np.asarray(alpha)  # plain array: no gradient ever reaches alpha
    losses = []
    last = None
    for _ in range(steps):
        item = next(batches, None)
        if item is None:
            break
        xb, yb = item
        last = item
        with T.tape():
            loss = softmax_cross_entropy(net.forward(xb, alpha, epoch), yb)
            T.backward(loss)
        value = loss.item()
        if not np.isfinite(value):
            raise SearchAbort(f"train loss diverged to {value} (lr_w too high?)")
        w_opt.step()
        net.zero_grad()
        losses.append(value)
    mean = float(np.mean(losses)) if losses else float("nan")
    return len(losses), mean, last


def first_order_alpha_step(net: Supernet, alpha: Tensor, val_batch, a_opt,
                           epoch: int = 0) -> None:
    """One optimizer step on d(val loss)/d(alpha) with w frozen."""
    xb, yb = val_batch
    was_training = net.training
    net.eval()
    with T.tape():
        loss = softmax_cross_entropy(net.forward(xb, alpha, epoch), yb)
        T.backward(loss)
    a_opt.step()
    alpha.zero_grad()
    net.zero_grad()  # w gradients from the val pass are discarded, not applied
    net.train(was_training)


def zo_gradient_estimate(f: Callable[[np.ndarray], float], x: np.ndarray,
                         mu: float, rng: np.random.Generator,
                         directions: int = 1) -> np.ndarray:
    """Two-point estimate mean over Gaussian directions: ((f(x+mu*u)-f(x))/mu)*u."""
    if mu <= 0:
        raise ParameterError(f"mu must be positive, got {mu}")
    f0 = f(x)
    g = np.zeros_like(x, dtype=np.float64)
    for _ in range(directions):
        u = rng.standard_normal(x.shape)
        g += (f(x + mu * u) - f0) / mu * u
    return g / directions


def zo_hypergradient(net: Supernet, alpha: np.ndarray, val_batch, train_batch,
                     mu: float, k: int, rng: np.random.Generator,
                     lr_adapt: float = 0.025, directions: int = 1,
                     epoch: int = 0) -> np.ndarray:
    """Zeroth-order estimate of the hypergradient of the val loss w.r.t. alpha.

    Each function evaluation adapts w by k plain-SGD steps on the train batch
    from a saved copy (capturing the inner-solution coupling), evaluates the
    val loss in eval mode, then restores w. k=0 is the frozen-w approximation.
    Never records gradients of the mixing weights.
    """

    def fhat(a: np.ndarray) -> float:
        snap = net.snapshot()
        try:
            net.train()
            for _ in range(k):
                with T.tape():
                    loss = softmax_cross_entropy(
                        net.forward(train_batch[0], a, epoch), train_batch[1])
                    T.backward(loss)
                for p in net.parameters():
                    if p.grad is not None:
                        p.data -= lr_adapt * p.grad
                net.zero_grad()
            net.eval()
            with T.no_grad():
                value = softmax_cross_entropy(
                    net.forward(val_batch[0], a, epoch), val_batch[1]).item()
        finally:
            net.restore(snap)
            net.train()
        if not np.isfinite(value):
            raise SearchAbort(f"validation objective diverged to {value}")
        return value

    return zo_gradient_estimate(fhat, np.asarray(alpha, dtype=np.float64),
                                mu, rng, directions)


def exact_hypergradient_quadratic(A: np.ndarray, b: np.ndarray,
                                  alpha: np.ndarray) -> np.ndarray:
    """Closed-form hypergradient for the quadratic bi-level test problem.

    Inner loss 0.5*||w - A@alpha||^2 (so w*(alpha) = A@alpha, unit Hessian),
    outer loss 0.5*||w - b||^2 + 0.5*||alpha||^2. The implicit-function
    chain rule collapses to A^T (A@alpha - b) + alpha.
    """
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if A.ndim != 2 or A.shape != (b.shape[0], alpha.shape[0]):
        raise ValidationError(
            f"shape mismatch: A {A.shape}, b {b.shape}, alpha {alpha.shape}")
    return A.T @ (A @ alpha - b) + alpha


# ---------------------------------------------------------------------------
# Early stopping
# ---------------------------------------------------------------------------

def early_stop_check(records: List[EpochRecord], patience: int,
                     onehot_eps: float) -> bool:
    """True iff the last `patience` epochs are one-hot with a stable argmax."""
    if not records:
        raise ValidationError("early_stop_check on an empty trace")
    if len(records) < patience:
        return False
    window = records[-patience:]
    ref = None
    for rec in window:
        probs = np.asarray(rec.probs)
        if probs.max(axis=1).min() < 1.0 - onehot_eps:
            return False
        argmax = probs.argmax(axis=1)
        if ref is None:
            ref = argmax
        elif not np.array_equal(argmax, ref):
            return False
    return True


# ---------------------------------------------------------------------------
# Full search loop
# ---------------------------------------------------------------------------

def _evaluate(forward: Callable[[Tensor], Tensor], stream: BatchStream) -> Tuple[float, float]:
    losses = []
    correct = 0
    total = 0
    with T.no_grad():
        for xb, yb in stream.batches(epoch=0):
            logits = forward(xb)
            losses.append(softmax_cross_entropy(logits, yb).item() * yb.size)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            total += yb.size
    return float(np.sum(losses) / total), correct / total


def _cycling(stream: BatchStream):
    epoch = 0
    while True:
        yielded = False
        for item in stream.batches(epoch=epoch):
            yielded = True
            yield item
        if not yielded:
            raise ValidationError(f"split {stream.split!r} yields no batches")
        epoch += 1


def search(config: SearchConfig, dataset: Dataset) -> Tuple[Genotype, SearchTrace]:
    """Run the configured bi-level search; returns the genotype and trace."""
    for split in ("train", "val"):
        if split not in dataset.splits or dataset.splits[split].size == 0:
            raise ValidationError(f"dataset has no usable {split!r} split")
    rng = np.random.default_rng(config.seed)
    h, w, c = dataset.image_shape
    sup_cfg = replace(config.supernet,
                      num_classes=dataset.num_classes,
                      image_channels=c,
                      mixing=ALGORITHM_MIXING[config.algorithm],
                      schedule=config.schedule)
    net = Supernet(sup_cfg, rng)
    alpha = Tensor(config.alpha_init_scale * rng.standard_normal((NUM_EDGES, NUM_OPS)),
                   requires_grad=True)
    if config.optimizer_w == "sgd_momentum":
        w_opt = SGDMomentum(net.parameters(), config.lr_w)
    else:
        w_opt = Adam(net.parameters(), config.lr_w, betas=(0.9, 0.999))
    if config.optimizer_alpha == "adam":
        a_opt = Adam([alpha], config.lr_alpha)
    else:
        a_opt = SGDMomentum([alpha], config.lr_alpha, momentum=0.0)

    train_stream = BatchStream(dataset, "train", config.batch_size, seed=config.seed)
    val_stream = BatchStream(dataset, "val", config.batch_size, seed=config.seed + 1)
    eval_stream = BatchStream(dataset, "val", config.batch_size,
                              seed=config.seed, shuffle=False)
    val_iter = _cycling(val_stream)
    is_zo = config.algorithm is not Algorithm.DARTS_1ST

    T.reset_mixing_node_count()
    trace = SearchTrace()
    t0 = time.monotonic()
    stop_reason = "max_epochs"
    try:
        for n in range(config.epochs):
            if config.optimizer_w == "sgd_momentum":
                w_opt.lr = cosine_lr(config.lr_w, config.lr_w_min, n, config.epochs)
            batch_iter = train_stream.batches(epoch=n)
            epoch_losses = []
            steps_done = 0
            alpha_updates = 0
            while True:
                consumed, mean_loss, last = inner_train_steps(
                    net, alpha.data, batch_iter, config.inner_steps, w_opt, epoch=n)
                if consumed == 0:
                    break
                steps_done += consumed
                epoch_losses.append((mean_loss, consumed))
                if consumed == config.inner_steps:
                    val_batch = next(val_iter)
                    if is_zo:
                        alpha.grad = zo_hypergradient(
                            net, alpha.data, val_batch, last,
                            config.mu, config.zo_adapt_steps, rng,
                            lr_adapt=w_opt.lr if hasattr(w_opt, "lr") else config.lr_w,
                            directions=config.zo_directions, epoch=n)
                        a_opt.step()
                        alpha.zero_grad()
                    else:
                        first_order_alpha_step(net, alpha, val_batch, a_opt, epoch=n)
                    alpha_updates += 1
            probs = net.mixing_probs(alpha.data, n)
            net.eval()
            val_loss, val_acc = _evaluate(
                lambda xb: net.forward(xb, alpha.data, n), eval_stream)
            net.train()
            now = time.monotonic() - t0
            prev = trace.records[-1].seconds if trace.records else 0.0
            train_loss = float(sum(m * k for m, k in epoch_losses)
                               / sum(k for _, k in epoch_losses))
            trace.records.append(EpochRecord(
                epoch=n,
                temperature=(config.schedule.temperature_at(n)
                             if config.algorithm is Algorithm.ZO_DARTS_PLUS else 1.0),
                probs=probs.tolist(),
                train_loss=train_loss,
                val_loss=val_loss,
                val_acc=val_acc,
                seconds=max(now, prev + 1e-9),
                alpha=alpha.data.tolist(),
                inner_steps=steps_done,
                alpha_updates=alpha_updates,
            ))
            if config.early_stop.enabled and early_stop_check(
                    trace.records, config.early_stop.patience,
                    config.early_stop.onehot_eps):
                stop_reason = "early_stop"
                break
    except SearchAbort as exc:
        exc.trace = trace  # partial trace for persistence by the caller
        raise
    if is_zo and T.mixing_node_count() > 0:
        raise ContractError(
            "zeroth-order search recorded gradient nodes for mixing weights")
    if trace.records:
        trace.records[-1].stop_reason = stop_reason
    return discretize(alpha.data), trace


# ---------------------------------------------------------------------------
# Retraining a discrete architecture
# ---------------------------------------------------------------------------

def retrain(genotype: Genotype, dataset: Dataset, train_epochs: int,
            seed: int = 0, batch_size: int = 64, lr: float = 0.05,
            supernet_config: Optional[SupernetConfig] = None) -> float:
    """Train the discrete network from scratch; return test accuracy at the
    best validation checkpoint."""
    rng = np.random.default_rng(seed)
    h, w, c = dataset.image_shape
    base = supernet_config or SupernetConfig()
    cfg = replace(base, num_classes=dataset.num_classes, image_channels=c)
    net = instantiate(genotype, cfg, rng)
    opt = SGDMomentum(net.parameters(), lr)
    train_stream = BatchStream(dataset, "train", batch_size, seed=seed)
    val_stream = BatchStream(dataset, "val", batch_size, seed=seed, shuffle=False)
    test_stream = BatchStream(dataset, "test", batch_size, seed=seed, shuffle=False)
    best_val = -1.0
    best_test = 0.0
    for epoch in range(train_epochs):
        opt.lr = cosine_lr(lr, lr * 0.01, epoch, train_epochs)
        net.train()
        for xb, yb in train_stream.batches(epoch=epoch):
            with T.tape():
                loss = softmax_cross_entropy(net.forward(xb), yb)
                T.backward(loss)
            if not np.isfinite(loss.item()):
                raise SearchAbort(f"retrain loss diverged at epoch {epoch}")
            opt.step()
            net.zero_grad()
        net.eval()
        _, val_acc = _evaluate(net.forward, val_stream)
        if val_acc > best_val:
            best_val = val_acc
            _, best_test = _evaluate(net.forward, test_stream)
    return best_test
