"""Supervised base-session training of the extractor with a throwaway linear head."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, ConfigError, RunFailure
from .numerics import ModelParams, backward, forward, log_softmax
from .prototypes import DEFAULT_ALPHA, DEFAULT_TAU, PrototypeBank, base_bank


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    min_accuracy: float = 0.95

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0 or self.weight_decay < 0:
            raise ConfigError("momentum must lie in [0, 1) and weight_decay >= 0")
        return self


@dataclass
class LinearHead:
    weight: np.ndarray  # (classes, d)
    bias: np.ndarray
    class_ids: np.ndarray

    def logits(self, feats):
        return feats @ self.weight.T + self.bias

    def predict(self, feats):
        return self.class_ids[np.argmax(self.logits(feats), axis=1)]

    def extend(self, new_ids, rng) -> "LinearHead":
        d = self.weight.shape[1]
        w = rng.standard_normal((len(new_ids), d)) * 0.01
        return LinearHead(np.vstack([self.weight, w]), np.concatenate([self.bias, np.zeros(len(new_ids))]),
                          np.concatenate([self.class_ids, np.asarray(new_ids, dtype=np.int64)]))


@dataclass
class TrainResult:
    params: ModelParams
    head: LinearHead
    bank: PrototypeBank
    epoch_losses: list[float] = field(default_factory=list)
    train_accuracy: float = 0.0


def cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of integer ``labels`` (column indices) and its gradient wrt logits."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise ArgumentError("logits must be (n, K) with one label per row")
    if y.size and (y.min() < 0 or y.max() >= z.shape[1]):
        raise ArgumentError(f"label out of range for {z.shape[1]} classes")
    n = z.shape[0]
    logp = log_softmax(z)
    rows = np.arange(n)
    loss = -logp[rows, y].mean()
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    return float(loss), grad / n


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise ArgumentError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def _sgd(params: ModelParams, head: LinearHead, inputs, label_idx, cfg: TrainConfig, rng,
         mask: np.ndarray | None = None) -> tuple[ModelParams, LinearHead, list[float]]:
    """Mini-batch SGD with momentum and cosine decay over theta and the head jointly."""
    n = inputs.shape[0]
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    theta = params.theta.copy()
    w, b = head.weight.copy(), head.bias.copy()
    buf_t, buf_w, buf_b = np.zeros_like(theta), np.zeros_like(w), np.zeros_like(b)
    step = 0
    epoch_losses = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        total_loss = 0.0
        for k in range(steps_per_epoch):
            idx = perm[k * cfg.batch_size:(k + 1) * cfg.batch_size]
            cur = params.with_theta(theta)
            feats, tape = forward(cur, inputs[idx])
            loss, dz = cross_entropy(feats @ w.T + b, label_idx[idx])
            g_theta = backward(tape, dz @ w) + cfg.weight_decay * theta
            if mask is not None:
                g_theta = np.where(mask, g_theta, 0.0)
            g_w = dz.T @ feats + cfg.weight_decay * w
            g_b = dz.sum(axis=0)
            lr = cosine_lr(step, total, cfg.lr)
            buf_t = cfg.momentum * buf_t + g_theta
            buf_w = cfg.momentum * buf_w + g_w
            buf_b = cfg.momentum * buf_b + g_b
            theta = theta - lr * buf_t
            w = w - lr * buf_w
            b = b - lr * buf_b
            total_loss += loss * idx.size
            step += 1
        epoch_losses.append(total_loss / n)
    return params.with_theta(theta), LinearHead(w, b, head.class_ids), epoch_losses


def train_base(base_batch, params: ModelParams, cfg: TrainConfig = TrainConfig(),
               tau: float = DEFAULT_TAU, alpha: float = DEFAULT_ALPHA,
               enforce_floor: bool = True) -> TrainResult:
    """Train extractor + linear head on the labelled base session, then form base prototypes.

    The head is returned only for the fine-tune-only ablation; the prototype
    bank is the classifier used afterwards.
    """
    cfg.validate()
    if base_batch.labels is None:
        raise ArgumentError("base session must be labelled")
    inputs = np.asarray(base_batch.inputs, dtype=np.float64)
    class_ids, label_idx = np.unique(base_batch.labels, return_inverse=True)
    rng = np.random.default_rng(cfg.seed)
    d = params.output_dim
    head = LinearHead(rng.standard_normal((class_ids.size, d)) / np.sqrt(d), np.zeros(class_ids.size),
                      class_ids.astype(np.int64))
    params, head, losses = _sgd(params, head, inputs, label_idx, cfg, rng)
    feats = forward(params, inputs)[0]
    acc = float(np.mean(head.predict(feats) == base_batch.labels))
    if enforce_floor and acc < cfg.min_accuracy:
        raise RunFailure(f"base training reached {acc:.3f} accuracy, floor is {cfg.min_accuracy}")
    bank = base_bank(feats, base_batch.labels, tau, alpha)
    return TrainResult(params, head, bank, losses, acc)


def finetune(params: ModelParams, head: LinearHead, batch, cfg: TrainConfig) -> tuple[ModelParams, LinearHead]:
    """Plain supervised fine-tuning on a few-shot session, extending the head with its new classes."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    new_ids = [c for c in np.unique(batch.labels) if c not in set(head.class_ids.tolist())]
    head = head.extend(new_ids, rng)
    lookup = {int(c): i for i, c in enumerate(head.class_ids)}
    label_idx = np.array([lookup[int(c)] for c in batch.labels])
    params, head, _ = _sgd(params, head, np.asarray(batch.inputs, dtype=np.float64), label_idx, cfg, rng)
    return params, head
