"""Source-free adaptation of the extractor on unlabelled target batches.

The full adapter (``rsgs``) works in two stages per batch:

1. drop samples whose prediction entropy is not below a threshold, take the
   entropy gradient ``g_e`` on the rest, step to ``theta + rho * g_e/|g_e|``
   and take the gradient there, ``g_sa``;
2. split ``g_e`` into components parallel and orthogonal to ``g_sa`` and
   descend along ``g_sa - beta * g_perp``.

A moving average of the batch entropy guards against collapse: when it falls
below ``collapse_threshold`` the parameters go back to the snapshot taken at
the start of the session.

The simpler adapters are the same machinery with terms switched off:

============  ======  ======  ===========  =====
kind          filter  guard   perturbed    ascent
============  ======  ======  ===========  =====
entropy-min   no      no      no           no
sam           no      no      yes          no
gsam          no      no      yes          yes
sar           yes     yes     yes          no
rsgs          yes     yes     yes          yes
============  ======  ======  ===========  =====
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ArgumentError, ConfigError
from .numerics import ModelParams, backward, forward, subset_mask
from .prototypes import PrototypeBank, class_log_probabilities

ADAPTERS = ("none", "entropy-min", "sam", "gsam", "sar", "rsgs")
_FILTERED = ("sar", "rsgs")
_PERTURBED = ("sam", "gsam", "sar", "rsgs")
_ASCENT = ("gsam", "rsgs")


@dataclass(frozen=True)
class AdaptConfig:
    kind: str = "rsgs"
    rho: float = 0.05
    beta: float = 1e-4
    entropy_threshold: float | None = None  # None -> 0.4 * ln(number of classes)
    collapse_threshold: float | None = 0.2  # None -> 0.2 * ln(classes) / ln(1000)
    ema_decay: float = 0.9
    lr: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 256
    subset: str = "all"
    epochs: int = 1

    def validate(self) -> "AdaptConfig":
        if self.kind not in ADAPTERS:
            raise ConfigError(f"unknown adapter kind {self.kind!r}; expected one of {ADAPTERS}")
        if self.rho < 0 or self.beta < 0:
            raise ConfigError("rho and beta must be >= 0")
        if self.entropy_threshold is not None and not self.entropy_threshold > 0:
            raise ConfigError("entropy threshold must be > 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema decay must lie in [0, 1)")
        if self.lr < 0 or not 0.0 <= self.momentum < 1.0:
            raise ConfigError("lr must be >= 0 and momentum in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.subset not in ("all", "norm"):
            raise ConfigError(f"unknown parameter subset {self.subset!r}")
        return self

    def threshold(self, n_classes: int) -> float:
        if self.entropy_threshold is not None:
            return self.entropy_threshold
        return 0.4 * math.log(max(n_classes, 2))

    def collapse_level(self, n_classes: int) -> float:
        if self.collapse_threshold is not None:
            return self.collapse_threshold
        return 0.2 * math.log(max(n_classes, 2)) / math.log(1000)


@dataclass
class AdaptState:
    snapshot: np.ndarray
    momentum: np.ndarray
    ema: float | None = None
    step: int = 0
    resets: int = 0

    @classmethod
    def start(cls, params: ModelParams) -> "AdaptState":
        snap = params.snapshot()
        snap.flags.writeable = False
        return cls(snap, np.zeros(params.size))


@dataclass(frozen=True)
class StepDiagnostics:
    step: int
    mean_entropy: float
    reliable_fraction: float
    grad_norm: float
    h_proxy: float
    reset: int

    FIELDS = ("step", "mean_entropy", "reliable_fraction", "grad_norm", "h_proxy", "reset")


# ---------------------------------------------------------------------------
# objective


class EntropyObjective:
    """Mean prediction entropy of ``inputs`` under the prototype classifier, as a function of theta."""

    def __init__(self, params: ModelParams, bank: PrototypeBank, inputs):
        self.params = params
        self.prototypes = bank.matrix
        self.bank = bank
        self.inputs = np.asarray(inputs, dtype=np.float64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] == 0:
            raise ArgumentError("entropy objective needs a non-empty batch")

    def entropies(self, theta) -> np.ndarray:
        feats, _ = forward(self.params.with_theta(theta), self.inputs)
        logp = class_log_probabilities(feats, self.bank)
        return -(np.exp(logp) * logp).sum(axis=1)

    def evaluate(self, theta, mask) -> tuple[float, np.ndarray]:
        """Mean entropy over the rows selected by ``mask`` and its gradient wrt theta.

        Unselected rows are never forwarded, so they have no influence at all.
        """
        rows = self.inputs[np.asarray(mask, dtype=bool)]
        if rows.shape[0] == 0:
            return 0.0, np.zeros(self.params.size)
        feats, tape = forward(self.params.with_theta(theta), rows)
        logp = class_log_probabilities(feats, self.bank)
        p = np.exp(logp)
        h = -(p * logp).sum(axis=1)
        dz = -p * (logp + h[:, None]) / rows.shape[0]
        return float(h.mean()), backward(tape, dz @ self.prototypes)


def _inputs(batch):
    return getattr(batch, "inputs", batch)


def entropy_loss(batch, params: ModelParams, bank: PrototypeBank, mask=None) -> tuple[np.ndarray, float]:
    """Per-sample Shannon entropy (nats) and its mean over the retained samples."""
    inputs = np.asarray(_inputs(batch), dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise ArgumentError("entropy loss needs a non-empty batch")
    h = EntropyObjective(params, bank, inputs).entropies(params.theta)
    keep = np.ones(h.size, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return h, float(h[keep].mean()) if keep.any() else 0.0


def reliability_mask(per_sample_entropy, threshold: float) -> np.ndarray:
    if not threshold > 0:
        raise ArgumentError("entropy threshold must be > 0")
    return np.asarray(per_sample_entropy, dtype=np.float64) < threshold


def perturbation(grad, rho: float) -> np.ndarray:
    """``rho * grad / |grad|``; the zero vector when ``grad`` is zero (a degenerate step)."""
    g = np.asarray(grad, dtype=np.float64)
    n = float(np.sqrt(np.dot(g, g)))
    if n == 0.0 or rho == 0.0:
        return np.zeros_like(g)
    return (rho / n) * g


def decompose(g_e, g_sa) -> tuple[np.ndarray, np.ndarray]:
    """Split ``g_e`` into parts parallel and orthogonal to ``g_sa``."""
    g_e = np.asarray(g_e, dtype=np.float64)
    g_sa = np.asarray(g_sa, dtype=np.float64)
    nsq = float(np.dot(g_sa, g_sa))
    if nsq == 0.0:
        return np.zeros_like(g_e), g_e.copy()
    par = (float(np.dot(g_e, g_sa)) / nsq) * g_sa
    perp = g_e - par
    # one re-orthogonalisation pass removes the rounding left by the first projection
    perp = perp - (float(np.dot(perp, g_sa)) / nsq) * g_sa
    return g_e - perp, perp


@dataclass
class SharpnessTerms:
    g_e: np.ndarray
    g_sa: np.ndarray
    eps: np.ndarray
    loss: float
    loss_perturbed: float

    @property
    def h_proxy(self) -> float:
        return self.loss_perturbed - self.loss

    @property
    def degenerate(self) -> bool:
        return not np.any(self.eps)


def sharpness_terms(objective, theta, rho: float, mask, subset=None) -> SharpnessTerms:
    """Gradient at theta and at the first-order worst-case neighbour ``theta + eps``.

    ``objective`` is anything with ``evaluate(theta, mask) -> (loss, grad)``.
    ``theta`` itself is never modified; the perturbed point is a fresh array.
    """
    theta = np.asarray(theta, dtype=np.float64)
    loss, g_e = objective.evaluate(theta, mask)
    if subset is not None:
        g_e = np.where(subset, g_e, 0.0)
    eps = perturbation(g_e, rho)
    if not np.any(eps):
        return SharpnessTerms(g_e, g_e, eps, loss, loss)
    loss_p, g_sa = objective.evaluate(theta + eps, mask)
    if subset is not None:
        g_sa = np.where(subset, g_sa, 0.0)
    return SharpnessTerms(g_e, g_sa, eps, loss, loss_p)


def sharpness_grad(batch, params: ModelParams, bank: PrototypeBank, cfg: AdaptConfig,
                   mask=None) -> tuple[np.ndarray, np.ndarray]:
    """``(g_sa, g_e)`` for the entropy of ``batch`` under ``mask`` (all samples if None)."""
    obj = EntropyObjective(params, bank, _inputs(batch))
    if mask is None:
        mask = np.ones(obj.inputs.shape[0], dtype=bool)
    t = sharpness_terms(obj, params.theta, cfg.rho, mask, subset_mask(params, cfg.subset))
    return t.g_sa, t.g_e


# ---------------------------------------------------------------------------
# steps


def adapt_step(kind: str, objective, params: ModelParams, cfg: AdaptConfig, state: AdaptState,
               threshold: float, subset=None, collapse: float | None = None) -> tuple[ModelParams, StepDiagnostics]:
    """One update of the given adapter kind; ``state`` is updated in place.

    ``collapse`` overrides the guard level, otherwise it comes from ``cfg`` and the bank size.
    """
    if kind not in ADAPTERS:
        raise ConfigError(f"unknown adapter kind {kind!r}")
    theta = params.theta
    h = objective.entropies(theta)
    mask = reliability_mask(h, threshold) if kind in _FILTERED else np.ones(h.size, dtype=bool)
    state.step += 1
    frac = float(mask.mean())
    if kind == "none" or not mask.any():
        return params, StepDiagnostics(state.step, float(h.mean()), frac, 0.0, 0.0, 0)

    rho = cfg.rho if kind in _PERTURBED else 0.0
    terms = sharpness_terms(objective, theta, rho, mask, subset)
    direction = terms.g_sa
    if kind in _ASCENT and cfg.beta:
        _, g_perp = decompose(terms.g_e, terms.g_sa)
        direction = terms.g_sa - cfg.beta * g_perp
    grad_norm = float(np.sqrt(np.dot(terms.g_sa, terms.g_sa)))

    if np.any(direction):
        state.momentum = cfg.momentum * state.momentum + direction
        params = params.with_theta(theta - cfg.lr * state.momentum)

    reset = 0
    if kind in _FILTERED:
        e = float(h[mask].mean())
        state.ema = e if state.ema is None else cfg.ema_decay * state.ema + (1.0 - cfg.ema_decay) * e
        if collapse is None:
            collapse = cfg.collapse_level(len(getattr(objective, "bank", ())))
        if state.ema < collapse:
            params = params.with_theta(state.snapshot)
            state.momentum = np.zeros_like(state.momentum)
            state.ema = None  # re-seeded by the next batch
            state.resets += 1
            reset = 1
    return params, StepDiagnostics(state.step, float(h.mean()), frac, grad_norm, terms.h_proxy, reset)


def _step(kind, batch, params, bank, cfg, state):
    obj = EntropyObjective(params, bank, _inputs(batch))
    return adapt_step(kind, obj, params, cfg, state, cfg.threshold(len(bank)), subset_mask(params, cfg.subset))[0]


def rsgs_step(batch, params: ModelParams, bank: PrototypeBank, cfg: AdaptConfig, state: AdaptState) -> ModelParams:
    return _step("rsgs", batch, params, bank, cfg, state)


def baseline_step(kind: str, batch, params: ModelParams, bank: PrototypeBank, cfg: AdaptConfig,
                  state: AdaptState) -> ModelParams:
    if kind not in ADAPTERS or kind == "rsgs":
        raise ConfigError(f"unknown baseline adapter {kind!r}")
    return _step(kind, batch, params, bank, cfg, state)


@dataclass
class SessionResult:
    params: ModelParams
    diagnostics: list[StepDiagnostics] = field(default_factory=list)
    resets: int = 0


def adapt_session(target_batches, params: ModelParams, bank: PrototypeBank, cfg: AdaptConfig,
                  n_classes: int | None = None) -> SessionResult:
    """Run the configured adapter over the session's batches (``cfg.epochs`` passes).

    ``n_classes`` sets the default entropy threshold; it falls back to the bank size.
    """
    cfg.validate()
    threshold = cfg.threshold(n_classes or len(bank))
    collapse = cfg.collapse_level(n_classes or len(bank))
    subset = subset_mask(params, cfg.subset)
    state = AdaptState.start(params)
    diags = []
    for _ in range(cfg.epochs):
        for batch in target_batches:
            obj = EntropyObjective(params, bank, _inputs(batch))
            params, d = adapt_step(cfg.kind, obj, params, cfg, state, threshold, subset, collapse)
            diags.append(d)
    return SessionResult(params, diags, state.resets)


def write_diagnostics(path, diagnostics, session: int | None = None, append: bool = True) -> Path:
    path = Path(path)
    new = not (append and path.exists())
    cols = (("session",) if session is not None else ()) + StepDiagnostics.FIELDS
    with path.open("a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(cols)
        for d in diagnostics:
            row = asdict(d)
            vals = [row[k] if isinstance(row[k], int) else repr(row[k]) for k in StepDiagnostics.FIELDS]
            w.writerow(([session] if session is not None else []) + vals)
    return path


def with_kind(cfg: AdaptConfig, kind: str) -> AdaptConfig:
    return replace(cfg, kind=kind).validate()
