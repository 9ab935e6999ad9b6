"""Prototype classifier for class-incremental sessions.

Class scores are raw dot products between a feature and each class mean.
Novel-class means estimated from a handful of shots are pulled toward the
base means that resemble them, weighted by a temperature-scaled cosine
softmax.  No gradient step is involved.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DimensionError, StateError
from .numerics import ModelParams, features, log_softmax, softmax

BASE = "base"
NOVEL = "calibrated-novel"
RAW_NOVEL = "novel"  # novel prototype registered without calibration

DEFAULT_TAU = 16.0
DEFAULT_ALPHA = 0.1


@dataclass
class PrototypeBank:
    dim: int
    tau: float = DEFAULT_TAU
    alpha: float = DEFAULT_ALPHA
    class_ids: list[int] = field(default_factory=list)
    origins: list[str] = field(default_factory=list)
    _vectors: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.tau <= 0:
            raise ArgumentError("tau must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ArgumentError("alpha must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.class_ids)

    def add(self, class_id: int, vector, origin: str = BASE) -> None:
        v = np.array(vector, dtype=np.float64).reshape(-1)
        if v.size != self.dim:
            raise DimensionError(f"prototype has {v.size} entries, bank dimension is {self.dim}")
        if int(class_id) in self.class_ids:
            raise ArgumentError(f"class {class_id} already has a prototype")
        if origin not in (BASE, NOVEL, RAW_NOVEL):
            raise ArgumentError(f"unknown prototype origin {origin!r}")
        if origin == BASE and any(o != BASE for o in self.origins):
            raise StateError("base prototypes must be registered before novel ones")
        v.flags.writeable = False
        self.class_ids.append(int(class_id))
        self.origins.append(origin)
        self._vectors.append(v)

    def vector(self, class_id: int) -> np.ndarray:
        return self._vectors[self.class_ids.index(int(class_id))]

    @property
    def matrix(self) -> np.ndarray:
        """Prototypes as rows, ordered by ascending class id."""
        if not self.class_ids:
            return np.zeros((0, self.dim))
        return np.stack([self._vectors[i] for i in self.order])

    @property
    def sorted_ids(self) -> np.ndarray:
        return np.asarray(self.class_ids, dtype=np.int64)[self.order]

    @property
    def order(self) -> np.ndarray:
        return np.argsort(np.asarray(self.class_ids), kind="stable")

    @property
    def base_matrix(self) -> np.ndarray:
        rows = [v for v, o in zip(self._vectors, self.origins) if o == BASE]
        return np.stack(rows) if rows else np.zeros((0, self.dim))

    def copy(self) -> "PrototypeBank":
        new = PrototypeBank(self.dim, self.tau, self.alpha)
        for cid, o, v in zip(self.class_ids, self.origins, self._vectors):
            new.add(cid, v, o)
        return new


def compute_prototype(features_of_class) -> np.ndarray:
    f = np.asarray(features_of_class, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] == 0:
        raise ArgumentError("need at least one feature row to form a prototype")
    return f.mean(axis=0)


def _logits(feats: np.ndarray, bank: PrototypeBank) -> np.ndarray:
    if len(bank) == 0:
        raise StateError("prototype bank is empty")
    if feats.shape[-1] != bank.dim:
        raise DimensionError(f"feature dimension {feats.shape[-1]} != bank dimension {bank.dim}")
    return feats @ bank.matrix.T


def class_probabilities(feature, bank: PrototypeBank) -> np.ndarray:
    """Softmax over dot products with each prototype (columns by ascending class id).

    Accepts a single feature vector or a matrix of row features.
    """
    f = np.asarray(feature, dtype=np.float64)
    return softmax(_logits(f, bank))


def class_log_probabilities(feature, bank: PrototypeBank) -> np.ndarray:
    return log_softmax(_logits(np.asarray(feature, dtype=np.float64), bank))


def similarity(c_b, c_new, tau: float) -> float:
    """Cosine similarity scaled by ``tau``."""
    c_b = np.asarray(c_b, dtype=np.float64)
    c_new = np.asarray(c_new, dtype=np.float64)
    if tau <= 0:
        raise ArgumentError("tau must be > 0")
    nb, nn = np.linalg.norm(c_b), np.linalg.norm(c_new)
    if nb == 0 or nn == 0:
        raise ArgumentError("similarity undefined for a zero-norm prototype")
    return float(np.dot(c_b, c_new) / (nb * nn) * tau)


def base_weights(c_new, bank: PrototypeBank, tau: float | None = None) -> np.ndarray:
    """Softmax of scaled cosine similarities between ``c_new`` and each base prototype."""
    tau = bank.tau if tau is None else tau
    base = bank.base_matrix
    if base.shape[0] == 0:
        raise StateError("bank holds no base prototypes")
    c_new = np.asarray(c_new, dtype=np.float64)
    if c_new.shape != (bank.dim,):
        raise DimensionError(f"prototype must have {bank.dim} entries")
    s = np.array([similarity(c_b, c_new, tau) for c_b in base])
    return softmax(s)


def calibrate(c_new, bank: PrototypeBank, alpha: float | None = None, tau: float | None = None) -> np.ndarray:
    alpha = bank.alpha if alpha is None else alpha
    if not 0.0 <= alpha <= 1.0:
        raise ArgumentError("alpha must lie in [0, 1]")
    c_new = np.asarray(c_new, dtype=np.float64)
    if alpha == 1.0:
        return c_new.copy()
    w = base_weights(c_new, bank, tau)
    return alpha * c_new + (1.0 - alpha) * (w @ bank.base_matrix)


def register_session(bank: PrototypeBank, session_features, labels, calibrated: bool = True) -> list[int]:
    """Add one prototype per class present in ``labels``.

    Novel prototypes are all calibrated against the base prototypes only, so
    the order classes arrive in within a session does not matter.
    """
    feats = np.asarray(session_features, dtype=np.float64)
    labels = np.asarray(labels)
    added = []
    raw = {int(c): compute_prototype(feats[labels == c]) for c in np.unique(labels)}
    for cid, c in raw.items():
        if calibrated:
            bank.add(cid, calibrate(c, bank), NOVEL)
        else:
            bank.add(cid, c, RAW_NOVEL)
        added.append(cid)
    return added


def base_bank(base_features, labels, tau: float = DEFAULT_TAU, alpha: float = DEFAULT_ALPHA) -> PrototypeBank:
    feats = np.asarray(base_features, dtype=np.float64)
    labels = np.asarray(labels)
    bank = PrototypeBank(feats.shape[1], tau, alpha)
    for c in np.unique(labels):
        bank.add(int(c), compute_prototype(feats[labels == c]), BASE)
    return bank


def predict_features(feats, bank: PrototypeBank) -> np.ndarray:
    # argmax returns the first maximum; columns are sorted by class id so ties go to the lowest id
    return bank.sorted_ids[np.argmax(_logits(np.asarray(feats, dtype=np.float64), bank), axis=-1)]


def predict(batch, params: ModelParams, bank: PrototypeBank) -> np.ndarray:
    inputs = getattr(batch, "inputs", batch)
    return predict_features(features(params, inputs), bank)
