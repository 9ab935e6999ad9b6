"""Synthetic source/target streams with growing label spaces and drifting target marginals.

Classes are isotropic Gaussian blobs whose means sit on a sphere in input
space.  The source stream is a label-rich base session followed by few-shot
sessions over fresh classes; the target stream at session ``i`` covers every
class seen so far and passes its samples through that session's drift
transform.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError

SOURCE_TAG, TARGET_TAG, NOISE_TAG, MEAN_TAG, DIRECTION_TAG = 0, 1, 2, 3, 4

DRIFT_KINDS = ("rotation+noise", "rotation", "translation", "scaling", "noise", "none")


@dataclass(frozen=True)
class ScenarioSpec:
    base_classes: int = 6
    sessions: int = 4
    way: int = 2
    shot: int = 5
    input_dim: int = 16
    base_samples_per_class: int = 100
    target_samples_per_session: int = 1000
    class_radius: float = 3.0
    class_std: float = 0.5
    drift_kind: str = "rotation+noise"
    drift_severity: float = 1.0
    session0_shift: bool = False
    total_classes: int | None = None  # classes the generator provides; defaults to exactly what is needed
    seed: int = 0

    @property
    def needed_classes(self) -> int:
        return self.base_classes + self.sessions * self.way

    def validate(self) -> "ScenarioSpec":
        if self.sessions < 0:
            raise ConfigError("sessions must be >= 0")
        if self.way < 1 or self.shot < 1:
            raise ConfigError("way and shot must be >= 1")
        if self.base_classes < self.way:
            raise ConfigError("base_classes must be >= way")
        if self.input_dim < 1 or self.base_samples_per_class < 1 or self.target_samples_per_session < 1:
            raise ConfigError("dimensions and sample counts must be positive")
        if self.class_std < 0 or self.class_radius <= 0:
            raise ConfigError("class_std must be >= 0 and class_radius > 0")
        if self.drift_kind not in DRIFT_KINDS:
            raise ConfigError(f"drift kind must be one of {DRIFT_KINDS}, got {self.drift_kind!r}")
        if self.drift_severity < 0:
            raise ConfigError("drift severity must be >= 0")
        if self.drift_kind in ("rotation", "rotation+noise") and self.input_dim < 2 and self.drift_severity > 0:
            raise ConfigError("rotation drift needs input_dim >= 2")
        if self.total_classes is not None and self.total_classes < self.needed_classes:
            raise ConfigError(
                f"scenario needs {self.needed_classes} classes but the generator provides {self.total_classes}")
        return self


# ---------------------------------------------------------------------------
# class generator


@dataclass(frozen=True)
class ClassGenerator:
    means: np.ndarray
    stds: np.ndarray
    seed: int

    @classmethod
    def create(cls, n_classes: int, dim: int, radius: float, std: float, seed: int) -> "ClassGenerator":
        rng = np.random.default_rng([seed, MEAN_TAG])
        u = rng.standard_normal((n_classes, dim))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        return cls(radius * u, np.full(n_classes, float(std)), seed)

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    def sample(self, class_id: int, count: int, draw_seed: int, tag: int = SOURCE_TAG) -> np.ndarray:
        """Deterministic in ``(seed, tag, class_id, draw_seed)``."""
        rng = np.random.default_rng([self.seed, tag, int(class_id), int(draw_seed)])
        z = rng.standard_normal((count, self.means.shape[1]))
        return self.means[class_id] + self.stds[class_id] * z


# ---------------------------------------------------------------------------
# drift transforms


@dataclass(frozen=True)
class DriftTransform:
    """Shape-preserving input transform.

    ``severity`` scales every parameter toward the identity: angles, offsets
    and noise linearly, scale factors geometrically (``factor ** severity``).
    """

    kind: str = "identity"
    angle: float = 0.0
    offset: tuple[float, ...] = ()
    factor: float = 1.0
    noise_std: float = 0.0
    severity: float = 1.0
    seed: int = 0
    parts: tuple["DriftTransform", ...] = ()

    KINDS = ("identity", "rotation", "translation", "scaling", "additive-noise", "composition")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown drift transform kind {self.kind!r}")
        if self.noise_std < 0 or self.factor <= 0:
            raise ConfigError("noise_std must be >= 0 and factor > 0")

    @property
    def ident(self) -> str:
        if self.kind == "identity":
            return "identity"
        if self.kind == "composition":
            return "+".join(p.ident for p in self.parts) + (f"@{self.severity:g}" if self.severity != 1 else "")
        value = {"rotation": self.angle, "translation": float(np.linalg.norm(self.offset)),
                 "scaling": self.factor, "additive-noise": self.noise_std}[self.kind]
        return f"{self.kind}({value * (1 if self.kind == 'scaling' else self.severity):.6g})"

    def apply(self, inputs, seed: int | None = None, _outer: float = 1.0) -> np.ndarray:
        x = np.asarray(inputs, dtype=np.float64)
        sev = self.severity * _outer
        if self.kind == "identity" or sev == 0:
            return x.copy()
        if self.kind == "composition":
            for j, part in enumerate(self.parts):
                x = part.apply(x, None if seed is None else seed * 1009 + j, sev)
            return x
        if self.kind == "rotation":
            return rotate_pairs(x, sev * self.angle)
        if self.kind == "translation":
            off = np.asarray(self.offset, dtype=np.float64)
            if off.shape != (x.shape[-1],):
                raise ConfigError(f"offset has length {off.size}, inputs have {x.shape[-1]} columns")
            return x + sev * off
        if self.kind == "scaling":
            return x * self.factor ** sev
        rng = np.random.default_rng([NOISE_TAG, self.seed if seed is None else int(seed)])
        return x + sev * self.noise_std * rng.standard_normal(x.shape)


def rotate_pairs(x: np.ndarray, angle: float) -> np.ndarray:
    """Rotate every coordinate pair (0,1), (2,3), ... by ``angle``; an odd last coordinate is untouched."""
    if x.shape[-1] < 2:
        raise ConfigError("rotation needs at least 2 input dimensions")
    c, s = math.cos(angle), math.sin(angle)
    out = x.copy()
    m = x.shape[-1] // 2 * 2
    a, b = x[..., 0:m:2], x[..., 1:m:2]
    out[..., 0:m:2] = c * a - s * b
    out[..., 1:m:2] = s * a + c * b
    return out


def apply_transform(t: DriftTransform, inputs, seed: int | None = None) -> np.ndarray:
    return t.apply(inputs, seed)


def session_transform(spec: ScenarioSpec, session: int) -> DriftTransform:
    """Default drift schedule: session ``i`` rotates by ``i*pi/12`` and adds noise of std ``0.1*i``."""
    step = session + 1 if spec.session0_shift else session
    if step == 0 or spec.drift_kind == "none" or spec.drift_severity == 0:
        return DriftTransform()
    sev = spec.drift_severity
    rot = DriftTransform("rotation", angle=step * math.pi / 12)
    noise = DriftTransform("additive-noise", noise_std=0.1 * step)
    if spec.drift_kind == "rotation+noise":
        return DriftTransform("composition", parts=(rot, noise), severity=sev)
    if spec.drift_kind == "rotation":
        return replace(rot, severity=sev)
    if spec.drift_kind == "noise":
        return replace(noise, severity=sev)
    if spec.drift_kind == "scaling":
        return DriftTransform("scaling", factor=1.0 + 0.25 * step, severity=sev)
    rng = np.random.default_rng([spec.seed, DIRECTION_TAG])
    u = rng.standard_normal(spec.input_dim)
    u *= 0.5 * step / np.linalg.norm(u)
    return DriftTransform("translation", offset=tuple(u.tolist()), severity=sev)


# ---------------------------------------------------------------------------
# scenario


@dataclass(frozen=True)
class SessionSpec:
    index: int
    labels: tuple[int, ...]
    shot: int  # samples per class drawn for this session

    @property
    def is_base(self) -> bool:
        return self.index == 0

    @property
    def way(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class Batch:
    """Feature-space inputs plus metadata.

    ``labels`` is set only for source batches.  ``truth`` holds target ground
    truth for the evaluator; nothing on the adaptation path reads it.
    """

    inputs: np.ndarray
    labels: np.ndarray | None = None
    session: int = 0
    transform_id: str = "identity"
    truth: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def split(self, sizes) -> list["Batch"]:
        """Cut into consecutive chunks of the given sizes (last chunk may be shorter)."""
        out, start = [], 0
        for size in sizes:
            stop = min(start + size, len(self))
            if stop <= start:
                break
            out.append(Batch(self.inputs[start:stop],
                             None if self.labels is None else self.labels[start:stop],
                             self.session, self.transform_id,
                             None if self.truth is None else self.truth[start:stop]))
            start = stop
        return out


class Scenario:
    """Immutable once built; all sampling takes an explicit seed."""

    def __init__(self, spec: ScenarioSpec):
        self.spec = spec.validate()
        n_classes = spec.total_classes or spec.needed_classes
        self.generator = ClassGenerator.create(n_classes, spec.input_dim, spec.class_radius,
                                               spec.class_std, spec.seed)
        sessions = [SessionSpec(0, tuple(range(spec.base_classes)), spec.base_samples_per_class)]
        for i in range(1, spec.sessions + 1):
            start = spec.base_classes + (i - 1) * spec.way
            sessions.append(SessionSpec(i, tuple(range(start, start + spec.way)), spec.shot))
        self.source_sessions = tuple(sessions)
        self.transforms = tuple(session_transform(spec, i) for i in range(spec.sessions + 1))

    @property
    def n_sessions(self) -> int:
        return len(self.source_sessions)

    @property
    def total_classes(self) -> int:
        return self.spec.needed_classes

    def target_labels(self, session_idx: int) -> tuple[int, ...]:
        self._check_session(session_idx)
        return tuple(c for s in self.source_sessions[:session_idx + 1] for c in s.labels)

    def _check_session(self, session_idx: int) -> None:
        if not 0 <= session_idx < self.n_sessions:
            raise ConfigError(f"session {session_idx} outside 0..{self.n_sessions - 1}")

    def sample_source(self, session_idx: int, rng_seed: int = 0) -> Batch:
        self._check_session(session_idx)
        sess = self.source_sessions[session_idx]
        xs = [self.generator.sample(c, sess.shot, rng_seed, SOURCE_TAG) for c in sess.labels]
        labels = np.repeat(np.asarray(sess.labels, dtype=np.int64), sess.shot)
        return Batch(np.concatenate(xs), labels, session_idx, "identity")

    def sample_target(self, session_idx: int, count: int | None = None, rng_seed: int = 0) -> Batch:
        """Balanced draw over all classes seen through ``session_idx``, then that session's drift."""
        self._check_session(session_idx)
        count = self.spec.target_samples_per_session if count is None else count
        seen = np.asarray(self.target_labels(session_idx), dtype=np.int64)
        rng = np.random.default_rng([self.spec.seed, TARGET_TAG, session_idx, int(rng_seed)])
        labels = seen[rng.permutation(np.arange(count) % seen.size)]
        x = np.empty((count, self.spec.input_dim))
        for c in seen:
            rows = np.flatnonzero(labels == c)
            if rows.size:
                x[rows] = self.generator.sample(c, rows.size, rng_seed * 131 + session_idx, TARGET_TAG)
        t = self.transforms[session_idx]
        x = t.apply(x, seed=int(rng_seed) * 7919 + session_idx)
        return Batch(x, None, session_idx, t.ident, truth=labels)


def build_scenario(spec: ScenarioSpec) -> Scenario:
    return Scenario(spec)


# ---------------------------------------------------------------------------
# config files and dumps

_CONFIG_KEYS = {
    "base_classes": "base_classes", "sessions": "sessions", "way": "way", "shot": "shot",
    "input_dim": "input_dim", "drift.kind": "drift_kind", "drift.severity": "drift_severity",
    "seed": "seed", "base_samples": "base_samples_per_class",
    "target_samples": "target_samples_per_session", "class_radius": "class_radius",
    "class_std": "class_std", "session0_shift": "session0_shift", "total_classes": "total_classes",
}


def _coerce(name: str, raw: str):
    ftype = {f.name: f.type for f in fields(ScenarioSpec)}[name]
    try:
        if "bool" in str(ftype):
            if raw.lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("1", "true", "yes")
        if "int" in str(ftype):
            return None if raw.lower() == "none" else int(raw)
        if "float" in str(ftype):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def spec_from_mapping(values: dict[str, str], base: ScenarioSpec | None = None) -> ScenarioSpec:
    kwargs = {}
    for key, raw in values.items():
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"unknown scenario key {key!r}")
        name = _CONFIG_KEYS[key]
        kwargs[name] = _coerce(name, str(raw))
    return replace(base or ScenarioSpec(), **kwargs).validate()


def load_spec(path) -> ScenarioSpec:
    return spec_from_mapping(parse_config_text(Path(path).read_text()))


def spec_to_text(spec: ScenarioSpec) -> str:
    inv = {v: k for k, v in _CONFIG_KEYS.items()}
    return "".join(f"{inv[f.name]} = {getattr(spec, f.name)}\n" for f in fields(ScenarioSpec))


def dump_scenario(scenario: Scenario, path, rng_seed: int = 0) -> Path:
    """Write every source session and target session as delimited text.

    The header comment lines carry the full spec, so the file describes itself.
    """
    path = Path(path)
    dim = scenario.spec.input_dim
    with path.open("w", newline="") as fh:
        for line in spec_to_text(scenario.spec).splitlines():
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["stream", "session", "transform", "label"] + [f"x{j}" for j in range(dim)])
        for i in range(scenario.n_sessions):
            b = scenario.sample_source(i, rng_seed)
            for x, y in zip(b.inputs, b.labels):
                w.writerow(["source", i, b.transform_id, int(y)] + [repr(float(v)) for v in x])
        for i in range(scenario.n_sessions):
            b = scenario.sample_target(i, rng_seed=rng_seed)
            for x, y in zip(b.inputs, b.truth):
                w.writerow(["target", i, b.transform_id, int(y)] + [repr(float(v)) for v in x])
    return path
