"""End-to-end runs over a scenario: base training, per-session prototype registration,
target adaptation and evaluation, plus the ablation ladder and one-at-a-time grids."""
from __future__ import annotations

import contextlib
import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .adaptation import AdaptConfig, adapt_session, write_diagnostics
from .errors import ConfigError, CSFAError
from .numerics import features, init_mlp
from .prototypes import predict_features, register_session
from .streams import Scenario, ScenarioSpec
from .training import TrainConfig, finetune, train_base

log = logging.getLogger(__name__)

# method -> (classifier, calibrated prototypes, adapter kind)
METHODS = {
    "csfa_v1": ("finetune", False, "none"),
    "csfa_v2": ("prototype", False, "none"),
    "csfa_v3": ("prototype", False, "rsgs"),
    "csfa": ("prototype", True, "rsgs"),
    "+tent": ("prototype", True, "entropy-min"),
    "+sam": ("prototype", True, "sam"),
    "+gsam": ("prototype", True, "gsam"),
    "+sar": ("prototype", True, "sar"),
}
ABLATION = ("csfa_v1", "csfa_v2", "csfa_v3", "csfa")
BASELINES = ("+tent", "+sam", "+gsam", "+sar", "csfa")
GRID_PARAMETERS = ("tau", "alpha", "beta", "batch_size", "shot")
OUTPUT_ENV = "CSFA_OUTPUT_DIR"

# Desk-scale settings picked on validation seeds 100-104 (never the evaluation seeds).
# A learning rate of 1e-4 barely moves a 16-dim MLP in one pass, so the harness uses 0.3;
# the collapse level is scaled with ln(classes) the same way as the entropy threshold.
HARNESS_ADAPT = AdaptConfig(lr=0.3, rho=0.05, beta=0.1, collapse_threshold=None)
# naive fine-tuning reuses the base-training step size
FINETUNE = TrainConfig(epochs=20, batch_size=16, lr=0.05, momentum=0.9, weight_decay=5e-4)


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    method: str = "csfa"
    adapt: AdaptConfig = HARNESS_ADAPT
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = FINETUNE
    tau: float = 16.0
    alpha: float = 0.9
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    eval_samples: int = 1000
    seed: int = 0
    output_dir: str | None = None

    def validate(self) -> "RunConfig":
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {tuple(METHODS)}")
        self.scenario.validate()
        self.adapt.validate()
        self.train.validate()
        if self.eval_samples < 1:
            raise ConfigError("eval_samples must be >= 1")
        if not self.tau > 0 or not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("tau must be > 0 and alpha in [0, 1]")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("output_dir")
        d["hidden"] = list(self.hidden)
        return d

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ResultTable:
    method: str
    seed: int
    session_accuracy: list[float]
    config_hash: str = ""
    resets: list[int] = field(default_factory=list)

    @property
    def average(self) -> float:
        return sum(self.session_accuracy) / len(self.session_accuracy)

    def rows(self):
        for i, acc in enumerate(self.session_accuracy):
            yield [self.method, self.seed, i, repr(acc)]
        yield [self.method, self.seed, "average", repr(self.average)]

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(["method", "seed", "session", "accuracy"])
        w.writerows(self.rows())
        return buf.getvalue()


class PhaseError(CSFAError):
    """Wraps a module error with the session and phase it happened in."""

    def __init__(self, session, phase, cause: Exception):
        self.session, self.phase, self.cause = session, phase, cause
        self.category = getattr(cause, "category", "error")
        super().__init__(f"session {session}, phase {phase}: {type(cause).__name__}: {cause}")


@contextlib.contextmanager
def _phase(session, phase):
    try:
        yield
    except PhaseError:
        raise
    except Exception as exc:  # noqa: BLE001 - everything is re-raised with context
        raise PhaseError(session, phase, exc) from exc


def resolve_output_dir(cfg: RunConfig) -> Path | None:
    out = os.environ.get(OUTPUT_ENV) or cfg.output_dir
    return Path(out) if out else None


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def accuracy(pred, truth) -> float:
    return 100.0 * float(np.mean(np.asarray(pred) == np.asarray(truth)))


def _base_model(cfg: RunConfig, scenario: Scenario):
    with _phase(0, "base-train"):
        base = scenario.sample_source(0, rng_seed=cfg.seed)
        params = init_mlp(cfg.scenario.input_dim, cfg.hidden, cfg.activation, seed=cfg.seed)
        return train_base(base, params, replace(cfg.train, seed=cfg.seed), cfg.tau, cfg.alpha)


def run(cfg: RunConfig, pretrained=None, diagnostics_path=None) -> ResultTable:
    """Execute one method on one seed and return per-session target accuracy (%).

    ``pretrained`` may carry a ``TrainResult`` so several methods share one base model.
    """
    cfg = cfg.validate()
    spec = replace(cfg.scenario, seed=cfg.seed)
    with _phase(0, "scenario"):
        scenario = Scenario(spec)
    classifier, calibrated, kind = METHODS[cfg.method]
    adapt_cfg = replace(cfg.adapt, kind=kind)
    trained = pretrained if pretrained is not None else _base_model(cfg, scenario)
    frozen = trained.params
    params = frozen
    head = trained.head
    bank = trained.bank.copy()
    bank.tau, bank.alpha = cfg.tau, cfg.alpha
    n_total = scenario.total_classes
    accs, resets = [], []
    for i in range(scenario.n_sessions):
        if i > 0:
            src = scenario.sample_source(i, rng_seed=cfg.seed)
            if classifier == "finetune":
                with _phase(i, "finetune"):
                    params, head = finetune(params, head, src, replace(cfg.finetune, seed=cfg.seed * 1000 + i))
            else:
                with _phase(i, "calibrate"):
                    register_session(bank, features(frozen, src.inputs), src.labels, calibrated)
                with _phase(i, "adapt"):
                    target = scenario.sample_target(i, rng_seed=2 * cfg.seed + 1)
                    batches = target.split([adapt_cfg.batch_size] * (len(target) // adapt_cfg.batch_size + 1))
                    res = adapt_session(batches, params, bank, adapt_cfg, n_classes=n_total)
                    params = res.params
                    resets.append(res.resets)
                    if diagnostics_path is not None:
                        write_diagnostics(diagnostics_path, res.diagnostics, session=i)
        with _phase(i, "evaluate"):
            ev = scenario.sample_target(i, cfg.eval_samples, rng_seed=2 * cfg.seed + 2)
            feats = features(params, ev.inputs)
            if classifier == "finetune":
                pred = head.predict(feats)
            else:
                pred = predict_features(feats, bank)
            accs.append(accuracy(pred, ev.truth))
    table = ResultTable(cfg.method, cfg.seed, accs, cfg.config_hash, resets)
    out = resolve_output_dir(cfg)
    if out is not None:
        write_table(out / f"{_slug(cfg.method)}_seed{cfg.seed}.csv", [table])
        _atomic_write(out / f"{_slug(cfg.method)}_seed{cfg.seed}.json",
                      json.dumps({"config": cfg.to_dict(), "config_hash": cfg.config_hash,
                                  "average": table.average, "resets": resets}, indent=2, sort_keys=True,
                                 default=str) + "\n")
    return table


def _slug(method: str) -> str:
    return method.replace("+", "plus_")


def write_table(path, tables) -> Path:
    path = Path(path)
    text = "".join(t.to_csv(header=(k == 0)) for k, t in enumerate(tables))
    _atomic_write(path, text)
    return path


def read_table(path) -> list[ResultTable]:
    tables: dict[tuple[str, int], ResultTable] = {}
    order = []
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            key = (row["method"], int(row["seed"]))
            if key not in tables:
                tables[key] = ResultTable(key[0], key[1], [])
                order.append(key)
            if row["session"] == "average":
                tables[key].emitted_average = float(row["accuracy"])
            else:
                tables[key].session_accuracy.append(float(row["accuracy"]))
    return [tables[k] for k in order]


def run_methods(cfg: RunConfig, methods, seeds) -> dict[str, list[ResultTable]]:
    """Run several methods on the same seeds; each seed trains its base model once."""
    out = {m: [] for m in methods}
    for seed in seeds:
        c = replace(cfg, seed=seed, output_dir=None)
        trained = _base_model(c, Scenario(replace(c.scenario, seed=seed)))
        for m in methods:
            out[m].append(run(replace(c, method=m), pretrained=trained))
    return out


def ablate(cfg: RunConfig, seeds=None) -> list[ResultTable]:
    seeds = [cfg.seed] if seeds is None else list(seeds)
    res = run_methods(cfg, ABLATION, seeds)
    tables = [t for m in ABLATION for t in res[m]]
    out = resolve_output_dir(cfg)
    if out is not None:
        write_table(out / "ablation.csv", tables)
    return tables


def _with_value(cfg: RunConfig, parameter: str, value) -> RunConfig:
    if parameter == "tau":
        return replace(cfg, tau=float(value))
    if parameter == "alpha":
        return replace(cfg, alpha=float(value))
    if parameter == "beta":
        return replace(cfg, adapt=replace(cfg.adapt, beta=float(value)))
    if parameter == "batch_size":
        return replace(cfg, adapt=replace(cfg.adapt, batch_size=int(value)))
    if parameter == "shot":
        return replace(cfg, scenario=replace(cfg.scenario, shot=int(value)))
    raise ConfigError(f"unknown grid parameter {parameter!r}; expected one of {GRID_PARAMETERS}")


def grid(cfg: RunConfig, parameter: str, values, seeds=None) -> list[tuple[object, list[ResultTable]]]:
    """Vary one parameter with everything else fixed; one list of tables (one per seed) per value."""
    if parameter not in GRID_PARAMETERS:
        raise ConfigError(f"unknown grid parameter {parameter!r}; expected one of {GRID_PARAMETERS}")
    seeds = [cfg.seed] if seeds is None else list(seeds)
    results = []
    for v in values:
        c = _with_value(cfg, parameter, v).validate()
        tables = [run(replace(c, seed=s, output_dir=None)) for s in seeds]
        results.append((v, tables))
    out = resolve_output_dir(cfg)
    if out is not None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["parameter", "value", "method", "seed", "session", "accuracy"])
        for v, tables in results:
            for t in tables:
                for row in t.rows():
                    w.writerow([parameter, v] + row)
        _atomic_write(out / f"grid_{parameter}.csv", buf.getvalue())
    return results


def mean_average(tables) -> float:
    return float(np.mean([t.average for t in tables]))
