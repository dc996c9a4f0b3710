"""Seeded experiment sweeps comparing the LR, NN, QNN and QCNN power-flow surrogates.

Each experiment writes ``<out>/<experiment>.csv`` with one row per run and
``<out>/<experiment>.summary.json`` with the median and interquartile range per
model and sweep point. Runs are memoized within a process, so experiments that
share a training setup (generalization and stability, for instance) fit each
model only once.

Command line::

    qpf-lab generalization --config exp.toml --seeds 0,1,2 --out results/
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from .datagen import LabeledDataset, corrupt, derive_seed, draw_and_label, generate_pool
from .gridmodel import GridCase, load_grid
from .neural import TrainConfig, mse_loss
from .qsim import NoiseModel, expectations
from .surrogates import MODEL_KINDS, TrainResult, ansatz, feature_map, train

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

__all__ = [
    "EXPERIMENTS",
    "ExperimentConfig",
    "RunRecord",
    "build_dataset",
    "pf_error_table",
    "run_generalization",
    "run_robustness",
    "run_trainsize",
    "run_stability",
    "run_arch_and_hyper",
    "run_quantum_sweeps",
    "run_pf_table",
    "run_extreme_33bus",
    "run_experiment",
    "summarize",
    "write_outputs",
    "clear_cache",
    "main",
]

log = logging.getLogger(__name__)

EXPERIMENTS = (
    "generalization",
    "robustness",
    "trainsize",
    "stability",
    "arch_sweep",
    "hyper_search",
    "shots_sweep",
    "noise_sweep",
    "qubit_sweep",
    "extreme_33bus",
    "pf_table",
)
NOISE_CHANNELS = ("depolarizing", "amplitude_damping", "measurement_flip", "gate_imperfection")
CIRCUIT = "circuit"  # pseudo-model of the shots sweep: an untrained QNN circuit

_DEFAULT_MODELS = {
    "generalization": ("nn", "qnn", "qcnn"),
    "robustness": ("nn", "qnn", "qcnn"),
    "trainsize": ("nn", "qcnn"),
    "stability": ("nn", "qnn", "qcnn"),
    "arch_sweep": ("nn",),
    "hyper_search": ("nn",),
    "shots_sweep": (CIRCUIT, "qcnn"),
    "noise_sweep": ("qnn", "qcnn"),
    "qubit_sweep": ("qcnn",),
    "extreme_33bus": ("nn", "qcnn"),
    "pf_table": ("lr", "nn", "qnn", "qcnn"),
}


# -- configuration ----------------------------------------------------------------


def _levels(lo, hi, n):
    return tuple(float(round(v, 10)) for v in np.linspace(lo, hi, n))


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines an experiment's output, besides the code.

    ``grid`` is a TOML path or a builtin name; it defaults to ``feeder4``
    (``feeder33`` for ``extreme_33bus``). ``shots=None`` means exact
    expectation values. An empty ``models`` tuple selects the experiment's
    default line-up.
    """

    experiment: str
    grid: str | None = None
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    models: tuple[str, ...] = ()
    output_dir: str = "results"
    # data
    pool_size: int = 5000
    n_points: int = 512
    std_frac: float = 0.30
    corruption: float = 0.10
    nr_tol: float = 1e-8
    nr_max_iter: int = 50
    # training
    epochs: int = 1000
    learning_rate: float = 1.5e-4
    weight_decay: float = 3e-3
    dropout: float = 0.0
    batch_size: int = 16
    shots: int | None = None
    nn_depth: int = 7
    n_qubits: int = 6
    n_before: int = 4
    n_after: int = 3
    encoder_offset: float = 1.0
    entanglement: str = "linear"
    # sweeps
    noise_levels: tuple[float, ...] = _levels(0.01, 0.10, 10)
    train_sizes: tuple[int, ...] = (128, 256, 384, 512)
    depths: tuple[int, ...] = (0, 2, 3, 4, 5, 6, 7, 8)
    hyper_budget: int = 64
    shot_counts: tuple[int, ...] = tuple(2**k for k in range(4, 15))
    shot_repeats: int = 4
    noise_channels: tuple[str, ...] = NOISE_CHANNELS
    noise_grid: tuple[float, ...] = _levels(0.0, 0.10, 6)
    noise_retrain: bool = False
    qubit_counts: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7)
    extreme_scales: tuple[float, ...] = (0.3, 1.7)
    extreme_points: int = 64
    # output
    epoch_logs: bool = False
    timing: bool = False

    def __post_init__(self):
        for name in ("seeds", "models", "noise_levels", "train_sizes", "depths", "shot_counts",
                     "noise_channels", "noise_grid", "qubit_counts", "extreme_scales"):
            val = getattr(self, name)
            if isinstance(val, (str, int, float)):
                val = (val,)
            object.__setattr__(self, name, tuple(val))
        if self.shots in (0, "exact"):
            object.__setattr__(self, "shots", None)
        self._validate()

    def _validate(self):
        def need(cond, msg):
            if not cond:
                raise ValueError(msg)

        need(self.experiment in EXPERIMENTS, f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        need(len(self.seeds) >= 1, "at least one seed is required")
        need(len(set(self.seeds)) == len(self.seeds), "seeds must be distinct")
        allowed = set(MODEL_KINDS) | ({CIRCUIT} if self.experiment == "shots_sweep" else set())
        bad = [m for m in self.models if m not in allowed]
        need(not bad, f"unknown models {bad} for {self.experiment}")
        need(self.pool_size >= self.n_points >= 4, "need pool_size >= n_points >= 4")
        need(0 <= self.std_frac < 1, "std_frac must lie in [0, 1)")
        need(0 <= self.corruption <= 1, "corruption must lie in [0, 1]")
        need(all(0 <= v <= 1 for v in self.noise_levels) and self.noise_levels, "noise_levels must lie in [0, 1]")
        need(all(v >= 1 for v in self.train_sizes) and self.train_sizes, "train_sizes must be positive")
        need(self.experiment != "trainsize"
             or max(self.train_sizes) - self.n_points // 4 <= self.pool_size - self.n_points,
             f"train size {max(self.train_sizes)} exceeds what a pool of {self.pool_size} can supply")
        need(all(0 <= d <= 16 for d in self.depths) and self.depths, "depths must lie in [0, 16]")
        need(self.hyper_budget >= 1, "hyper_budget must be >= 1")
        need(all(s >= 1 for s in self.shot_counts) and self.shot_counts, "shot_counts must be >= 1")
        need(self.shot_repeats >= 1, "shot_repeats must be >= 1")
        need(set(self.noise_channels) <= set(NOISE_CHANNELS), f"noise channels must come from {NOISE_CHANNELS}")
        need(all(0 <= v <= 1 for v in self.noise_grid) and self.noise_grid, "noise_grid must lie in [0, 1]")
        need(all(1 <= q <= 12 for q in self.qubit_counts) and self.qubit_counts, "qubit_counts must lie in [1, 12]")
        need(all(s >= 0 for s in self.extreme_scales), "extreme_scales must be >= 0")
        need(self.extreme_points >= 1, "extreme_points must be >= 1")
        need(self.shots is None or self.shots >= 1, "shots must be >= 1 or 'exact'")
        need(self.entanglement in ("linear", "circular", "full"), "entanglement must be linear, circular or full")
        need(self.nn_depth >= 0 and self.n_before >= 0 and self.n_after >= 0, "layer counts must be >= 0")
        need(1 <= self.n_qubits <= 12, "n_qubits must lie in [1, 12]")
        self.train_config(0)  # learning rate, epochs, batch size, dropout

    @property
    def grid_name(self) -> str:
        if self.grid is not None:
            return self.grid
        return "feeder33" if self.experiment == "extreme_33bus" else "feeder4"

    @property
    def model_list(self) -> tuple[str, ...]:
        return self.models or _DEFAULT_MODELS[self.experiment]

    def train_config(self, seed: int, **over) -> TrainConfig:
        kw = dict(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            dropout=self.dropout,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=seed,
        )
        kw.update(over)
        return TrainConfig(**kw)

    def model_options(self, kind: str, **over) -> dict[str, Any]:
        if kind == "nn":
            opts = {"n_hidden": self.nn_depth}
        elif kind == "qnn":
            opts = {"shots": self.shots, "entanglement": self.entanglement}
        elif kind == "qcnn":
            opts = {
                "n_qubits": self.n_qubits,
                "n_before": self.n_before,
                "n_after": self.n_after,
                "encoder_offset": self.encoder_offset,
                "entanglement": self.entanglement,
                "shots": self.shots,
            }
        else:
            opts = {}
        opts.update(over)
        return opts

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        out["shots"] = "exact" if self.shots is None else self.shots
        return out

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], **overrides) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        merged = dict(data)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        unknown = set(merged) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "experiment" not in merged:
            raise ValueError("config needs an 'experiment' id")
        return cls(**merged)

    @classmethod
    def load(cls, path, **overrides) -> "ExperimentConfig":
        with open(path, "rb") as fh:
            return cls.from_mapping(tomllib.load(fh), **overrides)


# -- records ----------------------------------------------------------------------


@dataclass
class RunRecord:
    """One trained (or evaluated) model at one seed and sweep point.

    ``test_mse_norm`` is ``test_mse`` divided by the reference run named in
    ``norm_ref``. Failed runs keep ``status="failed"`` and the error text.
    """

    experiment: str
    seed: int
    model: str
    sweep: str = ""
    sweep_value: float | None = None
    train_mse: float = math.nan
    val_mse: float = math.nan
    test_mse: float = math.nan
    epoch_mean: float = math.nan
    epoch_std: float = math.nan
    wall_time: float = math.nan
    test_mse_norm: float = math.nan
    norm_ref: str = ""
    status: str = "ok"
    error: str = ""
    extra: dict[str, Any] = field(default_factory=dict)
    history: dict[str, list] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for name in ("train_mse", "val_mse", "test_mse"):
            v = getattr(self, name)
            if v is not None and not math.isnan(v) and v < 0:
                raise ValueError(f"{name} must be >= 0, got {v}")

    @property
    def ok(self) -> bool:
        return self.status == "ok"


_CORE_COLUMNS = [f.name for f in fields(RunRecord) if f.name not in ("extra", "history", "error")]


# -- data and fitting --------------------------------------------------------------

_GRIDS: dict[str, GridCase] = {}
_DATA: dict[tuple, tuple] = {}
_FITS: dict[str, TrainResult] = {}


def clear_cache() -> None:
    """Forget memoized grids, datasets and fitted models."""
    _GRIDS.clear()
    _DATA.clear()
    _FITS.clear()


def _grid(cfg: ExperimentConfig) -> GridCase:
    name = cfg.grid_name
    if name not in _GRIDS:
        _GRIDS[name] = load_grid(name)
    return _GRIDS[name]


def _clean_dataset(cfg: ExperimentConfig, seed: int):
    key = (cfg.grid_name, cfg.pool_size, cfg.std_frac, cfg.n_points, cfg.nr_tol, cfg.nr_max_iter, seed)
    if key not in _DATA:
        grid = _grid(cfg)
        pool = generate_pool(grid, cfg.pool_size, cfg.std_frac, derive_seed(seed, "pool"))
        ds = draw_and_label(pool, cfg.n_points, grid, derive_seed(seed, "draw"),
                            tol=cfg.nr_tol, max_iter=cfg.nr_max_iter)
        _DATA[key] = (pool, ds)
    return _DATA[key]


def build_dataset(cfg: ExperimentConfig, seed: int, corruption: float | None = None) -> LabeledDataset:
    """Labelled dataset for ``seed`` with its train split corrupted at ``corruption``
    (default ``cfg.corruption``)."""
    level = cfg.corruption if corruption is None else corruption
    _, ds = _clean_dataset(cfg, seed)
    return corrupt(ds, level, derive_seed(seed, "corrupt"))


def _fingerprint(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, np.ndarray):
            h.update(np.ascontiguousarray(p).tobytes())
            h.update(str(p.dtype).encode())
        else:
            h.update(json.dumps(p, sort_keys=True, default=repr).encode())
        h.update(b"|")
    return h.hexdigest()


def _fit(kind: str, ds: LabeledDataset, config: TrainConfig, options: dict) -> TrainResult:
    key = _fingerprint(ds.x, ds.y, ds.split.astype("U10"), kind, asdict(config), options)
    if key not in _FITS:
        _FITS[key] = train(kind, ds, config, **options)
    return _FITS[key]


def _pred_extras(pred: np.ndarray | None) -> dict[str, float]:
    if pred is None:
        return {}
    m = pred.shape[1] // 2
    return {
        "pred_v_min": float(pred[:, :m].min()),
        "pred_v_max": float(pred[:, :m].max()),
        "pred_delta_min": float(pred[:, m:].min()),
        "pred_delta_max": float(pred[:, m:].max()),
    }


def _record_from(cfg, seed, model, sweep, sweep_value, res: TrainResult, **extra) -> RunRecord:
    m = res.metrics
    ext = {
        "test_mse_component": m.get("test_mse_component", math.nan),
        "best_val_mse": m.get("best_val_mse", math.nan),
        "n_steps": m["n_steps"],
        "n_circuits": m["n_circuits"],
    }
    ext.update(_pred_extras(res.test_pred))
    ext.update(extra)
    return RunRecord(
        experiment=cfg.experiment,
        seed=seed,
        model=model,
        sweep=sweep,
        sweep_value=sweep_value,
        train_mse=m["train_mse"],
        val_mse=m.get("val_mse", math.nan),
        test_mse=m.get("test_mse", math.nan),
        epoch_mean=m["epoch_mean"],
        epoch_std=m["epoch_std"],
        wall_time=m["wall_time"],
        extra=ext,
        history={k: list(v) for k, v in res.model.history_.items() if k != "wall_time"},
    )


def _failed(cfg, seed, model, sweep, sweep_value, exc: BaseException) -> RunRecord:
    log.warning("%s seed=%s model=%s %s failed: %s", cfg.experiment, seed, model, sweep, exc)
    return RunRecord(cfg.experiment, seed, model, sweep, sweep_value, status="failed",
                     error=f"{type(exc).__name__}: {exc}")


def _train_run(cfg, seed, kind, ds, sweep, sweep_value, *, label=None, config_over=None, options_over=None,
               extra=None):
    """Fit one model and turn it into a record; failures become flagged records."""
    label = label or kind
    try:
        res = _fit(kind, ds, cfg.train_config(seed, **(config_over or {})),
                   cfg.model_options(kind, **(options_over or {})))
    except Exception as exc:  # noqa: BLE001 - a failed run must not stop the sweep
        return _failed(cfg, seed, label, sweep, sweep_value, exc), None
    return _record_from(cfg, seed, label, sweep, sweep_value, res, **(extra or {})), res


def _normalize(records, ref_of: Callable[[RunRecord], tuple[str, str] | None]) -> None:
    """Divide ``test_mse`` by the matching reference run of the same seed."""
    index = {(r.seed, r.model, r.sweep): r for r in records if r.ok}
    for r in records:
        ref = ref_of(r)
        if ref is None:
            continue
        model, sweep = ref
        r.norm_ref = f"{model}@{sweep}/seed={r.seed}"
        base = index.get((r.seed, model, sweep))
        if r.ok and base is not None and base.test_mse > 0:
            r.test_mse_norm = r.test_mse / base.test_mse


def _fmt_level(v: float) -> str:
    return f"{v:g}"


# -- experiments ------------------------------------------------------------------


def run_generalization(cfg: ExperimentConfig) -> list[RunRecord]:
    """Train every selected model on the same corrupted 25% train split and score the test split."""
    sweep = f"corruption={_fmt_level(cfg.corruption)}"
    out = []
    for seed in cfg.seeds:
        ds = build_dataset(cfg, seed)
        for kind in cfg.model_list:
            out.append(_train_run(cfg, seed, kind, ds, sweep, cfg.corruption)[0])
    return out


def run_robustness(cfg: ExperimentConfig) -> list[RunRecord]:
    """Retrain at each corruption level; normalize to the QNN (or first model) at the top level."""
    out = []
    for seed in cfg.seeds:
        for level in cfg.noise_levels:
            ds = build_dataset(cfg, seed, level)
            for kind in cfg.model_list:
                out.append(_train_run(cfg, seed, kind, ds, f"corruption={_fmt_level(level)}", level)[0])
    ref_model = "qnn" if "qnn" in cfg.model_list else cfg.model_list[0]
    ref_sweep = f"corruption={_fmt_level(max(cfg.noise_levels))}"
    _normalize(out, lambda r: (ref_model, ref_sweep))
    return out


def _with_train_size(cfg, seed, size: int) -> LabeledDataset:
    pool, base = _clean_dataset(cfg, seed)
    n_train = int(base.mask("train").sum())
    extra_needed = max(size for size in cfg.train_sizes) - n_train
    available = cfg.pool_size - cfg.n_points
    if extra_needed > available:
        raise ValueError(f"train size {max(cfg.train_sizes)} exceeds what the pool can supply "
                         f"({n_train} + {available})")
    if size <= n_train:
        train_idx = np.flatnonzero(base.mask("train"))
        keep = np.ones(len(base), bool)
        keep[train_idx[size:]] = False
        ds = replace(base, x=base.x[keep], y=base.y[keep], split=base.split[keep], pool_index=base.pool_index[keep])
    else:
        key = ("extra", cfg.grid_name, cfg.pool_size, cfg.std_frac, cfg.n_points, extra_needed, seed)
        if key not in _DATA:
            _DATA[key] = draw_and_label(pool, extra_needed, _grid(cfg), derive_seed(seed, "extra"),
                                        tol=cfg.nr_tol, max_iter=cfg.nr_max_iter, exclude=base.pool_index)
        ext = _DATA[key]
        k = size - n_train
        ds = LabeledDataset(
            x=np.vstack([base.x, ext.x[:k]]),
            y=np.vstack([base.y, ext.y[:k]]),
            split=np.concatenate([base.split, np.full(k, "train")]),
            pool_index=np.concatenate([base.pool_index, ext.pool_index[:k]]),
            provenance=dict(base.provenance, extra_train=k),
        )
    return corrupt(ds, cfg.corruption, derive_seed(seed, "corrupt"))


def run_trainsize(cfg: ExperimentConfig) -> list[RunRecord]:
    """NN learning curve over ``train_sizes`` against QCNN at the base 25% split."""
    out = []
    for seed in cfg.seeds:
        _, base = _clean_dataset(cfg, seed)
        n_train = int(base.mask("train").sum())
        for size in cfg.train_sizes:
            ds = _with_train_size(cfg, seed, size)
            for kind in cfg.model_list:
                if kind != "nn" and size != n_train:
                    continue
                out.append(_train_run(cfg, seed, kind, ds, f"train_size={size}", size)[0])
        if n_train not in cfg.train_sizes:
            ds = build_dataset(cfg, seed)
            for kind in cfg.model_list:
                if kind != "nn":
                    out.append(_train_run(cfg, seed, kind, ds, f"train_size={n_train}", n_train)[0])
    ref_model = "qcnn" if "qcnn" in cfg.model_list else "nn"
    _normalize(out, lambda r: (ref_model, f"train_size={cfg.n_points // 4}"))
    return out


def run_stability(cfg: ExperimentConfig) -> list[RunRecord]:
    """Per-epoch training-MSE statistics; shares its fits with :func:`run_generalization`."""
    return run_generalization(cfg)


def _arch_sweep(cfg: ExperimentConfig) -> list[RunRecord]:
    out = []
    for seed in cfg.seeds:
        ds = build_dataset(cfg, seed)
        for depth in cfg.depths:
            kind, label = ("lr", "lr") if depth == 0 else ("nn", f"nn_{depth}")
            out.append(_train_run(cfg, seed, kind, ds, f"depth={depth}", depth, label=label,
                                  options_over={"n_hidden": depth})[0])
    ref_depth = 7 if 7 in cfg.depths else max(cfg.depths)
    ref_label = "lr" if ref_depth == 0 else f"nn_{ref_depth}"
    _normalize(out, lambda r: (ref_label, f"depth={ref_depth}"))
    return out


def _hyper_search(cfg: ExperimentConfig) -> list[RunRecord]:
    out = []
    for seed in cfg.seeds:
        ds = build_dataset(cfg, seed)
        rng = np.random.default_rng(derive_seed(seed, "hyper"))
        for trial in range(cfg.hyper_budget):
            lr = float(10 ** rng.uniform(-6, -1))
            decay = float(10 ** rng.uniform(-6, -1))
            dropout = float(rng.uniform(0.0, 0.02))
            hp = {"learning_rate": lr, "weight_decay": decay, "dropout": dropout}
            out.append(_train_run(cfg, seed, "nn", ds, f"trial={trial}", trial, config_over=hp, extra=hp)[0])
    return out


def run_arch_and_hyper(cfg: ExperimentConfig) -> list[RunRecord]:
    """Depth sweep (LR and NN_2..NN_8) or random hyper-parameter search, per ``cfg.experiment``."""
    if cfg.experiment == "hyper_search":
        return _hyper_search(cfg)
    return _arch_sweep(cfg)


def _shots_sweep(cfg: ExperimentConfig) -> list[RunRecord]:
    out = []
    for seed in cfg.seeds:
        ds = build_dataset(cfg, seed)
        xte, yte = ds.subset("test")
        for kind in cfg.model_list:
            if kind == CIRCUIT:
                out.extend(_circuit_shot_errors(cfg, seed, xte))
                continue
            if kind not in ("qnn", "qcnn"):
                continue
            base, res = _train_run(cfg, seed, kind, ds, "shots=exact", None, options_over={"shots": None})
            out.append(base)
            if res is None:
                continue
            exact = res.model.predict(xte)
            for shots in cfg.shot_counts:
                errs, mses, preds = [], [], []
                for rep in range(cfg.shot_repeats):
                    pred = res.model.predict_under(xte, shots=shots, seed=derive_seed(seed, f"shots-{shots}-{rep}"))
                    errs.append(np.mean(np.abs(pred - exact)))
                    mses.append(mse_loss(pred, yte))
                    preds.append(pred)
                extra = dict(base.extra, pred_error=float(np.mean(errs)), **_pred_extras(np.vstack(preds)))
                rec = replace(base, sweep=f"shots={shots}", sweep_value=shots, test_mse=float(np.mean(mses)),
                              extra=extra, history=None)
                out.append(rec)
    return out


def _circuit_shot_errors(cfg, seed, xte) -> list[RunRecord]:
    n = xte.shape[1]
    circuit = feature_map(n) + ansatz(n, cfg.entanglement)
    rng = np.random.default_rng(derive_seed(seed, "shots-weights"))
    w = rng.uniform(-1.0, 1.0, size=2 * n)
    bindings = {f"x{q}": np.arctan(xte[:, q]) for q in range(n)}
    bindings.update({f"w{k}": np.full(len(xte), w[k]) for k in range(2 * n)})
    exact = expectations(circuit, bindings)
    out = []
    for shots in cfg.shot_counts:
        abs_err, sq_err = [], []
        for rep in range(cfg.shot_repeats):
            est = expectations(circuit, bindings, shots=shots,
                               rng=np.random.default_rng(derive_seed(seed, f"shots-{shots}-{rep}")))
            abs_err.append(np.mean(np.abs(est - exact)))
            sq_err.append(np.mean((est - exact) ** 2))
        out.append(RunRecord(cfg.experiment, seed, CIRCUIT, f"shots={shots}", shots,
                             extra={"est_error": float(np.mean(abs_err)), "est_rmse": float(np.sqrt(np.mean(sq_err)))}))
    return out


def _noise_sweep(cfg: ExperimentConfig) -> list[RunRecord]:
    out = []
    for seed in cfg.seeds:
        ds = build_dataset(cfg, seed)
        xte, yte = ds.subset("test")
        for kind in cfg.model_list:
            if kind not in ("qnn", "qcnn"):
                continue
            for channel in cfg.noise_channels:
                for level in cfg.noise_grid:
                    noise = NoiseModel.from_level(channel, level)
                    sweep = f"{channel}={_fmt_level(level)}"
                    if cfg.noise_retrain:
                        out.append(_train_run(cfg, seed, kind, ds, sweep, level, options_over={"noise": noise})[0])
                        continue
                    base, res = _train_run(cfg, seed, kind, ds, sweep, level)
                    if res is not None:
                        try:
                            pred = res.model.predict_under(xte, shots=cfg.shots, noise=noise,
                                                           seed=derive_seed(seed, f"noise-{sweep}"))
                            base.test_mse = mse_loss(pred, yte)
                            base.extra.update(_pred_extras(pred))
                        except Exception as exc:  # noqa: BLE001
                            base = _failed(cfg, seed, kind, sweep, level, exc)
                    base.extra["channel"] = channel
                    base.history = None
                    out.append(base)
    return out


def _qubit_sweep(cfg: ExperimentConfig) -> list[RunRecord]:
    out = []
    for seed in cfg.seeds:
        ds = build_dataset(cfg, seed)
        for q in cfg.qubit_counts:
            out.append(_train_run(cfg, seed, "qcnn", ds, f"qubits={q}", q, label=f"qcnn_{q}",
                                  options_over={"n_qubits": q})[0])
    ref = 6 if 6 in cfg.qubit_counts else max(cfg.qubit_counts)
    _normalize(out, lambda r: (f"qcnn_{ref}", f"qubits={ref}"))
    return out


def run_quantum_sweeps(cfg: ExperimentConfig) -> list[RunRecord]:
    """Shot-count, hardware-noise or qubit-count sweep, per ``cfg.experiment``."""
    runners = {"shots_sweep": _shots_sweep, "noise_sweep": _noise_sweep, "qubit_sweep": _qubit_sweep}
    if cfg.experiment not in runners:
        raise ValueError(f"{cfg.experiment!r} is not a quantum sweep")
    return runners[cfg.experiment](cfg)


def pf_error_table(pred, y) -> dict[str, float]:
    """Mean and std of ``|v_hat - v|`` (pu) and ``|delta_hat - delta|`` (degrees)."""
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if pred.shape != y.shape or pred.shape[1] % 2:
        raise ValueError(f"shape mismatch {pred.shape} vs {y.shape}")
    m = y.shape[1] // 2
    dv = np.abs(pred[:, :m] - y[:, :m])
    dd = np.abs(pred[:, m:] - y[:, m:])
    return {
        "v_err_mean": float(dv.mean()),
        "v_err_std": float(dv.std()),
        "delta_err_mean": float(dd.mean()),
        "delta_err_std": float(dd.std()),
    }


def run_pf_table(cfg: ExperimentConfig) -> list[RunRecord]:
    """Voltage and angle error statistics of every model against the NR labels."""
    out = []
    sweep = f"corruption={_fmt_level(cfg.corruption)}"
    for seed in cfg.seeds:
        ds = build_dataset(cfg, seed)
        _, yte = ds.subset("test")
        for kind in cfg.model_list:
            rec, res = _train_run(cfg, seed, kind, ds, sweep, cfg.corruption)
            if res is not None:
                rec.extra.update(pf_error_table(res.test_pred, yte))
            out.append(rec)
    return out


def _extreme_set(cfg, seed, scale) -> LabeledDataset:
    key = ("extreme", cfg.grid_name, cfg.std_frac, cfg.extreme_points, scale, seed)
    if key not in _DATA:
        grid = _grid(cfg)
        pq = grid.pq_indices
        stressed = grid.with_loads(grid.p_load[pq] * scale, grid.q_load[pq] * scale)
        pool = generate_pool(stressed, 4 * cfg.extreme_points, cfg.std_frac, derive_seed(seed, f"extreme-{scale:g}"))
        _DATA[key] = draw_and_label(pool, cfg.extreme_points, grid, derive_seed(seed, f"extreme-draw-{scale:g}"),
                                    tol=cfg.nr_tol, max_iter=cfg.nr_max_iter)
    return _DATA[key]


def run_extreme_33bus(cfg: ExperimentConfig) -> list[RunRecord]:
    """Train on the regular dataset, then score light- and heavy-load scenarios.

    ``max_bus_v_mse`` is the largest per-bus mean squared voltage error.
    """
    out = []
    for seed in cfg.seeds:
        ds = build_dataset(cfg, seed)
        for kind in cfg.model_list:
            base, res = _train_run(cfg, seed, kind, ds, "load_scale=1", 1.0)
            out.append(base)
            for scale in cfg.extreme_scales:
                sweep = f"load_scale={scale:g}"
                if res is None:
                    out.append(replace(base, sweep=sweep, sweep_value=scale))
                    continue
                try:
                    ext = _extreme_set(cfg, seed, scale)
                    pred = res.model.predict(ext.x)
                except Exception as exc:  # noqa: BLE001
                    out.append(_failed(cfg, seed, kind, sweep, scale, exc))
                    continue
                m = ext.y.shape[1] // 2
                bus_mse = np.mean((pred[:, :m] - ext.y[:, :m]) ** 2, axis=0)
                extra = dict(base.extra, max_bus_v_mse=float(bus_mse.max()), mean_bus_v_mse=float(bus_mse.mean()),
                             label_v_min=float(ext.y[:, :m].min()), label_v_max=float(ext.y[:, :m].max()),
                             **_pred_extras(pred))
                out.append(replace(base, sweep=sweep, sweep_value=scale, test_mse=mse_loss(pred, ext.y),
                                   extra=extra, history=None))
    return out


_RUNNERS: dict[str, Callable[[ExperimentConfig], list[RunRecord]]] = {
    "generalization": run_generalization,
    "robustness": run_robustness,
    "trainsize": run_trainsize,
    "stability": run_stability,
    "arch_sweep": run_arch_and_hyper,
    "hyper_search": run_arch_and_hyper,
    "shots_sweep": run_quantum_sweeps,
    "noise_sweep": run_quantum_sweeps,
    "qubit_sweep": run_quantum_sweeps,
    "extreme_33bus": run_extreme_33bus,
    "pf_table": run_pf_table,
}


def run_experiment(cfg: ExperimentConfig) -> list[RunRecord]:
    return _RUNNERS[cfg.experiment](cfg)


# -- summaries --------------------------------------------------------------------


def _stats(values) -> dict[str, float] | None:
    vals = np.asarray([v for v in values if v is not None and np.isfinite(v)], dtype=float)
    if vals.size == 0:
        return None
    q1, med, q3 = np.percentile(vals, [25, 50, 75])
    return {"median": float(med), "q1": float(q1), "q3": float(q3), "iqr": float(q3 - q1), "n": int(vals.size)}


_SUMMARY_FIELDS = ("train_mse", "val_mse", "test_mse", "epoch_mean", "epoch_std", "test_mse_norm")


def summarize(records: list[RunRecord], cfg: ExperimentConfig | None = None) -> dict[str, Any]:
    """Median/IQR per (model, sweep point) plus experiment-specific comparisons."""
    groups: dict[tuple[str, str], list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.model, r.sweep), []).append(r)
    rows = []
    for (model, sweep), recs in groups.items():
        ok = [r for r in recs if r.ok]
        entry: dict[str, Any] = {"model": model, "sweep": sweep, "runs": len(recs), "failed": len(recs) - len(ok)}
        for name in _SUMMARY_FIELDS:
            s = _stats([getattr(r, name) for r in ok])
            if s is not None:
                entry[name] = s
        numeric_extra = sorted({k for r in ok for k, v in r.extra.items() if isinstance(v, (int, float))})
        for k in numeric_extra:
            s = _stats([r.extra.get(k) for r in ok])
            if s is not None:
                entry[k] = s
        if ok and ok[0].norm_ref:
            entry["norm_ref"] = ok[0].norm_ref.rsplit("/seed=", 1)[0]
        rows.append(entry)
    out: dict[str, Any] = {
        "experiment": records[0].experiment if records else (cfg.experiment if cfg else ""),
        "n_runs": len(records),
        "n_failed": sum(not r.ok for r in records),
        "groups": rows,
    }
    if cfg is not None:
        # where the files go does not change what is in them
        out["config"] = {k: v for k, v in cfg.to_dict().items() if k != "output_dir"}
        out["derived"] = _derived(records, cfg)
    return out


def _median_of(records, model, sweep, attr="test_mse"):
    vals = [getattr(r, attr) if hasattr(r, attr) else r.extra.get(attr)
            for r in records if r.ok and r.model == model and r.sweep == sweep]
    s = _stats(vals)
    return None if s is None else s["median"]


def _reduction(a, b):
    """Percent by which ``b`` is lower than ``a``."""
    if a is None or b is None or a == 0:
        return None
    return 100.0 * (1.0 - b / a)


def _derived(records, cfg) -> dict[str, Any]:
    models = [m for m in cfg.model_list if m != CIRCUIT]
    exp = cfg.experiment
    d: dict[str, Any] = {}
    if exp in ("generalization", "stability", "pf_table"):
        sweep = f"corruption={_fmt_level(cfg.corruption)}"
        attrs = ("test_mse",) if exp == "generalization" else ("train_mse", "epoch_mean", "epoch_std")
        if exp == "pf_table":
            attrs = ("v_err_mean", "delta_err_mean")
        for attr in attrs:
            med = {m: _median_of(records, m, sweep, attr) for m in models}
            d[f"median_{attr}"] = med
            d[f"{attr}_reduction_pct"] = {
                f"{b}_vs_{a}": _reduction(med[a], med[b]) for a in models for b in models if a != b
            }
    elif exp == "robustness":
        lo, hi = min(cfg.noise_levels), max(cfg.noise_levels)
        d["degradation_ratio"] = {}
        for m in models:
            a = _median_of(records, m, f"corruption={_fmt_level(lo)}")
            b = _median_of(records, m, f"corruption={_fmt_level(hi)}")
            d["degradation_ratio"][m] = None if not a else b / a
    elif exp == "trainsize":
        d["nn_median_test_mse"] = {str(s): _median_of(records, "nn", f"train_size={s}") for s in cfg.train_sizes}
        d["qcnn_median_test_mse_at_base"] = _median_of(records, "qcnn", f"train_size={cfg.n_points // 4}")
    elif exp == "shots_sweep":
        d.update(_shot_fit(records, cfg))
    elif exp == "hyper_search":
        best = {}
        for seed in cfg.seeds:
            runs = [r for r in records if r.ok and r.seed == seed and np.isfinite(r.val_mse)]
            if runs:
                r = min(runs, key=lambda r: r.val_mse)
                best[str(seed)] = {"trial": r.sweep, "val_mse": r.val_mse, "test_mse": r.test_mse,
                                   **{k: r.extra[k] for k in ("learning_rate", "weight_decay", "dropout")}}
        d["best_by_validation"] = best
    return d


def shot_error_fit(shots, errors, lo: int = 64) -> tuple[float, float]:
    """Least-squares slope and intercept of ``log(error)`` against ``log(shots)`` for ``shots >= lo``."""
    shots = np.asarray(shots, dtype=float)
    errors = np.asarray(errors, dtype=float)
    sel = (shots >= lo) & (errors > 0)
    if sel.sum() < 2:
        raise ValueError("need at least two shot counts with positive error to fit")
    slope, intercept = np.polyfit(np.log(shots[sel]), np.log(errors[sel]), 1)
    return float(slope), float(intercept)


def _shot_fit(records, cfg) -> dict[str, Any]:
    d: dict[str, Any] = {}
    for model, key in ((CIRCUIT, "est_error"), ("qnn", "pred_error"), ("qcnn", "pred_error")):
        if model not in cfg.model_list:
            continue
        med = {s: _median_of(records, model, f"shots={s}", key) for s in cfg.shot_counts}
        pts = [(s, e) for s, e in med.items() if e is not None]
        if len(pts) < 2:
            continue
        entry: dict[str, Any] = {"median_error": {str(s): e for s, e in pts}}
        try:
            entry["loglog_slope"] = shot_error_fit(*zip(*pts))[0]
        except ValueError:
            pass
        if 1024 in med and 16384 in med and med[1024] and med[16384]:
            entry["ratio_1024_to_16384"] = med[1024] / med[16384]
        d[model] = entry
    return d


# -- output -----------------------------------------------------------------------


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "" if not np.isfinite(v) else repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_clean(obj):
    if isinstance(obj, dict):
        return {str(k): _json_clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def records_to_csv(records: list[RunRecord], timing: bool = False) -> str:
    extra_cols = sorted({k for r in records for k in r.extra})
    cols = _CORE_COLUMNS + extra_cols + ["error"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in records:
        row = []
        for c in cols:
            if c == "wall_time" and not timing:
                row.append("")
            elif c in extra_cols:
                row.append(_cell(r.extra.get(c)))
            else:
                row.append(_cell(getattr(r, c)))
        w.writerow(row)
    return buf.getvalue()


def write_outputs(records: list[RunRecord], cfg: ExperimentConfig, out_dir=None) -> list[Path]:
    """Write the per-run CSV, the JSON summary and (optionally) per-epoch logs.

    Wall-clock columns stay empty unless ``cfg.timing`` is set, so identical
    configurations reproduce identical files.
    """
    out = Path(out_dir or cfg.output_dir)
    paths = [out / f"{cfg.experiment}.csv", out / f"{cfg.experiment}.summary.json"]
    _atomic_write(paths[0], records_to_csv(records, cfg.timing))
    summary = _json_clean(summarize(records, cfg))
    _atomic_write(paths[1], json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if cfg.epoch_logs:
        for r in records:
            if not r.history:
                continue
            name = f"{r.model}_{r.sweep or 'base'}_seed{r.seed}.csv".replace("=", "-")
            lines = ["epoch,train_mse,val_mse"]
            val = r.history.get("val_mse") or []
            for k, tr in enumerate(r.history["train_mse"]):
                lines.append(f"{k},{_cell(tr)},{_cell(val[k] if k < len(val) else None)}")
            p = out / f"{cfg.experiment}_epochs" / name
            _atomic_write(p, "\n".join(lines) + "\n")
            paths.append(p)
    return paths


# -- command line -----------------------------------------------------------------


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qpf-lab", description="Run a seeded surrogate-model experiment.")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", type=Path, help="TOML file with ExperimentConfig fields")
    p.add_argument("--seeds", type=_parse_seeds, help="comma-separated seeds, e.g. 0,1,2")
    p.add_argument("--out", type=Path, help="output directory (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        data = {}
        if args.config is not None:
            with open(args.config, "rb") as fh:
                data = tomllib.load(fh)
        if data.get("experiment", args.experiment) != args.experiment:
            raise ValueError(f"config is for {data['experiment']!r}, not {args.experiment!r}")
        data["experiment"] = args.experiment
        cfg = ExperimentConfig.from_mapping(
            data, seeds=args.seeds, output_dir=str(args.out) if args.out is not None else None
        )
    except (OSError, ValueError, tomllib.TOMLDecodeError) as exc:
        print(f"qpf-lab: {exc}", file=sys.stderr)
        return 2
    records = run_experiment(cfg)
    paths = write_outputs(records, cfg)
    failed = sum(not r.ok for r in records)
    print(f"{cfg.experiment}: {len(records)} runs, {failed} failed -> {paths[0].parent}")
    return 0 if failed == 0 else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
