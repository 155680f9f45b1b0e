"""Experiment orchestration: config resolution, seed loops, evaluation,
and machine-readable report emission.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import data as data_mod
from . import metrics as metrics_mod
from . import models as models_mod
from .distributions import SeededRng
from .metrics import PredictionSet

SCHEMA_VERSION = 1

TASKS = ("two-gaussians", "iris2d", "fmnist-vs-mnist")
OOD_SCORES = ("entropy", "maxprob")


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    task: str = "two-gaussians"
    model: str = "etp"
    hidden: tuple = (32,)
    epochs: int = 400
    batch_size: int = 64
    lr: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    n_train_samples: int = 1
    n_train_z_samples: int = 1
    context_fraction: float = 0.25
    memory_update_samples: int = 8
    edl_anneal_epochs: int = 10
    memory_cells: int = 16
    gamma: float = 0.9
    kappa2: float = 0.1
    beta: float = 1.0
    beta_reg: float = 0.0
    combiner: str = "residual"
    aggregation: str = "mean"
    simplified: bool = False
    n_predict_samples: int = 16
    n_predict_z_samples: int = 8
    ece_bins: int = 10
    ood_score: str = "entropy"
    seeds: tuple = (0, 1, 2, 3, 4, 5, 6, 7, 8, 9)
    n_per_class: int = 20
    test_size: int = 10000
    ood_size: int = 1000
    n_train_points: int = 5000
    data_dir: str = ""
    include_runtime: bool = True
    workers: int = 1
    decomposition_samples: int = 256

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"task: unknown value '{self.task}'")
        if self.model not in models_mod.MODEL_KINDS:
            raise ConfigError(f"model: unknown value '{self.model}'")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError("hidden: layer widths must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs: must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr: must be > 0")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma: retention factor must lie in (0, 1)")
        if self.kappa2 <= 0:
            raise ConfigError("kappa2: must be > 0")
        if self.beta <= 0:
            raise ConfigError("beta: prior precision must be > 0")
        if self.beta_reg < 0:
            raise ConfigError("beta_reg: must be >= 0")
        if not 0.0 < self.context_fraction <= 1.0:
            raise ConfigError("context_fraction: must lie in (0, 1]")
        if self.combiner not in ("residual", "direct"):
            raise ConfigError(f"combiner: unknown mode '{self.combiner}'")
        if self.aggregation not in ("mean", "attention"):
            raise ConfigError(f"aggregation: unknown mode '{self.aggregation}'")
        if self.ece_bins < 1:
            raise ConfigError("ece_bins: must be >= 1")
        if self.ood_score not in OOD_SCORES:
            raise ConfigError(f"ood_score: unknown value '{self.ood_score}'")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed required")
        if min(self.n_train_samples, self.n_train_z_samples,
               self.n_predict_samples, self.n_predict_z_samples) < 1:
            raise ConfigError("sample counts must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers: must be >= 1")
        return self


_TUPLE_INT_KEYS = {"hidden", "seeds"}
_BOOL_KEYS = {"simplified", "include_runtime"}


def _coerce(key: str, raw: str):
    ftypes = {f.name: f.type for f in fields(ExperimentConfig)}
    if key not in ftypes:
        raise ConfigError(f"unknown configuration key: '{key}'")
    raw = raw.strip()
    try:
        if key in _TUPLE_INT_KEYS:
            return tuple(int(tok) for tok in raw.split(",") if tok.strip())
        if key in _BOOL_KEYS:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        current = getattr(ExperimentConfig(), key)
        if isinstance(current, bool):
            raise AssertionError  # handled above
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        return raw
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot parse value '{raw}'") from exc


def parse_config_file(path) -> dict:
    """Flat ``key = value`` text with '#' comments."""
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (tok.strip() for tok in line.split("=", 1))
            values[key] = _coerce(key, raw)
    return values


def resolve_config(file_path=None, overrides=None) -> ExperimentConfig:
    """Layered resolution: defaults < config file < explicit overrides."""
    values = {}
    if file_path:
        values.update(parse_config_file(file_path))
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if isinstance(val, str):
            val = _coerce(key, val)
        elif key not in {f.name for f in fields(ExperimentConfig)}:
            raise ConfigError(f"unknown configuration key: '{key}'")
        values[key] = val
    cfg = ExperimentConfig(**values)
    return cfg.validate()


def config_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    d["seeds"] = list(cfg.seeds)
    return d


# ---------------------------------------------------------------------------
# task data


def build_task_data(cfg: ExperimentConfig, seed: int):
    """(train, test, ood) datasets for one seed; raises DataError on bad files."""
    data_rng = SeededRng(seed=seed, stream=1)
    if cfg.task == "two-gaussians":
        train, oracle = data_mod.gen_two_gaussians(cfg.n_per_class, data_rng)
        labels = (data_rng.uniform(size=cfg.test_size) < 0.5).astype(int)
        x = data_rng.normal(size=cfg.test_size) + np.where(labels == 1, 1.0, -1.0)
        test = data_mod.LabeledDataset(x[:, None], labels, 2)
        sign = np.where(data_rng.uniform(size=cfg.ood_size) < 0.5, -1.0, 1.0)
        ood_x = sign * data_rng.uniform(4.0, 8.0, size=cfg.ood_size)
        ood = data_mod.LabeledDataset(ood_x[:, None], np.zeros(cfg.ood_size, int), 2,
                                      provenance="ood")
        return train, test, ood, oracle
    if cfg.task == "iris2d":
        train = data_mod.load_iris_pca2()
        # evaluation reuses the training points (150-sample task)
        test = train
        pts = data_rng.uniform(-10.0, 10.0, size=(4 * cfg.ood_size, 2))
        far = np.max(np.abs(pts), axis=1) >= 5.0
        pts = pts[far][: cfg.ood_size]
        ood = data_mod.LabeledDataset(pts, np.zeros(len(pts), int), 3, provenance="ood")
        return train, test, ood, None
    if cfg.task == "fmnist-vs-mnist":
        paths = fmnist_mnist_paths(cfg.data_dir)
        missing = [p for p in paths.values() if not os.path.exists(p)]
        if missing:
            raise DataError(f"missing IDX files: {missing}")
        try:
            fm_train = data_mod.read_idx(paths["fmnist_train_images"],
                                         paths["fmnist_train_labels"])
            fm_test = data_mod.read_idx(paths["fmnist_test_images"],
                                        paths["fmnist_test_labels"])
            mn_test = data_mod.read_idx(paths["mnist_test_images"],
                                        paths["mnist_test_labels"])
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        n = cfg.n_train_points
        train = data_mod.LabeledDataset(fm_train.features[:n], fm_train.labels[:n], 10)
        test = data_mod.LabeledDataset(fm_test.features[:n], fm_test.labels[:n], 10)
        ood = data_mod.LabeledDataset(mn_test.features[:n], mn_test.labels[:n], 10,
                                      provenance="ood")
        (train, test, ood), _, _ = data_mod.zscore(train, [test, ood])
        return train, test, ood, None
    raise ConfigError(f"task: unknown value '{cfg.task}'")


def fmnist_mnist_paths(data_dir) -> dict:
    return {
        "fmnist_train_images": os.path.join(data_dir, "fmnist", "train-images-idx3-ubyte"),
        "fmnist_train_labels": os.path.join(data_dir, "fmnist", "train-labels-idx1-ubyte"),
        "fmnist_test_images": os.path.join(data_dir, "fmnist", "t10k-images-idx3-ubyte"),
        "fmnist_test_labels": os.path.join(data_dir, "fmnist", "t10k-labels-idx1-ubyte"),
        "mnist_test_images": os.path.join(data_dir, "mnist", "t10k-images-idx3-ubyte"),
        "mnist_test_labels": os.path.join(data_dir, "mnist", "t10k-labels-idx1-ubyte"),
    }


def build_model(cfg: ExperimentConfig, input_dim: int, num_classes: int, rng: SeededRng):
    hyper = dict(
        beta=cfg.beta, beta_reg=cfg.beta_reg, kappa2=cfg.kappa2, gamma=cfg.gamma,
        memory_cells=cfg.memory_cells, combiner=cfg.combiner, aggregation=cfg.aggregation,
        identity_keys=cfg.simplified, update_tanh=not cfg.simplified,
    )
    return models_mod.make_model(cfg.model, input_dim, num_classes, cfg.hidden, rng, **hyper)


def train_config(cfg: ExperimentConfig) -> models_mod.TrainConfig:
    return models_mod.TrainConfig(
        epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
        adam_beta1=cfg.adam_beta1, adam_beta2=cfg.adam_beta2, adam_eps=cfg.adam_eps,
        n_train_samples=cfg.n_train_samples, n_train_z_samples=cfg.n_train_z_samples,
        context_fraction=cfg.context_fraction,
        memory_update_samples=cfg.memory_update_samples,
        edl_anneal_epochs=cfg.edl_anneal_epochs,
    )


# ---------------------------------------------------------------------------
# per-seed pipeline


def ood_scores(probs, mode: str):
    if mode == "entropy":
        return np.array([metrics_mod.entropy(row) for row in probs])
    # max-probability scoring: low confidence = more OOD-like
    return -probs.max(axis=1)


def evaluate_model(cfg: ExperimentConfig, model, test, ood):
    eval_rng = SeededRng(seed=0, stream=3)
    probs_in = models_mod.predict(model, test.features, eval_rng,
                                  n_samples=cfg.n_predict_samples,
                                  n_samples_z=cfg.n_predict_z_samples)
    probs_out = models_mod.predict(model, ood.features, eval_rng,
                                   n_samples=cfg.n_predict_samples,
                                   n_samples_z=cfg.n_predict_z_samples)
    preds = PredictionSet(probs_in, test.labels)
    return {
        "err_pct": 100.0 * metrics_mod.error_rate(preds),
        "ece_pct": 100.0 * metrics_mod.ece(preds, cfg.ece_bins),
        "nll": metrics_mod.nll(preds),
        "auroc_ood_pct": 100.0 * metrics_mod.auroc(
            ood_scores(probs_in, cfg.ood_score), ood_scores(probs_out, cfg.ood_score)),
    }


def run_single_seed(cfg: ExperimentConfig, seed: int) -> dict:
    train_ds, test_ds, ood_ds, _ = build_task_data(cfg, seed)
    model_rng = SeededRng(seed=seed, stream=2)
    train_rng = SeededRng(seed=seed, stream=4)
    model = build_model(cfg, train_ds.features.shape[1], train_ds.num_classes, model_rng)
    t0 = time.perf_counter()
    try:
        trace = models_mod.train(model, train_ds, train_config(cfg), train_rng)
    except models_mod.TrainingDiverged as exc:
        return {"seed": seed, "failed": True, "failure": str(exc),
                "err_pct": None, "ece_pct": None, "nll": None, "auroc_ood_pct": None,
                "runtime_s_per_epoch": None}
    elapsed = time.perf_counter() - t0
    row = evaluate_model(cfg, model, test_ds, ood_ds)
    row["seed"] = seed
    row["failed"] = False
    row["runtime_s_per_epoch"] = elapsed / max(1, cfg.epochs)
    row["final_loss"] = trace[-1] if trace else None
    return row, model


def _run_seed_for_pool(args):
    cfg_values, seed = args
    cfg = ExperimentConfig(**cfg_values).validate()
    result = run_single_seed(cfg, seed)
    return result[0] if isinstance(result, tuple) else result


METRIC_KEYS = ("err_pct", "ece_pct", "nll", "auroc_ood_pct")


def aggregate_rows(rows):
    agg = {}
    for key in METRIC_KEYS:
        vals = [r[key] for r in rows if r.get(key) is not None]
        if vals:
            mean = float(np.mean(vals))
            sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        else:
            mean = sd = None
        agg[key] = {"mean": mean, "sd": sd}
    return agg


def run_experiment(cfg: ExperimentConfig, keep_models=False):
    """Train/evaluate over the seed list; returns the report dict.

    With keep_models=True the trained per-seed models are returned too
    (single-worker mode only).
    """
    rows = []
    kept = {}
    if cfg.workers > 1 and not keep_models:
        cfg_values = config_dict(cfg)
        cfg_values["hidden"] = tuple(cfg_values["hidden"])
        cfg_values["seeds"] = tuple(cfg_values["seeds"])
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            rows = list(pool.map(_run_seed_for_pool, [(cfg_values, s) for s in cfg.seeds]))
    else:
        for seed in cfg.seeds:
            result = run_single_seed(cfg, seed)
            if isinstance(result, tuple):
                row, model = result
                if keep_models:
                    kept[seed] = model
            else:
                row = result
            rows.append(row)
    rows.sort(key=lambda r: cfg.seeds.index(r["seed"]))
    if all(r.get("failed") for r in rows):
        raise models_mod.TrainingDiverged(-1, -1, float("nan"))
    runtimes = [r.get("runtime_s_per_epoch") for r in rows if r.get("runtime_s_per_epoch")]
    report = {
        "schema_version": SCHEMA_VERSION,
        "config": config_dict(cfg),
        "per_seed": [
            {k: r.get(k) for k in ("seed", "err_pct", "ece_pct", "nll", "auroc_ood_pct")}
            for r in rows
        ],
        "aggregate": aggregate_rows(rows),
        "runtime_s_per_epoch": (float(np.mean(runtimes)) if (runtimes and cfg.include_runtime) else None),
    }
    if keep_models:
        return report, kept
    return report


# ---------------------------------------------------------------------------
# decomposition


def run_decomposition(cfg: ExperimentConfig, model, probe_inputs):
    """Per-probe predictive-variance decomposition rows."""
    probes = np.atleast_2d(np.asarray(probe_inputs, dtype=np.float64))
    rng = SeededRng(seed=0, stream=7)
    rows = []
    for x in probes:
        if model.kind == "bnn":
            def sampler(_s, x=x):
                w = model.net.sample_weights_np(rng)
                z = model.net.forward_np(x[None, :], w)
                e = np.exp(z - z.max())
                return (e / e.sum()).ravel()

            triple = metrics_mod.decompose_pbm(sampler, cfg.decomposition_samples)
        elif model.kind == "etp":
            def alpha_sampler(_s, x=x):
                w = model.encoder.sample_weights_np(rng)
                v = model.encoder.forward_np(x[None, :], w)
                return model.concentration_np(v, model.draw_memory(rng)).ravel()

            triple = metrics_mod.decompose_cbm(alpha_sampler, cfg.decomposition_samples)
        else:
            raise ConfigError(
                f"model kind '{model.kind}' has no defined predictive-variance "
                "decomposition (single-term uncertainty); use bnn or etp")
        rows.append({
            "input": [float(v) for v in x],
            "reducible": triple.reducible.tolist(),
            "irreducible": triple.irreducible.tolist(),
            "data": triple.data.tolist(),
            "total": triple.total.tolist(),
        })
    return rows


# ---------------------------------------------------------------------------
# report emission


def _sanitize(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    return obj


def emit_report(report: dict, fmt: str, path):
    """Write JSON or CSV; NaN metrics serialize as null/empty."""
    report = _sanitize(report)
    if fmt == "json":
        with open(path, "w") as f:
            json.dump(report, f, indent=2, sort_keys=True, allow_nan=False)
            f.write("\n")
    elif fmt == "csv":
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["seed", *METRIC_KEYS])
            for row in report["per_seed"]:
                writer.writerow([row["seed"]] + [
                    "" if row[k] is None else row[k] for k in METRIC_KEYS])
            agg = report["aggregate"]
            writer.writerow(["aggregate"] + [
                "" if agg[k]["mean"] is None else agg[k]["mean"] for k in METRIC_KEYS])
    else:
        raise ConfigError(f"unknown report format: '{fmt}'")
    return path


def reaggregate(per_seed_paths):
    """Re-aggregate previously emitted per-seed JSON reports."""
    rows = []
    config = None
    for p in per_seed_paths:
        with open(p) as f:
            rep = json.load(f)
        config = config or rep.get("config")
        rows.extend(rep["per_seed"])
    return {
        "schema_version": SCHEMA_VERSION,
        "config": config,
        "per_seed": rows,
        "aggregate": aggregate_rows(rows),
        "runtime_s_per_epoch": None,
    }
