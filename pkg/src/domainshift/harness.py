"""Experiment grid: sigma x target-size x algorithm x lambda-schedule x seed.

For every (sigma, seed) pair the harness perturbs the target model into a
source model, records the exact KL divergence between them, samples the
source training set and a shared target test set, then trains and
evaluates every requested algorithm at every target-training size. Rows
are sorted canonically and written as CSV.

Seed discipline: each random purpose draws from a stream keyed on
(replicate seed, purpose label, sigma index, size index, algorithm), so
no two cells share an RNG stream and the output is identical regardless
of worker-pool size. Timing is measured per training call but kept out
of the canonical CSV (a zero placeholder holds its column) so that
repeated runs are byte-identical; measured seconds go to a sidecar.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .bayesnet import (
    NaiveBayesModel,
    default_target_model,
    load_model,
    sample,
    save_model,
)
from .divergence import (
    LambdaSchedule,
    PerturbationConfig,
    kl_factorized,
    perturb_model,
    resolve_lambda,
)
from .nn import TrainConfig, backbone, evaluate
from .seeding import derive_seed
from .transfer import (
    DannSpecs,
    FreezeStrategy,
    McdSpecs,
    fine_tune,
    train_dann,
    train_mcd,
    train_source_baseline,
    train_target_baseline,
)

__all__ = [
    "SweepConfig",
    "CellResult",
    "SweepResult",
    "RESULT_COLUMNS",
    "DEFAULT_SIGMAS",
    "DEFAULT_ALGORITHMS",
    "ADVERSARIAL_ALGORITHMS",
    "cell_seed",
    "run_sweep",
    "run_to_directory",
    "summarize",
]

DEFAULT_SIGMAS = (0.01, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9,
                  1.0, 1.5, 1.8, 2.0)
DEFAULT_TARGET_SIZES = (50, 100, 200, 400, 800, 2000, 10000)
DEFAULT_ALGORITHMS = ("source", "target", "dann", "dann_target", "mcd",
                      "finetune_all", "finetune_last1", "finetune_last2",
                      "finetune_last3")
ADVERSARIAL_ALGORITHMS = frozenset({"dann", "dann_target", "mcd"})

_FINETUNE_STRATEGIES = {
    "finetune_all": FreezeStrategy.retrain_all(),
    "finetune_last1": FreezeStrategy.retrain_last(1),
    "finetune_last2": FreezeStrategy.retrain_last(2),
    "finetune_last3": FreezeStrategy.retrain_last(3),
}

RESULT_COLUMNS = ("sigma", "kl", "target_size", "algorithm", "lambda_schedule",
                  "lambda_resolved", "seed", "test_accuracy", "train_seconds",
                  "status")

CONFIG_VERSION = 1


def cell_seed(base_seed: int, *keys: int | str) -> int:
    """Derive one integer seed for a keyed RNG purpose."""
    return int(derive_seed(base_seed, *keys).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class SweepConfig:
    """Full description of one sweep; hashing it names the run directory."""

    n_features: int = 64
    classes: int = 4
    model_seed: int = 0
    target_model_path: str | None = None
    sigmas: tuple[float, ...] = DEFAULT_SIGMAS
    target_sizes: tuple[int, ...] = DEFAULT_TARGET_SIZES
    source_size: int = 10000
    test_size: int = 10000
    algorithms: tuple[str, ...] = DEFAULT_ALGORITHMS
    lambda_schedules: tuple[str, ...] = ("fixed:1",)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 30
    domain_hidden: int = 1024
    mcd_n_c: int = 4
    mcd_inference: str = "f1"
    gy_relu: bool = True

    def __post_init__(self):
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        object.__setattr__(self, "target_sizes", tuple(int(s) for s in self.target_sizes))
        object.__setattr__(self, "algorithms", tuple(self.algorithms))
        object.__setattr__(self, "lambda_schedules", tuple(self.lambda_schedules))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.sigmas or any(s < 0 for s in self.sigmas):
            raise ValueError("sigmas must be a non-empty list of non-negative reals")
        if not self.target_sizes or any(s < 1 for s in self.target_sizes):
            raise ValueError("target_sizes must be positive")
        if self.source_size < 1 or self.test_size < 1:
            raise ValueError("source_size and test_size must be >= 1")
        if not self.algorithms:
            raise ValueError("need at least one algorithm")
        for algo in self.algorithms:
            if algo not in DEFAULT_ALGORITHMS:
                raise ValueError(f"unknown algorithm {algo!r}; "
                                 f"choose from {sorted(DEFAULT_ALGORITHMS)}")
        if not self.seeds:
            raise ValueError("need at least one seed")
        for text in self.lambda_schedules:
            LambdaSchedule.parse(text)

    def to_doc(self) -> dict:
        doc = {"version": CONFIG_VERSION}
        doc.update(asdict(self))
        for key in ("sigmas", "target_sizes", "algorithms", "lambda_schedules", "seeds"):
            doc[key] = list(doc[key])
        return doc

    @classmethod
    def from_doc(cls, doc: dict) -> "SweepConfig":
        if not isinstance(doc, dict):
            raise ValueError("sweep config must be a JSON object")
        doc = dict(doc)
        version = doc.pop("version", None)
        if version != CONFIG_VERSION:
            raise ValueError(f"unsupported sweep config version {version!r}")
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key in ("sigmas", "target_sizes", "algorithms", "lambda_schedules", "seeds"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_doc(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]

    def cell_count(self) -> int:
        per_algo = 0
        for algo in self.algorithms:
            mult = len(self.lambda_schedules) if algo in ADVERSARIAL_ALGORITHMS else 1
            per_algo += mult
        return len(self.sigmas) * len(self.target_sizes) * len(self.seeds) * per_algo

    def resolve_target_model(self) -> NaiveBayesModel:
        if self.target_model_path is not None:
            return load_model(self.target_model_path)
        return default_target_model(self.n_features, self.classes, self.model_seed)


@dataclass
class CellResult:
    sigma: float
    kl: float
    target_size: int
    algorithm: str
    lambda_schedule: str
    lambda_resolved: float | None
    seed: int
    test_accuracy: float | None
    train_seconds: float
    status: str = "ok"

    def sort_key(self):
        return (self.sigma, self.target_size, self.algorithm,
                self.lambda_schedule, self.seed)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class SweepResult:
    """Sorted result rows plus the source models realized along the way."""

    rows: list[CellResult]
    source_models: dict[tuple[int, int], NaiveBayesModel] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(r.status == "ok" for r in self.rows)

    def to_csv(self, path: str | Path, include_timing: bool = False) -> None:
        """Write the canonical CSV. Timing is zeroed unless asked for, so
        the canonical output is byte-reproducible across runs."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(RESULT_COLUMNS)
            for r in self.rows:
                seconds = r.train_seconds if include_timing else 0.0
                writer.writerow([
                    _fmt(r.sigma), _fmt(r.kl), r.target_size, r.algorithm,
                    r.lambda_schedule, _fmt(r.lambda_resolved), r.seed,
                    _fmt(r.test_accuracy), _fmt(float(seconds)), r.status,
                ])

    @classmethod
    def from_csv(cls, path: str | Path) -> "SweepResult":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != RESULT_COLUMNS:
                raise ValueError(f"{path}: missing columns; expected header "
                                 f"{','.join(RESULT_COLUMNS)}")
            rows = []
            for rec in reader:
                rows.append(CellResult(
                    sigma=float(rec[0]),
                    kl=float(rec[1]),
                    target_size=int(rec[2]),
                    algorithm=rec[3],
                    lambda_schedule=rec[4],
                    lambda_resolved=float(rec[5]) if rec[5] else None,
                    seed=int(rec[6]),
                    test_accuracy=float(rec[7]) if rec[7] else None,
                    train_seconds=float(rec[8]) if rec[8] else 0.0,
                    status=rec[9],
                ))
        return cls(rows)


def _run_group(cfg: SweepConfig, target_model: NaiveBayesModel,
               sigma_idx: int, seed: int,
               progress: Callable[[str], None] | None,
               ) -> tuple[NaiveBayesModel, list[CellResult]]:
    """All cells sharing one (sigma, seed): one source model, one test set."""
    sigma = cfg.sigmas[sigma_idx]
    source_model = perturb_model(
        target_model,
        PerturbationConfig(sigma, cell_seed(seed, "perturb", sigma_idx)))
    kl = kl_factorized(source_model, target_model)
    source_data = sample(source_model, cfg.source_size,
                         cell_seed(seed, "source-data", sigma_idx))
    test_data = sample(target_model, cfg.test_size,
                       cell_seed(seed, "test-data", sigma_idx))
    width = source_model.one_hot_width
    net_spec = backbone(width, cfg.classes, cfg.gy_relu)

    def train_cfg(*keys) -> TrainConfig:
        return TrainConfig(lr=cfg.lr, momentum=cfg.momentum,
                           batch_size=cfg.batch_size, epochs=cfg.epochs,
                           seed=cell_seed(seed, "train", sigma_idx, *keys))

    source_net = None
    source_accuracy = None
    source_seconds = 0.0

    def get_source_net():
        nonlocal source_net, source_accuracy, source_seconds
        if source_net is None:
            started = time.perf_counter()
            source_net = train_source_baseline(source_data, net_spec,
                                               train_cfg("source"))
            source_seconds = time.perf_counter() - started
            source_accuracy = evaluate(source_net, test_data)
        return source_net

    rows: list[CellResult] = []
    for size_idx, size in enumerate(cfg.target_sizes):
        target_data = sample(target_model, size,
                             cell_seed(seed, "target-data", sigma_idx, size_idx))
        for algo in cfg.algorithms:
            schedules = (cfg.lambda_schedules
                         if algo in ADVERSARIAL_ALGORITHMS else (None,))
            for sched_text in schedules:
                row = CellResult(sigma=sigma, kl=kl, target_size=size,
                                 algorithm=algo,
                                 lambda_schedule=sched_text or "none",
                                 lambda_resolved=None, seed=seed,
                                 test_accuracy=None, train_seconds=0.0)
                try:
                    started = time.perf_counter()
                    if algo == "source":
                        get_source_net()
                        row.test_accuracy = source_accuracy
                        row.train_seconds = source_seconds
                    elif algo == "target":
                        net = train_target_baseline(
                            target_data, net_spec, train_cfg(size_idx, algo))
                        row.test_accuracy = evaluate(net, test_data)
                    elif algo in ("dann", "dann_target"):
                        schedule = LambdaSchedule.parse(sched_text)
                        supervised = algo == "dann_target"
                        model = train_dann(
                            source_data,
                            target_data if supervised else target_data.without_labels(),
                            train_cfg(size_idx, algo), schedule, kl=kl,
                            specs=DannSpecs.default(width, cfg.classes,
                                                    cfg.domain_hidden, cfg.gy_relu),
                            use_target_labels=supervised)
                        row.lambda_resolved = model.lambda_value
                        row.test_accuracy = evaluate(model, test_data)
                    elif algo == "mcd":
                        schedule = LambdaSchedule.parse(sched_text)
                        lam = resolve_lambda(schedule, kl)
                        model = train_mcd(
                            source_data, target_data.without_labels(),
                            train_cfg(size_idx, algo), lam=lam, n_c=cfg.mcd_n_c,
                            specs=McdSpecs.default(width, cfg.classes),
                            inference=cfg.mcd_inference)
                        row.lambda_resolved = lam
                        row.test_accuracy = evaluate(model, test_data)
                    else:
                        strategy = _FINETUNE_STRATEGIES[algo]
                        warm = get_source_net()
                        started = time.perf_counter()
                        net = fine_tune(warm, target_data, strategy,
                                        train_cfg(size_idx, algo))
                        row.test_accuracy = evaluate(net, test_data)
                    if algo != "source":
                        row.train_seconds = time.perf_counter() - started
                except Exception as exc:  # noqa: BLE001 - a failed cell must not kill the sweep
                    row.status = f"error: {exc}"
                    row.test_accuracy = None
                rows.append(row)
                if progress is not None:
                    progress(f"sigma={sigma:g} seed={seed} size={size} "
                             f"{algo} [{row.status}]")
    return source_model, rows


def run_sweep(cfg: SweepConfig, workers: int = 1,
              progress: Callable[[str], None] | None = None) -> SweepResult:
    """Execute every grid cell; output is identical for any worker count."""
    target_model = cfg.resolve_target_model()
    groups = [(sigma_idx, seed)
              for sigma_idx in range(len(cfg.sigmas))
              for seed in cfg.seeds]
    results: dict[tuple[int, int], tuple[NaiveBayesModel, list[CellResult]]] = {}
    if workers <= 1:
        for key in groups:
            results[key] = _run_group(cfg, target_model, key[0], key[1], progress)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {key: pool.submit(_run_group, cfg, target_model,
                                        key[0], key[1], progress)
                       for key in groups}
            for key, fut in futures.items():
                results[key] = fut.result()
    rows: list[CellResult] = []
    models: dict[tuple[int, int], NaiveBayesModel] = {}
    for key in groups:
        model, group_rows = results[key]
        models[key] = model
        rows.extend(group_rows)
    rows.sort(key=CellResult.sort_key)
    return SweepResult(rows, models)


def run_to_directory(cfg: SweepConfig, out_root: str | Path, workers: int = 1,
                     progress: Callable[[str], None] | None = None,
                     ) -> tuple[Path, SweepResult]:
    """Run a sweep and persist everything under ``out_root/run-<hash>``.

    Writes results.csv (canonical, byte-reproducible), timings.csv
    (measured wall seconds, diagnostic only), the target model, and one
    source-model JSON per (sigma, seed).
    """
    run_dir = Path(out_root) / f"run-{cfg.config_hash()}"
    run_dir.mkdir(parents=True, exist_ok=True)
    result = run_sweep(cfg, workers=workers, progress=progress)
    save_model(cfg.resolve_target_model(), run_dir / "target-model.json")
    for (sigma_idx, seed), model in result.source_models.items():
        save_model(model, run_dir / f"source-s{sigma_idx:02d}-seed{seed}.json")
    result.to_csv(run_dir / "results.csv")
    with open(run_dir / "timings.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sigma", "target_size", "algorithm", "lambda_schedule",
                         "seed", "train_seconds"])
        for r in result.rows:
            writer.writerow([_fmt(r.sigma), r.target_size, r.algorithm,
                             r.lambda_schedule, r.seed, _fmt(r.train_seconds)])
    return run_dir, result


def summarize(result: SweepResult, group_by: tuple[str, ...] = (
        "sigma", "target_size", "algorithm", "lambda_schedule")) -> list[dict]:
    """Mean and population std of accuracy (plus mean KL) per group.

    Only rows with status ``ok`` participate; groups come back sorted by
    their key, so the aggregation is invariant to input row order.
    """
    valid = {"sigma", "kl", "target_size", "algorithm", "lambda_schedule", "seed"}
    unknown = set(group_by) - valid
    if unknown:
        raise ValueError(f"cannot group by {sorted(unknown)}")
    ok_rows = [r for r in result.rows if r.status == "ok"]
    if not ok_rows:
        raise ValueError("no successful rows to summarize")
    groups: dict[tuple, list[CellResult]] = {}
    for row in ok_rows:
        key = tuple(getattr(row, col) for col in group_by)
        groups.setdefault(key, []).append(row)
    out = []
    for key in sorted(groups):
        members = groups[key]
        accs = np.array([r.test_accuracy for r in members], dtype=np.float64)
        kls = np.array([r.kl for r in members], dtype=np.float64)
        entry = dict(zip(group_by, key))
        entry.update({
            "n": len(members),
            "mean_kl": float(kls.mean()),
            "mean_accuracy": float(accs.mean()),
            "std_accuracy": float(accs.std()),
        })
        out.append(entry)
    return out
