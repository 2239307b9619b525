"""Hyperparameter search, multi-seed comparison tables and the gamma sweep.

Every training run is described by a small picklable job dict and executed by
``run_job``; jobs can be dispatched to a process pool and their results are
always consumed in submission order, so output files do not depend on the
number of workers.
"""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from . import datagen
from . import numcore as nc
from .evaluate import DosageGrid, evaluate
from .models import DoseResponseNet, ModelConfig, fit_gps
from .objectives import ObjectiveSpec
from .trainer import TrainConfig, TrainingDiverged, train

log = logging.getLogger(__name__)

ARCHS = ("mlp", "drnet", "vcnet")
VARIANTS = ("", "ps", "tr", "hsic", "wass")
DATASETS = ("synthetic", "ihdp", "news")
DEFAULT_N = {"synthetic": 500, "ihdp": 747, "news": 3000}
TUNING_SPLIT = (0.64, 0.16, 0.2)  # 0.8/0.2 train/test with validation carved from the train part
TABLE_SPLIT = (0.6, 0.2, 0.2)
RNG_FAMILY = "numpy.random.Philox"
PROPENSITY_BINS = 10

DEFAULT_GRIDS = {
    "lr": [0.01, 0.005, 0.001, 0.0005, 0.0001, 0.00005],
    "gamma": [10 ** (i / 6) for i in range(-18, 11)],
    "alpha": [0.5, 1.0],
    "tr_lr": [0.001, 0.0001],
    "beta": [20.0, 10.0, 5.0],  # divided by sqrt(n_train)
    "tr_knots": [5, 10, 20],
}
METHOD_HPARAMS = {
    "": ("lr",),
    "ps": ("lr", "alpha"),
    "tr": ("lr", "alpha", "tr_lr", "beta", "tr_knots"),
    "hsic": ("lr", "gamma"),
    "wass": ("lr", "gamma"),
}


class ExperimentError(RuntimeError):
    pass


def parse_method(method: str):
    """'vcnet-hsic' -> ('vcnet', 'hsic'); 'drnet' -> ('drnet', ''); 'gps' -> ('gps', '')."""
    if method == "gps":
        return "gps", ""
    arch, _, variant = method.partition("-")
    if arch not in ARCHS or variant not in VARIANTS:
        raise ValueError(f"unknown method {method!r}")
    if arch == "mlp" and variant:
        raise ValueError(f"{method!r}: the MLP baseline has no representation, only plain 'mlp' is supported")
    return arch, variant


def build(method: str, n_covariates: int, hp: dict, n_train: int):
    """Model and objective for a method under hyperparameters ``hp``."""
    arch, variant = parse_method(method)
    if arch == "gps":
        raise ValueError("gps is not a neural method")
    extra = {}
    if variant in ("ps", "tr"):
        extra["propensity_bins"] = PROPENSITY_BINS
    if variant == "tr":
        extra["tr_knots"] = int(hp["tr_knots"])
    model = DoseResponseNet(ModelConfig(arch, n_covariates, **extra))
    if variant == "":
        spec = ObjectiveSpec()
    elif variant == "ps":
        spec = ObjectiveSpec("ps", alpha=hp["alpha"])
    elif variant == "tr":
        spec = ObjectiveSpec("tr", alpha=hp["alpha"], beta=hp["beta"] / math.sqrt(n_train),
                             tr_knots=int(hp["tr_knots"]), tr_lr=hp["tr_lr"])
    else:
        kind = "ipm-hsic" if variant == "hsic" else "ipm-wasserstein"
        spec = ObjectiveSpec(kind, gamma=hp["gamma"])
    return model, spec


def method_grid(method: str, grids: Optional[dict] = None) -> List[dict]:
    """Cartesian product of the grids relevant to ``method``."""
    grids = {**DEFAULT_GRIDS, **(grids or {})}
    arch, variant = parse_method(method)
    if arch == "gps":
        return [{}]
    keys = METHOD_HPARAMS[variant]
    for k in keys:
        if not grids[k]:
            raise ValueError(f"grid {k!r} is empty")
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grids[k] for k in keys))]


# -- datasets -----------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSpec:
    name: str = "synthetic"
    n: Optional[int] = None
    covariates: str = "surrogate"  # or a CSV path (IHDP: 25 columns, News: word counts)
    vocab: int = 50

    def __post_init__(self):
        if self.name not in DATASETS:
            raise ValueError(f"unknown dataset {self.name!r}; expected one of {DATASETS}")
        if self.n is not None and self.n < 5:
            raise ValueError("dataset size must be >= 5 to split three ways")

    @property
    def size(self) -> int:
        if self.name == "ihdp":
            return len(_ihdp_covariates(self.covariates))
        return self.n or DEFAULT_N[self.name]

    @property
    def source(self) -> str:
        if self.name == "synthetic":
            return "generated"
        return "surrogate" if self.covariates == "surrogate" else f"csv:{self.covariates}"

    def generate(self, seed: int) -> datagen.Dataset:
        if self.name == "synthetic":
            return datagen.gen_synthetic(self.size, seed)
        if self.name == "ihdp":
            src = "surrogate" if self.covariates == "surrogate" else "csv"
            return datagen.gen_ihdp_continuous(_ihdp_covariates(self.covariates), seed, src)
        cov = None if self.covariates == "surrogate" else _csv_values(self.covariates)
        n = len(cov) if cov is not None else self.size
        vocab = cov.shape[1] if cov is not None else self.vocab
        return datagen.gen_news(n, vocab, seed, covariates=cov)


@lru_cache(maxsize=4)
def _csv_values(path: str) -> np.ndarray:
    return datagen.load_covariates_csv(path).values


@lru_cache(maxsize=4)
def _ihdp_covariates(source: str) -> np.ndarray:
    if source == "surrogate":
        return datagen.ihdp_surrogate_covariates()
    return datagen.minmax_scale_continuous(_csv_values(source))


# -- single runs ----------------------------------------------------------------

RUN_COLUMNS = ("dataset", "method", "seed", "n", "status", "mise", "sqrt_mise", "amse", "sqrt_amse",
               "pairwise", "epochs", "best_epoch", "hparams", "error")


@dataclass
class RunRecord:
    dataset: str
    method: str
    seed: int
    n: int
    status: str  # "ok" or "failed"
    mise: float = math.nan
    amse: float = math.nan
    pairwise: float = math.nan
    epochs: int = 0
    best_epoch: int = 0
    hparams: dict = field(default_factory=dict)
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def row(self) -> list:
        f = lambda v: repr(float(v)) if self.ok else ""  # noqa: E731
        return [self.dataset, self.method, self.seed, self.n, self.status,
                f(self.mise), f(math.sqrt(self.mise) if self.ok else 0), f(self.amse),
                f(math.sqrt(self.amse) if self.ok else 0), f(self.pairwise),
                self.epochs, self.best_epoch, json.dumps(self.hparams, sort_keys=True), self.error]

    @classmethod
    def from_row(cls, row: dict) -> "RunRecord":
        ok = row["status"] == "ok"
        num = lambda k: float(row[k]) if ok else math.nan  # noqa: E731
        return cls(row["dataset"], row["method"], int(row["seed"]), int(row["n"]), row["status"],
                   num("mise"), num("amse"), num("pairwise"), int(row["epochs"]), int(row["best_epoch"]),
                   json.loads(row["hparams"]), row["error"])


def make_job(dataset: DatasetSpec, method: str, seed: int, hp: dict, train_cfg: TrainConfig,
             ratios=TABLE_SPLIT, grid_size: int = 65, pair=(0.25, 0.75)) -> dict:
    return dict(dataset=dataset, method=method, seed=seed, hp=dict(hp), train=train_cfg,
                ratios=tuple(ratios), grid_size=grid_size, pair=tuple(pair))


def run_job(job: dict, return_model: bool = False):
    """Generate, split, train and evaluate one (method, seed). Failures become records."""
    ds_spec: DatasetSpec = job["dataset"]
    method, seed, hp = job["method"], job["seed"], job["hp"]
    data = ds_spec.generate(seed)
    parts = datagen.split(data, datagen.SplitSpec(job["ratios"], seed))
    tr, va, te = parts[0], parts[1], parts[-1]
    rec = RunRecord(ds_spec.name, method, seed, len(data), "ok", hparams=hp)
    model = result = None
    try:
        if method == "gps":
            model = fit_gps(tr.X, tr.s, tr.y)
            predict = lambda X, s, w: model.predict(X, s)  # noqa: E731
        else:
            model, spec = build(method, data.X.shape[1], hp, len(tr))
            cfg = TrainConfig(**{**asdict(job["train"]), "lr": hp.get("lr", job["train"].lr), "seed": seed})
            result = train(model, spec, tr, va, cfg)
            rec.epochs, rec.best_epoch = result.epochs_run, result.best_epoch
            predict = lambda X, s, w: model.predict(result.params, X, s, w)  # noqa: E731
        report = evaluate(predict, te.X, data.oracle, DosageGrid.uniform(job["grid_size"]), pairs=(job["pair"],))
        if not report.amse <= report.mise:
            raise ExperimentError(f"AMSE {report.amse!r} exceeds MISE {report.mise!r}")
        rec.mise, rec.amse = report.mise, report.amse
        rec.pairwise = next(iter(report.pairwise.values()))
        log.info("%s %s seed %d %s: MISE %.4g after %d epochs", ds_spec.name, method, seed, hp, rec.mise, rec.epochs)
    except (TrainingDiverged, nc.NumericError, np.linalg.LinAlgError, ValueError) as exc:
        rec.status, rec.error = "failed", f"{type(exc).__name__}: {exc}"
        log.warning("%s seed %d failed: %s", method, seed, rec.error)
    if return_model:
        return rec, model, result, data, te
    return rec


def run_jobs(jobs: Sequence[dict], workers: int = 1) -> List[RunRecord]:
    """Execute jobs, in parallel when ``workers > 1``; results keep job order."""
    if workers <= 1 or len(jobs) <= 1:
        return [run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_job, jobs))


# -- configuration ----------------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Everything that determines a table or sweep; round-trips through JSON."""

    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    seeds: List[int] = field(default_factory=lambda: list(range(10)))
    methods: List[str] = field(default_factory=lambda: ["mlp", "drnet", "vcnet", "vcnet-hsic"])
    grids: Dict[str, list] = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_GRIDS.items()})
    hparams: Dict[str, dict] = field(default_factory=dict)  # fixed settings skip tuning
    train: TrainConfig = field(default_factory=TrainConfig)
    tuning_seed: int = 10_000
    grid_size: int = 65
    pair: tuple = (0.25, 0.75)
    workers: int = 1
    out_dir: str = "results"

    def __post_init__(self):
        self.grids = {**{k: list(v) for k, v in DEFAULT_GRIDS.items()}, **self.grids}
        if not self.seeds:
            raise ValueError("seed list must be nonempty")
        if not self.methods:
            raise ValueError("method list must be nonempty")
        for m in self.methods:
            parse_method(m)
            method_grid(m, self.grids)
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pair"] = list(self.pair)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "dataset" in d:
            d["dataset"] = DatasetSpec(**d["dataset"])
        if "train" in d:
            d["train"] = TrainConfig(**d["train"])
        if "pair" in d:
            d["pair"] = tuple(d["pair"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def config_hash(self) -> str:
        doc = self.to_dict()
        doc.pop("workers")  # does not affect results
        doc.pop("out_dir")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


# -- grid search ------------------------------------------------------------------

@dataclass
class TuningResult:
    method: str
    best: dict
    trace: List[RunRecord]

    @property
    def best_mise(self) -> float:
        return min(r.mise for r in self.trace if r.ok)


def grid_search(dataset: DatasetSpec, method: str, grids: Optional[dict] = None,
                train_cfg: TrainConfig = TrainConfig(), tuning_seed: int = 10_000,
                workers: int = 1, grid_size: int = 65) -> TuningResult:
    """Train every grid cell on one tuning dataset; keep the lowest test MISE."""
    cells = method_grid(method, grids)
    jobs = [make_job(dataset, method, tuning_seed, hp, train_cfg, TUNING_SPLIT, grid_size) for hp in cells]
    trace = run_jobs(jobs, workers)
    ok = [r for r in trace if r.ok]
    if not ok:
        msgs = "; ".join(f"{r.hparams}: {r.error}" for r in trace)
        raise ExperimentError(f"grid search for {method}: every cell failed ({msgs})")
    best = min(ok, key=lambda r: r.mise)  # first minimum wins ties
    log.info("tuned %s on %s: %s (MISE %.4g over %d cells)", method, dataset.name, best.hparams, best.mise, len(trace))
    return TuningResult(method, dict(best.hparams), trace)


def tune_all(cfg: ExperimentConfig) -> Dict[str, TuningResult]:
    out = {}
    for m in cfg.methods:
        if m in cfg.hparams:
            continue
        out[m] = grid_search(cfg.dataset, m, cfg.grids, cfg.train, cfg.tuning_seed, cfg.workers, cfg.grid_size)
    return out


# -- tables -----------------------------------------------------------------------

TABLE_COLUMNS = ("dataset", "method", "n_ok", "n_failed", "mean_sqrt_mise", "std_sqrt_mise",
                 "mean_sqrt_amse", "std_sqrt_amse", "mean_pairwise")


@dataclass
class TableRow:
    dataset: str
    method: str
    n_ok: int
    n_failed: int
    mean_sqrt_mise: float
    std_sqrt_mise: float
    mean_sqrt_amse: float
    std_sqrt_amse: float
    mean_pairwise: float

    def row(self) -> list:
        return [self.dataset, self.method, self.n_ok, self.n_failed] + [
            repr(float(getattr(self, c))) for c in TABLE_COLUMNS[4:]]


@dataclass
class ResultTable:
    rows: List[TableRow]
    runs: List[RunRecord]
    hparams: Dict[str, dict]
    tuning: Dict[str, TuningResult] = field(default_factory=dict)

    def __getitem__(self, method: str) -> TableRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)


def aggregate(runs: Sequence[RunRecord], methods: Sequence[str]) -> List[TableRow]:
    """Mean and (population) standard deviation over successful seeds."""
    rows = []
    for m in methods:
        mine = [r for r in runs if r.method == m]
        ok = [r for r in mine if r.ok]
        if ok:
            sm = np.sqrt([r.mise for r in ok])
            sa = np.sqrt([r.amse for r in ok])
            stats = (float(sm.mean()), float(sm.std()), float(sa.mean()), float(sa.std()),
                     float(np.mean([r.pairwise for r in ok])))
        else:
            stats = (math.nan,) * 5
        rows.append(TableRow(mine[0].dataset if mine else "", m, len(ok), len(mine) - len(ok), *stats))
    return rows


def write_runs(path, runs: Sequence[RunRecord], append: bool = False):
    path = Path(path)
    header = not (append and path.exists() and path.stat().st_size > 0)
    with open(path, "a" if append else "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        if header:
            out.writerow(RUN_COLUMNS)
        for r in runs:
            out.writerow(r.row())


def read_runs(path) -> List[RunRecord]:
    with open(path, newline="") as fh:
        return [RunRecord.from_row(row) for row in csv.DictReader(fh)]


def write_table(path, rows: Sequence[TableRow]):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(TABLE_COLUMNS)
        for r in rows:
            out.writerow(r.row())


def write_manifest(path, cfg: ExperimentConfig, hparams: dict, runs: Sequence[RunRecord], files: Sequence[str]):
    doc = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "version": __version__,
        "numpy": np.__version__,
        "rng_family": RNG_FAMILY,
        "covariate_source": cfg.dataset.source,
        "hparams": hparams,
        "runs": len(runs),
        "failed": [{"method": r.method, "seed": r.seed, "error": r.error} for r in runs if not r.ok],
        "files": list(files),
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def run_table(cfg: ExperimentConfig, out_dir=None, persist: bool = True, figures: bool = True) -> ResultTable:
    """Tune (unless fixed), replicate over seeds and persist runs, table and manifest."""
    tuning = tune_all(cfg)
    hparams = {m: dict(cfg.hparams[m]) if m in cfg.hparams else tuning[m].best for m in cfg.methods}
    jobs = [make_job(cfg.dataset, m, seed, hparams[m], cfg.train, TABLE_SPLIT, cfg.grid_size, cfg.pair)
            for seed in cfg.seeds for m in cfg.methods]
    runs = run_jobs(jobs, cfg.workers)
    table = ResultTable(aggregate(runs, cfg.methods), runs, hparams, tuning)
    if persist:
        out = Path(out_dir or cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = ["runs.csv", "table.csv", "manifest.json"]
        write_runs(out / "runs.csv", runs)
        write_table(out / "table.csv", table.rows)
        if tuning:
            write_runs(out / "tuning.csv", [r for t in tuning.values() for r in t.trace])
            files.append("tuning.csv")
        if figures:
            from .plotting import plot_table
            plot_table(table.rows, out / "table.png")
            files.append("table.png")
        write_manifest(out / "manifest.json", cfg, hparams, runs, files)
    return table


# -- gamma sweep ------------------------------------------------------------------

SWEEP_COLUMNS = ("gamma", "n_ok", "n_failed", "mean_mise", "std_mise", "relative_mise")


@dataclass
class SweepResult:
    gammas: List[float]
    mean_mise: List[float]
    std_mise: List[float]
    relative: List[float]
    n_ok: List[int]
    runs: List[RunRecord]
    lr: float

    @property
    def best_relative(self) -> float:
        return min(r for g, r in zip(self.gammas, self.relative) if g > 0)

    def rows(self) -> list:
        return [[repr(float(g)), k, len(self.runs) // len(self.gammas) - k, repr(m), repr(s), repr(r)]
                for g, k, m, s, r in zip(self.gammas, self.n_ok, self.mean_mise, self.std_mise, self.relative)]


def gamma_sweep(dataset: DatasetSpec, gammas: Sequence[float], seeds: Sequence[int], lr: float,
                train_cfg: TrainConfig = TrainConfig(), method: str = "vcnet-hsic", workers: int = 1,
                grid_size: int = 65) -> SweepResult:
    """Mean MISE per gamma over seeds, relative to the gamma = 0 run."""
    gammas = [float(g) for g in gammas]
    if 0.0 not in gammas:
        raise ValueError("gamma list must include 0 (the reference point)")
    if not seeds:
        raise ValueError("seed list must be nonempty")
    jobs = [make_job(dataset, method, seed, {"lr": lr, "gamma": g}, train_cfg, TABLE_SPLIT, grid_size)
            for g in gammas for seed in seeds]
    runs = run_jobs(jobs, workers)
    means, stds, oks = [], [], []
    for i, _ in enumerate(gammas):
        chunk = [r for r in runs[i * len(seeds):(i + 1) * len(seeds)] if r.ok]
        vals = np.array([r.mise for r in chunk])
        means.append(float(vals.mean()) if len(vals) else math.nan)
        stds.append(float(vals.std()) if len(vals) else math.nan)
        oks.append(len(chunk))
    ref = means[gammas.index(0.0)]
    if not ref > 0:
        raise ExperimentError("reference gamma = 0 runs all failed or gave zero MISE")
    rel = [m / ref for m in means]
    return SweepResult(gammas, means, stds, rel, oks, runs, lr)


def write_sweep(path, result: SweepResult):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(SWEEP_COLUMNS)
        out.writerows(result.rows())
