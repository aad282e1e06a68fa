"""Config-driven experiment drivers.

Each ``run_*`` function takes an :class:`ExperimentConfig`, trains what it needs,
writes one CSV into the configured output directory and returns the rows it wrote.
Trials run concurrently up to ``threads``; every random stream is derived from
``(seed, trial)`` so the output bytes do not depend on the thread count.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__, landscape, net, optim
from . import sharpness as sharp
from .data import AugmentPolicy, Dataset, load_idx, synth_gaussian, synth_teacher
from .errors import ConfigError, FormatError, SpecError

EXPERIMENTS = ("baseline", "sharpness_table", "slice", "batch_sweep", "piggyback", "trajectory", "remedies",
               "perfmodel")
STRATEGIES = ("augment", "conservative", "adversarial")


# Configuration


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synthetic"
    m_train: int = 2000
    m_test: int = 2000
    dim: int = 60
    classes: int = 10
    separation: float = 3.0
    teacher_hidden: int = 32
    seed: int = 0
    image_shape: Optional[Tuple[int, int]] = None
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    limit_train: Optional[int] = None
    limit_test: Optional[int] = None


@dataclass(frozen=True)
class SharpnessConfig:
    epsilons: Tuple[float, ...] = sharp.DEFAULT_EPSILONS
    full_space: bool = True
    random_subspace: bool = True
    subspace_dim: int = sharp.DEFAULT_SUBSPACE_DIM
    max_outer: int = 10
    restarts: int = 0


@dataclass(frozen=True)
class PerfModelInputs:
    I_s: float
    I_l: float
    B_s: float
    B_l: float
    P: float
    f_s: float

    def __post_init__(self):
        if not self.f_s > 0:
            raise SpecError("parallel efficiency f_s must be positive")
        if self.f_s > 1:
            raise SpecError("parallel efficiency f_s must not exceed 1")
        if min(self.I_s, self.I_l, self.B_s, self.B_l, self.P) <= 0:
            raise SpecError("iteration counts, batch sizes and P must be positive")
        if not self.P < self.B_l:
            raise SpecError("the model assumes P < B_l")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    network: Optional[dict] = None
    hidden: Tuple[int, ...] = (64, 64)
    batchnorm: bool = True
    data: DataConfig = DataConfig()
    sb_batch: int = 256
    lb_fraction: float = 0.1
    optimizer: optim.OptimizerConfig = optim.OptimizerConfig()
    stop: optim.StopRule = optim.StopRule()
    trials: int = 5
    sharpness: SharpnessConfig = SharpnessConfig()
    out_dir: str = "out"
    solutions_dir: Optional[str] = None
    slice_points: int = 61
    slice_trial: int = 0
    sweep_batch_sizes: Tuple[int, ...] = (64, 256, 1024)
    sweep_epochs: int = 100
    piggyback_epochs: int = 30
    piggyback_warm_epochs: Optional[Tuple[int, ...]] = None
    trajectory_epochs: int = 30
    trajectory_stride: int = 1
    remedies: Tuple[str, ...] = STRATEGIES
    conservative_lambda: float = 1e-3
    conservative_inner_iters: int = 3
    adversarial_eta: float = 0.1
    augment: AugmentPolicy = AugmentPolicy()
    perfmodel: Optional[PerfModelInputs] = None
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def canonical_json(self) -> str:
        # where results are written does not change them, so out_dir is left out
        content = {k: v for k, v in self.raw.items() if k != "out_dir"}
        return json.dumps(content, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


def _section(obj: dict, key: str) -> dict:
    value = obj.get(key, {})
    if not isinstance(value, dict):
        raise ConfigError(f"'{key}' must be an object")
    return value


def _pick(section: dict, cls, name: str, **convert):
    known = set(cls.__dataclass_fields__)
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    kwargs = {}
    for key, value in section.items():
        kwargs[key] = convert[key](value) if key in convert else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from exc


def parse_config(obj: dict, seed: Optional[int] = None, out_dir: Optional[str] = None) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from the JSON object documented in the README."""
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    raw = json.loads(json.dumps(obj))
    if seed is not None:
        raw["seed"] = seed
    if out_dir is not None:
        raw["out_dir"] = str(out_dir)
    allowed = {"experiment", "seed", "network", "data", "regimes", "optimizer", "stop", "trials", "sharpness",
               "out_dir", "solutions_dir", "slice", "sweep", "piggyback", "trajectory", "remedies", "perfmodel"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")

    network = raw.get("network", {})
    if not isinstance(network, dict):
        raise ConfigError("'network' must be an object")
    spec_json, hidden, batchnorm = None, (64, 64), True
    if "layers" in network:
        spec_json = network
        try:
            net.NetworkSpec.from_json(network)
        except SpecError as exc:
            raise ConfigError(str(exc)) from exc
    else:
        hidden = tuple(int(h) for h in network.get("hidden", hidden))
        batchnorm = bool(network.get("batchnorm", True))

    data = _pick(_section(raw, "data"), DataConfig, "data",
                 image_shape=lambda v: tuple(int(x) for x in v) if v is not None else None)
    if data.kind not in ("synthetic", "teacher", "idx"):
        raise ConfigError(f"unknown data kind {data.kind!r}")
    if data.kind == "idx" and not all((data.train_images, data.train_labels, data.test_images, data.test_labels)):
        raise ConfigError("idx data needs train_images, train_labels, test_images and test_labels")

    regimes = _section(raw, "regimes")
    sb_batch = int(regimes.get("sb_batch", 256))
    lb_fraction = float(regimes.get("lb_fraction", 0.1))
    if not 0.0 < lb_fraction <= 1.0:
        raise ConfigError("lb_fraction must lie in (0, 1]")
    if sb_batch < 1:
        raise ConfigError("sb_batch must be positive")

    opt = _pick(_section(raw, "optimizer"), optim.OptimizerConfig, "optimizer")
    stop = _pick(_section(raw, "stop"), optim.StopRule, "stop")
    sharp_cfg = _pick(_section(raw, "sharpness"), SharpnessConfig, "sharpness",
                      epsilons=lambda v: tuple(float(e) for e in v))
    if not sharp_cfg.epsilons or any(not e > 0 for e in sharp_cfg.epsilons):
        raise ConfigError("epsilon values must be positive")

    trials = int(raw.get("trials", 5))
    if trials < 1:
        raise ConfigError("trials must be at least 1")

    sl = _section(raw, "slice")
    sw = _section(raw, "sweep")
    pb = _section(raw, "piggyback")
    tj = _section(raw, "trajectory")
    rm = _section(raw, "remedies")
    strategies = tuple(rm.get("strategies", STRATEGIES))
    if set(strategies) - set(STRATEGIES):
        raise ConfigError(f"unknown remedy strategies {sorted(set(strategies) - set(STRATEGIES))}")
    aug = _pick(rm.get("augment", {}), AugmentPolicy, "remedies.augment")

    perf = None
    if "perfmodel" in raw:
        try:
            perf = PerfModelInputs(**{k: float(v) for k, v in raw["perfmodel"].items()})
        except (TypeError, ValueError, SpecError) as exc:
            raise ConfigError(f"invalid 'perfmodel' section: {exc}") from exc

    warm = pb.get("warm_epochs")
    return ExperimentConfig(
        seed=int(raw.get("seed", 0)),
        network=spec_json,
        hidden=hidden,
        batchnorm=batchnorm,
        data=data,
        sb_batch=sb_batch,
        lb_fraction=lb_fraction,
        optimizer=opt,
        stop=stop,
        trials=trials,
        sharpness=sharp_cfg,
        out_dir=str(raw.get("out_dir", "out")),
        solutions_dir=raw.get("solutions_dir"),
        slice_points=int(sl.get("points", 61)),
        slice_trial=int(sl.get("trial", 0)),
        sweep_batch_sizes=tuple(int(b) for b in sw.get("batch_sizes", (64, 256, 1024))),
        sweep_epochs=int(sw.get("epochs", 100)),
        piggyback_epochs=int(pb.get("epochs", 30)),
        piggyback_warm_epochs=tuple(int(e) for e in warm) if warm is not None else None,
        trajectory_epochs=int(tj.get("epochs", 30)),
        trajectory_stride=int(tj.get("stride", 1)),
        remedies=strategies,
        conservative_lambda=float(rm.get("lambda", 1e-3)),
        conservative_inner_iters=int(rm.get("inner_iters", 3)),
        adversarial_eta=float(rm.get("eta", 0.1)),
        augment=aug,
        perfmodel=perf,
        raw=raw,
    )


def load_config(path, seed: Optional[int] = None, out_dir: Optional[str] = None) -> ExperimentConfig:
    try:
        obj = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(obj, seed, out_dir)


# Shared pieces


def load_data(cfg: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    d = cfg.data
    if d.kind == "synthetic":
        return synth_gaussian(d.m_train, d.m_test, d.dim, d.classes, d.separation, d.seed, d.image_shape)
    if d.kind == "teacher":
        return synth_teacher(d.m_train, d.m_test, d.dim, d.classes, d.teacher_hidden, d.seed, d.image_shape)
    train = load_idx(d.train_images, d.train_labels, d.classes)
    test = load_idx(d.test_images, d.test_labels, d.classes)
    if d.limit_train:
        train = train.subset(slice(0, d.limit_train))
    if d.limit_test:
        test = test.subset(slice(0, d.limit_test))
    return train, test


def build_spec(cfg: ExperimentConfig, train: Dataset) -> net.NetworkSpec:
    if cfg.network is not None:
        spec = net.NetworkSpec.from_json(cfg.network)
        if spec.input_dim != train.dim or spec.num_classes != train.num_classes:
            raise ConfigError("network dimensions do not match the dataset")
        return spec
    return net.mlp_spec(train.dim, cfg.hidden, train.num_classes, cfg.batchnorm)


@dataclass
class Context:
    cfg: ExperimentConfig
    train: Dataset
    test: Dataset
    spec: net.NetworkSpec
    threads: int = 1

    @property
    def m(self) -> int:
        return len(self.train)

    def lb_batch(self) -> int:
        return max(1, math.ceil(self.cfg.lb_fraction * self.m))

    def sampler(self, regime: str, trial: int, batch: Optional[int] = None) -> optim.BatchSampler:
        seed = self.cfg.seed + trial
        if regime == "SB":
            return optim.BatchSampler(self.m, min(self.cfg.sb_batch, self.m), optim.Strategy.EPOCH_SHUFFLE, seed)
        if regime == "LB":
            return optim.BatchSampler(self.m, self.lb_batch(), optim.Strategy.UNIFORM_WITHOUT_REPLACEMENT, seed)
        strategy = (optim.Strategy.EPOCH_SHUFFLE if batch <= self.cfg.sb_batch
                    else optim.Strategy.UNIFORM_WITHOUT_REPLACEMENT)
        return optim.BatchSampler(self.m, batch, strategy, seed)

    def init(self, trial: int) -> net.ParamVector:
        return net.init_params(self.spec, self.cfg.seed + trial)

    def train_regime(self, regime: str, trial: int, init: Optional[net.ParamVector] = None,
                     snapshot: bool = False, fixed_epochs: Optional[int] = None, batch: Optional[int] = None):
        return optim.train(self.spec, self.train, self.test, self.cfg.optimizer, self.sampler(regime, trial, batch),
                           self.cfg.stop, snapshot, init=init if init is not None else self.init(trial),
                           fixed_epochs=fixed_epochs)

    def subspaces(self, trial: int) -> List[sharp.SubspaceSpec]:
        out = []
        if self.cfg.sharpness.full_space:
            out.append(sharp.SubspaceSpec.full())
        if self.cfg.sharpness.random_subspace:
            n = net.build_layout(self.spec).n
            out.append(sharp.SubspaceSpec.random(n, min(self.cfg.sharpness.subspace_dim, n), self.cfg.seed + trial))
        return out

    def phi(self, params: net.ParamVector, eps: float, subspace: sharp.SubspaceSpec,
            trial: int = 0) -> sharp.SharpnessReport:
        f = sharp.network_oracle(self.spec, params, self.train)
        return sharp.sharpness(f, params.values, eps, subspace, self.cfg.sharpness.max_outer,
                               self.cfg.sharpness.restarts, restart_seed=self.cfg.seed + trial)


def make_context(cfg: ExperimentConfig, threads: int = 1) -> Context:
    train, test = load_data(cfg)
    try:
        spec = build_spec(cfg, train)
    except SpecError as exc:
        raise ConfigError(str(exc)) from exc
    return Context(cfg, train, test, spec, max(1, int(threads)))


def parallel_map(fn: Callable, items: Sequence, threads: int) -> list:
    """Ordered map; results are assembled in input order whatever the completion order."""
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


# CSV output


def fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        return repr(value)
    return str(value)


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence], cfg: Optional[ExperimentConfig],
              experiment: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    if cfg is not None:
        buf.write(f"# experiment={experiment} config_hash={cfg.config_hash()} seed={cfg.seed} "
                  f"version={__version__}\n")
    else:
        buf.write(f"# experiment={experiment} version={__version__}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    path.write_text(buf.getvalue())
    return path


def read_csv(path) -> Tuple[Dict[str, str], List[str], List[Dict[str, str]]]:
    """Returns (meta from the comment line, header, rows as dicts)."""
    lines = Path(path).read_text().splitlines()
    meta = {}
    if lines and lines[0].startswith("#"):
        for item in lines[0][1:].split():
            key, _, value = item.partition("=")
            meta[key] = value
        lines = lines[1:]
    reader = csv.DictReader(lines)
    return meta, list(reader.fieldnames or []), list(reader)


def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    values = [float(v) for v in values]
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, std


def _out(cfg: ExperimentConfig, name: str) -> Path:
    return Path(cfg.out_dir) / name


# Baseline


@dataclass
class Solution:
    regime: str
    trial: int
    init: net.ParamVector
    trace: optim.TrainTrace
    status: str = "ok"


BASELINE_HEADER = ("regime", "trial", "train_acc", "test_acc", "final_loss", "epochs", "status")


def _train_or_record(ctx: Context, regime: str, trial: int, init: net.ParamVector) -> Solution:
    """A diverged run is kept with its last finite iterate so the remaining trials still run."""
    try:
        return Solution(regime, trial, init, ctx.train_regime(regime, trial, init))
    except optim.TrainingDiverged as exc:
        p = exc.last_finite
        loss = net.loss_value(ctx.spec, p, ctx.train.features, ctx.train.labels)
        rec = optim.EpochRecord(exc.epoch, loss, net.accuracy(ctx.spec, p, ctx.train),
                                net.accuracy(ctx.spec, p, ctx.test))
        return Solution(regime, trial, init, optim.TrainTrace((rec,), p, exc.epoch, 0), "diverged")


def train_solutions(ctx: Context) -> List[Solution]:
    def job(trial):
        init = ctx.init(trial)
        return [_train_or_record(ctx, regime, trial, init) for regime in ("SB", "LB")]

    out = []
    for pair in parallel_map(job, list(range(ctx.cfg.trials)), ctx.threads):
        out.extend(pair)
    return out


def save_solutions(solutions: List[Solution], directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in solutions:
        optim.save_params(directory / f"{s.regime}_trial{s.trial}.mspv", s.trace.final)
        if s.regime == "SB":
            optim.save_params(directory / f"init_trial{s.trial}.mspv", s.init)


def load_solutions(ctx: Context, directory) -> List[Tuple[str, int, net.ParamVector, net.ParamVector]]:
    """(regime, trial, init, final) tuples read from snapshot files."""
    directory = Path(directory)
    out = []
    for trial in range(ctx.cfg.trials):
        init_path = directory / f"init_trial{trial}.mspv"
        for regime in ("SB", "LB"):
            path = directory / f"{regime}_trial{trial}.mspv"
            if not path.exists() or not init_path.exists():
                raise FileNotFoundError(f"missing solution snapshot {path if not path.exists() else init_path}")
            out.append((regime, trial, optim.load_params(init_path, ctx.spec), optim.load_params(path, ctx.spec)))
    return out


def baseline_rows(solutions: List[Solution]) -> List[list]:
    rows = []
    for s in solutions:
        r = s.trace.records[s.trace.best_epoch]
        rows.append([s.regime, s.trial, r.train_acc, r.test_acc, r.train_loss, s.trace.epochs_run, s.status])
    per_trial = list(rows)
    for stat in ("mean", "std"):
        for regime in ("SB", "LB"):
            sel = [row for row in per_trial if row[0] == regime]
            if not sel:
                continue
            cols = [mean_std([row[i] for row in sel])[0 if stat == "mean" else 1] for i in (2, 3, 4, 5)]
            rows.append([regime, stat] + cols + [""])
    return rows


def run_baseline(cfg: ExperimentConfig, threads: int = 1, ctx: Optional[Context] = None):
    ctx = ctx or make_context(cfg, threads)
    solutions = train_solutions(ctx)
    save_solutions(solutions, _out(cfg, "solutions"))
    rows = baseline_rows(solutions)
    write_csv(_out(cfg, "baseline.csv"), BASELINE_HEADER, rows, cfg, "baseline")
    return rows, solutions


# Sharpness tables

SHARPNESS_HEADER = ("tag", "regime", "trial", "epsilon", "subspace", "p", "phi", "f_at_x", "inner_iters",
                    "oracle_calls", "seed")


def _report_row(tag, regime, trial, rep: sharp.SharpnessReport) -> list:
    d = rep.diagnostics
    return [tag, regime, trial, rep.epsilon, rep.subspace, rep.p, rep.phi, rep.f_at_x,
            d.iterations if d else 0, d.oracle_calls if d else 0, rep.seed]


def sharpness_rows(ctx: Context, items: List[Tuple[str, int, net.ParamVector]], tag: str = "minimizer"):
    def job(item):
        regime, trial, params = item
        rows = []
        for sub in ctx.subspaces(trial):
            for eps in ctx.cfg.sharpness.epsilons:
                rows.append(_report_row(tag, regime, trial, ctx.phi(params, eps, sub, trial)))
        return rows

    rows = [r for chunk in parallel_map(job, items, ctx.threads) for r in chunk]
    summary = []
    for stat in ("mean", "std"):
        for regime in dict.fromkeys(r[1] for r in rows):
            for sub in dict.fromkeys(r[4] for r in rows):
                for eps in ctx.cfg.sharpness.epsilons:
                    sel = [r for r in rows if r[1] == regime and r[4] == sub and r[3] == eps]
                    if not sel:
                        continue
                    m, s = mean_std([r[6] for r in sel])
                    fm, fs = mean_std([r[7] for r in sel])
                    summary.append([stat, regime, stat, eps, sub, sel[0][5], m if stat == "mean" else s,
                                    fm if stat == "mean" else fs, "", "", ""])
    return rows + summary


def run_sharpness_table(cfg: ExperimentConfig, threads: int = 1, ctx: Optional[Context] = None,
                        solutions: Optional[List[Solution]] = None):
    ctx = ctx or make_context(cfg, threads)
    if solutions is not None:
        items = [(s.regime, s.trial, s.trace.final) for s in solutions]
    elif cfg.solutions_dir:
        items = [(regime, trial, final) for regime, trial, _, final in load_solutions(ctx, cfg.solutions_dir)]
    else:
        _, solutions = run_baseline(cfg, threads, ctx)
        items = [(s.regime, s.trial, s.trace.final) for s in solutions]
    rows = sharpness_rows(ctx, items)
    write_csv(_out(cfg, "sharpness.csv"), SHARPNESS_HEADER, rows, cfg, "sharpness_table")
    return rows


# Parametric slices

SLICE_HEADER = ("kind", "alpha", "train_loss", "test_loss", "train_acc", "test_acc")
DISTANCE_HEADER = ("trial", "d_sb", "d_lb", "ratio")


def run_slice(cfg: ExperimentConfig, threads: int = 1, ctx: Optional[Context] = None):
    ctx = ctx or make_context(cfg, threads)
    trial = cfg.slice_trial
    if not 0 <= trial < cfg.trials:
        raise ConfigError("slice.trial must index one of the trials")
    if cfg.solutions_dir:
        loaded = {(r, t): (i, f) for r, t, i, f in load_solutions(ctx, cfg.solutions_dir)}
        x0, x_s = loaded[("SB", trial)]
        x_l = loaded[("LB", trial)][1]
    else:
        x0 = ctx.init(trial)
        x_s = ctx.train_regime("SB", trial, x0).final
        x_l = ctx.train_regime("LB", trial, x0).final
    alphas = landscape.default_alphas(cfg.slice_points)
    rows = []
    for kind, fn in (("linear", landscape.linear_slice), ("curvilinear", landscape.curvilinear_slice)):
        for pt in fn(ctx.spec, x_s, x_l, ctx.train, ctx.test, alphas, ctx.threads):
            rows.append([kind, pt.alpha, pt.train_loss, pt.test_loss, pt.train_acc, pt.test_acc])
    write_csv(_out(cfg, "slice.csv"), SLICE_HEADER, rows, cfg, "slice")
    d_s, d_l, ratio = landscape.distance_ratio(x0, x_s, x_l)
    write_csv(_out(cfg, "distance.csv"), DISTANCE_HEADER, [[trial, d_s, d_l, ratio]], cfg, "distance")
    return rows


# Batch-size sweep


def _phi_columns(cfg: ExperimentConfig) -> List[str]:
    return [f"phi_{eps:g}" for eps in cfg.sharpness.epsilons]


def run_batch_sweep(cfg: ExperimentConfig, threads: int = 1, ctx: Optional[Context] = None):
    ctx = ctx or make_context(cfg, threads)
    sizes = sorted(set(cfg.sweep_batch_sizes))
    if not sizes or sizes[0] < 1 or sizes[-1] > ctx.m:
        raise ConfigError(f"sweep batch sizes must lie in [1, {ctx.m}]")
    full = sharp.SubspaceSpec.full()

    def job(batch):
        trace = ctx.train_regime("sweep", 0, fixed_epochs=cfg.sweep_epochs, batch=batch)
        x = trace.final
        return [batch, trace.records[-1].test_acc] + [ctx.phi(x, eps, full).phi for eps in cfg.sharpness.epsilons]

    rows = parallel_map(job, sizes, ctx.threads)
    write_csv(_out(cfg, "sweep.csv"), ["batch_size", "test_acc"] + _phi_columns(cfg), rows, cfg, "batch_sweep")
    return rows


# Piggybacking

PIGGYBACK_HEADER = ("trial", "warm_epochs", "sb_test_acc", "lb_test_acc", "lb_phi")


def run_piggyback(cfg: ExperimentConfig, threads: int = 1, ctx: Optional[Context] = None):
    """SB trained E epochs with snapshots; LB trained E epochs from each selected snapshot.

    ``lb_phi`` uses the first configured epsilon in full space.
    """
    ctx = ctx or make_context(cfg, threads)
    E = cfg.piggyback_epochs
    warm = sorted(set(cfg.piggyback_warm_epochs)) if cfg.piggyback_warm_epochs is not None else list(range(E + 1))
    if any(w < 0 or w > E for w in warm):
        raise ConfigError(f"warm_epochs must lie in [0, {E}]")
    eps = cfg.sharpness.epsilons[0]
    full = sharp.SubspaceSpec.full()

    def job(trial):
        sb = ctx.train_regime("SB", trial, snapshot=True, fixed_epochs=E)
        rows = []
        for w in warm:
            lb = ctx.train_regime("LB", trial, init=sb.snapshots[w], fixed_epochs=E)
            rows.append([trial, w, sb.records[w].test_acc, lb.records[-1].test_acc,
                         ctx.phi(lb.final, eps, full, trial).phi])
        return rows

    rows = [r for chunk in parallel_map(job, list(range(cfg.trials)), ctx.threads) for r in chunk]
    write_csv(_out(cfg, "piggyback.csv"), PIGGYBACK_HEADER, rows, cfg, "piggyback")
    return rows


# Sharpness along the training path

TRAJECTORY_HEADER = ("step", "regime", "full_train_loss", "phi")


def run_trajectory(cfg: ExperimentConfig, threads: int = 1, ctx: Optional[Context] = None):
    """Full-train loss and phi(eps_0, full space) every ``stride`` epochs of SB and LB runs from one init."""
    ctx = ctx or make_context(cfg, threads)
    eps = cfg.sharpness.epsilons[0]
    full = sharp.SubspaceSpec.full()
    stride = max(1, cfg.trajectory_stride)
    trial = 0
    init = ctx.init(trial)
    traces = {regime: ctx.train_regime(regime, trial, init, snapshot=True, fixed_epochs=cfg.trajectory_epochs)
              for regime in ("SB", "LB")}
    items = [(regime, e) for regime in ("SB", "LB") for e in range(0, cfg.trajectory_epochs + 1, stride)]

    def job(item):
        regime, e = item
        trace = traces[regime]
        return [e, regime, trace.records[e].train_loss, ctx.phi(trace.snapshots[e], eps, full, trial).phi]

    rows = parallel_map(job, items, ctx.threads)
    write_csv(_out(cfg, "trajectory.csv"), TRAJECTORY_HEADER, rows, cfg, "trajectory")
    return rows


# Remedies


def train_remedy(ctx: Context, strategy: str, trial: int, init: net.ParamVector) -> optim.TrainTrace:
    cfg = ctx.cfg
    sampler = ctx.sampler("LB", trial)
    if strategy == "conservative":
        return optim.conservative_train(ctx.spec, ctx.train, ctx.test, sampler, cfg.conservative_lambda,
                                        cfg.conservative_inner_iters, cfg.stop, optimizer=cfg.optimizer, init=init)
    if strategy == "augment":
        if ctx.train.image_shape is None:
            raise ConfigError("the augment strategy needs image-shaped data (set data.image_shape)")
        policy = AugmentPolicy(cfg.augment.horizontal_flip, cfg.augment.max_rotation_degrees,
                               cfg.augment.max_translation_fraction, cfg.augment.seed + cfg.seed + trial)
        hook = optim.augment_hook(ctx.train, policy)
    elif strategy == "adversarial":
        hook = optim.adversarial_hook(ctx.spec, ctx.train, cfg.adversarial_eta, cfg.seed + trial)
    else:
        raise ConfigError(f"unknown strategy {strategy!r}")
    return optim.train(ctx.spec, ctx.train, ctx.test, cfg.optimizer, sampler, cfg.stop, init=init, data_hook=hook)


def run_remedies(cfg: ExperimentConfig, threads: int = 1, ctx: Optional[Context] = None):
    ctx = ctx or make_context(cfg, threads)
    full = sharp.SubspaceSpec.full()
    strategies = ("sb_baseline", "lb_baseline") + tuple(cfg.remedies)

    def job(trial):
        init = ctx.init(trial)
        rows = []
        for strategy in strategies:
            if strategy == "sb_baseline":
                trace = ctx.train_regime("SB", trial, init)
            elif strategy == "lb_baseline":
                trace = ctx.train_regime("LB", trial, init)
            else:
                trace = train_remedy(ctx, strategy, trial, init)
            x = trace.final
            rows.append([strategy, trial, trace.records[trace.best_epoch].test_acc]
                        + [ctx.phi(x, eps, full, trial).phi for eps in cfg.sharpness.epsilons])
        return rows

    rows = [r for chunk in parallel_map(job, list(range(cfg.trials)), ctx.threads) for r in chunk]
    write_csv(_out(cfg, "remedies.csv"), ["strategy", "trial", "test_acc"] + _phi_columns(cfg), rows, cfg,
              "remedies")
    return rows


# Performance model


def perf_speedup_bound(inputs: PerfModelInputs) -> Tuple[float, bool]:
    """Largest iteration ratio I_l / I_s for which the large-batch run finishes first.

    LB wins when I_l B_l / P < I_s B_s / (P f_s), i.e. I_l / I_s < B_s / (f_s B_l).
    """
    bound = inputs.B_s / (inputs.f_s * inputs.B_l)
    # compare in cross-multiplied form so equality is detected exactly
    lb_faster = inputs.I_l * inputs.f_s * inputs.B_l < inputs.I_s * inputs.B_s
    return bound, bool(lb_faster)


def run_perfmodel(cfg: ExperimentConfig, threads: int = 1):
    if cfg.perfmodel is None:
        raise ConfigError("perfmodel experiment needs a 'perfmodel' section")
    p = cfg.perfmodel
    bound, faster = perf_speedup_bound(p)
    rows = [[p.I_s, p.I_l, p.B_s, p.B_l, p.P, p.f_s, p.I_l / p.I_s, bound, faster]]
    write_csv(_out(cfg, "perfmodel.csv"), ("I_s", "I_l", "B_s", "B_l", "P", "f_s", "iteration_ratio", "bound",
                                           "lb_faster"), rows, cfg, "perfmodel")
    return rows
