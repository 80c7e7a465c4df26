"""
Experiment harness: configuration files, solver dispatch, stopping rules, run logs and
seeded replication summaries.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from dotenv import dotenv_values

from . import datasets
from .dss import DssControl, DssRmtr, PAIRS_OVERLAP, PAIRS_SAMPLED
from .exceptions import ConfigurationError, PropagationDiverged, TrainingError
from .hierarchy import build_hierarchy
from .ledger import WorkLedger
from .resnet import NetworkConfig, NetworkObjective, accuracy, initialize_params
from .rmtr import CycleConfig
from .serializers import ExperimentConfigSerializer, flatten_errors
from .trust_region import CAUCHY_POINT, LSR1, TrustRegionState

logger = logging.getLogger(__name__)

RUN_SCHEMA = 'mltr.run/1'

CONVERGED = 'converged'
BUDGET = 'budget'
EPOCH_LIMIT = 'epoch_limit'
PLATEAU = 'plateau'
DIVERGED = 'diverged'
ERROR = 'error'
FAILURE_REASONS = (DIVERGED, ERROR)

SOLVER_LABELS = {
    'TR': 'TR',
    'RMTR_V': 'RMTR-V',
    'RMTR_F': 'RMTR-F',
    'DSS_TR': 'DSS-TR',
    'DSS_RMTR': 'DSS-RMTR',
}
# multilevel solver -> its single-level counterpart
SINGLE_LEVEL = {'RMTR_V': 'TR', 'RMTR_F': 'TR', 'DSS_RMTR': 'DSS_TR'}
MULTILEVEL_SOLVERS = ('RMTR_V', 'RMTR_F', 'DSS_RMTR')
STOCHASTIC_SOLVERS = ('DSS_TR', 'DSS_RMTR')
FCYCLE_SOLVERS = ('RMTR_F', 'DSS_RMTR')
# secant pairs kept when sampling.memory_size is unset: M0 = 1 for mini-batch runs,
# which grows with the mini-batch size, and a fixed memory for full-batch runs
STOCHASTIC_MEMORY_SIZE = 1
DETERMINISTIC_MEMORY_SIZE = 5

SUMMARY_COLUMNS = [
    'label', 'levels', 'runs', 'failures', 'work_median', 'work_mean', 'work_std', 'work_rel_std_pct',
    'train_accuracy_mean', 'val_accuracy_mean', 'train_loss_median',
]


@dataclass(frozen=True)
class DatasetSpec:
    generator: str = 'smiley'
    n: int = 7000
    seed: int = 0
    n_train: int = 5000
    csv_path: str = ''
    standardize: bool = True
    standardize_targets: bool = False


@dataclass(frozen=True)
class NetworkSpec:
    width: int = 10
    K: int = 7
    T: float = 1.0
    activation: str = 'tanh'
    beta1: float = 1e-4
    beta2: float = 1e-4
    levels: int = 1
    refinement_rule: str = 'interval_doubling'


@dataclass(frozen=True)
class SolverSpec:
    solver: str = 'TR'
    hessian: str = 'LSR1_overlap'
    mu1: int = 1
    mu2: int = 1
    mu_coarse: int = 1
    cycles_per_level: int = 100
    level_gtol: float = 1e-2
    coherence: str = 'assert'


@dataclass(frozen=True)
class ControlSpec:
    eta1: float = 0.1
    eta2: float = 0.75
    gamma1: float = 0.5
    gamma2: float = 2.0
    delta0: float = 1.0
    delta_max: float = 100.0
    zeta1: float = 0.1
    zeta2: float = 0.0
    omega: float = 2.0


@dataclass(frozen=True)
class SamplingSpec:
    mbs0: int = None
    overlap: float = 0.2
    global_period: int = 1
    memory_size: int = None


@dataclass(frozen=True)
class StoppingSpec:
    accuracy: float = 0.98
    work_max: float = None
    epoch_max: int = 500
    plateau_epochs: int = 0


@dataclass(frozen=True)
class ReplicationSpec:
    seed: int = 1
    seeds: tuple = ()


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    solver: SolverSpec = field(default_factory=SolverSpec)
    control: ControlSpec = field(default_factory=ControlSpec)
    sampling: SamplingSpec = field(default_factory=SamplingSpec)
    stopping: StoppingSpec = field(default_factory=StoppingSpec)
    replication: ReplicationSpec = field(default_factory=ReplicationSpec)

    @classmethod
    def from_dict(cls, data):
        sections = {}
        for section in fields(cls):
            spec_class = section.default_factory
            values = dict(data[section.name])
            sections[section.name] = spec_class(**values)
        dataset = sections['dataset']
        if dataset.csv_path is None:
            sections['dataset'] = DatasetSpec(**{**asdict(dataset), 'csv_path': ''})
        return cls(**sections)

    def to_flat(self):
        """{'section.field': value} with JSON-friendly values; seeds as a comma list."""
        flat = {}
        for section in fields(self):
            for key, value in asdict(getattr(self, section.name)).items():
                if isinstance(value, (tuple, list)):
                    value = ','.join(str(v) for v in value)
                flat[f"{section.name}.{key}"] = value
        return flat


def unflatten(flat):
    """{'network.width': '10'} -> {'network': {'width': '10'}}; empty values become None."""
    nested = {}
    errors = {}
    for key, value in flat.items():
        section, dot, name = key.partition('.')
        if not dot or not name:
            errors[key] = ['Keys must have the form section.field.']
            continue
        nested.setdefault(section, {})[name] = None if value == '' else value
    if errors:
        raise ConfigurationError(errors)
    return nested


def parse_config(mapping):
    """Validate a nested section mapping into an ExperimentConfig."""
    serializer = ExperimentConfigSerializer(data=mapping)
    if not serializer.is_valid():
        raise ConfigurationError(flatten_errors(serializer.errors))
    return ExperimentConfig.from_dict(serializer.validated_data)


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigurationError({'config': [f"File not found: {path}"]})
    config = parse_config(unflatten(dotenv_values(path)))
    logger.debug(f"Loaded configuration from {path}")
    return config


def _format_value(value):
    if value is None:
        return ''
    if isinstance(value, bool):
        return 'true' if value else 'false'
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(config):
    """The effective configuration as ``section.field=value`` lines, readable by ``load_config``."""
    return ''.join(f"{key}={_format_value(value)}\n" for key, value in config.to_flat().items())


def apply_overrides(config, seed=None, solver=None, levels=None, hessian=None):
    """Command-line overrides on top of a loaded config; the result is validated again."""
    flat = config.to_flat()
    overrides = {
        'replication.seed': seed,
        'solver.solver': solver,
        'network.levels': levels,
        'solver.hessian': hessian,
    }
    flat.update({key: value for key, value in overrides.items() if value is not None})
    nested = {}
    for key, value in flat.items():
        section, _, name = key.partition('.')
        nested.setdefault(section, {})[name] = value
    return parse_config(nested)


def solver_label(solver, L):
    """Display name of a solver; multilevel solvers on one level are their single-level method."""
    if L == 1 and solver in SINGLE_LEVEL:
        solver = SINGLE_LEVEL[solver]
    return SOLVER_LABELS[solver]


def build_dataset(spec):
    """Generate (or import) the dataset, split it and optionally standardize it."""
    if spec.csv_path:
        dataset = datasets.import_csv(spec.csv_path)
        if spec.n_train > len(dataset):
            raise ConfigurationError({
                'dataset.n_train': [f"Training split {spec.n_train} exceeds the {len(dataset)} CSV samples."]
            })
    else:
        dataset = datasets.generate(spec.generator, spec.n, spec.seed)
    dataset = datasets.split(dataset, spec.n_train, spec.seed)
    if spec.standardize:
        dataset = datasets.standardize(dataset, targets=spec.standardize_targets)
    return dataset


def _network_config(dataset, spec):
    hypothesis, loss_kind = ('softmax', 'cross_entropy')
    if dataset.task == 'regression':
        hypothesis, loss_kind = ('identity', 'least_squares')
    try:
        return NetworkConfig(
            n_in=dataset.n_in, n_out=dataset.n_out, width=spec.width, K=spec.K, T=spec.T,
            activation=spec.activation, hypothesis=hypothesis, loss_kind=loss_kind,
            beta1=spec.beta1, beta2=spec.beta2,
        )
    except ConfigurationError as exc:
        raise ConfigurationError({f"network.{key}": messages for key, messages in exc.errors.items()}) from exc


def _finite(value):
    if value is None:
        return None
    value = float(value)
    return value if np.isfinite(value) else None


@dataclass
class RunRecord:
    header: dict
    rows: list
    summary: dict
    wall_time: float
    ledger: WorkLedger = None

    @property
    def stop_reason(self):
        return self.summary['stop_reason']

    def log_lines(self):
        """JSON Lines: header, one row per epoch or cycle, final summary. No wall-clock values."""
        objects = [self.header] + self.rows + [self.summary]
        return [json.dumps(obj, sort_keys=True) for obj in objects]

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / 'run.jsonl'
        log_path.write_text('\n'.join(self.log_lines()) + '\n', encoding='utf-8')
        summary = {
            **self.summary,
            'wall_time': self.wall_time,
            'ledger': self.ledger.to_dict() if self.ledger is not None else None,
        }
        (out_dir / 'summary.json').write_text(json.dumps(summary, indent=2, sort_keys=True), encoding='utf-8')
        logger.info(f"Wrote run log to {log_path}")
        return log_path


class RunMonitor:
    """
    Per-epoch metrics and stopping rules.

    Monitoring evaluations are not charged to the work ledger.
    """

    def __init__(self, hierarchy, dataset, stopping, ledger):
        self.hierarchy = hierarchy
        self.stopping = stopping
        self.ledger = ledger
        self.classification = dataset.task == 'classification'
        self.train = dataset.part(datasets.SPLIT_TRAIN)
        validation_rows = dataset.split is not None and np.any(dataset.split == datasets.SPLIT_VALIDATION)
        self.validation = dataset.part(datasets.SPLIT_VALIDATION) if validation_rows else None
        self.rows = []
        self._objectives = {}
        self._best = None
        self._since_best = 0

    def _objective(self, level, which):
        key = (level, which)
        if key not in self._objectives:
            batch = self.train if which == 'train' else self.validation
            batch_id = -1 if which == 'train' else -2
            self._objectives[key] = NetworkObjective(self.hierarchy[level].cfg, batch, level=level, batch_id=batch_id)
        return self._objectives[key]

    def metrics(self, level, theta):
        cfg = self.hierarchy[level].cfg
        out = {
            'train_loss': self._objective(level, 'train').value(theta),
            'val_loss': None,
            'train_accuracy': None,
            'val_accuracy': None,
        }
        if self.validation is not None:
            out['val_loss'] = self._objective(level, 'validation').value(theta)
        if self.classification:
            out['train_accuracy'] = accuracy(theta, cfg, self.train)
            if self.validation is not None:
                out['val_accuracy'] = accuracy(theta, cfg, self.validation)
        return out

    def reached_accuracy(self, metrics):
        if not self.classification:
            return False
        threshold = self.stopping.accuracy
        return any(
            value is not None and value > threshold
            for value in (metrics['train_accuracy'], metrics['val_accuracy'])
        )

    def level_done(self, level, theta):
        return self.reached_accuracy(self.metrics(level, theta))

    def _plateaued(self, metrics):
        if not self.stopping.plateau_epochs:
            return False
        if self.classification:
            score = metrics['val_accuracy'] if metrics['val_accuracy'] is not None else metrics['train_accuracy']
        else:
            loss = metrics['val_loss'] if metrics['val_loss'] is not None else metrics['train_loss']
            score = -loss
        if self._best is None or score > self._best:
            self._best, self._since_best = score, 0
            return False
        self._since_best += 1
        return self._since_best >= self.stopping.plateau_epochs

    def __call__(self, report):
        metrics = self.metrics(report.level, report.theta)
        row = {
            'type': 'epoch',
            'epoch': report.epoch,
            'level': report.level,
            'work': report.work,
            **metrics,
            'mbs': report.mbs,
            'delta': report.delta,
            'rho_g': _finite(report.rho_g),
            'accepted': bool(report.accepted),
            'mbs_changed': bool(report.mbs_changed),
            'memory_size': report.memory_size,
            'regime': report.regime,
            'n_batches': report.n_batches,
        }
        self.rows.append(row)
        logger.info(
            f"Epoch {report.epoch} (level {report.level}): W={report.work:.4f} loss={metrics['train_loss']:.6g} "
            f"acc={metrics['train_accuracy']} mbs={report.mbs} delta={report.delta:.3e}"
        )
        if report.level == self.hierarchy.L and self.reached_accuracy(metrics):
            return CONVERGED
        work_max = self.stopping.work_max
        if work_max is not None and report.work > work_max:
            return BUDGET
        if self._plateaued(metrics):
            return PLATEAU
        if report.epoch + 1 >= self.stopping.epoch_max:
            return EPOCH_LIMIT
        return None


def resolve_memory_size(memory_size, mbs0, n_train):
    """Configured M0, or the default for the sampling regime when unset."""
    if memory_size is not None:
        return memory_size
    if mbs0 is not None and mbs0 < n_train:
        return STOCHASTIC_MEMORY_SIZE
    return DETERMINISTIC_MEMORY_SIZE


def _cycle_config(config):
    solver = config.solver
    mode = CAUCHY_POINT if solver.hessian == 'CP' else LSR1
    return CycleConfig(
        mu1=solver.mu1, mu2=solver.mu2, mu_coarse=solver.mu_coarse, mode=mode,
        coherence=solver.coherence, cycles_per_level=solver.cycles_per_level, level_gtol=solver.level_gtol,
    )


def _header(config, label, hierarchy, dataset, seed):
    return {
        'type': 'header',
        'schema': RUN_SCHEMA,
        'label': label,
        'solver': config.solver.solver,
        'hessian': config.solver.hessian,
        'levels': hierarchy.L,
        'blocks': [spec.K for spec in hierarchy.levels],
        'refinement_rule': hierarchy.refinement_rule,
        'task': dataset.task,
        'n_train': int(np.sum(dataset.split == datasets.SPLIT_TRAIN)),
        'n_params': hierarchy.finest.cfg.n_params,
        'seed': seed,
        'data_seed': config.dataset.seed,
        'config': config.to_flat(),
    }


def run_experiment(config, seed=None):
    """
    Train one network with the configured solver and stopping rules.

    Args:
        config: ExperimentConfig
        seed: initialization/solver seed; defaults to ``config.replication.seed``

    Returns:
        RunRecord; divergence and engine errors end the run with reason 'diverged' / 'error'.
    """
    seed = config.replication.seed if seed is None else int(seed)
    started = time.perf_counter()
    dataset = build_dataset(config.dataset)
    base_cfg = _network_config(dataset, config.network)
    solver = config.solver.solver
    full = build_hierarchy(base_cfg, config.network.levels, config.network.refinement_rule)
    hierarchy = full if solver in MULTILEVEL_SOLVERS else full.finest_only()
    label = solver_label(solver, hierarchy.L)

    init_seq, solver_seq = np.random.SeedSequence(seed).spawn(2)
    init_rng, solver_rng = np.random.default_rng(init_seq), np.random.default_rng(solver_seq)
    train = dataset.part(datasets.SPLIT_TRAIN)
    ledger = WorkLedger.for_hierarchy(hierarchy, train.size)
    control = config.control
    tr_state = TrustRegionState(
        delta=control.delta0, delta_max=control.delta_max, eta1=control.eta1, eta2=control.eta2,
        gamma1=control.gamma1, gamma2=control.gamma2,
    )
    fcycle = solver in FCYCLE_SOLVERS and hierarchy.L > 1
    start_level = 1 if fcycle else hierarchy.L
    theta0 = initialize_params(hierarchy[start_level].cfg, init_rng).flat
    mbs0 = config.sampling.mbs0 if solver in STOCHASTIC_SOLVERS else None
    memory_size = resolve_memory_size(config.sampling.memory_size, mbs0, train.size)
    engine = DssRmtr(
        hierarchy, train, cycle=_cycle_config(config), tr_state=tr_state,
        control=DssControl(zeta1=control.zeta1, zeta2=control.zeta2, omega=control.omega),
        rng=solver_rng, ledger=ledger, mbs0=mbs0, overlap_fraction=config.sampling.overlap,
        global_period=config.sampling.global_period, memory_size=memory_size,
        pair_source=PAIRS_SAMPLED if config.solver.hessian == 'LSR1_sampled' else PAIRS_OVERLAP,
    )
    monitor = RunMonitor(hierarchy, dataset, config.stopping, ledger)
    header = _header(config, label, hierarchy, dataset, seed)
    logger.info(f"Starting {label} run: L={hierarchy.L}, hessian={config.solver.hessian}, seed={seed}")

    theta, level, epochs, error = theta0, start_level, 0, ''
    try:
        result = engine.run(
            theta0, config.stopping.epoch_max, observer=monitor, fcycle=fcycle,
            level_done=monitor.level_done if fcycle else None,
        )
        theta, level, epochs, reason = result.theta, result.level, result.epochs, result.stop_reason
    except PropagationDiverged as exc:
        reason, error = DIVERGED, str(exc)
        epochs = len(monitor.rows)
    except TrainingError as exc:
        logger.error(f"{label} run with seed {seed} failed: {exc}")
        reason, error = ERROR, str(exc)
        epochs = len(monitor.rows)

    if monitor.rows:
        last = monitor.rows[-1]
        level, final = last['level'], {key: last[key] for key in
                                       ('train_loss', 'val_loss', 'train_accuracy', 'val_accuracy')}
    else:
        final = monitor.metrics(level, theta) if reason not in FAILURE_REASONS else {
            'train_loss': None, 'val_loss': None, 'train_accuracy': None, 'val_accuracy': None,
        }
    summary = {
        'type': 'summary',
        'label': label,
        'levels': hierarchy.L,
        'task': dataset.task,
        'seed': seed,
        'stop_reason': reason,
        'epochs': epochs,
        'final_level': level,
        'work': ledger.total(),
        'gradient_calls': ledger.calls('gradient'),
        'function_calls': ledger.calls('function'),
        'hvp_calls': ledger.calls('hvp'),
        **{key: _finite(value) for key, value in final.items()},
        'error': error,
    }
    wall_time = time.perf_counter() - started
    logger.info(f"{label} run finished: {reason} after {epochs} epochs, W={ledger.total():.4f}, {wall_time:.1f}s")
    return RunRecord(header, monitor.rows, summary, wall_time, ledger)


def exit_code(record_or_summary):
    """0 converged (or budget/epoch limit on regression), 2 budget or epoch limit on classification, 1 error."""
    summary = record_or_summary.summary if isinstance(record_or_summary, RunRecord) else record_or_summary
    reason = summary['stop_reason']
    if reason in FAILURE_REASONS:
        return 1
    if reason in (BUDGET, EPOCH_LIMIT) and summary.get('task') == 'classification':
        return 2
    return 0


def run_status(reason):
    """Stored run status for a termination reason."""
    from .models import ExperimentRun

    return {
        CONVERGED: ExperimentRun.Status.CONVERGED,
        BUDGET: ExperimentRun.Status.BUDGET,
        EPOCH_LIMIT: ExperimentRun.Status.EPOCH_LIMIT,
        PLATEAU: ExperimentRun.Status.PLATEAU,
        DIVERGED: ExperimentRun.Status.DIVERGED,
    }.get(reason, ExperimentRun.Status.FAILED)


def store_record(run, record):
    """Persist a RunRecord into ``run`` and replace its epoch rows."""
    from .models import EpochRecord

    run.label = record.header['label']
    run.levels = record.header['levels']
    run.status = run_status(record.stop_reason)
    run.stop_reason = record.stop_reason
    run.work = record.summary['work']
    run.metrics = {key: value for key, value in record.summary.items() if key != 'type'}
    run.wall_time = record.wall_time
    run.error_message = record.summary.get('error', '')
    run.save()
    run.epochs.all().delete()
    EpochRecord.objects.bulk_create([
        EpochRecord(
            run=run, epoch=row['epoch'], level=row['level'], work=row['work'],
            train_loss=row['train_loss'], val_loss=row['val_loss'],
            train_accuracy=row['train_accuracy'], val_accuracy=row['val_accuracy'],
            mbs=row['mbs'], delta=row['delta'], rho_g=row['rho_g'],
            accepted=row['accepted'], mbs_changed=row['mbs_changed'],
        )
        for row in record.rows
    ])
    return run


def create_run(config, seed=None, group=''):
    """Stored PENDING ExperimentRun for ``config`` and ``seed``."""
    from .models import ExperimentRun

    seed = config.replication.seed if seed is None else int(seed)
    levels = config.network.levels if config.solver.solver in MULTILEVEL_SOLVERS else 1
    return ExperimentRun.objects.create(
        label=solver_label(config.solver.solver, levels),
        solver=config.solver.solver,
        hessian=config.solver.hessian,
        levels=levels,
        seed=seed,
        data_seed=config.dataset.seed,
        group=group,
        config=config.to_flat(),
    )


def config_from_run(run):
    nested = {}
    for key, value in run.config.items():
        section, _, name = key.partition('.')
        nested.setdefault(section, {})[name] = value
    return parse_config(nested)


def replicate(config, seeds, out_dir=None):
    """
    Independent runs of ``config`` for each init seed; the data seed stays fixed.

    Returns:
        (records, summary rows)
    """
    seeds = list(seeds)
    if not seeds:
        raise ConfigurationError({'replication.seeds': ['At least one seed is required.']})
    records = []
    for seed in seeds:
        record = run_experiment(config, seed=seed)
        if out_dir is not None:
            record.write(Path(out_dir) / f"seed-{seed}")
        records.append(record)
    rows = summarize([record.summary for record in records])
    if out_dir is not None:
        write_summary_csv(rows, Path(out_dir) / 'summary.csv')
    return records, rows


def succeeded(summary):
    """Runs that count towards the statistics: no failure, and on classification the accuracy rule fired."""
    reason = summary['stop_reason']
    if reason in FAILURE_REASONS:
        return False
    if summary.get('task') == 'classification':
        return reason in (CONVERGED, PLATEAU)
    return True


def _mean(values):
    return float(np.mean(values)) if values else None


def summarize(summaries):
    """
    Replication statistics per (label, levels): median, mean, population standard deviation
    and relative standard deviation (percent of the mean) of W over successful runs.
    """
    groups = {}
    for summary in summaries:
        groups.setdefault((summary['label'], summary['levels']), []).append(summary)
    rows = []
    for (label, levels), members in groups.items():
        ok = [s for s in members if succeeded(s)]
        work = np.array([s['work'] for s in ok], dtype=np.float64)
        row = dict.fromkeys(SUMMARY_COLUMNS)
        row.update(label=label, levels=levels, runs=len(members), failures=len(members) - len(ok))
        if work.size:
            mean, std = float(np.mean(work)), float(np.std(work))
            row.update(
                work_median=float(np.median(work)),
                work_mean=mean,
                work_std=std,
                work_rel_std_pct=100.0 * std / mean if mean else 0.0,
                train_accuracy_mean=_mean([s['train_accuracy'] for s in ok if s.get('train_accuracy') is not None]),
                val_accuracy_mean=_mean([s['val_accuracy'] for s in ok if s.get('val_accuracy') is not None]),
                train_loss_median=float(np.median([s['train_loss'] for s in ok])),
            )
        rows.append(row)
    return rows


def write_summary_csv(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as handle:
        writer = csv.DictWriter(handle, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({key: '' if row[key] is None else row[key] for key in SUMMARY_COLUMNS})
    logger.info(f"Wrote replication summary to {path}")
    return path


def stored_summaries(runs):
    """Summary dicts for stored runs, including failed ones without metrics."""
    out = []
    for run in runs:
        metrics = dict(run.metrics or {})
        metrics.setdefault('label', run.label)
        metrics.setdefault('levels', run.levels)
        metrics.setdefault('stop_reason', run.stop_reason or ERROR)
        metrics.setdefault('work', run.work)
        out.append(metrics)
    return out
