"""
Seeded synthetic datasets: Smiley (2-D, 4 classes), Spiral (3-D, 5 classes) and an
analytic 3 -> 2 regression task, plus splitting, standardization and CSV exchange.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .resnet import Batch

logger = logging.getLogger(__name__)

GENERATORS = ('smiley', 'spiral', 'analytic')
SPLIT_TRAIN = 'train'
SPLIT_VALIDATION = 'validation'

# Smiley geometry on [-5, 5]^2
SMILEY_BOX = 5.0
EYE_CENTERS = ((-1.5, 1.5), (1.5, 1.5))
EYE_RADIUS = 0.6
MOUTH_CENTER = (0.0, 0.5)
MOUTH_RADII = (2.0, 2.6)
MOUTH_CUTOFF = -0.2
LEFT_EYE, RIGHT_EYE, MOUTH, BACKGROUND = range(4)

SPIRAL_CHUNKS = 10
SPIRAL_CLASSES = 5
SPIRAL_NOISE = 0.05
SPIRAL_BOUND = 1.5


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    targets: np.ndarray
    generator: str
    seed: int
    task: str = 'classification'
    split: np.ndarray = None
    scaling: dict = field(default=None, compare=False)

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_in(self):
        return self.features.shape[1]

    @property
    def n_out(self):
        return self.targets.shape[1]

    @property
    def labels(self):
        return np.argmax(self.targets, axis=1)

    def part(self, name):
        """Batch over one split ('train' or 'validation'); the whole set when unsplit."""
        if self.split is None:
            return Batch(self.features, self.targets)
        positions = np.flatnonzero(self.split == name)
        return Batch(self.features[positions], self.targets[positions], positions)


def _one_hot(labels, n_classes):
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _balanced_counts(n, n_classes):
    counts = np.full(n_classes, n // n_classes)
    counts[:n % n_classes] += 1
    return counts


def smiley_label(points):
    """Class of each point: 0 left eye, 1 right eye, 2 mouth, 3 background."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    x, y = points[:, 0], points[:, 1]
    labels = np.full(points.shape[0], BACKGROUND)
    mouth_distance = np.hypot(x - MOUTH_CENTER[0], y - MOUTH_CENTER[1])
    in_mouth = (mouth_distance >= MOUTH_RADII[0]) & (mouth_distance <= MOUTH_RADII[1]) & (y < MOUTH_CUTOFF)
    labels[in_mouth] = MOUTH
    for label, (cx, cy) in ((LEFT_EYE, EYE_CENTERS[0]), (RIGHT_EYE, EYE_CENTERS[1])):
        labels[np.hypot(x - cx, y - cy) <= EYE_RADIUS] = label
    return labels


def _smiley_box(label):
    if label in (LEFT_EYE, RIGHT_EYE):
        cx, cy = EYE_CENTERS[label]
        return (cx - EYE_RADIUS, cx + EYE_RADIUS), (cy - EYE_RADIUS, cy + EYE_RADIUS)
    if label == MOUTH:
        outer = MOUTH_RADII[1]
        return (MOUTH_CENTER[0] - outer, MOUTH_CENTER[0] + outer), (MOUTH_CENTER[1] - outer, MOUTH_CUTOFF)
    return (-SMILEY_BOX, SMILEY_BOX), (-SMILEY_BOX, SMILEY_BOX)


def gen_smiley(n, seed):
    """
    Balanced Smiley samples: each class is filled by rejection sampling inside its
    bounding box, so class counts differ by at most one.
    """
    if n < 4:
        raise ValueError(f"Smiley needs at least 4 samples, got {n}")
    rng = np.random.default_rng(seed)
    points, labels = [], []
    for label, count in enumerate(_balanced_counts(n, 4)):
        (x0, x1), (y0, y1) = _smiley_box(label)
        accepted = np.empty((0, 2))
        while accepted.shape[0] < count:
            draw = np.column_stack([rng.uniform(x0, x1, 2 * count), rng.uniform(y0, y1, 2 * count)])
            accepted = np.vstack([accepted, draw[smiley_label(draw) == label]])
        points.append(accepted[:count])
        labels.append(np.full(count, label))
    order = rng.permutation(n)
    features = np.vstack(points)[order]
    labels = np.concatenate(labels)[order]
    return LabeledDataset(features, _one_hot(labels, 4), 'smiley', seed)


def spiral_point(t):
    """Noise-free point on the spiral for parameter t in [0, 4 pi]."""
    t = np.asarray(t, dtype=np.float64)
    radius = 0.1 + 1.3 * t / (4 * np.pi)
    return np.column_stack([radius * np.cos(t), radius * np.sin(t), 3 * t / (4 * np.pi) - 1.5])


def spiral_chunk(t):
    """Index of the equal-length t chunk containing t."""
    return np.minimum((np.asarray(t) / (4 * np.pi) * SPIRAL_CHUNKS).astype(int), SPIRAL_CHUNKS - 1)


def gen_spiral(n, seed, noise=SPIRAL_NOISE):
    """
    Spiral samples in [-1.5, 1.5]^3. The 10 t-chunks are mapped onto 5 classes by a
    seeded random permutation (chunk -> perm[chunk] % 5), two chunks per class.
    Every chunk receives n // 10 samples, spare samples going to distinct classes.
    """
    if n < SPIRAL_CHUNKS:
        raise ValueError(f"Spiral needs at least {SPIRAL_CHUNKS} samples, got {n}")
    rng = np.random.default_rng(seed)
    chunk_class = rng.permutation(SPIRAL_CHUNKS) % SPIRAL_CLASSES
    counts = np.full(SPIRAL_CHUNKS, n // SPIRAL_CHUNKS)
    spare = n % SPIRAL_CHUNKS
    if spare:
        # one spare per class first, so class totals stay within one of each other
        first_chunk_of_class = [int(np.flatnonzero(chunk_class == c)[0]) for c in range(SPIRAL_CLASSES)]
        second_chunk_of_class = [int(np.flatnonzero(chunk_class == c)[1]) for c in range(SPIRAL_CLASSES)]
        for chunk in (first_chunk_of_class + second_chunk_of_class)[:spare]:
            counts[chunk] += 1
    width = 4 * np.pi / SPIRAL_CHUNKS
    t = np.concatenate([rng.uniform(chunk * width, (chunk + 1) * width, count) for chunk, count in enumerate(counts)])
    points = spiral_point(t)
    if noise > 0:
        points = np.clip(points + rng.normal(0.0, noise, points.shape), -SPIRAL_BOUND, SPIRAL_BOUND)
    labels = chunk_class[spiral_chunk(t)]
    order = rng.permutation(n)
    return LabeledDataset(points[order], _one_hot(labels[order], SPIRAL_CLASSES), 'spiral', seed)


def analytic_targets(x):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
    return np.column_stack([np.sin(x1) * x2 + x3 ** 2, np.cos(x1 * x2) - x3])


def gen_analytic_regression(n, seed):
    if n < 1:
        raise ValueError(f"Need at least one sample, got {n}")
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, (n, 3))
    return LabeledDataset(x, analytic_targets(x), 'analytic', seed, task='regression')


def generate(name, n, seed):
    if name == 'smiley':
        return gen_smiley(n, seed)
    if name == 'spiral':
        return gen_spiral(n, seed)
    if name == 'analytic':
        return gen_analytic_regression(n, seed)
    raise ValueError(f"Unknown dataset generator '{name}'")


def split(dataset, n_train, seed):
    """Seeded shuffle into disjoint train / validation parts; the first n_train shuffled samples train."""
    n = len(dataset)
    if not 1 <= n_train <= n:
        raise ValueError(f"Training split size {n_train} outside 1..{n}")
    order = np.random.default_rng(seed).permutation(n)
    tags = np.full(n, SPLIT_VALIDATION, dtype=object)
    tags[order[:n_train]] = SPLIT_TRAIN
    return replace(dataset, split=tags)


def standardize(dataset, targets=False):
    """
    Zero-mean, unit-variance features using training-split statistics only; constant
    columns keep scale 1. The map is stored in ``scaling`` for ``destandardize``.
    """
    train_rows = slice(None) if dataset.split is None else dataset.split == SPLIT_TRAIN
    mean = dataset.features[train_rows].mean(axis=0)
    scale = dataset.features[train_rows].std(axis=0)
    scale[scale == 0.0] = 1.0
    features = (dataset.features - mean) / scale
    scaling = {'feature_mean': mean, 'feature_scale': scale}
    out_targets = dataset.targets
    if targets:
        if dataset.task != 'regression':
            raise ValueError('Target standardization applies to regression datasets only')
        t_mean = dataset.targets[train_rows].mean(axis=0)
        t_scale = dataset.targets[train_rows].std(axis=0)
        t_scale[t_scale == 0.0] = 1.0
        out_targets = (dataset.targets - t_mean) / t_scale
        scaling.update(target_mean=t_mean, target_scale=t_scale)
    return replace(dataset, features=features, targets=out_targets, scaling=scaling)


def destandardize(dataset):
    if not dataset.scaling:
        return dataset
    features = dataset.features * dataset.scaling['feature_scale'] + dataset.scaling['feature_mean']
    targets = dataset.targets
    if 'target_scale' in dataset.scaling:
        targets = targets * dataset.scaling['target_scale'] + dataset.scaling['target_mean']
    return replace(dataset, features=features, targets=targets, scaling=None)


def _meta_path(path):
    path = Path(path)
    return path.with_name(path.name + '.meta.json')


def export_csv(dataset, path):
    """CSV with header x1..xn,c1..cm plus a sidecar <path>.meta.json recording generator and seed."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ','.join([f"x{i + 1}" for i in range(dataset.n_in)] + [f"c{j + 1}" for j in range(dataset.n_out)])
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        np.savetxt(handle, np.hstack([dataset.features, dataset.targets]), delimiter=',',
                   header=header, comments='', fmt='%.17g')
    meta = {
        'generator': dataset.generator,
        'seed': dataset.seed,
        'task': dataset.task,
        'n_samples': len(dataset),
        'n_in': dataset.n_in,
        'n_out': dataset.n_out,
    }
    _meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True), encoding='utf-8')
    logger.info(f"Wrote {len(dataset)} {dataset.generator} samples to {path}")
    return path


def import_csv(path):
    path = Path(path)
    with open(path, encoding='utf-8') as handle:
        header = handle.readline().strip().split(',')
    n_in = sum(1 for name in header if name.startswith('x'))
    data = np.loadtxt(path, delimiter=',', skiprows=1, ndmin=2)
    meta_path = _meta_path(path)
    meta = json.loads(meta_path.read_text(encoding='utf-8')) if meta_path.exists() else {}
    return LabeledDataset(
        data[:, :n_in],
        data[:, n_in:],
        meta.get('generator', 'csv'),
        meta.get('seed'),
        task=meta.get('task', 'classification'),
    )
