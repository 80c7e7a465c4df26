import json
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from apps.training.datasets import (
    BACKGROUND,
    LEFT_EYE,
    MOUTH,
    RIGHT_EYE,
    SPIRAL_CHUNKS,
    SPLIT_TRAIN,
    SPLIT_VALIDATION,
    analytic_targets,
    destandardize,
    export_csv,
    gen_analytic_regression,
    gen_smiley,
    gen_spiral,
    generate,
    import_csv,
    smiley_label,
    spiral_chunk,
    split,
    standardize,
)


class SmileyTests(SimpleTestCase):
    def test_reference_points(self):
        labels = smiley_label([(-1.5, 1.5), (1.5, 1.5), (0.0, -1.8), (4.9, 4.9)])
        self.assertEqual(list(labels), [LEFT_EYE, RIGHT_EYE, MOUTH, BACKGROUND])

    def test_balanced_classes(self):
        data = gen_smiley(7000, 0)
        np.testing.assert_array_equal(np.bincount(data.labels, minlength=4), [1750] * 4)
        self.assertEqual(data.features.shape, (7000, 2))
        self.assertTrue(np.all(np.abs(data.features) <= 5.0))

    def test_labels_match_geometry(self):
        data = gen_smiley(400, 3)
        np.testing.assert_array_equal(smiley_label(data.features), data.labels)

    def test_seeded(self):
        np.testing.assert_array_equal(gen_smiley(100, 7).features, gen_smiley(100, 7).features)
        self.assertFalse(np.array_equal(gen_smiley(100, 7).features, gen_smiley(100, 8).features))

    def test_too_small(self):
        with self.assertRaises(ValueError):
            gen_smiley(3, 0)


class SpiralTests(SimpleTestCase):
    def test_two_chunks_per_class(self):
        data = gen_spiral(1000, 2, noise=0.0)
        t_chunks = {}
        # recover chunk membership from the noise-free height coordinate
        t = (data.features[:, 2] + 1.5) * 4 * np.pi / 3
        for chunk, label in zip(spiral_chunk(t), data.labels):
            t_chunks.setdefault(label, set()).add(int(chunk))
        self.assertEqual(sorted(t_chunks), [0, 1, 2, 3, 4])
        self.assertTrue(all(len(chunks) == 2 for chunks in t_chunks.values()))

    def test_class_counts(self):
        np.testing.assert_array_equal(np.bincount(gen_spiral(1000, 0).labels), [200] * 5)
        counts = np.bincount(gen_spiral(1003, 0).labels)
        self.assertLessEqual(counts.max() - counts.min(), 1)
        self.assertEqual(counts.sum(), 1003)

    def test_bounds(self):
        data = gen_spiral(500, 1)
        self.assertTrue(np.all(np.abs(data.features) <= 1.5))
        self.assertEqual(data.n_out, 5)

    def test_too_small(self):
        with self.assertRaises(ValueError):
            gen_spiral(SPIRAL_CHUNKS - 1, 0)


class AnalyticTests(SimpleTestCase):
    def test_target_values(self):
        np.testing.assert_allclose(analytic_targets([0.0, 0.0, 0.0]), [[0.0, 1.0]])
        np.testing.assert_allclose(analytic_targets([np.pi / 2, 1.0, 0.0]), [[1.0, 0.0]], atol=1e-12)

    def test_generator(self):
        data = gen_analytic_regression(50, 4)
        self.assertEqual(data.task, 'regression')
        self.assertEqual((data.n_in, data.n_out), (3, 2))
        np.testing.assert_allclose(data.targets, analytic_targets(data.features))

    def test_dispatch(self):
        self.assertEqual(generate('spiral', 20, 0).generator, 'spiral')
        with self.assertRaises(ValueError):
            generate('moons', 20, 0)


class SplitTests(SimpleTestCase):
    def test_disjoint_parts(self):
        data = split(gen_smiley(100, 0), 70, seed=5)
        train, validation = data.part(SPLIT_TRAIN), data.part(SPLIT_VALIDATION)
        self.assertEqual((train.size, validation.size), (70, 30))
        self.assertEqual(len(np.intersect1d(train.indices, validation.indices)), 0)
        np.testing.assert_array_equal(train.features, data.features[train.indices])

    def test_seeded(self):
        a = split(gen_smiley(100, 0), 70, seed=5)
        b = split(gen_smiley(100, 0), 70, seed=5)
        np.testing.assert_array_equal(a.split, b.split)

    def test_unsplit_part_is_everything(self):
        data = gen_smiley(40, 0)
        self.assertEqual(data.part(SPLIT_TRAIN).size, 40)

    def test_invalid_size(self):
        with self.assertRaises(ValueError):
            split(gen_smiley(40, 0), 41, seed=0)


class StandardizeTests(SimpleTestCase):
    def test_training_statistics(self):
        data = standardize(split(gen_smiley(200, 1), 150, seed=2))
        train = data.part(SPLIT_TRAIN)
        np.testing.assert_allclose(train.features.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(train.features.std(axis=0), 1.0)

    def test_constant_column_keeps_scale(self):
        data = gen_analytic_regression(20, 0)
        features = data.features.copy()
        features[:, 1] = 3.0
        out = standardize(data.__class__(features, data.targets, 'analytic', 0, task='regression'))
        np.testing.assert_array_equal(out.features[:, 1], 0.0)
        self.assertEqual(out.scaling['feature_scale'][1], 1.0)

    def test_round_trip(self):
        data = split(gen_analytic_regression(60, 2), 40, seed=1)
        out = destandardize(standardize(data, targets=True))
        np.testing.assert_allclose(out.features, data.features, atol=1e-12)
        np.testing.assert_allclose(out.targets, data.targets, atol=1e-12)
        self.assertIsNone(out.scaling)

    def test_targets_only_for_regression(self):
        with self.assertRaises(ValueError):
            standardize(gen_smiley(20, 0), targets=True)


class CsvExchangeTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def test_export_and_import(self):
        data = gen_spiral(50, 9)
        path = export_csv(data, Path(self.tmp.name) / 'spiral.csv')
        header = path.read_text(encoding='utf-8').splitlines()[0]
        self.assertEqual(header, 'x1,x2,x3,c1,c2,c3,c4,c5')
        meta = json.loads(Path(f"{path}.meta.json").read_text(encoding='utf-8'))
        self.assertEqual((meta['generator'], meta['seed'], meta['n_samples']), ('spiral', 9, 50))

        loaded = import_csv(path)
        np.testing.assert_array_equal(loaded.features, data.features)
        np.testing.assert_array_equal(loaded.targets, data.targets)
        self.assertEqual((loaded.generator, loaded.seed, loaded.task), ('spiral', 9, 'classification'))

    def test_import_without_metadata(self):
        path = Path(self.tmp.name) / 'plain.csv'
        path.write_text('x1,x2,c1\n0.5,1.5,2.0\n', encoding='utf-8')
        loaded = import_csv(path)
        self.assertEqual(loaded.generator, 'csv')
        np.testing.assert_array_equal(loaded.features, [[0.5, 1.5]])
        np.testing.assert_array_equal(loaded.targets, [[2.0]])
