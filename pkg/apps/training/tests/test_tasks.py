import tempfile
from pathlib import Path
from unittest import mock

from django.test import TestCase, override_settings

from apps.training.exceptions import CoherenceError
from apps.training.experiments import create_run, parse_config
from apps.training.models import ExperimentRun
from apps.training.tasks import execute_run


def regression_config():
    return parse_config({
        'dataset': {'generator': 'analytic', 'n': 50, 'n_train': 40},
        'network': {'width': 3, 'K': 2, 'levels': 2},
        'solver': {'solver': 'RMTR_V'},
        'stopping': {'epoch_max': 2},
    })


class ExecuteRunTests(TestCase):
    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.output_dir = Path(tmp.name)
        settings_override = override_settings(TRAINING_OUTPUT_DIR=self.output_dir)
        settings_override.enable()
        self.addCleanup(settings_override.disable)

    def test_runs_and_stores_pending_run(self):
        run = create_run(regression_config(), seed=3, group='nightly')
        result = execute_run(run.id)
        run.refresh_from_db()
        self.assertEqual(result, ExperimentRun.Status.EPOCH_LIMIT)
        self.assertEqual(run.status, ExperimentRun.Status.EPOCH_LIMIT)
        self.assertEqual(run.epochs.count(), 2)
        self.assertGreater(run.work, 0.0)
        self.assertIsNotNone(run.wall_time)
        self.assertTrue((self.output_dir / 'nightly' / f'run-{run.id}' / 'run.jsonl').exists())

    def test_ungrouped_output(self):
        run = create_run(regression_config())
        execute_run(run.id)
        self.assertTrue((self.output_dir / 'ungrouped' / f'run-{run.id}' / 'summary.json').exists())

    def test_skips_runs_that_are_not_pending(self):
        run = create_run(regression_config())
        run.status = ExperimentRun.Status.CONVERGED
        run.save()
        with mock.patch('apps.training.tasks.run_experiment') as runner:
            self.assertEqual(execute_run(run.id), ExperimentRun.Status.CONVERGED)
        runner.assert_not_called()

    def test_missing_run(self):
        self.assertIsNone(execute_run(424242))

    def test_engine_error_marks_run_failed(self):
        run = create_run(regression_config())
        with mock.patch('apps.training.tasks.run_experiment', side_effect=CoherenceError('mismatch')):
            self.assertEqual(execute_run(run.id), ExperimentRun.Status.FAILED)
        run.refresh_from_db()
        self.assertEqual(run.status, ExperimentRun.Status.FAILED)
        self.assertEqual(run.error_message, 'mismatch')

    def test_invalid_stored_config_marks_run_failed(self):
        run = create_run(regression_config())
        run.config = {**run.config, 'network.width': 0}
        run.save()
        execute_run(run.id)
        run.refresh_from_db()
        self.assertEqual(run.status, ExperimentRun.Status.FAILED)
        self.assertIn('network.width', run.error_message)
