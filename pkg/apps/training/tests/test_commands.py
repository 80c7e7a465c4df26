import json
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import TestCase, override_settings

from apps.training.datasets import import_csv
from apps.training.models import ExperimentRun

REGRESSION = """\
dataset.generator=analytic
dataset.n=50
dataset.n_train=40
network.width=3
network.K=2
network.levels=2
solver.solver=RMTR_V
stopping.epoch_max=1
replication.seeds=1,2
"""

CLASSIFICATION = """\
dataset.generator=smiley
dataset.n=60
dataset.n_train=40
network.width=3
network.K=2
solver.solver=TR
stopping.accuracy=1.0
stopping.epoch_max=1
"""


class CommandTestCase(TestCase):
    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.tmp = Path(tmp.name)
        settings_override = override_settings(TRAINING_OUTPUT_DIR=self.tmp / 'runs')
        settings_override.enable()
        self.addCleanup(settings_override.disable)

    def config_file(self, text, name='experiment.env'):
        path = self.tmp / name
        path.write_text(text, encoding='utf-8')
        return str(path)

    def call(self, *args, **options):
        out = StringIO()
        call_command(*args, stdout=out, **options)
        return out.getvalue()


class GenDataCommandTests(CommandTestCase):
    def test_writes_csv_and_metadata(self):
        path = self.tmp / 'data' / 'smiley.csv'
        output = self.call('gen_data', dataset='smiley', n=40, seed=2, out=str(path))
        self.assertIn('Wrote 40 samples', output)
        dataset = import_csv(path)
        self.assertEqual((len(dataset), dataset.generator, dataset.seed), (40, 'smiley', 2))

    def test_invalid_size(self):
        with self.assertRaises(CommandError):
            self.call('gen_data', dataset='spiral', n=3, out=str(self.tmp / 'spiral.csv'))


class TrainCommandTests(CommandTestCase):
    def test_print_config(self):
        output = self.call('train', config=self.config_file(REGRESSION), print_config=True, seed=9, levels=3)
        lines = output.splitlines()
        self.assertIn('replication.seed=9', lines)
        self.assertIn('network.levels=3', lines)
        self.assertIn('control.eta1=0.1', lines)
        self.assertFalse((self.tmp / 'runs').exists())

    def test_invalid_config(self):
        with self.assertRaises(CommandError):
            self.call('train', config=self.config_file('network.width=zero\n'))

    def test_regression_run_writes_log(self):
        out_dir = self.tmp / 'out'
        output = self.call('train', config=self.config_file(REGRESSION), out=str(out_dir))
        self.assertIn('RMTR-V seed 1: epoch_limit', output)
        lines = (out_dir / 'run.jsonl').read_text(encoding='utf-8').splitlines()
        self.assertEqual(json.loads(lines[0])['type'], 'header')
        self.assertEqual(json.loads(lines[-1])['stop_reason'], 'epoch_limit')

    def test_default_output_directory(self):
        self.call('train', config=self.config_file(REGRESSION), solver='TR', seed=4)
        self.assertTrue((self.tmp / 'runs' / 'TR-seed-4' / 'summary.json').exists())

    def test_classification_without_convergence_exits_with_two(self):
        with self.assertRaises(CommandError) as ctx:
            self.call('train', config=self.config_file(CLASSIFICATION), out=str(self.tmp / 'out'))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_store(self):
        output = self.call('train', config=self.config_file(REGRESSION), out=str(self.tmp / 'out'), store=True)
        run = ExperimentRun.objects.get()
        self.assertIn(f'Stored run {run.id}', output)
        self.assertEqual(run.status, ExperimentRun.Status.EPOCH_LIMIT)
        self.assertEqual(run.epochs.count(), 1)


class ReplicateCommandTests(CommandTestCase):
    def test_runs_every_seed(self):
        out_dir = self.tmp / 'rep'
        output = self.call('replicate', config=self.config_file(REGRESSION), out=str(out_dir))
        self.assertIn('seed 1: epoch_limit', output)
        self.assertIn('seed 2: epoch_limit', output)
        self.assertTrue((out_dir / 'summary.csv').exists())
        self.assertTrue((out_dir / 'seed-2' / 'run.jsonl').exists())

    def test_seeds_option_overrides_config(self):
        output = self.call('replicate', config=self.config_file(REGRESSION), seeds='5..5', out=str(self.tmp / 'rep'))
        self.assertIn('seed 5:', output)
        self.assertNotIn('seed 1:', output)

    def test_queue_dispatches_pending_runs(self):
        with mock.patch('apps.training.management.commands.replicate.execute_run') as task:
            output = self.call('replicate', config=self.config_file(REGRESSION), queue=True, group='batch-1')
        runs = ExperimentRun.objects.filter(group='batch-1').order_by('seed')
        self.assertEqual([run.seed for run in runs], [1, 2])
        self.assertTrue(all(run.status == ExperimentRun.Status.PENDING for run in runs))
        self.assertEqual(sorted(call.args[0] for call in task.delay.call_args_list), sorted(run.id for run in runs))
        self.assertIn('Queued 2 runs', output)

    def test_summary_of_stored_runs(self):
        for seed, work in ((1, 4.0), (2, 6.0)):
            ExperimentRun.objects.create(
                label='TR', solver='TR', hessian='CP', levels=1, seed=seed, data_seed=0, group='g',
                status=ExperimentRun.Status.BUDGET, stop_reason='budget', work=work,
                metrics={'label': 'TR', 'levels': 1, 'task': 'regression', 'stop_reason': 'budget',
                         'work': work, 'train_loss': 0.5},
            )
        output = self.call('replicate', summary=True, group='g', out=str(self.tmp / 'summary'))
        self.assertIn('label=TR, levels=1, runs=2, failures=0, work_median=5.0', output)
        self.assertTrue((self.tmp / 'summary' / 'summary.csv').exists())

    def test_summary_without_runs(self):
        output = self.call('replicate', summary=True, group='empty')
        self.assertIn('No finished runs', output)

    def test_requires_config_and_seeds(self):
        with self.assertRaises(CommandError):
            self.call('replicate')
        with self.assertRaises(CommandError):
            self.call('replicate', config=self.config_file(CLASSIFICATION))
