"""
Management command to train one network from an experiment configuration file.
"""
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from apps.training.exceptions import ConfigurationError
from apps.training.experiments import (
    apply_overrides, create_run, dump_config, exit_code, load_config, run_experiment, store_record,
)
from apps.training.serializers import HESSIANS, SOLVERS


class Command(BaseCommand):
    help = 'Train a network with the configured solver and write its JSON Lines run log'

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, help='Experiment configuration file (key=value)')
        parser.add_argument('--seed', type=int, help='Initialization/solver seed')
        parser.add_argument('--solver', choices=SOLVERS, help='Override solver.solver')
        parser.add_argument('--levels', type=int, help='Override network.levels')
        parser.add_argument('--hessian', choices=HESSIANS, help='Override solver.hessian')
        parser.add_argument('--out', help='Output directory for run.jsonl and summary.json')
        parser.add_argument(
            '--print-config',
            action='store_true',
            help='Print the effective configuration and exit',
        )
        parser.add_argument(
            '--store',
            action='store_true',
            help='Also persist the run in the database',
        )

    def handle(self, *args, **options):
        try:
            config = load_config(options['config'])
            config = apply_overrides(
                config, seed=options['seed'], solver=options['solver'],
                levels=options['levels'], hessian=options['hessian'],
            )
        except ConfigurationError as e:
            raise CommandError(f'Invalid configuration: {e}')

        if options['print_config']:
            self.stdout.write(dump_config(config), ending='')
            return

        record = run_experiment(config)
        seed = record.header['seed']
        out_dir = options['out'] or Path(settings.TRAINING_OUTPUT_DIR) / f"{record.header['label']}-seed-{seed}"
        log_path = record.write(out_dir)
        if options['store']:
            run = store_record(create_run(config), record)
            self.stdout.write(f'Stored run {run.id}')

        summary = record.summary
        message = (
            f"{summary['label']} seed {seed}: {summary['stop_reason']} after {summary['epochs']} epochs, "
            f"W={summary['work']:.4f} ({log_path})"
        )
        code = exit_code(record)
        if code == 0:
            self.stdout.write(self.style.SUCCESS(message))
        elif code == 2:
            self.stdout.write(self.style.WARNING(message))
            raise CommandError(f"Stopped without reaching the accuracy threshold: {summary['stop_reason']}",
                               returncode=2)
        else:
            raise CommandError(f"{message}: {summary['error']}", returncode=1)
