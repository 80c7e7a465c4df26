"""
Management command to replicate an experiment over a range of seeds.
"""
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from apps.training.exceptions import ConfigurationError
from apps.training.experiments import (
    SUMMARY_COLUMNS, create_run, load_config, replicate, stored_summaries, summarize, write_summary_csv,
)
from apps.training.models import ExperimentRun
from apps.training.serializers import parse_seeds
from apps.training.tasks import execute_run


class Command(BaseCommand):
    help = 'Run an experiment for every seed and summarize the work units'

    def add_arguments(self, parser):
        parser.add_argument('--config', help='Experiment configuration file (key=value)')
        parser.add_argument('--seeds', help="Seed range 'a..b' or list 'a,b,c' (default: replication.seeds)")
        parser.add_argument('--out', help='Output directory for per-seed logs and summary.csv')
        parser.add_argument(
            '--queue',
            action='store_true',
            help='Store pending runs and dispatch them to Celery workers',
        )
        parser.add_argument('--group', default='', help='Group tag for stored runs')
        parser.add_argument(
            '--summary',
            action='store_true',
            help='Summarize the stored runs of --group instead of running anything',
        )

    def _write_rows(self, rows):
        for row in rows:
            self.stdout.write(', '.join(f'{key}={row[key]}' for key in SUMMARY_COLUMNS))

    def handle(self, *args, **options):
        if options['summary']:
            runs = ExperimentRun.objects.exclude(
                status__in=[ExperimentRun.Status.PENDING, ExperimentRun.Status.RUNNING]
            )
            if options['group']:
                runs = runs.filter(group=options['group'])
            if not runs.exists():
                self.stdout.write(self.style.WARNING('No finished runs to summarize'))
                return
            rows = summarize(stored_summaries(runs.order_by('id')))
            if options['out']:
                write_summary_csv(rows, Path(options['out']) / 'summary.csv')
            self._write_rows(rows)
            return

        if not options['config']:
            raise CommandError('--config is required unless --summary is given')
        try:
            config = load_config(options['config'])
            seeds = parse_seeds(options['seeds']) if options['seeds'] else config.replication.seeds
        except (ConfigurationError, ValueError) as e:
            raise CommandError(f'Invalid configuration: {e}')
        if not seeds:
            raise CommandError('No seeds given: pass --seeds or set replication.seeds')

        if options['queue']:
            for seed in seeds:
                run = create_run(config, seed=seed, group=options['group'])
                execute_run.delay(run.id)
                self.stdout.write(f'  - Run {run.id}: {run.label} seed {seed}')
            self.stdout.write(self.style.SUCCESS(f'Queued {len(seeds)} runs'))
            return

        out_dir = options['out'] or Path(settings.TRAINING_OUTPUT_DIR) / 'replicate'
        self.stdout.write(f'Running {len(seeds)} seeds...')
        records, rows = replicate(config, seeds, out_dir)
        for record in records:
            summary = record.summary
            self.stdout.write(
                f"  - seed {summary['seed']}: {summary['stop_reason']}, W={summary['work']:.4f}"
            )
        self._write_rows(rows)
        self.stdout.write(self.style.SUCCESS(f'Wrote summary to {Path(out_dir) / "summary.csv"}'))
