from django.core.management.base import BaseCommand, CommandError

from apps.training.datasets import GENERATORS, export_csv, generate


class Command(BaseCommand):
    help = 'Generate a seeded synthetic dataset as CSV with a metadata sidecar'

    def add_arguments(self, parser):
        parser.add_argument('--dataset', required=True, choices=GENERATORS)
        parser.add_argument('--n', type=int, required=True, help='Number of samples')
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--out', required=True, help='CSV path')

    def handle(self, *args, **options):
        try:
            dataset = generate(options['dataset'], options['n'], options['seed'])
        except ValueError as e:
            raise CommandError(str(e))
        path = export_csv(dataset, options['out'])
        self.stdout.write(self.style.SUCCESS(f'Wrote {len(dataset)} samples to {path}'))
