from django.core.management.base import CommandError

from stefan.experiment_service import run_sweep
from stefan.io_service import render_csv
from stefan.models import SweepAxis

from ._shared import EXIT_VALIDATION, StefanCommand


class Command(StefanCommand):
    help = 'Repeat a simulate or control run over the values of one parameter and tabulate the metrics.'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--axis', required=True, choices=SweepAxis.values)
        parser.add_argument('--values', required=True, help='Comma-separated values, e.g. 64,128,256')
        parser.add_argument('--mode', default='simulate', choices=['simulate', 'control'])

    def handle(self, *args, **options):
        config = self.load(options)
        try:
            values = [float(v) for v in options['values'].split(',') if v.strip()]
        except ValueError as e:
            raise CommandError(f"--values must be numbers: {e}", returncode=EXIT_VALIDATION) from e
        if not values:
            raise CommandError("--values is empty", returncode=EXIT_VALIDATION)
        rows = self.run_guarded(run_sweep, config, options['axis'], values, options['out'],
                                self.threads(options), options['seed'], options['mode'])
        header = []
        for row in rows:
            header.extend(k for k in row if k not in header)
        self.stdout.write(render_csv(header, [[row.get(k) for k in header] for row in rows]))
        failed = sum(1 for row in rows if row['status'] == 'failed')
        style = self.style.WARNING if failed else self.style.SUCCESS
        self.stdout.write(style(f"sweep finished: {len(rows)} rows, {failed} failed"))
