from django.core.management.base import CommandError

from stefan.verify_service import run_verify

from ._shared import EXIT_VERIFY, StefanCommand


class Command(StefanCommand):
    help = 'Run every invariant suite and exit with status 4 if any check fails.'

    def handle(self, *args, **options):
        config = self.load(options)
        report = self.run_guarded(run_verify, config, options['out'], self.threads(options), options['seed'])
        for entry in report.entries:
            mark = self.style.SUCCESS('PASS') if entry.passed else self.style.ERROR('FAIL')
            self.stdout.write(f"{mark} {entry.suite}.{entry.name} value={entry.value} threshold={entry.threshold}")
        if not report.passed:
            names = ', '.join(f"{e.suite}.{e.name}" for e in report.failures)
            raise CommandError(f"verify failed: {names}", returncode=EXIT_VERIFY)
        self.stdout.write(self.style.SUCCESS(f"verify ok: {len(report.entries)} checks passed"))
