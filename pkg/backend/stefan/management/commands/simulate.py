from stefan.experiment_service import run_simulate

from ._shared import StefanCommand


class Command(StefanCommand):
    help = 'Solve the regularized two-phase Stefan system under a fixed boundary flux and write its diagnostics.'

    def handle(self, *args, **options):
        config = self.load(options)
        artifacts = self.run_guarded(run_simulate, config, options['out'], self.threads(options), options['seed'])
        summary = artifacts.summary
        energy = summary['energy']['constant']
        self.stdout.write(self.style.SUCCESS(
            f"simulate ok: {summary['picard_iterations']} Picard iterations, "
            f"energy constant {energy if energy is None else f'{energy:.4g}'}, artifacts in {artifacts.out_dir}"))
