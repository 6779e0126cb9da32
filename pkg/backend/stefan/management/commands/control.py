from stefan.experiment_service import run_control

from ._shared import StefanCommand


class Command(StefanCommand):
    help = 'Search a boundary control that makes the target set mushy at the final time.'

    def handle(self, *args, **options):
        config = self.load(options)
        artifacts = self.run_guarded(run_control, config, options['out'], self.threads(options), options['seed'])
        summary = artifacts.summary
        message = (f"control {'succeeded' if summary['success'] else 'did not converge'}: "
                   f"coverage {summary['coverage']:.4f} after {summary['outer_iterations']} outer iteration(s), "
                   f"artifacts in {artifacts.out_dir}")
        style = self.style.SUCCESS if summary['success'] else self.style.WARNING
        self.stdout.write(style(message))
