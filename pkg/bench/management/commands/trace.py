from bench.management.base import LabCommand
from bench.tasks import TRACE_SCENARIOS, trace


class Command(LabCommand):
    help = 'Run a scripted single lift and dump its simulator trace and tactile maps as CSV'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--scenario', required=True, choices=TRACE_SCENARIOS, help='Scripted lift to run')
        parser.add_argument('--out', required=True, type=str, help='Trace CSV path; maps go to <stem>_maps.csv')
        parser.add_argument('--noise', action='store_true', help='Add taxel noise (seeded by --seed)')

    def run(self, **options):
        run_config = self.load_config(options)
        for trace_path, maps_path, lift in trace(options['scenario'], options['out'], run_config,
                                                 noise=options['noise']):
            self.stdout.write(f"{trace_path}: theta_final={lift.theta_final:.4f} rad, "
                              f"slip_final={lift.slip_final * 1000:.3f} mm; maps in {maps_path}")
        self.success(f"Trace scenario {options['scenario']} done")
