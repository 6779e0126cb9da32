import json
from pathlib import Path

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase

from stefan.exceptions import ConfigurationError
from stefan.models import LinearSolver, MushyBand
from stefan.serializers import emit_config, load_config, parse_config

from .factories import small_config

CONFIG_DIR = Path(settings.BASE_DIR) / 'configs'


def random_document(rng):
    dimension = int(rng.integers(1, 3))
    cells = [int(rng.integers(4, 64)) for _ in range(dimension)]
    lam = float(10 ** rng.uniform(-6, -3))
    return {
        'problem': {'dimension': dimension, 'extents': [float(rng.uniform(0.5, 2.0)) for _ in range(dimension)],
                    'cells': cells, 'T': float(rng.uniform(0.01, 1.0)), 'steps': int(rng.integers(2, 300))},
        'physics': {'k1': float(rng.uniform(1.0, 3.0)), 'k2': float(rng.uniform(1.0, 3.0)),
                    'rho': float(rng.uniform(0.1, 2.0)), 'lambda': lam, 'alpha': float(rng.uniform(0.01, 0.3)),
                    'mu': float(rng.uniform(0.01, 0.2))},
        'initial': {'profile': str(rng.choice(['constant', 'linear_ramp', 'two_phase_step', 'cosine_bump'])),
                    'value': float(rng.normal())},
        'target': {'boxes': [[0.0, 1.0] if dimension == 1 else [[0.0, 1.0], [0.0, 1.0]]]},
        'solver': {'linear_solver': str(rng.choice(['cg', 'direct'])), 'cg_rtol': float(10 ** rng.uniform(-12, -6)),
                   'picard_damping': float(rng.uniform(0.1, 1.0))},
        'optimizer': {'eps_floor': float(10 ** rng.uniform(-8, -2)), 'relaxation': float(rng.uniform(0.1, 1.0)),
                      'band': str(rng.choice(['narrow', 'wide', 'classical']))},
        'diagnostics': {'holder_samples': int(rng.integers(1, 5000)), 'write_binary': bool(rng.integers(2))},
        'seed': int(rng.integers(0, 2 ** 31)),
    }


class ParseConfigTests(SimpleTestCase):

    def test_minimal_document_gets_defaults(self):
        config = parse_config('{}')
        self.assertEqual(config.problem.cells, [128])
        self.assertEqual(config.physics.lam, 1e-4)
        self.assertEqual(config.solver.linear_solver, LinearSolver.CG)
        self.assertEqual(config.optimizer.band, MushyBand.NARROW)
        self.assertEqual(config.outer_settings().eps_schedule[-1], 1e-6)

    def test_lambda_spelled_out(self):
        config = parse_config(json.dumps({'physics': {'lambda': 1e-5}}))
        self.assertEqual(config.params().lam, 1e-5)
        self.assertEqual(json.loads(emit_config(config))['physics']['lambda'], 1e-5)

    def test_negative_conductivity_names_key(self):
        with self.assertRaises(ConfigurationError) as ctx:
            parse_config(json.dumps({'physics': {'k1': -1}}))
        self.assertEqual(ctx.exception.key, 'k1')

    def test_lambda_too_large_names_key(self):
        document = {'physics': {'k1': 0.6, 'k2': 0.5, 'lambda': 0.5, 'alpha': 0.5}}
        with self.assertRaises(ConfigurationError) as ctx:
            parse_config(json.dumps(document))
        self.assertEqual(ctx.exception.key, 'lambda')

    def test_unknown_key_rejected(self):
        with self.assertRaises(ConfigurationError) as ctx:
            parse_config(json.dumps({'solver': {'preconditioner': 'ilu'}}))
        self.assertEqual(ctx.exception.key, 'preconditioner')

    def test_empty_target_rejected(self):
        with self.assertRaises(ConfigurationError):
            parse_config(json.dumps({'target': {'boxes': [[2.0, 3.0]]}}))

    def test_axis_count_must_match_dimension(self):
        with self.assertRaises(ConfigurationError):
            parse_config(json.dumps({'problem': {'dimension': 2, 'extents': [1.0], 'cells': [8]}}))

    def test_unknown_face_label(self):
        with self.assertRaises(ConfigurationError):
            parse_config(json.dumps({'control': {'kind': 'constant', 'fluxes': {'north': 1.0}}}))

    def test_invalid_json(self):
        with self.assertRaises(ConfigurationError) as ctx:
            parse_config('{"problem": ')
        self.assertEqual(ctx.exception.key, 'config')

    def test_interior_margin_at_least_one_cell(self):
        config = parse_config(json.dumps(small_config(diagnostics={'interior_margin': 0.0})))
        self.assertAlmostEqual(config.interior_margin(), 1.0 / 32)


class RoundTripTests(SimpleTestCase):

    def test_randomized_documents_survive_emit_and_parse(self):
        rng = np.random.default_rng(2024)
        for _ in range(100):
            config = parse_config(json.dumps(random_document(rng)))
            again = parse_config(emit_config(config))
            self.assertEqual(again, config)
            self.assertEqual(emit_config(again), emit_config(config))

    def test_shipped_configs_parse(self):
        paths = sorted(CONFIG_DIR.glob('*.json'))
        self.assertTrue(paths)
        for path in paths:
            with self.subTest(config=path.name):
                config = load_config(path)
                self.assertEqual(parse_config(emit_config(config)), config)
