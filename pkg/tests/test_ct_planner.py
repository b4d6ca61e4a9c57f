"""
Unit tests for the ct-planner command line
"""

import io
import json
import os
import sys
import tempfile
import unittest
from contextlib import redirect_stdout

current_dir = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(current_dir)
planner_dir = os.path.join(parent_dir, 'planner')
sys.path.insert(0, planner_dir)

import ct_planner
import minlp_model as mm

SAMPLE_PATH = os.path.join(parent_dir, 'json_files', 'sample_scenario_n5.json')


def run(argv):
    out = io.StringIO()
    with redirect_stdout(out):
        code = ct_planner.main(argv)
    return code, out.getvalue()


class TestCommandLine(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, name):
        return os.path.join(self.tmp.name, name)

    def test_generate_simulate_validate(self):
        scenario = self.path('s.json')
        legs = self.path('legs.csv')
        code, _ = run(['generate', '--base-n', '5', '--base-m', '1', '--seed', '3', '--out', scenario])
        self.assertEqual(code, 0)
        code, out = run(['simulate', '--scenario', scenario, '--method', 'feasrnd', '--log', legs])
        self.assertEqual(code, 0)
        summary = json.loads(out)
        self.assertEqual((summary['N'], summary['M']), (5, 2))
        code, out = run(['validate-trace', '--scenario', scenario, '--log', legs, '--S', '20', '--H', '10'])
        self.assertEqual(code, 0)
        self.assertTrue(json.loads(out)['passed'])

    def test_export_minlp(self):
        out_path = self.path('model.txt')
        lp_path = self.path('model.lp')
        code, out = run(['export-minlp', '--scenario', SAMPLE_PATH, '--S', '1', '--H', '2',
                         '--out', out_path, '--lp', lp_path])
        self.assertEqual(code, 0)
        self.assertEqual(json.loads(out)['meta'], {'N': 5, 'M': 2, 'S': 1, 'H': 2})
        self.assertEqual(mm.read_model(out_path).meta['N'], 5)
        self.assertTrue(os.path.exists(lp_path))

    def test_solve_exact(self):
        code, out = run(['solve-exact', '--scenario', SAMPLE_PATH, '--max-nodes', '20000'])
        self.assertEqual(code, 0)
        result = json.loads(out)
        self.assertTrue(0 <= result['n_success'] <= 5)

    def test_errors_return_two(self):
        code, _ = run(['simulate', '--scenario', self.path('missing.json')])
        self.assertEqual(code, 2)
        code, _ = run(['simulate', '--scenario', SAMPLE_PATH, '--method', 'capam'])
        self.assertEqual(code, 2)
        code, _ = run(['bench', '--methods', 'capam', '--samples', '2', '--out-dir', self.path('r')])
        self.assertEqual(code, 2)

    def test_bench_writes_results(self):
        out_dir = self.path('results')
        code, out = run(['bench', '--methods', 'feasrnd', 'bigmrta', '--lambda-t', '0.1', '--samples', '2',
                         '--out-dir', out_dir])
        self.assertEqual(code, 0)
        self.assertIn('bigmrta vs feasrnd', out)
        self.assertTrue(os.path.exists(os.path.join(out_dir, 'summary.txt')))


if __name__ == '__main__':
    unittest.main()
