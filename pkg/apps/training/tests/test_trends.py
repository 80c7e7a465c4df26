"""
Reduced-size versions of the solver comparisons under experiments/.

Each test runs a few seeds of small problems and checks the direction of the
comparison with the same margins as the full experiments. Run them alone with
``python manage.py test apps.training --tag=trend``.
"""
import numpy as np
from django.test import SimpleTestCase, tag

from apps.training.experiments import BUDGET, CONVERGED, parse_config, run_experiment

SEEDS = (1, 2, 3)


def smiley_config(solver, levels, **sections):
    config = {
        'dataset': {'generator': 'smiley', 'n': 600, 'n_train': 400, 'seed': 0},
        'network': {'width': 10, 'K': 7, 'levels': levels, 'beta1': 1e-4, 'beta2': 1e-4},
        'solver': {'solver': solver, 'hessian': 'LSR1_overlap'},
        'stopping': {'accuracy': 0.9, 'epoch_max': 3000},
    }
    for section, values in sections.items():
        config.setdefault(section, {}).update(values)
    return parse_config(config)


def regression_config(hessian):
    return parse_config({
        'dataset': {'generator': 'analytic', 'n': 400, 'n_train': 300, 'seed': 0, 'standardize_targets': True},
        'network': {'width': 10, 'K': 7, 'levels': 1},
        'solver': {'solver': 'TR', 'hessian': hessian},
        'stopping': {'work_max': 200, 'epoch_max': 100000},
    })


def replicate_summaries(config):
    return [run_experiment(config, seed=seed).summary for seed in SEEDS]


def median_work(summaries):
    return float(np.median([summary['work'] for summary in summaries]))


@tag('trend')
class DeterministicSpeedupTests(SimpleTestCase):
    def assertConverged(self, summaries):
        self.assertEqual([summary['stop_reason'] for summary in summaries], [CONVERGED] * len(SEEDS))

    def test_fcycle_costs_at_most_half_of_single_level_training(self):
        fcycle = replicate_summaries(smiley_config('RMTR_F', 3))
        single = replicate_summaries(smiley_config('TR', 3))
        self.assertConverged(fcycle)
        self.assertConverged(single)
        self.assertEqual({summary['final_level'] for summary in fcycle}, {3})
        self.assertLessEqual(median_work(fcycle), 0.5 * median_work(single))

    def test_deeper_hierarchy_does_not_cost_more(self):
        four = replicate_summaries(smiley_config('RMTR_F', 4))
        three = replicate_summaries(smiley_config('RMTR_F', 3))
        self.assertConverged(four)
        self.assertConverged(three)
        self.assertLessEqual(median_work(four), 1.1 * median_work(three))


@tag('trend')
class HybridSpeedupTests(SimpleTestCase):
    def test_multilevel_hybrid_is_cheaper_than_single_level_hybrid(self):
        sampling = {'mbs0': 20, 'overlap': 0.2}
        multilevel = replicate_summaries(smiley_config('DSS_RMTR', 2, sampling=sampling))
        single = replicate_summaries(smiley_config('DSS_TR', 2, sampling=sampling))
        for summaries in (multilevel, single):
            self.assertEqual([summary['stop_reason'] for summary in summaries], [CONVERGED] * len(SEEDS))
        self.assertLess(median_work(multilevel), median_work(single))


@tag('trend')
class CurvatureBenefitTests(SimpleTestCase):
    def test_secant_model_beats_cauchy_point_under_a_budget(self):
        secant = replicate_summaries(regression_config('LSR1_overlap'))
        cauchy = replicate_summaries(regression_config('CP'))
        for summaries in (secant, cauchy):
            self.assertEqual([summary['stop_reason'] for summary in summaries], [BUDGET] * len(SEEDS))
        secant_loss = float(np.median([summary['train_loss'] for summary in secant]))
        cauchy_loss = float(np.median([summary['train_loss'] for summary in cauchy]))
        self.assertLessEqual(secant_loss, 0.1 * cauchy_loss)
