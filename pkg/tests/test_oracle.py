import numpy as np
import pytest

from adaspec.distributions import Vocab
from adaspec.errors import DomainError, StateSpaceTooLarge
from adaspec.lm import SamplingTransform, perturb, random_table_model
from adaspec.metrics import CostModel
from adaspec.oracle import (
    DEFAULT_COST,
    MicroMdp,
    _Solver,
    battery,
    battery_policies,
    bellman_residuals,
    check_threshold_condition,
    disjoint_micro_mdp,
    exact_output_dist,
    monte_carlo_q,
    naive_delta_bound,
    q_values,
    random_micro_mdp,
    rejection_prob,
    stop_threshold,
    target_output_dist,
    write_report_csv,
)
from adaspec.policies import draft_confidence, fixed_k
from conftest import markov


def max_diff(a, b):
    return max(abs(a.get(k, 0.0) - b.get(k, 0.0)) for k in set(a) | set(b))


def mdp_of(target, draft, prompt=(0,), max_len=4, k_cap=2, cost=DEFAULT_COST):
    return MicroMdp(target, draft, prompt, max_len, k_cap, cost)


class TestLaws:
    def test_identical_models(self):
        m = random_table_model(Vocab(4, 3), 2, np.random.default_rng(0))
        mdp = mdp_of(m, m, max_len=5, k_cap=3)
        for pol in (fixed_k(1), fixed_k(3), draft_confidence(0.5)):
            assert max_diff(exact_output_dist(mdp, pol), target_output_dist(mdp)) <= 1e-12

    def test_three_tokens_two_steps(self):
        rng = np.random.default_rng(1)
        target = random_table_model(Vocab(3, 2), 1, rng)
        draft = random_table_model(Vocab(3, 2), 1, rng)
        mdp = mdp_of(target, draft, max_len=3, k_cap=2)
        assert max_diff(exact_output_dist(mdp, fixed_k(2)), target_output_dist(mdp)) <= 1e-10

    def test_normalized(self):
        for mdp in battery(6, seed=3):
            ref = target_output_dist(mdp)
            assert abs(sum(ref.values()) - 1) <= 1e-12 and min(ref.values()) >= 0
            for pol in battery_policies(mdp)[:3]:
                law = exact_output_dist(mdp, pol)
                assert abs(sum(law.values()) - 1) <= 1e-10 and min(law.values()) >= 0

    def test_point_mass_target(self):
        target = markov([[0, 1.0, 0]] * 4)
        draft = markov([[0.3, 0.3, 0.4]] * 4)
        mdp = mdp_of(target, draft, max_len=4)
        assert target_output_dist(mdp) == {(0, 1, 1, 1): 1.0}
        assert exact_output_dist(mdp, fixed_k(2)) == pytest.approx({(0, 1, 1, 1): 1.0})

    def test_long_battery_sample(self):
        for mdp in battery(3, seed=5, long=True)[:3]:
            for pol in battery_policies(mdp, 1):
                assert max_diff(exact_output_dist(mdp, pol), target_output_dist(mdp)) <= 1e-10

    def test_truncated_sampling_stays_unbiased(self):
        rng = np.random.default_rng(4)
        target = random_table_model(Vocab(5, 4), 1, rng)
        draft = perturb(target, 0.4, 1.5)
        t, d = SamplingTransform(target, 3, 0.8), SamplingTransform(draft, 3, 0.8)
        mdp = mdp_of(t, d, max_len=4, k_cap=2)
        assert max_diff(exact_output_dist(mdp, fixed_k(2)), target_output_dist(mdp)) <= 1e-10


class TestRejectionProb:
    def test_empty(self):
        mdp = disjoint_micro_mdp()
        assert rejection_prob(mdp, (0,), ()) == 0.0

    def test_product(self):
        target = markov([[0.5, 0.5, 0.0]] * 4)
        draft = markov([[0.9, 0.09, 0.01]] * 4)
        mdp = mdp_of(target, draft)
        assert rejection_prob(mdp, (0,), (0, 1)) == pytest.approx(4 / 9, abs=1e-15)

    def test_identical_models(self):
        m = random_table_model(Vocab(4, 3), 1, np.random.default_rng(0))
        mdp = mdp_of(m, m)
        assert rejection_prob(mdp, (0,), (1, 2, 0)) == 0.0


class TestQValues:
    def test_stop_that_ends_generation(self):
        # every verification outcome emits EOS, so stopping ends the run
        target = markov([[0, 0, 1.0]] * 4)
        draft = markov([[0.5, 0.3, 0.2]] * 4)
        cost = CostModel(0.02, 0.1)
        mdp = mdp_of(target, draft, max_len=5, k_cap=3, cost=cost)
        for cands in ((), (0,), (1,), (0, 1)):
            q_stop, _ = q_values(mdp, fixed_k(3), (0,), cands)
            expected = cost.c2 + rejection_prob(mdp, (0,), cands) * cost.c1
            assert q_stop == pytest.approx(expected, abs=1e-15)

    def test_identical_models_continue_never_worse(self):
        m = random_table_model(Vocab(4, 3), 1, np.random.default_rng(3))
        mdp = mdp_of(m, m, max_len=6, k_cap=4)
        solver = _Solver(mdp, fixed_k(4))
        checked = 0
        for state in solver.reachable_states():
            q_stop, q_cont = solver.q(state)
            if q_cont is not None:
                assert q_cont <= q_stop + 1e-15
                checked += 1
        assert checked > 0

    def test_forced_state_has_no_continue(self):
        mdp = disjoint_micro_mdp()
        assert q_values(mdp, fixed_k(3), (0,), (0, 0, 0))[1] is None

    def test_bellman_expansion(self):
        for mdp in battery(4, seed=2, long=True):
            for pol in battery_policies(mdp, 0):
                assert max(bellman_residuals(mdp, pol)) <= 1e-10

    def test_monte_carlo(self):
        mdp = random_micro_mdp(3)
        pol = fixed_k(3)
        q_stop, q_cont = q_values(mdp, pol, mdp.prompt)
        m, se = monte_carlo_q(mdp, pol, 20_000, seed=0, first_action=False)
        assert abs(m - q_cont) <= 4 * se
        m, se = monte_carlo_q(mdp, pol, 20_000, seed=1, first_action=True)
        assert abs(m - q_stop) <= 4 * se


class TestDeltaAndThreshold:
    def test_naive_bound_arithmetic(self):
        m = random_table_model(Vocab(3, 2), 1, np.random.default_rng(0))
        mdp = mdp_of(m, perturb(m, 0.2), max_len=4, k_cap=2, cost=CostModel(0.02, 0.1))
        assert naive_delta_bound(mdp) == pytest.approx(0.56)

    def test_bound_dominates_q_values(self):
        for mdp in battery(5, seed=1, long=True):
            delta = naive_delta_bound(mdp)
            solver = _Solver(mdp, fixed_k(2))
            for state in solver.reachable_states():
                q_stop, q_cont = solver.q(state)
                assert q_stop <= delta and (q_cont is None or q_cont <= delta)

    def test_linear_in_max_len(self):
        m = random_table_model(Vocab(3, 2), 1, np.random.default_rng(0))
        d = [naive_delta_bound(mdp_of(m, m, max_len=L, k_cap=3)) for L in (2, 3, 4, 5, 6)]
        np.testing.assert_allclose(np.diff(d), d[1] - d[0])

    def test_threshold_formula(self):
        mdp = disjoint_micro_mdp()
        c1, c2, delta = mdp.cost.c1, mdp.cost.c2, naive_delta_bound(mdp)
        assert stop_threshold(mdp) == pytest.approx((c2 + delta) / (c1 + c2 + delta))

    def test_vacuous_when_delta_huge(self):
        rep = check_threshold_condition(disjoint_micro_mdp(), fixed_k(3), delta=1e9)
        assert rep.vacuous and rep.n_violations == 0
        assert "never fired" in rep.summary()

    def test_disjoint_instance_fires_at_one_candidate(self, tmp_path):
        mdp = disjoint_micro_mdp()
        rep = check_threshold_condition(mdp, fixed_k(3))
        fired = [r for r in rep.rows if r.fires]
        assert fired and rep.n_violations == 0
        assert any(len(r.candidates) == 2 for r in fired)
        for r in fired:
            assert r.q_stop <= r.q_continue
        write_report_csv([rep], tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0].startswith("instance,policy") and len(lines) == len(rep.rows) + 1

    def test_battery_has_no_violations(self):
        for i, mdp in enumerate(battery(5, seed=7, long=True)):
            for pol in battery_policies(mdp, i):
                assert check_threshold_condition(mdp, pol).n_violations == 0


class TestInstances:
    def test_limits(self):
        m = random_table_model(Vocab(6, 5), 1, np.random.default_rng(0))
        with pytest.raises(DomainError):
            mdp_of(m, m)
        m = random_table_model(Vocab(3, 2), 1, np.random.default_rng(0))
        with pytest.raises(DomainError):
            mdp_of(m, m, max_len=7)
        with pytest.raises(DomainError):
            mdp_of(m, m, k_cap=5)
        with pytest.raises(DomainError):
            mdp_of(m, m, prompt=(0, 1, 2, 0), max_len=4)

    def test_branch_budget(self):
        m = random_table_model(Vocab(5, 4), 2, np.random.default_rng(0))
        mdp = MicroMdp(m, perturb(m, 0.3), (0,), 6, 4, DEFAULT_COST, branch_budget=100)
        with pytest.raises(StateSpaceTooLarge):
            exact_output_dist(mdp, fixed_k(4))

    def test_battery_is_seeded(self):
        a, b = battery(3, seed=1), battery(3, seed=1)
        for x, y in zip(a, b):
            assert x.name == y.name and x.max_len == y.max_len
            assert x.target.next_dist(x.prompt).tobytes() == y.target.next_dist(y.prompt).tobytes()
