"""Exact enumeration over tiny instances.

Computes the exact law of ``specdec.generate`` under a stopping policy,
the reference autoregressive law of the target, exact stop/continue
Q-values of the candidate-length MDP, and an audit of the threshold
stopping condition.

Decision states are ``(prefix, candidates)``: the draft has just produced
``candidates[-1]`` (or nothing yet) and the controller picks stop or
continue. Costs are charged per step: every decision at a state with
``j`` candidates pays ``c1`` times the probability that candidate ``j`` is
discarded, and stopping pays ``c2`` on top. Summed over a generation this
is ``c1 * N_discarded + c2 * N_target``.

Uniform acceptance draws are integrated out analytically: given the
candidates, rejection events factor into products of ``accept_prob``
terms.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from adaspec.distributions import Vocab, accept_prob, residual
from adaspec.errors import DomainError, StateSpaceTooLarge
from adaspec.lm import LanguageModel, perturb, random_table_model
from adaspec.metrics import REFERENCE_COST, CostModel
from adaspec.policies import (
    FirstAction,
    PolicyState,
    StoppingPolicy,
    adaptive_threshold,
    advance,
    confidence_product,
    draft_confidence,
    fixed_k,
    oracle_acceptance,
)
from adaspec.specdec import generate

Seq = Tuple[int, ...]
DEFAULT_BRANCH_BUDGET = 5_000_000


@dataclass
class MicroMdp:
    target: LanguageModel
    draft: LanguageModel
    prompt: Seq
    max_len: int
    k_cap: int
    cost: CostModel
    branch_budget: int = DEFAULT_BRANCH_BUDGET
    name: str = ""

    def __post_init__(self):
        self.prompt = tuple(self.prompt)
        if self.target.vocab.size > 5:
            raise DomainError("micro instances use vocabularies of at most 5 tokens")
        if self.max_len > 6 or self.k_cap > 4:
            raise DomainError("micro instances need max_len <= 6 and k_cap <= 4")
        if not self.prompt or self.max_len <= len(self.prompt):
            raise DomainError("max_len must exceed a nonempty prompt")

    @property
    def eos(self) -> int:
        return self.target.vocab.eos

    def is_terminal(self, prefix: Seq) -> bool:
        return len(prefix) >= self.max_len or (len(prefix) > len(self.prompt) and prefix[-1] == self.eos)

    def budget(self, prefix: Seq) -> int:
        return min(self.k_cap, self.max_len - len(prefix) - 1)

    def forced_stop(self, state: PolicyState) -> bool:
        if state.k >= self.budget(state.prefix):
            return True
        return state.k > 0 and state.candidates[-1] == self.eos


def _emit(mdp: MicroMdp, prefix: Seq, tokens: Seq) -> Seq:
    if mdp.eos in tokens:
        tokens = tokens[: tokens.index(mdp.eos) + 1]
    return prefix + tokens


class _Counter:
    def __init__(self, budget):
        self.budget = budget
        self.n = 0

    def tick(self, k=1):
        self.n += k
        if self.n > self.budget:
            raise StateSpaceTooLarge(f"enumeration exceeded {self.budget} branches")


def _verification_outcomes(mdp: MicroMdp, state: PolicyState):
    """Yield ``(prob, n_accepted, new_prefix)`` for verifying ``state``'s candidates."""
    prefix, cands = state.prefix, state.candidates
    acc = 1.0
    for m, (y, q) in enumerate(zip(cands, state.draft_dists)):
        p = mdp.target.next_dist(prefix + cands[:m])
        a = accept_prob(p, q, y)
        rej = acc * (1.0 - a)
        if rej > 0:
            fix = residual(p, q)
            for t in np.flatnonzero(fix):
                yield rej * fix[t], m, _emit(mdp, prefix, cands[:m] + (int(t),))
        acc *= a
        if acc == 0:
            return
    p = mdp.target.next_dist(prefix + cands)
    for t in np.flatnonzero(p):
        yield acc * p[t], len(cands), _emit(mdp, prefix, cands + (int(t),))


def discard_prob(mdp: MicroMdp, state: PolicyState) -> float:
    """Probability that the newest candidate is discarded (some candidate so far rejected)."""
    return rejection_prob(mdp, state.prefix, state.candidates)


def rejection_prob(mdp: MicroMdp, prefix, candidates) -> float:
    """``P(some candidate is rejected | prefix)`` given the drafted candidates."""
    prefix, candidates = tuple(prefix), tuple(candidates)
    acc = 1.0
    for i, y in enumerate(candidates):
        ctx = prefix + candidates[:i]
        acc *= accept_prob(mdp.target.next_dist(ctx), mdp.draft.next_dist(ctx), y)
    return 1.0 - acc


class _Solver:
    """Memoized enumeration for one (instance, policy) pair."""

    def __init__(self, mdp: MicroMdp, policy: StoppingPolicy):
        self.mdp = mdp
        self.policy = policy
        self.counter = _Counter(mdp.branch_budget)
        self._round: Dict[Seq, Dict[Seq, float]] = {}
        self._law: Dict[Seq, Dict[Seq, float]] = {}
        self._value: Dict[Seq, float] = {}
        self._q: Dict[Tuple[Seq, Seq], Tuple[float, Optional[float]]] = {}

    def root(self, prefix: Seq) -> PolicyState:
        return PolicyState(prefix=prefix, k_cap=self.mdp.k_cap)

    def child(self, state: PolicyState, y: int) -> PolicyState:
        q = self.mdp.draft.next_dist(state.prefix + state.candidates)
        return advance(state, self.policy, y, q)

    def stops(self, state: PolicyState) -> bool:
        return self.mdp.forced_stop(state) or bool(self.policy.decide(state))

    def state_at(self, prefix: Seq, candidates: Seq) -> PolicyState:
        s = self.root(tuple(prefix))
        for y in candidates:
            s = self.child(s, y)
        return s

    # output law ----------------------------------------------------------

    def round_outcomes(self, prefix: Seq) -> Dict[Seq, float]:
        """Law of the prefix after one round started at ``prefix``."""
        out = self._round.get(prefix)
        if out is not None:
            return out
        out = defaultdict(float)
        stack = [(self.root(prefix), 1.0)]
        while stack:
            state, prob = stack.pop()
            if self.stops(state):
                for w, _, nxt in _verification_outcomes(self.mdp, state):
                    self.counter.tick()
                    out[nxt] += prob * w
            else:
                q = self.mdp.draft.next_dist(prefix + state.candidates)
                for y in np.flatnonzero(q):
                    self.counter.tick()
                    stack.append((self.child(state, int(y)), prob * q[y]))
        self._round[prefix] = dict(out)
        return self._round[prefix]

    def law(self, prefix: Seq) -> Dict[Seq, float]:
        out = self._law.get(prefix)
        if out is not None:
            return out
        if self.mdp.is_terminal(prefix):
            out = {prefix: 1.0}
        else:
            acc = defaultdict(float)
            for nxt, w in self.round_outcomes(prefix).items():
                for seq, v in self.law(nxt).items():
                    acc[seq] += w * v
            out = dict(acc)
        self._law[prefix] = out
        return out

    # costs ---------------------------------------------------------------

    def value(self, prefix: Seq) -> float:
        v = self._value.get(prefix)
        if v is None:
            if self.mdp.is_terminal(prefix):
                v = 0.0
            else:
                v = self.state_value(self.root(prefix))
            self._value[prefix] = v
        return v

    def state_value(self, state: PolicyState) -> float:
        q_stop, q_cont = self.q(state)
        return q_stop if self.stops(state) else q_cont

    def q(self, state: PolicyState) -> Tuple[float, Optional[float]]:
        key = (state.prefix, state.candidates)
        hit = self._q.get(key)
        if hit is not None:
            return hit
        c1, c2 = self.mdp.cost.c1, self.mdp.cost.c2
        step_cost = c1 * discard_prob(self.mdp, state)
        grouped = defaultdict(float)
        for w, _, nxt in _verification_outcomes(self.mdp, state):
            self.counter.tick()
            grouped[nxt] += w
        q_stop = step_cost + c2 + sum(w * self.value(nxt) for nxt, w in grouped.items())
        q_cont = None
        if not self.mdp.forced_stop(state):
            q = self.mdp.draft.next_dist(state.prefix + state.candidates)
            q_cont = step_cost
            for y in np.flatnonzero(q):
                self.counter.tick()
                q_cont += q[y] * self.state_value(self.child(state, int(y)))
        self._q[key] = (q_stop, q_cont)
        return self._q[key]

    def reachable_states(self) -> Iterable[PolicyState]:
        """Every decision state visited when following the policy from the prompt."""
        seen_prefix = set()
        todo = [self.mdp.prompt]
        while todo:
            prefix = todo.pop()
            if prefix in seen_prefix or self.mdp.is_terminal(prefix):
                continue
            seen_prefix.add(prefix)
            stack = [self.root(prefix)]
            while stack:
                state = stack.pop()
                yield state
                if self.stops(state):
                    continue
                q = self.mdp.draft.next_dist(prefix + state.candidates)
                for y in np.flatnonzero(q):
                    stack.append(self.child(state, int(y)))
            todo.extend(self.round_outcomes(prefix))


def exact_output_dist(mdp: MicroMdp, policy: StoppingPolicy) -> Dict[Seq, float]:
    """Exact law of ``generate(...).output`` under ``policy``."""
    return _Solver(mdp, policy).law(mdp.prompt)


def target_output_dist(mdp: MicroMdp) -> Dict[Seq, float]:
    """Law of plain autoregressive sampling from the target, stopped at EOS or ``max_len``."""
    out: Dict[Seq, float] = defaultdict(float)
    counter = _Counter(mdp.branch_budget)
    stack = [(mdp.prompt, 1.0)]
    while stack:
        prefix, prob = stack.pop()
        if mdp.is_terminal(prefix):
            out[prefix] += prob
            continue
        p = mdp.target.next_dist(prefix)
        for t in np.flatnonzero(p):
            counter.tick()
            stack.append((prefix + (int(t),), prob * p[t]))
    return dict(out)


def q_values(mdp: MicroMdp, policy: StoppingPolicy, prefix, candidates=()) -> Tuple[float, Optional[float]]:
    """``(Q_stop, Q_continue)`` in seconds at decision state ``(prefix, candidates)``.

    ``Q_continue`` is None where a stop is forced (EOS candidate, ``k_cap``
    or length budget).
    """
    solver = _Solver(mdp, policy)
    return solver.q(solver.state_at(tuple(prefix), tuple(candidates)))


def naive_delta_bound(mdp: MicroMdp) -> float:
    """Upper bound on any cost-to-go: every token its own round, every round at ``k_cap``."""
    max_rounds = mdp.max_len
    max_draft = mdp.max_len * mdp.k_cap
    return max_rounds * mdp.cost.t_target + max_draft * mdp.cost.t_draft


def stop_threshold(mdp: MicroMdp, delta: Optional[float] = None) -> float:
    delta = naive_delta_bound(mdp) if delta is None else delta
    c1, c2 = mdp.cost.c1, mdp.cost.c2
    return (c2 + delta) / (c1 + c2 + delta)


@dataclass
class ConditionRow:
    prefix: Seq
    candidates: Seq
    rejection_prob: float
    threshold: float
    q_stop: float
    q_continue: float
    fires: bool
    violation: bool


@dataclass
class ConditionReport:
    name: str
    policy: str
    delta: float
    threshold: float
    rows: List[ConditionRow]

    @property
    def n_fired(self) -> int:
        return sum(r.fires for r in self.rows)

    @property
    def n_violations(self) -> int:
        return sum(r.violation for r in self.rows)

    @property
    def vacuous(self) -> bool:
        return self.n_fired == 0

    def summary(self) -> str:
        s = f"{self.name} {self.policy}: {len(self.rows)} states, {self.n_fired} fired, {self.n_violations} violations"
        if self.vacuous:
            s += " (condition never fired)"
        return s


CSV_FIELDS = [
    "instance",
    "policy",
    "prefix",
    "candidates",
    "rejection_prob",
    "threshold",
    "q_stop",
    "q_continue",
    "fires",
    "violation",
]


def write_report_csv(reports: Iterable[ConditionReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for rep in reports:
            for r in rep.rows:
                w.writerow([
                    rep.name,
                    rep.policy,
                    " ".join(map(str, r.prefix)),
                    " ".join(map(str, r.candidates)),
                    f"{r.rejection_prob:.12g}",
                    f"{r.threshold:.12g}",
                    f"{r.q_stop:.12g}",
                    f"{r.q_continue:.12g}",
                    int(r.fires),
                    int(r.violation),
                ])


def check_threshold_condition(
    mdp: MicroMdp, policy: StoppingPolicy, delta: Optional[float] = None, tol: float = 1e-12
) -> ConditionReport:
    """Audit the threshold stopping condition on every reachable decision state.

    A decision state holding ``k + 1`` candidates is audited as the state
    with ``k`` candidates whose next candidate ``Y_{k+1}`` is already drawn;
    the condition uses the rejection probability of the first ``k`` only. Rows
    cover states with ``k >= 1`` where both actions are available; a row
    is a violation when the condition fires yet ``Q_stop > Q_continue``.
    """
    solver = _Solver(mdp, policy)
    delta = naive_delta_bound(mdp) if delta is None else delta
    thr = stop_threshold(mdp, delta)
    rows = []
    for state in solver.reachable_states():
        if state.k < 2 or mdp.forced_stop(state):
            continue
        rej = rejection_prob(mdp, state.prefix, state.candidates[:-1])
        q_stop, q_cont = solver.q(state)
        fires = bool(rej >= thr)
        rows.append(ConditionRow(
            prefix=state.prefix,
            candidates=state.candidates,
            rejection_prob=rej,
            threshold=thr,
            q_stop=q_stop,
            q_continue=q_cont,
            fires=fires,
            violation=bool(fires and q_stop > q_cont + tol),
        ))
    rows.sort(key=lambda r: (len(r.prefix), r.prefix, len(r.candidates), r.candidates))
    return ConditionReport(mdp.name, policy.describe(), delta, thr, rows)


def bellman_residuals(mdp: MicroMdp, policy: StoppingPolicy) -> List[float]:
    """One-step expansion residuals ``|Q(s,a) - sum P(s'|s,a)[c + V(s')]|``.

    Transitions are enumerated branch by branch here (each rejection index
    and correction token separately, with realized costs), independently
    of the grouped expectations used by ``q_values``.
    """
    solver = _Solver(mdp, policy)
    c1, c2 = mdp.cost.c1, mdp.cost.c2
    out = []
    for state in solver.reachable_states():
        q_stop, q_cont = solver.q(state)
        prefix, cands = state.prefix, state.candidates
        j = len(cands)
        # stop: verify all j candidates
        expansion = 0.0
        acc = 1.0
        for m in range(j + 1):
            p = mdp.target.next_dist(prefix + cands[:m])
            if m < j:
                q = mdp.draft.next_dist(prefix + cands[:m])
                a = min(1.0, p[cands[m]] / q[cands[m]])
                branch = acc * (1.0 - a)
                law = np.maximum(p - q, 0.0)
                law = law / law.sum() if branch > 0 else law
                cost = c2 + c1
            else:
                a = None
                branch = acc
                law = p
                cost = c2
            if branch > 0:
                for t in range(len(law)):
                    if law[t] > 0:
                        nxt = _emit(mdp, prefix, cands[:m] + (t,))
                        expansion += branch * law[t] * (cost + solver.value(nxt))
            if a is None:
                break
            acc *= a
        out.append(abs(q_stop - expansion))
        if q_cont is not None:
            disc = rejection_prob(mdp, prefix, cands)
            q = mdp.draft.next_dist(prefix + cands)
            expansion = 0.0
            for y in range(len(q)):
                if q[y] > 0:
                    expansion += q[y] * (c1 * disc + solver.state_value(solver.child(state, y)))
            out.append(abs(q_cont - expansion))
    return out


def trace_cost(trace, cost: CostModel) -> float:
    return cost.c1 * trace.n_discarded + cost.c2 * trace.n_target


def monte_carlo_q(
    mdp: MicroMdp,
    policy: StoppingPolicy,
    n_rollouts: int,
    seed: int,
    first_action: Optional[bool] = None,
) -> Tuple[float, float]:
    """Mean and standard error of the realized cost of full engine runs from the prompt.

    ``first_action`` forces stop (True) or continue (False) at the initial
    empty-candidate state, estimating ``Q_stop`` or ``Q_continue`` there.
    """
    pol = policy if first_action is None else FirstAction(policy, mdp.prompt, first_action)
    rng = np.random.default_rng(seed)
    total = 0.0
    total_sq = 0.0
    for _ in range(n_rollouts):
        tr = generate(mdp.target, mdp.draft, mdp.prompt, pol, mdp.max_len, rng, k_cap=mdp.k_cap)
        c = trace_cost(tr, mdp.cost)
        total += c
        total_sq += c * c
    mean = total / n_rollouts
    var = max(total_sq / n_rollouts - mean * mean, 0.0) * n_rollouts / max(n_rollouts - 1, 1)
    return mean, math.sqrt(var / n_rollouts)


# -- batteries ------------------------------------------------------------

DEFAULT_COST = REFERENCE_COST


def random_micro_mdp(seed: int, cost: CostModel = DEFAULT_COST, long: bool = False) -> MicroMdp:
    """Seeded instance: vocab 3-5, horizon 2-4, order-1 or order-2 tables.

    ``long=True`` uses a one-token prompt, horizon 5 and ``k_cap`` 3-4, so
    rounds with several optional candidates are reachable.
    """
    rng = np.random.default_rng([7919, seed, int(long)])
    V = int(rng.integers(3, 6))
    vocab = Vocab(V, V - 1)
    order = int(rng.integers(1, 3))
    target = random_table_model(vocab, order, rng, concentration=float(rng.choice([0.3, 1.0])))
    if rng.random() < 0.5:
        draft = random_table_model(vocab, order, rng, concentration=1.0)
    else:
        draft = perturb(target, mix=float(rng.uniform(0.05, 0.5)), temperature=float(rng.uniform(0.7, 1.6)))
    plen = 1 if long else int(rng.integers(1, 3))
    prompt = tuple(int(t) for t in rng.integers(0, V - 1, size=plen))
    horizon = 5 if long else int(rng.integers(2, 5))
    max_len = min(plen + horizon, 6)
    k_cap = int(rng.integers(3, 5)) if long else int(rng.integers(2, 5))
    return MicroMdp(target, draft, prompt, max_len, k_cap, cost, name=f"micro-{'long-' if long else ''}{seed}")


def disjoint_micro_mdp(cost: CostModel = DEFAULT_COST) -> MicroMdp:
    """Draft and target with nearly disjoint supports, so rejection is almost certain."""
    vocab = Vocab(3, 2)
    # draft piles mass on token 0, target on token 1; eos kept rare
    q_row = np.array([0.97, 0.02, 0.01])
    p_row = np.array([0.005, 0.985, 0.01])
    draft_table = np.tile(q_row, (4, 1))
    target_table = np.tile(p_row, (4, 1))
    from adaspec.lm import TableModel

    return MicroMdp(
        TableModel(vocab, target_table),
        TableModel(vocab, draft_table),
        prompt=(0,),
        max_len=5,
        k_cap=3,
        cost=cost,
        name="disjoint",
    )


def battery(n: int = 20, seed: int = 0, long: bool = False) -> List[MicroMdp]:
    """``n`` seeded instances plus the near-disjoint one."""
    mdps = [random_micro_mdp(seed * 1000 + i, long=long) for i in range(n)]
    mdps.append(disjoint_micro_mdp())
    return mdps


def battery_policies(mdp: MicroMdp, seed: int = 0) -> List[StoppingPolicy]:
    """Fixed, learned-style threshold, confidence heuristics and oracle threshold policies."""
    from adaspec.predictor import PredictorHead

    head = PredictorHead.init(2, 8, np.random.default_rng([seed, 17]))
    head.params["b_out"][:] = 1.5
    return [
        fixed_k(1),
        fixed_k(3),
        adaptive_threshold(head, 0.5),
        draft_confidence(0.4),
        confidence_product(0.3),
        oracle_acceptance(mdp.target, 0.6),
    ]
