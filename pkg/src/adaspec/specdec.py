"""Draft-verify-correct decoding loop.

Random stream layout (fixed, so traces are reproducible): for each drafted
candidate one uniform picks the token by CDF inversion and the next uniform
is that candidate's acceptance draw ``r_i``. After drafting, one more
uniform samples the correction (residual) or bonus token.

Length budget: a round drafts at most ``max_len - len(prefix) - 1``
candidates so that the accepted prefix plus the correction token never
overruns ``max_len``. With one slot left the round has zero candidates and
reduces to a plain target step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from adaspec.distributions import accept_prob, residual, sample_with_uniform
from adaspec.errors import DomainError, MisuseError, ZeroMass
from adaspec.lm import GreedyModel, LanguageModel, SamplingTransform
from adaspec.policies import PolicyState, StoppingPolicy, advance

REPLACED = "replaced"
BONUS = "bonus"
DEFAULT_K_CAP = 20


@dataclass
class RoundRecord:
    candidates: Tuple[int, ...]
    accept_probs: Tuple[float, ...]
    n_accepted: int
    correction: int
    correction_kind: str
    # kept only when the caller asks for them; lengths K and K+1
    draft_dists: tuple = ()
    target_dists: tuple = ()

    @property
    def k(self) -> int:
        return len(self.candidates)

    @property
    def emitted(self) -> Tuple[int, ...]:
        return self.candidates[: self.n_accepted] + (self.correction,)

    def to_dict(self) -> dict:
        d = {
            "candidates": list(self.candidates),
            "accept_probs": list(self.accept_probs),
            "n_accepted": self.n_accepted,
            "correction": self.correction,
            "correction_kind": self.correction_kind,
        }
        if self.draft_dists:
            d["draft_dists"] = [list(map(float, q)) for q in self.draft_dists]
            d["target_dists"] = [list(map(float, p)) for p in self.target_dists]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            candidates=tuple(d["candidates"]),
            accept_probs=tuple(d["accept_probs"]),
            n_accepted=int(d["n_accepted"]),
            correction=int(d["correction"]),
            correction_kind=d["correction_kind"],
            draft_dists=tuple(np.array(q) for q in d.get("draft_dists", ())),
            target_dists=tuple(np.array(p) for p in d.get("target_dists", ())),
        )


@dataclass
class GenerationTrace:
    """One generation. ``output`` includes the prompt and stops at the first EOS.

    Counters follow the forward-pass bookkeeping of the algorithm: every
    round emits ``n_accepted + 1`` tokens, all counted in ``n_tokens``. The
    only token ever counted but not kept in ``output`` is a bonus sampled
    after an accepted EOS candidate.
    """

    prompt: Tuple[int, ...]
    output: Tuple[int, ...] = ()
    rounds: List[RoundRecord] = field(default_factory=list)

    @property
    def n_draft(self) -> int:
        return sum(r.k for r in self.rounds)

    @property
    def n_target(self) -> int:
        return len(self.rounds)

    @property
    def n_discarded(self) -> int:
        return sum(r.k - r.n_accepted for r in self.rounds)

    @property
    def n_tokens(self) -> int:
        return sum(r.n_accepted + 1 for r in self.rounds)

    def identity_holds(self) -> bool:
        return self.n_draft + self.n_target == self.n_tokens + self.n_discarded

    def to_dict(self) -> dict:
        return {
            "prompt": list(self.prompt),
            "output": list(self.output),
            "N": self.n_tokens,
            "N_draft": self.n_draft,
            "N_target": self.n_target,
            "N_discarded": self.n_discarded,
            "rounds": [r.to_dict() for r in self.rounds],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            prompt=tuple(d["prompt"]),
            output=tuple(d["output"]),
            rounds=[RoundRecord.from_dict(r) for r in d["rounds"]],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def verify(
    candidates: Sequence[int],
    draft_dists: Sequence,
    target_dists: Sequence,
    rng: np.random.Generator,
    uniforms: Optional[Sequence[float]] = None,
):
    """Chained rejection sampling over ``K`` candidates.

    Returns ``(n_accepted, correction, kind, accept_probs)``. ``uniforms``
    supplies ``r_1..r_K`` when they were drawn during drafting; otherwise
    they are drawn from ``rng`` here. ``K = 0`` is allowed and simply
    samples from ``target_dists[0]``.
    """
    k = len(candidates)
    if len(draft_dists) != k or len(target_dists) != k + 1:
        raise DomainError("need K draft and K+1 target distributions")
    if uniforms is None:
        uniforms = [rng.random() for _ in range(k)]
    probs = tuple(accept_prob(p, q, y) for y, p, q in zip(candidates, target_dists, draft_dists))
    n = k
    for i, (a, r) in enumerate(zip(probs, uniforms)):
        if r >= a:
            n = i
            break
    if n < k:
        try:
            fix = residual(target_dists[n], draft_dists[n])
        except ZeroMass:  # pragma: no cover - r >= 1 is impossible for r in [0, 1)
            raise AssertionError("rejection with zero residual mass") from None
        return n, sample_with_uniform(fix, rng.random()), REPLACED, probs
    return n, sample_with_uniform(target_dists[k], rng.random()), BONUS, probs


def run_round(
    target: LanguageModel,
    draft: LanguageModel,
    prefix: Sequence[int],
    policy: StoppingPolicy,
    rng: np.random.Generator,
    k_cap: int = DEFAULT_K_CAP,
    max_len: Optional[int] = None,
    keep_dists: bool = False,
) -> RoundRecord:
    """Draft candidates until the policy or a forced stop ends the round, then verify."""
    if not prefix:
        raise DomainError("prefix must be nonempty")
    if k_cap < 1:
        raise DomainError("k_cap must be >= 1")
    prefix = tuple(prefix)
    budget = k_cap if max_len is None else min(k_cap, max_len - len(prefix) - 1)
    eos = target.vocab.eos
    state = PolicyState(prefix=prefix, k_cap=k_cap)
    uniforms: List[float] = []
    while True:
        if state.k >= budget:
            break
        if state.k and state.candidates[-1] == eos:
            break
        if policy.decide(state):
            break
        q = draft.next_dist(prefix + state.candidates)
        y = sample_with_uniform(q, rng.random())
        uniforms.append(rng.random())
        state = advance(state, policy, y, q)
    cands = state.candidates
    qs = state.draft_dists
    ps = tuple(target.next_dist(prefix + cands[:i]) for i in range(len(cands) + 1))
    n, corr, kind, probs = verify(cands, qs, ps, rng, uniforms)
    return RoundRecord(
        candidates=cands,
        accept_probs=probs,
        n_accepted=n,
        correction=corr,
        correction_kind=kind,
        draft_dists=qs if keep_dists else (),
        target_dists=ps if keep_dists else (),
    )


def prepare_models(target, draft, top_k=None, temperature=1.0, greedy=False):
    """Apply identical sampling transforms to both models."""
    if top_k is not None or temperature != 1.0:
        target = SamplingTransform(target, top_k, temperature)
        draft = SamplingTransform(draft, top_k, temperature)
    if greedy:
        target = GreedyModel(target)
        draft = GreedyModel(draft)
    return target, draft


def generate(
    target: LanguageModel,
    draft: LanguageModel,
    prompt: Sequence[int],
    policy: StoppingPolicy,
    max_len: int,
    rng: np.random.Generator,
    k_cap: int = DEFAULT_K_CAP,
    keep_dists: bool = False,
    greedy: bool = False,
) -> GenerationTrace:
    """Run rounds until EOS is emitted or the output reaches ``max_len`` tokens.

    ``greedy`` marks that both models are point masses (see
    ``prepare_models``); policies that need greedy decoding refuse to run
    otherwise.
    """
    prompt = tuple(prompt)
    if not prompt:
        raise DomainError("prompt must be nonempty")
    if max_len <= len(prompt):
        raise DomainError("max_len must exceed the prompt length")
    if policy.requires_greedy and not greedy:
        raise MisuseError(f"{policy.describe()} only runs with greedy decoding")
    if target.vocab.size != draft.vocab.size:
        raise DomainError("target and draft vocabularies differ")
    eos = target.vocab.eos
    trace = GenerationTrace(prompt=prompt)
    out = list(prompt)
    while True:
        rec = run_round(target, draft, out, policy, rng, k_cap, max_len, keep_dists)
        trace.rounds.append(rec)
        emitted = rec.emitted
        if eos in emitted:
            out.extend(emitted[: emitted.index(eos) + 1])
            break
        out.extend(emitted)
        if len(out) >= max_len:
            break
    trace.output = tuple(out)
    return trace


def generation_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based per-generation stream: generation ``index`` of master ``seed``."""
    return np.random.default_rng([int(seed), int(index)])
