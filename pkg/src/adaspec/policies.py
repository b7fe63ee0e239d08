"""Stopping policies for the speculation loop.

A policy is consulted at every decision point of a round: once before the
first candidate is drafted and again after each new candidate. ``decide``
returns True to stop drafting and submit the current candidates for
verification. Forced stops (EOS candidate, ``k_cap``, length budget) are
applied by the engine and never reach the policy.

Before each post-candidate decision the engine calls ``estimate`` and
multiplies the result into ``PolicyState.cumulative_accept``, so threshold
policies only read the running product.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from adaspec.distributions import accept_prob, entropy
from adaspec.errors import DomainError
from adaspec.lm import LanguageModel

N_FEATURES = 6
FEATURE_NAMES = (
    "draft_prob",
    "draft_entropy",
    "draft_top1",
    "top1_gap",
    "position",
    "draft_prob_cumprod",
)


def candidate_features(q_dist, y: int, position: int, k_cap: int, prev_cumprod: float) -> np.ndarray:
    """Feature vector describing draft candidate ``y`` sampled from ``q_dist``.

    ``position`` is 1-based within the round; ``prev_cumprod`` is the
    product of draft probabilities of the earlier candidates in the round.
    """
    qy = float(q_dist[y])
    top1 = float(np.max(q_dist))
    return np.array(
        [qy, entropy(q_dist), top1, top1 - qy, position / k_cap, prev_cumprod * qy],
        dtype=np.float64,
    )


@dataclass(frozen=True)
class PolicyState:
    prefix: Tuple[int, ...]
    k_cap: int
    candidates: Tuple[int, ...] = ()
    draft_dists: tuple = ()
    features: tuple = ()
    cumulative_accept: float = 1.0

    @property
    def k(self) -> int:
        return len(self.candidates)

    def extend(self, y: int, q_dist) -> "PolicyState":
        prev = self.features[-1][5] if self.features else 1.0
        f = candidate_features(q_dist, y, self.k + 1, self.k_cap, prev)
        return PolicyState(
            self.prefix,
            self.k_cap,
            self.candidates + (y,),
            self.draft_dists + (q_dist,),
            self.features + (f,),
            self.cumulative_accept,
        )


def advance(state: PolicyState, policy: "StoppingPolicy", y: int, q_dist) -> PolicyState:
    """Append a drafted candidate and fold the policy's acceptance estimate in."""
    new = state.extend(y, q_dist)
    object.__setattr__(new, "cumulative_accept", state.cumulative_accept * policy.estimate(new))
    return new


class StoppingPolicy:
    name = "policy"
    # oracle policies that read the target model
    oracle = False
    requires_greedy = False

    def estimate(self, state: PolicyState) -> float:
        """Predicted acceptance probability of the newest candidate."""
        return 1.0

    def decide(self, state: PolicyState) -> bool:
        raise NotImplementedError

    def describe(self) -> str:
        return self.name


class FixedK(StoppingPolicy):
    name = "fixed"

    def __init__(self, k: int):
        if k < 1:
            raise DomainError("fixed candidate length must be >= 1")
        self.k = int(k)

    def decide(self, state):
        return state.k >= self.k

    def describe(self):
        return f"fixed:{self.k}"


def fixed_k(k: int) -> FixedK:
    return FixedK(k)


class AdaptiveThreshold(StoppingPolicy):
    """Stop once the predicted chance that some candidate is rejected exceeds ``h``."""

    name = "adaptive"

    def __init__(self, head, h: float, head_path: Optional[str] = None):
        if not 0.0 <= h <= 1.0:
            raise DomainError("threshold h must lie in [0, 1]")
        self.head = head
        self.h = float(h)
        self.head_path = head_path

    def estimate(self, state):
        return float(self.head.predict(state.features[-1]))

    def decide(self, state):
        return 1.0 - state.cumulative_accept > self.h

    def describe(self):
        s = f"adaptive:h={self.h:g}"
        if self.head_path:
            s += f":head={self.head_path}"
        return s


def adaptive_threshold(head, h: float, head_path=None) -> AdaptiveThreshold:
    return AdaptiveThreshold(head, h, head_path)


class OracleAcceptance(AdaptiveThreshold):
    """Threshold policy fed the true per-candidate acceptance probabilities."""

    name = "oracle-adaptive"
    oracle = True

    def __init__(self, target: LanguageModel, h: float):
        super().__init__(None, h)
        self.target = target

    def estimate(self, state):
        context = state.prefix + state.candidates[:-1]
        p = self.target.next_dist(context)
        return accept_prob(p, state.draft_dists[-1], state.candidates[-1])

    def describe(self):
        return f"oracle-adaptive:h={self.h:g}"


def oracle_acceptance(target: LanguageModel, h: float) -> OracleAcceptance:
    return OracleAcceptance(target, h)


class OracleGreedy(StoppingPolicy):
    """Hindsight-optimal stopping for greedy decoding.

    Drafting continues only while the next draft greedy token matches the
    target's greedy token, so no candidate is ever discarded.
    """

    name = "oracle-greedy"
    oracle = True
    requires_greedy = True

    def __init__(self, target: LanguageModel, draft: LanguageModel):
        self.target = target
        self.draft = draft

    def decide(self, state):
        context = state.prefix + state.candidates
        nxt_draft = int(np.argmax(self.draft.next_dist(context)))
        nxt_target = int(np.argmax(self.target.next_dist(context)))
        return nxt_draft != nxt_target


def oracle_greedy(target: LanguageModel, draft: LanguageModel) -> OracleGreedy:
    return OracleGreedy(target, draft)


class DraftConfidence(StoppingPolicy):
    """Stop when the newest candidate's draft probability falls below ``c``."""

    name = "conf"

    def __init__(self, c: float):
        if not 0.0 <= c <= 1.0:
            raise DomainError("confidence threshold must lie in [0, 1]")
        self.c = float(c)

    def decide(self, state):
        return state.k > 0 and state.features[-1][0] < self.c

    def describe(self):
        return f"conf:c={self.c:g}"


def draft_confidence(c: float) -> DraftConfidence:
    return DraftConfidence(c)


class ConfidenceProduct(StoppingPolicy):
    """Stop when the product of the round's draft probabilities falls below ``c``."""

    name = "confprod"

    def __init__(self, c: float):
        if not 0.0 <= c <= 1.0:
            raise DomainError("confidence threshold must lie in [0, 1]")
        self.c = float(c)

    def decide(self, state):
        return state.k > 0 and state.features[-1][5] < self.c

    def describe(self):
        return f"confprod:c={self.c:g}"


def confidence_product(c: float) -> ConfidenceProduct:
    return ConfidenceProduct(c)


class FirstAction(StoppingPolicy):
    """Wrapper forcing the action at the very first decision of a generation."""

    def __init__(self, inner: StoppingPolicy, prompt, stop: bool):
        self.inner = inner
        self.prompt = tuple(prompt)
        self.stop = bool(stop)
        self.oracle = inner.oracle
        self.requires_greedy = inner.requires_greedy

    def estimate(self, state):
        return self.inner.estimate(state)

    def decide(self, state):
        if state.k == 0 and state.prefix == self.prompt:
            return self.stop
        return self.inner.decide(state)

    def describe(self):
        return f"first-{'stop' if self.stop else 'continue'}({self.inner.describe()})"


def parse_policy(spec: str, target=None, draft=None, base_dir=None) -> StoppingPolicy:
    """Build a policy from a CLI string.

    Accepted forms: ``fixed:4``, ``adaptive:h=0.7:head=heads/d3.json``,
    ``conf:c=0.5``, ``confprod:c=0.5``, ``oracle-adaptive:h=0.5`` and
    ``oracle-greedy``. The oracle forms need the engine's target (and draft)
    models.
    """
    from adaspec.predictor import load_head

    parts = spec.strip().split(":")
    kind, args = parts[0], parts[1:]
    kv = {}
    positional = []
    for a in args:
        if "=" in a:
            key, val = a.split("=", 1)
            kv[key] = val
        else:
            positional.append(a)
    if kind == "fixed":
        k = kv.get("k", positional[0] if positional else None)
        if k is None:
            raise DomainError(f"policy {spec!r} needs a candidate length")
        return fixed_k(int(k))
    if kind == "adaptive":
        if "head" not in kv or "h" not in kv:
            raise DomainError(f"policy {spec!r} needs h= and head=")
        path = Path(kv["head"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        return adaptive_threshold(load_head(path), float(kv["h"]), head_path=kv["head"])
    if kind == "conf":
        return draft_confidence(float(kv.get("c", positional[0] if positional else "nan")))
    if kind == "confprod":
        return confidence_product(float(kv.get("c", positional[0] if positional else "nan")))
    if kind == "oracle-adaptive":
        if target is None:
            raise DomainError("oracle-adaptive needs the target model")
        return oracle_acceptance(target, float(kv.get("h", positional[0] if positional else "nan")))
    if kind == "oracle-greedy":
        if target is None or draft is None:
            raise DomainError("oracle-greedy needs both models")
        return oracle_greedy(target, draft)
    raise DomainError(f"unknown policy {spec!r}")
