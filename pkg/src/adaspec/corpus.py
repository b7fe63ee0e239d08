"""Seeded synthetic English-like text for byte-level models."""

from __future__ import annotations

from typing import List

import numpy as np

_SUBJECTS = [
    "the cat", "a dog", "the old man", "my sister", "the farmer", "a small bird",
    "the teacher", "our neighbor", "the river", "a stranger", "the children",
    "the engineer", "a tired horse", "the queen", "the baker", "my friend",
]
_VERBS = [
    "watched", "carried", "found", "painted", "followed", "opened", "built",
    "sold", "cleaned", "forgot", "counted", "visited", "pushed", "answered",
]
_OBJECTS = [
    "the red door", "a wooden box", "the long road", "three apples", "the garden",
    "a letter", "the bridge", "an empty cup", "the market", "the window",
    "a heavy stone", "the small boat", "the village", "some bread",
]
_TAILS = [
    "in the morning", "after dinner", "near the hill", "before the rain",
    "with great care", "all day long", "at the station", "under the tree",
    "for the first time", "without a word",
]
_JOINERS = ["and then", "but", "because", "so", "while"]


def _clause(rng: np.random.Generator) -> str:
    words = [rng.choice(_SUBJECTS), rng.choice(_VERBS), rng.choice(_OBJECTS)]
    if rng.random() < 0.6:
        words.append(rng.choice(_TAILS))
    return " ".join(words)


def synthetic_lines(n_lines: int, seed: int = 0) -> List[str]:
    """Sentences from a small template grammar; deterministic given ``seed``."""
    rng = np.random.default_rng(seed)
    lines = []
    for _ in range(n_lines):
        text = _clause(rng)
        while rng.random() < 0.35:
            text += " " + str(rng.choice(_JOINERS)) + " " + _clause(rng)
        lines.append(text[0].upper() + text[1:] + ".")
    return lines


def synthetic_bytes(n_lines: int, seed: int = 0) -> bytes:
    return ("\n".join(synthetic_lines(n_lines, seed)) + "\n").encode("ascii")
