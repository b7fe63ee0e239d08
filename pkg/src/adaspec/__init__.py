"""Speculative decoding with adaptive candidate lengths over small table models."""

from adaspec.errors import (
    DomainError,
    EmptyCorpus,
    EmptyDataset,
    EmptyGeneration,
    MisuseError,
    RankDeficient,
    SpecDecError,
    StateSpaceTooLarge,
    ZeroMass,
)

__version__ = "0.1.0"

__all__ = [
    "DomainError",
    "EmptyCorpus",
    "EmptyDataset",
    "EmptyGeneration",
    "MisuseError",
    "RankDeficient",
    "SpecDecError",
    "StateSpaceTooLarge",
    "ZeroMass",
]
