"""Deterministic RNG plumbing.

Every stochastic routine takes an explicit ``torch.Generator``.  Sub-streams
(one per frame, per scene, per batch, ...) are derived by drawing child seeds
from a parent generator, so results do not depend on evaluation order.
"""

from __future__ import annotations

import torch

_SEED_RANGE = 2**62


def make_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def spawn(parent: torch.Generator, n: int) -> list[torch.Generator]:
    """Derive n independent child generators from the parent's stream."""
    seeds = torch.randint(_SEED_RANGE, (n,), generator=parent)
    return [make_generator(int(s)) for s in seeds]
