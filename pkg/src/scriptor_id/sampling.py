"""Random n-tuple sampling of training patches.

One *iteration* permutes each writer's patches and cuts the permutation into
``m = N_s // n`` disjoint n-tuples; an *epoch* is ``p`` iterations per writer.
The ``N_s mod n`` leftover patches of each permutation are skipped, and since
each permutation is fresh a different remainder is skipped every time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Iterator, Mapping, Sequence

import numpy as np

from .errors import DataError, ParameterError


def derive_seed(master: int, *keys: int) -> int:
    """Deterministic 63-bit subseed for ``(master, *keys)``."""
    state = np.random.SeedSequence([int(master), *map(int, keys)]).generate_state(2, np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


@dataclass(frozen=True)
class TupleBatch:
    writer: Hashable
    patch_ids: tuple


@dataclass
class EpochPlan:
    tuple_size: int
    iterations: int
    seed: int
    # writer -> iteration -> list of m tuples
    assignments: dict
    # writer -> N_s
    sizes: dict

    def patches_per_writer(self, writer) -> int:
        return self.sizes[writer]

    def tuples_per_iteration(self, writer) -> int:
        return self.sizes[writer] // self.tuple_size

    @property
    def writers(self) -> list:
        return list(self.assignments)


def make_epoch_plan(writer_patches: Mapping[Hashable, Sequence], n: int, p: int, seed: int) -> EpochPlan:
    if n < 1:
        raise ParameterError(f"tuple size n must be >= 1, got {n}")
    if p < 1:
        raise ParameterError(f"iterations p must be >= 1, got {p}")
    for writer, ids in writer_patches.items():
        if len(ids) < n:
            raise DataError(f"writer {writer} has {len(ids)} patches, fewer than tuple size {n}")
    rng = np.random.default_rng(seed)
    assignments = {}
    sizes = {}
    for writer, ids in writer_patches.items():
        ids = list(ids)
        m = len(ids) // n
        per_iter = []
        for _ in range(p):
            perm = rng.permutation(len(ids))
            per_iter.append([tuple(ids[j] for j in perm[t * n:(t + 1) * n]) for t in range(m)])
        assignments[writer] = per_iter
        sizes[writer] = len(ids)
    return EpochPlan(n, p, seed, assignments, sizes)


def next_batches(plan: EpochPlan, iteration: int) -> Iterator[TupleBatch]:
    """All writers' tuples for one iteration, interleaved in a seeded random order."""
    if not 0 <= iteration < plan.iterations:
        raise ParameterError(f"iteration {iteration} outside [0, {plan.iterations})")
    batches = [
        TupleBatch(writer, tup)
        for writer, per_iter in plan.assignments.items()
        for tup in per_iter[iteration]
    ]
    order = np.random.default_rng(derive_seed(plan.seed, iteration)).permutation(len(batches))
    for i in order:
        yield batches[i]
