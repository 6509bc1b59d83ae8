"""Shuffle-based anonymization.

Selected dimensions are kept; every other dimension gets its own permutation
of the rows.  Each column keeps its values (so its marginal distribution) but
the link between the columns of one sample is broken.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from .core import EmbeddingTable, derive_rng
from .mi import SelectionSet

MODES = ("random", "mi_attribute", "mi_prosody")
DEFAULT_TOP_N = 50


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class ShufflePlan:
    n_rows: int
    dim: int
    selected: SelectionSet
    permutations: Dict[int, np.ndarray]
    seed: int
    mode: str

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "n_rows": self.n_rows,
            "dim": self.dim,
            "selection": self.selected.to_json(),
            "permutations": {str(d): [int(i) for i in p] for d, p in sorted(self.permutations.items())},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")


def random_selection(dim: int, n: int, seed: int) -> SelectionSet:
    """``n`` dims drawn uniformly without replacement (Shuffle_Random)."""
    if not 0 <= n <= dim:
        raise PlanError(f"cannot keep {n} of {dim} dims")
    chosen = derive_rng(seed, 0xD1).choice(dim, size=n, replace=False)
    return SelectionSet(tuple(sorted(int(d) for d in chosen)), None, (f"random:{n}",))


def build_shuffle_plan(table: EmbeddingTable, selection: Union[SelectionSet, str], seed: int,
                       mode: Optional[str] = None) -> ShufflePlan:
    """Draw an independent row permutation for every non-selected dimension.

    ``selection`` is either a :class:`SelectionSet` or ``"random:n"``.  The
    permutation of dim ``d`` depends only on ``(seed, d)`` and the row count.
    """
    if isinstance(selection, str):
        if not selection.startswith("random:"):
            raise PlanError(f"selection string must look like 'random:n', got {selection!r}")
        selection = random_selection(table.dim, int(selection.split(":", 1)[1]), seed)
        mode = mode or "random"
    mode = mode or "mi_attribute"
    if mode not in MODES:
        raise PlanError(f"unknown mode {mode!r}")
    bad = [d for d in selection.selected if not 0 <= d < table.dim]
    if bad:
        raise PlanError(f"selected dim {bad[0]} outside table dimension {table.dim}")
    keep = set(selection.selected)
    perms = {
        d: derive_rng(seed, 1, d).permutation(table.n_rows)
        for d in range(table.dim)
        if d not in keep
    }
    return ShufflePlan(table.n_rows, table.dim, selection, perms, int(seed), mode)


def apply_shuffle(table: EmbeddingTable, plan: ShufflePlan) -> EmbeddingTable:
    if (table.n_rows, table.dim) != (plan.n_rows, plan.dim):
        raise PlanError(
            f"plan built for {plan.n_rows}x{plan.dim} table, got {table.n_rows}x{table.dim}"
        )
    out = np.array(table.vectors, copy=True)
    for d, perm in plan.permutations.items():
        out[:, d] = table.vectors[perm, d]
    return table.with_vectors(out)


def shuffle_table(table: EmbeddingTable, selection: Union[SelectionSet, str], seed: int,
                  mode: Optional[str] = None) -> EmbeddingTable:
    return apply_shuffle(table, build_shuffle_plan(table, selection, seed, mode))
