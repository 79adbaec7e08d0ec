"""Absorbing-state forward process and the corruption sampler.

State 0 of every discrete property is the mask state; all other states flow
into it and never leave. The process is parameterized directly by the masking
rate pi in [0, 1) rather than by physical time: composing two steps with
rates pi1, pi2 gives rate 1 - (1 - pi1)(1 - pi2), so pi carries everything
the rate schedule contributes.

Missing cells sit outside the diffusion entirely: they are never masked,
never counted, never predicted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .schema import MASKED, MISSING, EntityInstance, EntitySchema


@dataclass(frozen=True)
class TransitionMatrix:
    """Row-stochastic single-property transition kernel at masking rate pi."""

    pi: float
    n_states: int
    entries: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "entries", np.asarray(self.entries, dtype=np.float64))


def transition_matrix(pi: float, n_states: int) -> TransitionMatrix:
    """Kernel over ``n_states`` states (mask = state 0) with mask probability pi.

    Row 0 is absorbing; every other row keeps its state with probability
    1 - pi and jumps to the mask state with probability pi.
    """
    if not 0.0 <= pi <= 1.0:
        raise ValueError(f"pi must lie in [0, 1], got {pi}")
    if n_states < 2:
        raise ValueError(f"need at least a mask state and one real state, got {n_states}")
    entries = np.zeros((n_states, n_states), dtype=np.float64)
    entries[0, 0] = 1.0
    for i in range(1, n_states):
        entries[i, 0] = pi
        entries[i, i] = 1.0 - pi
    return TransitionMatrix(pi=float(pi), n_states=n_states, entries=entries)


def loss_weight(d_eff: int, n_before: int, pi: float) -> float:
    """Objective weight for a corruption draw.

    d_eff is the number of diffusing (non-Missing) properties, n_before the
    count masked by the independent step, pi the masking rate. Draws masked
    more heavily than pi implies are down-weighted.
    """
    if not 0 <= n_before < d_eff:
        raise ValueError(f"need 0 <= n_before < d_eff, got n_before={n_before}, d_eff={d_eff}")
    if not 0.0 <= pi < 1.0:
        raise ValueError(f"pi must lie in [0, 1), got {pi}")
    return (d_eff - n_before) / ((1.0 - pi) * (n_before + 1))


def total_rate_proportion(d_eff: int, n_masked: int) -> int:
    """Rate-schedule-independent factor of the total forward jump rate.

    Zero means every property is absorbed and the forward process has stopped.
    """
    if not 0 <= n_masked <= d_eff:
        raise ValueError(f"need 0 <= n_masked <= d_eff, got n_masked={n_masked}, d_eff={d_eff}")
    return d_eff - n_masked


@dataclass(frozen=True)
class CorruptionSample:
    """A corrupted entity plus everything the objective needs about the draw."""

    corrupted: EntityInstance
    pi: float
    n_before: int
    masked_paths: frozenset[str]
    weight: float


def corrupt(
    entity: EntityInstance,
    pi: float,
    rng: np.random.Generator,
    schema: EntitySchema | None = None,
) -> CorruptionSample:
    """Draw from the corruption marginal at masking rate pi.

    Each non-Missing leaf is masked independently with probability pi; a draw
    that masks everything is rejected and redrawn (it carries no forward jump
    to invert). One additional surviving leaf, chosen uniformly, is then
    masked, so the result always has n_before + 1 masked leaves.
    """
    if not 0.0 <= pi < 1.0:
        raise ValueError(f"pi must lie in [0, 1), got {pi}")
    eligible = [i for i, v in enumerate(entity.values) if v is not MISSING]
    if any(entity.values[i] is MASKED for i in eligible):
        raise DataError("corrupt expects an entity with Present/Missing cells only")
    d_eff = len(eligible)
    if d_eff == 0:
        raise DataError("entity has zero non-Missing leaves; nothing to corrupt")

    while True:
        flips = rng.random(d_eff) < pi
        if not flips.all():
            break
    masked = [leaf for leaf, flip in zip(eligible, flips) if flip]
    n_before = len(masked)
    survivors = [leaf for leaf, flip in zip(eligible, flips) if not flip]
    extra = survivors[rng.integers(len(survivors))]
    masked.append(extra)

    corrupted = entity.with_masked(masked)
    if schema is not None:
        paths = frozenset(schema.leaves[i].path for i in masked)
    else:
        paths = frozenset(str(i) for i in masked)
    return CorruptionSample(
        corrupted=corrupted,
        pi=float(pi),
        n_before=n_before,
        masked_paths=paths,
        weight=loss_weight(d_eff, n_before, pi),
    )


def fixed_rate_mask(
    entity: EntityInstance,
    rate: float,
    rng: np.random.Generator,
    schema: EntitySchema | None = None,
) -> CorruptionSample:
    """Plain fixed-rate masking for the non-diffusion training mode.

    Masks each non-Missing leaf i.i.d. at ``rate``, rejecting draws that mask
    nothing or everything. The objective weight is 1.
    """
    if not 0.0 < rate < 1.0:
        raise ValueError(f"fixed mask rate must lie in (0, 1), got {rate}")
    eligible = [i for i, v in enumerate(entity.values) if v is not MISSING]
    if any(entity.values[i] is MASKED for i in eligible):
        raise DataError("fixed_rate_mask expects an entity with Present/Missing cells only")
    d_eff = len(eligible)
    if d_eff == 0:
        raise DataError("entity has zero non-Missing leaves; nothing to mask")
    if d_eff == 1:
        # every draw is all-masked or all-unmasked; masking the lone leaf is
        # the only informative outcome
        masked = [eligible[0]]
    else:
        while True:
            flips = rng.random(d_eff) < rate
            if flips.any() and not flips.all():
                break
        masked = [leaf for leaf, flip in zip(eligible, flips) if flip]

    corrupted = entity.with_masked(masked)
    if schema is not None:
        paths = frozenset(schema.leaves[i].path for i in masked)
    else:
        paths = frozenset(str(i) for i in masked)
    return CorruptionSample(
        corrupted=corrupted,
        pi=float(rate),
        n_before=len(masked),
        masked_paths=paths,
        weight=1.0,
    )
