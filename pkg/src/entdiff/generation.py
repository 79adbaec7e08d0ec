"""Reverse-process simulation: sampling, imputation, and likelihood curves.

De-masking runs in uniformly random order, a configurable number of leaves
per network call (the leap count). A leap equal to the number of masked
leaves collapses the chain into the single-step generator that predicts
everything at once; smaller leaps trade compute for joint consistency.
De-masked leaves are never re-masked, and observed leaves are never touched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, DataError
from .model import (
    CategoricalPrediction,
    EntityDenoiser,
    NumericPrediction,
    PropertyPrediction,
    TextPrediction,
)
from .numeric import gmm_nll, gmm_point, gmm_sample
from .schema import (
    MASKED,
    MISSING,
    EntityInstance,
    PropertyKind,
    denormalize_value,
    normalize_value,
)
from .seeding import numpy_rng


@dataclass(frozen=True)
class SampleConfig:
    leap: int = 1
    seed: int = 0
    temperature: float = 1.0
    numeric_mode: str = "sample"  # sample | point; point makes every head deterministic

    def __post_init__(self):
        if self.leap < 1:
            raise ConfigError("leap must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.numeric_mode not in ("sample", "point"):
            raise ConfigError(f"unknown numeric_mode {self.numeric_mode!r}")


@dataclass
class SamplerRngs:
    """Separate streams for de-masking order and value draws.

    Keeping them independent makes the drawn values depend only on the set of
    leaves decoded per call, so a full-width leap reproduces the single-step
    generator draw for draw.
    """

    order: np.random.Generator
    values: np.random.Generator


def sampler_rngs(seed: int) -> SamplerRngs:
    return SamplerRngs(order=numpy_rng(seed, "order"), values=numpy_rng(seed, "values"))


@dataclass
class CallCounter:
    calls: int = 0


def _draw_cell(
    pred: PropertyPrediction, leaf, cfg: SampleConfig, values_rng: np.random.Generator
):
    if isinstance(pred, CategoricalPrediction):
        if cfg.numeric_mode == "point":
            return int(torch.argmax(pred.logits))
        probs = torch.softmax(pred.logits / cfg.temperature, dim=-1).detach().cpu().numpy()
        idx = int(np.searchsorted(np.cumsum(probs), values_rng.random()))
        return min(idx, len(probs) - 1)
    if isinstance(pred, NumericPrediction):
        if cfg.numeric_mode == "point":
            normalized = gmm_point(pred.params)
        else:
            normalized = gmm_sample(pred.params, values_rng)
        return denormalize_value(leaf, normalized)
    assert isinstance(pred, TextPrediction)
    if cfg.numeric_mode == "point":
        return pred.head.decode(pred.latent)
    return pred.head.decode(pred.latent, rng=values_rng, temperature=cfg.temperature)


def sample_entity(
    model: EntityDenoiser,
    conditioning: EntityInstance,
    cfg: SampleConfig,
    rngs: SamplerRngs | None = None,
    counter: CallCounter | None = None,
) -> EntityInstance:
    """De-mask every Masked leaf of ``conditioning``; observed leaves are
    returned bitwise unchanged, Missing leaves stay Missing."""
    model.eval()
    if rngs is None:
        rngs = sampler_rngs(cfg.seed)
    schema = model.schema
    work = conditioning.copy()
    with torch.no_grad():
        while True:
            masked = work.masked_indices()
            if not masked:
                break
            k = min(cfg.leap, len(masked))
            picks = rngs.order.choice(len(masked), size=k, replace=False)
            group = sorted(masked[i] for i in picks)
            predictions = model.forward(work)
            if counter is not None:
                counter.calls += 1
            for d in group:
                leaf = schema.leaves[d]
                work.values[d] = _draw_cell(predictions[leaf.path], leaf, cfg, rngs.values)
    return work


def sample_entities(
    model: EntityDenoiser,
    conditionings: list[EntityInstance],
    cfg: SampleConfig,
    rngs_list: list[SamplerRngs],
    batch_size: int = 512,
) -> list[EntityInstance]:
    """Run many reverse-process simulations in lockstep.

    Each entity owns its random streams and consumes them exactly as
    ``sample_entity`` would, so the results match the sequential path draw
    for draw; batching only amortizes the network calls.
    """
    if len(conditionings) != len(rngs_list):
        raise ConfigError("need one SamplerRngs per entity")
    model.eval()
    schema = model.schema
    work = [c.copy() for c in conditionings]
    with torch.no_grad():
        for start in range(0, len(work), batch_size):
            chunk = list(range(start, min(start + batch_size, len(work))))
            while True:
                active, groups = [], []
                for i in chunk:
                    masked = work[i].masked_indices()
                    if not masked:
                        continue
                    k = min(cfg.leap, len(masked))
                    picks = rngs_list[i].order.choice(len(masked), size=k, replace=False)
                    active.append(i)
                    groups.append(sorted(masked[p] for p in picks))
                if not active:
                    break
                predictions = model.forward_batch([work[i] for i in active])
                for i, group, preds in zip(active, groups, predictions):
                    for d in group:
                        leaf = schema.leaves[d]
                        work[i].values[d] = _draw_cell(preds[leaf.path], leaf, cfg, rngs_list[i].values)
    return work


def single_step_generate(
    model: EntityDenoiser,
    conditioning: EntityInstance,
    cfg: SampleConfig,
    rngs: SamplerRngs | None = None,
    counter: CallCounter | None = None,
) -> EntityInstance:
    """Predict every masked leaf from one network call (plain masked modeling)."""
    model.eval()
    if rngs is None:
        rngs = sampler_rngs(cfg.seed)
    schema = model.schema
    work = conditioning.copy()
    masked = work.masked_indices()
    if not masked:
        return work
    with torch.no_grad():
        predictions = model.forward(work)
        if counter is not None:
            counter.calls += 1
        for d in masked:
            leaf = schema.leaves[d]
            work.values[d] = _draw_cell(predictions[leaf.path], leaf, cfg, rngs.values)
    return work


def fully_masked(model: EntityDenoiser) -> EntityInstance:
    return EntityInstance([MASKED] * model.schema.n_leaves)


def impute(
    model: EntityDenoiser,
    partial: EntityInstance,
    cfg: SampleConfig,
    rngs: SamplerRngs | None = None,
) -> EntityInstance:
    """Fill every Masked leaf conditioned on the Present ones.

    With ``numeric_mode="point"`` the result is deterministic up to the
    de-masking order seed. Observing zero leaves reduces to unconditional
    sampling.
    """
    return sample_entity(model, partial, cfg, rngs=rngs)


def mask_unobserved(
    entity: EntityInstance, observed_paths: set[str] | None, schema
) -> EntityInstance:
    """Build an imputation input. With an explicit observed set, every other
    leaf becomes a Masked target (any value it carried is discarded). With
    ``None``, Present cells stay observed and Missing cells become the
    targets (impute-the-gaps mode)."""
    work = entity.copy()
    for i, leaf in enumerate(schema.leaves):
        if observed_paths is None:
            if work.values[i] is MISSING:
                work.values[i] = MASKED
        elif leaf.path not in observed_paths:
            work.values[i] = MASKED
        elif not entity.is_present(i):
            raise DataError(f"observed leaf {leaf.path!r} has no value in the data")
    return work


def point_predict(model: EntityDenoiser, partial: EntityInstance, target_path: str):
    """Deterministic typed prediction for one Masked target leaf."""
    schema = model.schema
    pos = schema.leaf_position(target_path)
    leaf = schema.leaves[pos]
    value = partial.values[pos]
    if value is MISSING:
        raise DataError(f"target {target_path!r} is Missing; nothing to predict")
    if value is not MASKED:
        raise DataError(f"target {target_path!r} is already Present")
    model.eval()
    with torch.no_grad():
        pred = model.forward(partial)[target_path]
    if leaf.kind == PropertyKind.CATEGORICAL:
        return int(torch.argmax(pred.logits))
    if leaf.kind == PropertyKind.NUMERICAL:
        return denormalize_value(leaf, gmm_point(pred.params))
    return pred.head.decode(pred.latent)


@dataclass
class LoglikCurve:
    points: list[tuple[float, float]]  # (grid value, log-likelihood in normalized units)
    mle: float
    interval: tuple[float, float]  # half-unit drop of log-likelihood on the grid

    @property
    def half_width(self) -> float:
        return 0.5 * (self.interval[1] - self.interval[0])


def conditional_loglik_curve(
    model: EntityDenoiser,
    entity: EntityInstance,
    target_path: str,
    grid: list[float],
) -> LoglikCurve:
    """Log-likelihood of a numerical target over a value grid, all other
    leaves observed; includes the grid MLE and the half-drop interval."""
    if not grid:
        raise DataError("empty grid")
    schema = model.schema
    pos = schema.leaf_position(target_path)
    leaf = schema.leaves[pos]
    if leaf.kind != PropertyKind.NUMERICAL:
        raise DataError(f"target {target_path!r} is not numerical")
    if not entity.is_present(pos):
        raise DataError(f"target {target_path!r} must be observed in the input entity")

    work = entity.copy()
    work.values[pos] = MASKED
    model.eval()
    with torch.no_grad():
        pred = model.forward(work)[target_path]
        points = [
            (float(v), -float(gmm_nll(pred.params, normalize_value(leaf, float(v)))))
            for v in grid
        ]
    best = max(range(len(points)), key=lambda i: points[i][1])
    threshold = points[best][1] - 0.5
    inside = [v for v, ll in points if ll >= threshold]
    return LoglikCurve(points=points, mle=points[best][0], interval=(min(inside), max(inside)))
