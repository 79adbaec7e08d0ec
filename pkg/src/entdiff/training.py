"""Training objective and optimization loop.

Each entity in a batch is corrupted once (its own masking rate), the network
predicts every masked leaf, and the summed per-leaf reconstruction losses are
scaled by the corruption draw's weight. Averaged over the batch this is a
Monte-Carlo estimate of an upper bound on the model's negative log-likelihood,
so the loss is directly comparable across masking modes and leap settings.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .diffusion import CorruptionSample, corrupt, fixed_rate_mask
from .errors import ConfigError, DataError, NumericalFailure
from .model import (
    CategoricalPrediction,
    EntityDenoiser,
    ModelConfig,
    NumericPrediction,
    PropertyPrediction,
    TextPrediction,
    init_parameters,
    save_checkpoint,
)
from .numeric import gmm_nll
from .schema import EntityInstance, EntitySchema, PropertyKind, normalize_value, save_schema
from .seeding import numpy_rng, split_seed

PI_MAX = 1.0 - 1e-6


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "diffusion"  # diffusion | fixed_mask
    fixed_mask_rate: float = 0.5
    batch_size: int = 64
    epochs: int = 50
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    val_fraction: float = 0.1
    early_stop_patience: int | None = None
    checkpoint_every: int | None = None

    def __post_init__(self):
        if self.mode not in ("diffusion", "fixed_mask"):
            raise ConfigError(f"unknown training mode {self.mode!r}")
        if self.mode == "fixed_mask" and not 0.0 < self.fixed_mask_rate < 1.0:
            raise ConfigError("fixed_mask rate must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")


@dataclass
class EntityLossTerm:
    """One entity's contribution, kept raw so the total can be re-derived.

    ``weight`` is the objective weight actually applied: the corruption
    draw's rescaling factor times, in diffusion mode, the draw's acceptance
    probability (see ``_corrupt_batch``).
    """

    pi: float
    weight: float
    per_path: dict[str, float]


@dataclass
class LossReport:
    total: float
    per_leaf: dict[str, tuple[float, int]]
    weight_mean: float
    weight_max: float
    entity_terms: list[EntityLossTerm] = field(default_factory=list)


def reconstruction_loss(
    pred: PropertyPrediction, truth, leaf_kind: PropertyKind, leaf
) -> torch.Tensor:
    """Per-leaf denoising loss against the uncorrupted truth."""
    if leaf_kind == PropertyKind.CATEGORICAL:
        if not isinstance(pred, CategoricalPrediction):
            raise DataError(f"prediction kind mismatch at {leaf.path!r}")
        log_probs = torch.log_softmax(pred.logits, dim=-1)
        return -log_probs[truth]
    if leaf_kind == PropertyKind.NUMERICAL:
        if not isinstance(pred, NumericPrediction):
            raise DataError(f"prediction kind mismatch at {leaf.path!r}")
        return gmm_nll(pred.params, normalize_value(leaf, truth))
    if not isinstance(pred, TextPrediction):
        raise DataError(f"prediction kind mismatch at {leaf.path!r}")
    logits, target_ids = pred.head.teacher_logits(pred.latent, truth)
    log_probs = torch.log_softmax(logits, dim=-1)
    return -log_probs[torch.arange(len(target_ids)), target_ids].mean()


def _corrupt_batch(
    batch: list[EntityInstance],
    cfg: TrainConfig,
    rng: np.random.Generator,
    schema: EntitySchema,
) -> list[tuple[CorruptionSample, float]]:
    """Corruption draws paired with their objective weights.

    The corruption sampler redraws when every property masks at once, which
    conditions on that event; the objective integrates against the raw jump
    measure, whose mass at rate pi is the acceptance probability
    1 - pi^d_eff. Multiplying the draw's weight by that factor keeps the
    estimator unbiased for the likelihood bound and removes the 1/(1 - pi)
    heavy tail that otherwise drowns the low-rate gradient signal.
    """
    samples = []
    for entity in batch:
        if cfg.mode == "diffusion":
            pi = min(float(rng.uniform()), PI_MAX)
            sample = corrupt(entity, pi, rng, schema)
            d_eff = len(entity.non_missing_indices())
            samples.append((sample, sample.weight * (1.0 - pi**d_eff)))
        else:
            sample = fixed_rate_mask(entity, cfg.fixed_mask_rate, rng, schema)
            samples.append((sample, sample.weight))
    return samples


def batch_objective(
    model: EntityDenoiser,
    batch: list[EntityInstance],
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, LossReport]:
    """Corrupt, predict, and assemble the weighted objective for one batch."""
    if not batch:
        raise DataError("empty batch")
    schema = model.schema
    drawn = _corrupt_batch(batch, cfg, rng, schema)
    samples = [sample for sample, _ in drawn]
    applied_weights = [weight for _, weight in drawn]
    grouped = model.forward_grouped([s.corrupted for s in samples])

    weights = torch.tensor(applied_weights, dtype=torch.float64)
    per_entity = torch.zeros(len(batch), dtype=torch.float64)
    raw_by_path: dict[str, tuple[list[int], list[float]]] = {}
    for path in sorted(grouped):
        leaf_batch = grouped[path]
        leaf = schema.leaf(path)
        pos = schema.leaf_position(path)
        if leaf.kind == PropertyKind.CATEGORICAL:
            truths = torch.tensor([batch[b].values[pos] for b in leaf_batch.rows])
            log_probs = torch.log_softmax(leaf_batch.logits, dim=-1)
            raw = -log_probs[torch.arange(len(truths)), truths]
        elif leaf.kind == PropertyKind.NUMERICAL:
            targets = torch.tensor(
                [normalize_value(leaf, batch[b].values[pos]) for b in leaf_batch.rows],
                dtype=torch.float64,
            )
            raw = gmm_nll(leaf_batch.params, targets)
        else:
            raw = torch.stack(
                [
                    reconstruction_loss(
                        leaf_batch.single(i), batch[b].values[pos], leaf.kind, leaf
                    )
                    for i, b in enumerate(leaf_batch.rows)
                ]
            )
        per_entity.index_add_(0, torch.tensor(leaf_batch.rows), raw)
        raw_by_path[path] = (leaf_batch.rows, raw.detach().tolist())
    total = (weights * per_entity).sum() / len(batch)

    per_leaf: dict[str, tuple[float, int]] = {}
    per_path_by_entity: list[dict[str, float]] = [dict() for _ in batch]
    for path, (rows, raws) in raw_by_path.items():
        weighted_sum = 0.0
        for b, value in zip(rows, raws):
            per_path_by_entity[b][path] = value
            weighted_sum += applied_weights[b] * value
        per_leaf[path] = (weighted_sum, len(rows))
    terms = [
        EntityLossTerm(pi=s.pi, weight=applied_weights[b], per_path=per_path_by_entity[b])
        for b, s in enumerate(samples)
    ]

    if not math.isfinite(float(total.detach())):
        bad = [t for t in terms if any(not math.isfinite(v) for v in t.per_path.values())]
        detail = "; ".join(
            f"pi={t.pi:.6f} weight={t.weight:.3g} losses={t.per_path}" for t in bad[:3]
        )
        raise NumericalFailure(f"non-finite training loss: {detail}")

    weight_values = [t.weight for t in terms]
    report = LossReport(
        total=float(total.detach()),
        per_leaf=per_leaf,
        weight_mean=float(np.mean(weight_values)),
        weight_max=float(np.max(weight_values)),
        entity_terms=terms,
    )
    return total, report


def training_step(
    model: EntityDenoiser,
    optimizer: torch.optim.Optimizer,
    batch: list[EntityInstance],
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> LossReport:
    """One corruption + forward + backward + optimizer update."""
    model.train()
    optimizer.zero_grad()
    total, report = batch_objective(model, batch, cfg, rng)
    total.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return report


def evaluate_objective(
    model: EntityDenoiser,
    entities: list[EntityInstance],
    cfg: TrainConfig,
    rng: np.random.Generator,
    batch_size: int = 256,
) -> float:
    """Mean objective without gradient tracking or dropout."""
    model.eval()
    losses, counts = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(entities), batch_size):
            chunk = entities[start : start + batch_size]
            total, _ = batch_objective(model, chunk, cfg, rng)
            losses += float(total) * len(chunk)
            counts += len(chunk)
    return losses / counts


def split_train_val(
    dataset: list[EntityInstance], val_fraction: float, seed: int
) -> tuple[list[EntityInstance], list[EntityInstance]]:
    order = numpy_rng(seed, "split").permutation(len(dataset))
    n_val = int(round(len(dataset) * val_fraction))
    val_idx = set(order[:n_val].tolist())
    train = [dataset[i] for i in range(len(dataset)) if i not in val_idx]
    val = [dataset[i] for i in sorted(val_idx)]
    return train, val


def fit(
    dataset: list[EntityInstance],
    schema: EntitySchema,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    rundir: str | None = None,
) -> tuple[EntityDenoiser, list[dict]]:
    """Train a fresh model; returns it with the per-epoch loss curve.

    When ``rundir`` is given, writes a config snapshot, the loss curve as
    CSV, and checkpoints at the configured cadence.
    """
    if not dataset:
        raise DataError("empty dataset")
    for leaf in schema.leaves:
        if leaf.kind == PropertyKind.NUMERICAL and leaf.normalizer is None:
            raise DataError(f"normalizer for {leaf.path!r} must be fitted before training")
    for i, entity in enumerate(dataset):
        if not entity.non_missing_indices():
            raise DataError(f"entity {i} has zero non-Missing leaves")

    seed = train_cfg.seed
    model = init_parameters(model_cfg, schema, seed)
    optimizer = torch.optim.AdamW(
        model.parameter_groups(train_cfg.learning_rate),
        lr=train_cfg.learning_rate,
        weight_decay=train_cfg.weight_decay,
        foreach=True,
    )
    train_set, val_set = split_train_val(dataset, train_cfg.val_fraction, seed)
    if not train_set:
        raise DataError("validation split leaves no training data")
    steps_per_epoch = max(1, math.ceil(len(train_set) / train_cfg.batch_size))
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=train_cfg.epochs * steps_per_epoch
    )

    if rundir is not None:
        os.makedirs(rundir, exist_ok=True)
        snapshot = {
            "model": asdict(model_cfg),
            "train": asdict(train_cfg),
            "schema_fingerprint": schema.fingerprint(),
        }
        with open(os.path.join(rundir, "config.json"), "w") as fh:
            json.dump(snapshot, fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(rundir, "schema.json"), "w") as fh:
            fh.write(save_schema(schema))

    torch.manual_seed(split_seed(seed, "train-loop"))
    corrupt_rng = numpy_rng(seed, "train-corruption")
    shuffle_rng = numpy_rng(seed, "train-shuffle")
    # one fixed stream of validation corruption draws keeps the curve paired
    # across epochs; changes in val loss then reflect the model alone
    val_seed = split_seed(seed, "val-corruption")

    curve: list[dict] = []
    best_val, best_epoch = math.inf, 0
    for epoch in range(1, train_cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        epoch_losses, weight_means, weight_maxes = [], [], []
        for start in range(0, len(train_set), train_cfg.batch_size):
            batch = [train_set[i] for i in order[start : start + train_cfg.batch_size]]
            report = training_step(model, optimizer, batch, train_cfg, corrupt_rng)
            scheduler.step()
            epoch_losses.append(report.total)
            weight_means.append(report.weight_mean)
            weight_maxes.append(report.weight_max)
        val_loss = (
            evaluate_objective(model, val_set, train_cfg, numpy_rng(val_seed, "epoch"))
            if val_set
            else float("nan")
        )
        entry = {
            "epoch": epoch,
            "mode": train_cfg.mode,
            "train_loss": float(np.mean(epoch_losses)),
            "val_loss": val_loss,
            "weight_mean": float(np.mean(weight_means)),
            "weight_max": float(np.max(weight_maxes)),
            "lr": float(optimizer.param_groups[0]["lr"]),
        }
        curve.append(entry)

        if rundir is not None and train_cfg.checkpoint_every:
            if epoch % train_cfg.checkpoint_every == 0 and epoch < train_cfg.epochs:
                save_checkpoint(model, os.path.join(rundir, f"checkpoint_{epoch:04d}.pt"))

        if val_set and train_cfg.early_stop_patience is not None:
            if val_loss < best_val - 1e-12:
                best_val, best_epoch = val_loss, epoch
            elif epoch - best_epoch >= train_cfg.early_stop_patience:
                break

    model.eval()
    if rundir is not None:
        with open(os.path.join(rundir, "loss_curve.csv"), "w") as fh:
            fh.write(loss_curve_csv(curve))
        save_checkpoint(model, os.path.join(rundir, "checkpoint.pt"))
    return model, curve


def loss_curve_csv(curve: list[dict]) -> str:
    if not curve:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(curve[0].keys()), lineterminator="\n")
    writer.writeheader()
    writer.writerows(curve)
    return buf.getvalue()
