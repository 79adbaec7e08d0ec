"""Metrics, masking sweeps, exact-likelihood oracle, ablations, efficacy,
and built-in toy datasets.

Numerical leaves report RMSE in original units, categorical leaves error
rate, text leaves one minus word-level intersection-over-union (lower is
better throughout). Every report carries the optimal-constant baseline:
always predicting the mean (numerical) or mode (categorical/text).
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.ensemble import GradientBoostingClassifier, GradientBoostingRegressor
from sklearn.metrics import f1_score, r2_score

from .errors import ConfigError, DataError
from .generation import SampleConfig, fully_masked, sample_entities, sampler_rngs
from .model import EntityDenoiser
from .numeric import gmm_point
from .schema import (
    EntityInstance,
    EntitySchema,
    PropertyKind,
    denormalize_value,
    load_schema,
)
from .seeding import numpy_rng, split_seed

METRIC_BY_KIND = {
    PropertyKind.NUMERICAL: "rmse",
    PropertyKind.CATEGORICAL: "error_rate",
    PropertyKind.TEXT: "one_minus_word_iou",
}


@dataclass
class LeafMetric:
    metric: str
    value: float
    count: int
    stderr: float | None = None


@dataclass
class MetricReport:
    per_leaf: dict[str, LeafMetric]
    baseline: dict[str, LeafMetric]
    masking_fraction: float | None = None

    def to_json(self) -> dict:
        def section(metrics: dict[str, LeafMetric]) -> dict:
            return {
                path: {
                    "metric": m.metric,
                    "value": m.value,
                    "count": m.count,
                    **({"stderr": m.stderr} if m.stderr is not None else {}),
                }
                for path, m in metrics.items()
            }

        out = {"per_leaf": section(self.per_leaf), "baseline": section(self.baseline)}
        if self.masking_fraction is not None:
            out["masking_fraction"] = self.masking_fraction
        return out


def word_iou(a: str, b: str) -> float:
    """Word-set intersection over union; lowercase, whitespace tokens."""
    wa, wb = set(a.lower().split()), set(b.lower().split())
    if not wa and not wb:
        return 1.0
    return len(wa & wb) / len(wa | wb)


def _leaf_error(kind: PropertyKind, pred, truth) -> float:
    if kind == PropertyKind.NUMERICAL:
        return (float(pred) - float(truth)) ** 2
    if kind == PropertyKind.CATEGORICAL:
        return 0.0 if pred == truth else 1.0
    return 1.0 - word_iou(str(pred), str(truth))


def _finish_metric(kind: PropertyKind, errors: list[float]) -> float:
    mean = float(np.mean(errors))
    return math.sqrt(mean) if kind == PropertyKind.NUMERICAL else mean


def optimal_constants(entities: list[EntityInstance], schema: EntitySchema) -> dict:
    """Per-leaf mean (numerical) or mode (categorical, text) over Present cells."""
    constants: dict[str, object] = {}
    for i, leaf in enumerate(schema.leaves):
        cells = [e.values[i] for e in entities if e.is_present(i)]
        if not cells:
            continue
        if leaf.kind == PropertyKind.NUMERICAL:
            constants[leaf.path] = float(np.mean(cells))
        else:
            counts = Counter(cells)
            top = max(counts.values())
            constants[leaf.path] = sorted(k for k, v in counts.items() if v == top)[0]
    return constants


def compute_metrics(
    predictions: list[dict[str, object]],
    truths: list[EntityInstance],
    schema: EntitySchema,
    constants: dict | None = None,
) -> MetricReport:
    """Aggregate per-leaf quality of aligned prediction/truth pairs.

    Missing truths are skipped; leaves with no evaluated pairs are omitted.
    ``constants`` overrides the optimal-constant baseline values (otherwise
    they are fitted on the truths themselves).
    """
    if len(predictions) != len(truths):
        raise DataError("predictions and truths are not aligned")
    if constants is None:
        constants = optimal_constants(truths, schema)

    per_leaf: dict[str, LeafMetric] = {}
    baseline: dict[str, LeafMetric] = {}
    for i, leaf in enumerate(schema.leaves):
        pairs = [
            (preds[leaf.path], truth.values[i])
            for preds, truth in zip(predictions, truths)
            if leaf.path in preds and truth.is_present(i)
        ]
        if not pairs:
            continue
        name = METRIC_BY_KIND[leaf.kind]
        errors = [_leaf_error(leaf.kind, p, t) for p, t in pairs]
        per_leaf[leaf.path] = LeafMetric(
            metric=name, value=_finish_metric(leaf.kind, errors), count=len(pairs)
        )
        if leaf.path in constants:
            const = constants[leaf.path]
            base_errors = [_leaf_error(leaf.kind, const, t) for _, t in pairs]
            baseline[leaf.path] = LeafMetric(
                metric=name, value=_finish_metric(leaf.kind, base_errors), count=len(pairs)
            )
    return MetricReport(per_leaf=per_leaf, baseline=baseline)


# ---------------------------------------------------------------------------
# Leave-one-out evaluation and masking sweeps
# ---------------------------------------------------------------------------


def _point_from_prediction(pred, leaf):
    if leaf.kind == PropertyKind.CATEGORICAL:
        return int(torch.argmax(pred.logits))
    if leaf.kind == PropertyKind.NUMERICAL:
        return denormalize_value(leaf, gmm_point(pred.params))
    return pred.head.decode(pred.latent)


def leave_one_out_metrics(
    model: EntityDenoiser,
    entities: list[EntityInstance],
    constants: dict | None = None,
    batch_size: int = 256,
) -> MetricReport:
    """Point-predict each non-Missing leaf from all the others."""
    schema = model.schema
    predictions: list[dict[str, object]] = [dict() for _ in entities]
    model.eval()
    with torch.no_grad():
        for d, leaf in enumerate(schema.leaves):
            rows = [i for i, e in enumerate(entities) if e.is_present(d)]
            for start in range(0, len(rows), batch_size):
                chunk = rows[start : start + batch_size]
                masked = [entities[i].with_masked([d]) for i in chunk]
                outs = model.forward_batch(masked)
                for i, out in zip(chunk, outs):
                    predictions[i][leaf.path] = _point_from_prediction(out[leaf.path], leaf)
    return compute_metrics(predictions, entities, schema, constants)


def masking_sweep(
    model: EntityDenoiser,
    entities: list[EntityInstance],
    fractions: list[float],
    trials: int,
    rng: np.random.Generator,
    constants: dict | None = None,
    batch_size: int = 256,
) -> list[MetricReport]:
    """Point-prediction quality as a function of the masked fraction.

    Per fraction and trial, each entity gets a fresh random ceil(f * D_eff)
    subset masked (never fewer than one leaf), and every masked leaf is
    predicted from the rest in a single network call.
    """
    if sorted(fractions) != list(fractions):
        raise ConfigError("fractions must be sorted ascending")
    if any(not 0.0 <= f < 1.0 for f in fractions):
        raise ConfigError("fractions must lie in [0, 1)")
    schema = model.schema
    if constants is None:
        constants = optimal_constants(entities, schema)

    reports = []
    model.eval()
    for fraction in fractions:
        pooled_errors: dict[str, list[float]] = {}
        for _ in range(trials):
            predictions: list[dict[str, object]] = [dict() for _ in entities]
            masked_inputs = []
            for entity in entities:
                eligible = entity.non_missing_indices()
                k = max(1, math.ceil(fraction * len(eligible)))
                picks = rng.choice(len(eligible), size=min(k, len(eligible)), replace=False)
                masked_inputs.append(entity.with_masked([eligible[p] for p in picks]))
            with torch.no_grad():
                for start in range(0, len(entities), batch_size):
                    outs = model.forward_batch(masked_inputs[start : start + batch_size])
                    for offset, out in enumerate(outs):
                        i = start + offset
                        for path, pred in out.items():
                            leaf = schema.leaf(path)
                            predictions[i][path] = _point_from_prediction(pred, leaf)
            for i, (preds, truth) in enumerate(zip(predictions, entities)):
                for path, value in preds.items():
                    pos = schema.leaf_position(path)
                    if truth.is_present(pos):
                        pooled_errors.setdefault(path, []).append(
                            _leaf_error(schema.leaf(path).kind, value, truth.values[pos])
                        )
        per_leaf = {}
        for path, errors in pooled_errors.items():
            # stderr pools every (entity, trial) error term; for RMSE the
            # mean-square error's stderr is mapped through the square root
            kind = schema.leaf(path).kind
            arr = np.asarray(errors)
            value = _finish_metric(kind, errors)
            se_mean = float(arr.std(ddof=1) / math.sqrt(len(arr))) if len(arr) > 1 else 0.0
            if kind == PropertyKind.NUMERICAL and value > 0:
                stderr = se_mean / (2.0 * value)
            else:
                stderr = se_mean
            per_leaf[path] = LeafMetric(
                metric=METRIC_BY_KIND[kind], value=value, count=len(errors), stderr=stderr
            )
        baseline_report = compute_metrics(
            [
                {leaf.path: constants[leaf.path] for leaf in schema.leaves if leaf.path in constants}
                for _ in entities
            ],
            entities,
            schema,
            constants,
        )
        reports.append(
            MetricReport(
                per_leaf=per_leaf, baseline=baseline_report.per_leaf, masking_fraction=fraction
            )
        )
    return reports


def sweep_long_table(reports: list[MetricReport]) -> list[dict]:
    """Plot-ready long format: one row per (fraction, leaf, source)."""
    rows = []
    for report in reports:
        for path, m in report.per_leaf.items():
            rows.append(
                {
                    "fraction": report.masking_fraction,
                    "leaf": path,
                    "source": "model",
                    "metric": m.metric,
                    "value": m.value,
                    "stderr": m.stderr if m.stderr is not None else 0.0,
                }
            )
        for path, m in report.baseline.items():
            rows.append(
                {
                    "fraction": report.masking_fraction,
                    "leaf": path,
                    "source": "baseline",
                    "metric": m.metric,
                    "value": m.value,
                    "stderr": 0.0,
                }
            )
    return rows


def sweep_csv(reports: list[MetricReport]) -> str:
    rows = sweep_long_table(reports)
    buf = io.StringIO()
    writer = csv.DictWriter(
        buf, fieldnames=["fraction", "leaf", "source", "metric", "value", "stderr"],
        lineterminator="\n",
    )
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Exact likelihood of the reverse process (small, all-categorical models)
# ---------------------------------------------------------------------------

EXACT_LOGLIK_GUARD = 8


def exact_reverse_loglik(
    model: EntityDenoiser, entity: EntityInstance, guard: int = EXACT_LOGLIK_GUARD
) -> float:
    """Exact log-probability that the leap-1 reverse process emits ``entity``.

    Averages the product of model conditionals over every de-masking order,
    by dynamic programming over revealed subsets (one network call each).
    Restricted to small, fully-observed, all-categorical entities.
    """
    schema = model.schema
    n = schema.n_leaves
    if n > guard:
        raise ConfigError(f"exact likelihood is guarded to <= {guard} leaves, got {n}")
    for i, leaf in enumerate(schema.leaves):
        if leaf.kind != PropertyKind.CATEGORICAL:
            raise ConfigError("exact likelihood requires all-categorical leaves")
        if not entity.is_present(i):
            raise DataError("exact likelihood requires a fully observed entity")

    model.eval()
    # log of the conditional of leaf d given revealed subset (bitmask), for
    # each subset not containing d
    log_cond = np.full((1 << n, n), np.nan)
    inputs, keys = [], []
    for mask in range(1 << n):
        hidden = [d for d in range(n) if not (mask >> d) & 1]
        if not hidden:
            continue
        inputs.append(entity.with_masked(hidden))
        keys.append((mask, hidden))
    with torch.no_grad():
        for start in range(0, len(inputs), 256):
            outs = model.forward_batch(inputs[start : start + 256])
            for (mask, hidden), out in zip(keys[start : start + 256], outs):
                for d in hidden:
                    leaf = schema.leaves[d]
                    logp = torch.log_softmax(out[leaf.path].logits, dim=-1)
                    log_cond[mask, d] = float(logp[entity.values[d]])

    full = (1 << n) - 1
    log_f = np.full(1 << n, np.nan)
    log_f[full] = 0.0
    for mask in range(full - 1, -1, -1):
        terms = [
            log_cond[mask, d] + log_f[mask | (1 << d)] for d in range(n) if not (mask >> d) & 1
        ]
        log_f[mask] = float(np.logaddexp.reduce(terms))
    return float(log_f[0] - math.lgamma(n + 1))


# ---------------------------------------------------------------------------
# Single-step vs. autoregressive ablation
# ---------------------------------------------------------------------------


@dataclass
class SyntheticReport:
    n: int
    pair_match_rates: dict[str, float]
    efficacy: "EfficacyScores | None" = None


@dataclass
class AblationReport:
    autoregressive: SyntheticReport
    single_step: SyntheticReport

    def to_json(self) -> dict:
        def side(r: SyntheticReport) -> dict:
            out = {"n": r.n, "pair_match_rates": r.pair_match_rates}
            if r.efficacy is not None:
                out["efficacy"] = r.efficacy.to_json()
            return out

        return {"autoregressive": side(self.autoregressive), "single_step": side(self.single_step)}


def _pair_match_rates(entities: list[EntityInstance], schema: EntitySchema) -> dict[str, float]:
    """Agreement rate for every pair of categorical leaves with one label set."""
    rates = {}
    cats = [
        (i, leaf) for i, leaf in enumerate(schema.leaves) if leaf.kind == PropertyKind.CATEGORICAL
    ]
    for a in range(len(cats)):
        for b in range(a + 1, len(cats)):
            (i, leaf_a), (j, leaf_b) = cats[a], cats[b]
            if leaf_a.categories != leaf_b.categories:
                continue
            pairs = [
                (e.values[i], e.values[j]) for e in entities if e.is_present(i) and e.is_present(j)
            ]
            if pairs:
                rates[f"{leaf_a.path}~{leaf_b.path}"] = float(
                    np.mean([x == y for x, y in pairs])
                )
    return rates


def generate_synthetic(
    model: EntityDenoiser, n: int, leap: int, seed: int, numeric_mode: str = "sample"
) -> list[EntityInstance]:
    """Unconditional synthetic entities, one reverse-process run each."""
    cfg = SampleConfig(leap=leap, seed=seed, numeric_mode=numeric_mode)
    rngs_list = [sampler_rngs(split_seed(seed, "synthetic", i)) for i in range(n)]
    return sample_entities(model, [fully_masked(model) for _ in range(n)], cfg, rngs_list)


def ablate_single_step_vs_diffusion(
    model: EntityDenoiser,
    real_train: list[EntityInstance],
    real_test: list[EntityInstance],
    seed: int,
    n_synthetic: int | None = None,
    target_path: str | None = None,
    task: str | None = None,
) -> tuple[AblationReport, dict[str, list[EntityInstance]]]:
    """Same checkpoint, same seeds: synthesize with leap 1 and with a
    full-width leap, then compare joint consistency (and efficacy if a
    downstream target is given)."""
    n = n_synthetic if n_synthetic is not None else len(real_train)
    d_eff = model.schema.n_leaves
    sets = {
        "autoregressive": generate_synthetic(model, n, leap=1, seed=seed),
        "single_step": generate_synthetic(model, n, leap=d_eff, seed=seed),
    }
    sides = {}
    for name, synthetic in sets.items():
        efficacy = None
        if target_path is not None and task is not None:
            efficacy = downstream_efficacy(
                real_train, [synthetic], real_test, model.schema, target_path, task,
                seed=split_seed(seed, "efficacy", name),
            )
        sides[name] = SyntheticReport(
            n=n,
            pair_match_rates=_pair_match_rates(synthetic, model.schema),
            efficacy=efficacy,
        )
    report = AblationReport(autoregressive=sides["autoregressive"], single_step=sides["single_step"])
    return report, sets


# ---------------------------------------------------------------------------
# Downstream efficacy
# ---------------------------------------------------------------------------


@dataclass
class EfficacyScores:
    task: str
    target: str
    metric: str
    synthetic_mean: float
    synthetic_std: float
    real_mean: float
    real_std: float

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "target": self.target,
            "metric": self.metric,
            "synthetic_mean": self.synthetic_mean,
            "synthetic_std": self.synthetic_std,
            "real_mean": self.real_mean,
            "real_std": self.real_std,
        }


def _feature_matrix(
    entities: list[EntityInstance],
    schema: EntitySchema,
    target_pos: int,
    fill: dict[int, float],
) -> np.ndarray:
    columns = []
    for i, leaf in enumerate(schema.leaves):
        if i == target_pos or leaf.kind == PropertyKind.TEXT:
            continue
        col = np.array(
            [float(e.values[i]) if e.is_present(i) else fill[i] for e in entities]
        )
        columns.append(col)
    if not columns:
        raise DataError("no usable feature columns besides the target")
    return np.column_stack(columns)


def _targets(entities: list[EntityInstance], target_pos: int) -> np.ndarray:
    return np.array([float(e.values[target_pos]) for e in entities])


def downstream_efficacy(
    real_train: list[EntityInstance],
    synthetic_sets: list[list[EntityInstance]],
    real_test: list[EntityInstance],
    schema: EntitySchema,
    target_path: str,
    task: str,
    n_learner_seeds: int = 10,
    seed: int = 0,
) -> EfficacyScores:
    """Train the built-in learner on synthetic and on real data, score both
    on the real test set: R-squared for regression, macro F1 for
    classification. Means and standard deviations run over the synthetic
    sets crossed with the learner seeds.
    """
    if task not in ("regression", "classification"):
        raise ConfigError(f"unknown task {task!r}")
    target_pos = schema.leaf_position(target_path)
    target_leaf = schema.leaves[target_pos]
    if task == "regression" and target_leaf.kind != PropertyKind.NUMERICAL:
        raise ConfigError("regression needs a numerical target")
    if task == "classification" and target_leaf.kind != PropertyKind.CATEGORICAL:
        raise ConfigError("classification needs a categorical target")
    if any(not e.is_present(target_pos) for e in real_test):
        raise DataError(f"target {target_path!r} is missing in the test set")

    fill: dict[int, float] = {}
    for i, leaf in enumerate(schema.leaves):
        if leaf.kind == PropertyKind.TEXT:
            continue
        cells = [float(e.values[i]) for e in real_train if e.is_present(i)]
        if leaf.kind == PropertyKind.NUMERICAL:
            fill[i] = float(np.mean(cells)) if cells else 0.0
        else:
            fill[i] = float(Counter(cells).most_common(1)[0][0]) if cells else 0.0

    x_test = _feature_matrix(real_test, schema, target_pos, fill)
    y_test = _targets(real_test, target_pos)

    def score(train_entities: list[EntityInstance], learner_seed: int) -> float:
        rows = [e for e in train_entities if e.is_present(target_pos)]
        if not rows:
            raise DataError("no training rows with an observed target")
        x = _feature_matrix(rows, schema, target_pos, fill)
        y = _targets(rows, target_pos)
        if task == "regression":
            learner = GradientBoostingRegressor(
                n_estimators=200, learning_rate=0.1, max_depth=3, random_state=learner_seed
            )
            learner.fit(x, y)
            return float(r2_score(y_test, learner.predict(x_test)))
        learner = GradientBoostingClassifier(
            n_estimators=200, learning_rate=0.1, max_depth=3, random_state=learner_seed
        )
        learner.fit(x, y.astype(int))
        return float(f1_score(y_test.astype(int), learner.predict(x_test), average="macro"))

    learner_seeds = [split_seed(seed, "learner", i) % (2**31) for i in range(n_learner_seeds)]
    synthetic_scores = [
        score(synthetic, ls) for synthetic in synthetic_sets for ls in learner_seeds
    ]
    real_scores = [score(real_train, ls) for ls in learner_seeds]
    metric = "r2" if task == "regression" else "macro_f1"
    return EfficacyScores(
        task=task,
        target=target_path,
        metric=metric,
        synthetic_mean=float(np.mean(synthetic_scores)),
        synthetic_std=float(np.std(synthetic_scores)),
        real_mean=float(np.mean(real_scores)),
        real_std=float(np.std(real_scores)),
    )


# ---------------------------------------------------------------------------
# Toy datasets
# ---------------------------------------------------------------------------

TOY_NAMES = ("two_moons", "copy_pair", "correlated_table", "binary_grid")


def toy_datasets(
    name: str, n: int, noise: float = 0.05, seed: int = 0
) -> tuple[list[EntityInstance], EntitySchema]:
    """Deterministic built-in datasets; normalizers are left unfitted."""
    if n < 1:
        raise DataError("n must be >= 1")
    rng = numpy_rng(seed, "toy", name)
    if name == "two_moons":
        return _two_moons(n, noise, rng)
    if name == "copy_pair":
        return _copy_pair(n, rng)
    if name == "correlated_table":
        return _correlated_table(n, noise, rng)
    if name == "binary_grid":
        return _binary_grid(n, noise, rng)
    raise DataError(f"unknown toy dataset {name!r}")


def two_moons_manifold_distance(x: float, y: float, resolution: int = 2048) -> float:
    """Distance from a point to the union of the two canonical half circles."""
    t = np.linspace(0.0, math.pi, resolution)
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    points = np.concatenate([upper, lower])
    return float(np.min(np.hypot(points[:, 0] - x, points[:, 1] - y)))


def _two_moons(n: int, noise: float, rng: np.random.Generator):
    schema = load_schema(
        json.dumps(
            {
                "kind": "composite",
                "children": {
                    "x": {"kind": "numerical"},
                    "y": {"kind": "numerical"},
                    "class": {"kind": "categorical", "categories": ["moon0", "moon1"]},
                },
            }
        )
    )
    entities = []
    for _ in range(n):
        cls = int(rng.integers(2))
        t = float(rng.uniform(0.0, math.pi))
        if cls == 0:
            x, y = math.cos(t), math.sin(t)
        else:
            x, y = 1.0 - math.cos(t), 0.5 - math.sin(t)
        x += noise * float(rng.standard_normal())
        y += noise * float(rng.standard_normal())
        entities.append(EntityInstance([x, y, cls]))
    return entities, schema


def _copy_pair(n: int, rng: np.random.Generator):
    labels = ["a", "b", "c", "d"]
    schema = load_schema(
        json.dumps(
            {
                "kind": "composite",
                "children": {
                    "x": {"kind": "categorical", "categories": labels},
                    "y": {"kind": "categorical", "categories": labels},
                },
            }
        )
    )
    entities = []
    for _ in range(n):
        v = int(rng.integers(len(labels)))
        entities.append(EntityInstance([v, v]))
    return entities, schema


def _correlated_table(n: int, noise: float, rng: np.random.Generator):
    schema = load_schema(
        json.dumps(
            {
                "kind": "composite",
                "children": {
                    "group": {"kind": "categorical", "categories": ["g0", "g1", "g2"]},
                    "signal": {"kind": "numerical"},
                    "response": {"kind": "numerical"},
                    "flag": {"kind": "categorical", "categories": ["no", "yes"]},
                },
            }
        )
    )
    entities = []
    group_probs = np.array([0.5, 0.3, 0.2])  # skewed so the marginal mode is unambiguous
    for _ in range(n):
        group = int(rng.choice(3, p=group_probs))
        signal = float(rng.uniform())
        response = 0.25 * group + 0.5 * signal + noise * float(rng.standard_normal())
        flag = 1 if response > 0.45 else 0
        entities.append(EntityInstance([group, signal, response, flag]))
    return entities, schema


GRID_SIDE = 4


def _binary_grid(n: int, noise: float, rng: np.random.Generator):
    children = {
        f"r{i}": {
            "kind": "composite",
            "children": {
                f"c{j}": {"kind": "categorical", "categories": ["off", "on"]}
                for j in range(GRID_SIDE)
            },
        }
        for i in range(GRID_SIDE)
    }
    schema = load_schema(json.dumps({"kind": "composite", "children": children}))
    entities = []
    for _ in range(n):
        horizontal = bool(rng.integers(2))
        phase = int(rng.integers(2))
        values = []
        for i in range(GRID_SIDE):
            for j in range(GRID_SIDE):
                stripe = (i + phase) % 2 if horizontal else (j + phase) % 2
                if noise > 0 and rng.random() < noise:
                    stripe = 1 - stripe
                values.append(int(stripe))
        entities.append(EntityInstance(values))
    return entities, schema
