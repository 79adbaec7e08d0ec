"""Session-scoped trained models shared across test modules.

Training recipes were tuned once on reference runs; the derived thresholds
asserted by the tests live next to the assertions that use them.
"""

import json

import numpy as np
import pytest

from entdiff.evaluation import toy_datasets
from entdiff.model import ModelConfig, init_parameters
from entdiff.schema import EntityInstance, fit_normalizers, load_schema
from entdiff.seeding import numpy_rng
from entdiff.training import TrainConfig, fit


@pytest.fixture(scope="session")
def copy_model():
    """copy_pair (two identical 4-way categorical leaves)."""
    entities, schema = toy_datasets("copy_pair", 1000, seed=11)
    schema = fit_normalizers(schema, entities)
    model_cfg = ModelConfig(
        model_dim=32, n_entity_layers=1, n_heads=2, n_enc_dec_layers=1,
        gmm_components=1, dropout=0.0,
    )
    train_cfg = TrainConfig(batch_size=128, epochs=30, learning_rate=3e-3, seed=5)
    model, curve = fit(entities, schema, model_cfg, train_cfg)
    return {"model": model, "data": entities, "schema": schema, "curve": curve}


MOONS_MODEL_CFG = dict(
    model_dim=64, n_entity_layers=2, n_heads=2, n_enc_dec_layers=2, dropout=0.0
)
MOONS_TRAIN_CFG = dict(batch_size=256, epochs=150, learning_rate=1e-3, seed=5)


@pytest.fixture(scope="session")
def moons_data():
    entities, schema = toy_datasets("two_moons", 2000, noise=0.05, seed=21)
    return entities, fit_normalizers(schema, entities)


@pytest.fixture(scope="session")
def moons_model(moons_data):
    """two_moons with the large mixture head."""
    entities, schema = moons_data
    model_cfg = ModelConfig(gmm_components=256, **MOONS_MODEL_CFG)
    model, curve = fit(entities, schema, model_cfg, TrainConfig(**MOONS_TRAIN_CFG))
    return {"model": model, "data": entities, "schema": schema, "curve": curve}


@pytest.fixture(scope="session")
def moons_mse_model(moons_data):
    """two_moons with a single frozen-unit-scale component (plain regression)."""
    entities, schema = moons_data
    model_cfg = ModelConfig(gmm_components=1, frozen_unit_scale=True, **MOONS_MODEL_CFG)
    train_cfg = TrainConfig(**{**MOONS_TRAIN_CFG, "epochs": 60})
    model, _ = fit(entities, schema, model_cfg, train_cfg)
    return {"model": model, "data": entities, "schema": schema}


@pytest.fixture(scope="session")
def corr_model():
    """correlated_table with planted dependencies plus a held-out test set."""
    train, schema = toy_datasets("correlated_table", 2000, noise=0.02, seed=31)
    test, _ = toy_datasets("correlated_table", 400, noise=0.02, seed=32)
    schema = fit_normalizers(schema, train)
    model_cfg = ModelConfig(
        model_dim=64, n_entity_layers=2, n_heads=2, n_enc_dec_layers=2,
        gmm_components=20, dropout=0.0,
    )
    train_cfg = TrainConfig(batch_size=256, epochs=150, learning_rate=1e-3, seed=5)
    model, curve = fit(train, schema, model_cfg, train_cfg)
    return {"model": model, "train": train, "test": test, "schema": schema, "curve": curve}


GAUSSIAN_PAIR_NOISE = 0.05


@pytest.fixture(scope="session")
def gaussian_pair_model():
    """y = x + Gaussian noise of known scale; the coverage-harness testbed."""
    rng = numpy_rng(7, "gauss-pair")
    schema = load_schema(
        json.dumps(
            {"kind": "composite", "children": {"x": {"kind": "numerical"}, "y": {"kind": "numerical"}}}
        )
    )

    def make(n):
        rows = []
        for _ in range(n):
            x = float(rng.uniform())
            rows.append(EntityInstance([x, x + GAUSSIAN_PAIR_NOISE * float(rng.standard_normal())]))
        return rows

    train, test = make(2000), make(400)
    schema = fit_normalizers(schema, train)
    model_cfg = ModelConfig(
        model_dim=32, n_entity_layers=1, n_heads=2, n_enc_dec_layers=2,
        gmm_components=5, dropout=0.0,
    )
    train_cfg = TrainConfig(batch_size=256, epochs=150, learning_rate=1e-3, seed=5)
    model, _ = fit(train, schema, model_cfg, train_cfg)
    return {"model": model, "train": train, "test": test, "schema": schema}


def make_tiny_categorical(n_leaves: int, n_categories: int, seed: int, epochs: int = 25):
    """A small all-categorical model trained on a random planted joint."""
    rng = numpy_rng(seed, "tiny-cat")
    labels = [f"k{i}" for i in range(n_categories)]
    children = {f"p{d}": {"kind": "categorical", "categories": labels} for d in range(n_leaves)}
    schema = load_schema(json.dumps({"kind": "composite", "children": children}))
    joint = rng.dirichlet(np.ones(n_categories**n_leaves) * 2.0)
    outcomes = [
        [int(x) for x in np.unravel_index(i, (n_categories,) * n_leaves)]
        for i in range(len(joint))
    ]
    picks = rng.choice(len(joint), size=600, p=joint)
    entities = [EntityInstance(list(outcomes[i])) for i in picks]
    model_cfg = ModelConfig(
        model_dim=16, n_entity_layers=1, n_heads=2, n_enc_dec_layers=1,
        gmm_components=1, dropout=0.0,
    )
    train_cfg = TrainConfig(batch_size=128, epochs=epochs, learning_rate=3e-3, seed=seed)
    model, _ = fit(entities, schema, model_cfg, train_cfg)
    return {"model": model, "data": entities, "schema": schema, "outcomes": outcomes}


@pytest.fixture(scope="session")
def tiny_categorical_models():
    """Five trained tiny models spanning 2-3 leaves and 2-3 categories."""
    shapes = [(2, 2), (2, 3), (3, 2), (3, 3), (2, 2)]
    return [
        make_tiny_categorical(d, k, seed=100 + i) for i, (d, k) in enumerate(shapes)
    ]
