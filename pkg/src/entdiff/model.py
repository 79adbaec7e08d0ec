"""The denoising network over entity property sets.

Each leaf property contributes one token: a hierarchical key encoding (an RNN
run over the dot path's segments) plus, for visible values, a type-specific
value encoding. A transformer aggregates the set; masked and missing
positions query context but are never attended to as keys. Type-specific
decoders read the transformer output at masked positions only.

Everything runs in float64: the package's tolerance contracts (gradient
checks, permutation invariance) assume double precision.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, SchemaError
from .numeric import (
    GmmParams,
    NumericEmbeddingConfig,
    default_frequencies,
    dice_features,
    gmm_from_raw,
    mse_params,
)
from .schema import (
    MASKED,
    EntityInstance,
    EntitySchema,
    PropertyKind,
    PropertySpec,
    load_schema,
    normalize_value,
    save_schema,
)
from .seeding import split_seed

DTYPE = torch.float64

PAD_ID = 0
END_ID = 1
N_SPECIAL_TOKENS = 2


@dataclass(frozen=True)
class ModelConfig:
    model_dim: int = 64
    n_entity_layers: int = 2
    n_heads: int = 2
    n_enc_dec_layers: int = 2
    gmm_components: int = 50
    frozen_unit_scale: bool = False
    numeric_embedding: str = "periodic"  # periodic | dice
    tied_numeric_embedding: bool = False
    n_text_layers: int = 2
    init: str = "standard"  # standard | mup
    mup_base_width: int = 64
    dropout: float = 0.1

    def __post_init__(self):
        if self.model_dim % self.n_heads != 0:
            raise ConfigError("model_dim must be divisible by n_heads")
        for name in ("n_entity_layers", "n_enc_dec_layers", "n_text_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.gmm_components < 1:
            raise ConfigError("gmm_components must be >= 1")
        if self.frozen_unit_scale and self.gmm_components != 1:
            raise ConfigError("frozen_unit_scale requires a single mixture component")
        if self.numeric_embedding not in ("periodic", "dice"):
            raise ConfigError(f"unknown numeric embedding {self.numeric_embedding!r}")
        if self.init not in ("standard", "mup"):
            raise ConfigError(f"unknown init {self.init!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")


@dataclass
class CategoricalPrediction:
    logits: torch.Tensor  # (n_categories,)


@dataclass
class NumericPrediction:
    params: GmmParams  # normalized units


@dataclass
class TextPrediction:
    latent: torch.Tensor
    head: "TextDecoder" = field(repr=False)


PropertyPrediction = CategoricalPrediction | NumericPrediction | TextPrediction


@dataclass
class LeafBatch:
    """Stacked predictions for one leaf across the masked rows of a batch."""

    kind: PropertyKind
    rows: list[int]
    logits: torch.Tensor | None = None  # (n, n_categories)
    params: GmmParams | None = None  # tensors shaped (n, components)
    latents: torch.Tensor | None = None  # (n, dim)
    head: "TextDecoder | None" = field(default=None, repr=False)

    def single(self, i: int) -> PropertyPrediction:
        if self.kind == PropertyKind.CATEGORICAL:
            return CategoricalPrediction(logits=self.logits[i])
        if self.kind == PropertyKind.NUMERICAL:
            return NumericPrediction(
                params=GmmParams(
                    weights=self.params.weights[i],
                    means=self.params.means[i],
                    scales=self.params.scales[i],
                )
            )
        return TextPrediction(latent=self.latents[i], head=self.head)


class ResidualGluBlock(nn.Module):
    """x + project(GLU(expand(x))), then LayerNorm (post-activation)."""

    def __init__(self, dim: int, dropout: float):
        super().__init__()
        self.expand = nn.Linear(dim, 8 * dim)
        self.project = nn.Linear(4 * dim, dim)
        self.norm = nn.LayerNorm(dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x + self.dropout(self.project(nn.functional.glu(self.expand(x)))))


def _block_stack(dim: int, n_blocks: int, dropout: float) -> nn.Sequential:
    return nn.Sequential(*[ResidualGluBlock(dim, dropout) for _ in range(n_blocks)])


class KeyPathEncoder(nn.Module):
    """RNN over a property's key path, root to leaf; the final hidden state
    is the property's positional/semantic identifier."""

    def __init__(self, schema: EntitySchema, dim: int):
        super().__init__()
        segments: list[str] = []
        for leaf in schema.leaves:
            for seg in leaf.path.split("."):
                if seg not in segments:
                    segments.append(seg)
        self.segment_ids = {seg: i for i, seg in enumerate(segments)}
        self.token_table = nn.Embedding(len(segments), dim)
        self.rnn = nn.GRU(dim, dim, batch_first=True)

        ids, lengths = [], []
        for leaf in schema.leaves:
            parts = [self.segment_ids[s] for s in leaf.path.split(".")]
            ids.append(parts)
            lengths.append(len(parts))
        max_len = max(lengths)
        padded = torch.zeros(len(ids), max_len, dtype=torch.long)
        for i, parts in enumerate(ids):
            padded[i, : len(parts)] = torch.tensor(parts)
        self.register_buffer("leaf_segments", padded)
        self.register_buffer("leaf_lengths", torch.tensor(lengths, dtype=torch.long))

    def encode_paths(self, segment_rows: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        embedded = self.token_table(segment_rows)
        outputs, _ = self.rnn(embedded)
        idx = (lengths - 1).view(-1, 1, 1).expand(-1, 1, outputs.shape[-1])
        return outputs.gather(1, idx).squeeze(1)

    def all_leaves(self) -> torch.Tensor:
        return self.encode_paths(self.leaf_segments, self.leaf_lengths)

    def single(self, path: str) -> torch.Tensor:
        parts = path.split(".")
        unknown = [s for s in parts if s not in self.segment_ids]
        if unknown:
            raise SchemaError(f"unknown key segments {unknown!r} in path {path!r}")
        ids = torch.tensor([[self.segment_ids[s] for s in parts]], dtype=torch.long)
        return self.encode_paths(ids, torch.tensor([len(parts)])).squeeze(0)


class CategoricalEncoder(nn.Module):
    def __init__(self, spec: PropertySpec, cfg: ModelConfig):
        super().__init__()
        self.n_categories = len(spec.categories)
        self.input = nn.Linear(self.n_categories, cfg.model_dim)
        self.blocks = _block_stack(cfg.model_dim, cfg.n_enc_dec_layers, cfg.dropout)

    def encode_batch(self, values: list[int]) -> torch.Tensor:
        one_hot = torch.zeros(len(values), self.n_categories, dtype=DTYPE)
        one_hot[torch.arange(len(values)), torch.tensor(values)] = 1.0
        return self.blocks(self.input(one_hot))


class PeriodicFeatures(nn.Module):
    """Sine/cosine features with learnable frequencies."""

    def __init__(self, dim: int):
        super().__init__()
        self.frequencies = nn.Parameter(default_frequencies(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        angles = x.unsqueeze(-1) * self.frequencies
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class DiceFeatures(nn.Module):
    """Fixed order/magnitude-preserving features."""

    def __init__(self, cfg: NumericEmbeddingConfig):
        super().__init__()
        self.cfg = cfg

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        rows = [dice_features(float(v), self.cfg) for v in x]
        return torch.stack(rows)


class NumericalEncoder(nn.Module):
    def __init__(self, spec: PropertySpec, cfg: ModelConfig, features: nn.Module):
        super().__init__()
        self.spec = spec
        self.features = features
        self.input = nn.Linear(cfg.model_dim, cfg.model_dim)
        self.blocks = _block_stack(cfg.model_dim, cfg.n_enc_dec_layers, cfg.dropout)

    def encode_batch(self, values: list[float]) -> torch.Tensor:
        normalized = torch.tensor(
            [normalize_value(self.spec, v) for v in values], dtype=DTYPE
        )
        return self.blocks(self.input(self.features(normalized)))


def _text_token_ids(value: str, spec: PropertySpec) -> list[int]:
    ids = []
    for ch in value:
        try:
            ids.append(N_SPECIAL_TOKENS + spec.text.vocab.index(ch))
        except ValueError:
            raise SchemaError(f"character {ch!r} not in text vocab of {spec.path!r}") from None
    return ids


class TextEncoder(nn.Module):
    """Small transformer encoder; the first-token (CLS) output is the encoding."""

    def __init__(self, spec: PropertySpec, cfg: ModelConfig):
        super().__init__()
        self.spec = spec
        dim = cfg.model_dim
        vocab_size = len(spec.text.vocab) + N_SPECIAL_TOKENS
        self.token_emb = nn.Embedding(vocab_size, dim, padding_idx=PAD_ID)
        self.pos_emb = nn.Embedding(spec.text.max_length + 2, dim)
        self.cls = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        layer = nn.TransformerEncoderLayer(
            d_model=dim, nhead=cfg.n_heads, dim_feedforward=4 * dim,
            dropout=cfg.dropout, batch_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, cfg.n_text_layers, enable_nested_tensor=False)

    def encode_batch(self, values: list[str]) -> torch.Tensor:
        rows = [_text_token_ids(v, self.spec) + [END_ID] for v in values]
        max_len = max(len(r) for r in rows)
        ids = torch.full((len(rows), max_len), PAD_ID, dtype=torch.long)
        pad_mask = torch.ones(len(rows), max_len + 1, dtype=torch.bool)
        pad_mask[:, 0] = False  # CLS is always attendable
        for i, r in enumerate(rows):
            ids[i, : len(r)] = torch.tensor(r)
            pad_mask[i, 1 : len(r) + 1] = False
        tok = self.token_emb(ids)
        seq = torch.cat([self.cls.expand(len(rows), 1, -1), tok], dim=1)
        seq = seq + self.pos_emb(torch.arange(seq.shape[1]))
        out = self.encoder(seq, src_key_padding_mask=pad_mask)
        return out[:, 0]


class CategoricalDecoder(nn.Module):
    def __init__(self, spec: PropertySpec, cfg: ModelConfig):
        super().__init__()
        self.blocks = _block_stack(cfg.model_dim, cfg.n_enc_dec_layers, cfg.dropout)
        self.head = nn.Linear(cfg.model_dim, len(spec.categories))

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        return self.head(self.blocks(latent))


class NumericDecoder(nn.Module):
    """Emits mixture weights/means/scales, or a bare mean with frozen unit scale."""

    def __init__(self, spec: PropertySpec, cfg: ModelConfig):
        super().__init__()
        self.n_components = cfg.gmm_components
        self.frozen_unit_scale = cfg.frozen_unit_scale
        self.blocks = _block_stack(cfg.model_dim, cfg.n_enc_dec_layers, cfg.dropout)
        out_dim = 1 if self.frozen_unit_scale else 3 * self.n_components
        self.head = nn.Linear(cfg.model_dim, out_dim)

    def forward(self, latent: torch.Tensor) -> GmmParams:
        raw = self.head(self.blocks(latent))
        if self.frozen_unit_scale:
            return mse_params(raw.squeeze(-1))
        logits, means, scales = raw.split(self.n_components, dim=-1)
        return gmm_from_raw(logits, means, scales)


class TextDecoder(nn.Module):
    """Causal transformer decoder conditioned on the property latent as a
    prefix token; teacher-forced in training, greedy or sampled at inference."""

    def __init__(self, spec: PropertySpec, cfg: ModelConfig):
        super().__init__()
        self.spec = spec
        dim = cfg.model_dim
        self.vocab_size = len(spec.text.vocab) + N_SPECIAL_TOKENS
        self.max_steps = spec.text.max_length + 1  # characters plus the end token
        self.blocks = _block_stack(dim, cfg.n_enc_dec_layers, cfg.dropout)
        self.prefix = nn.Linear(dim, dim)
        self.token_emb = nn.Embedding(self.vocab_size, dim, padding_idx=PAD_ID)
        self.pos_emb = nn.Embedding(self.max_steps + 1, dim)
        layer = nn.TransformerEncoderLayer(
            d_model=dim, nhead=cfg.n_heads, dim_feedforward=4 * dim,
            dropout=cfg.dropout, batch_first=True,
        )
        self.body = nn.TransformerEncoder(layer, cfg.n_text_layers, enable_nested_tensor=False)
        self.head = nn.Linear(dim, self.vocab_size)

    def _run(self, latent: torch.Tensor, token_ids: list[int]) -> torch.Tensor:
        """Logits for each next-token position given a prefix of tokens."""
        prefix = self.prefix(self.blocks(latent)).view(1, 1, -1)
        if token_ids:
            tok = self.token_emb(torch.tensor([token_ids], dtype=torch.long))
            seq = torch.cat([prefix, tok], dim=1)
        else:
            seq = prefix
        seq = seq + self.pos_emb(torch.arange(seq.shape[1]))
        causal = torch.triu(torch.ones(seq.shape[1], seq.shape[1], dtype=torch.bool), diagonal=1)
        out = self.body(seq, mask=causal)
        return self.head(out.squeeze(0))

    def teacher_logits(self, latent: torch.Tensor, target: str) -> tuple[torch.Tensor, torch.Tensor]:
        """(T, vocab) logits and (T,) target ids for target-with-end."""
        ids = _text_token_ids(target, self.spec) + [END_ID]
        logits = self._run(latent, ids[:-1])
        return logits, torch.tensor(ids, dtype=torch.long)

    def decode(
        self,
        latent: torch.Tensor,
        rng: np.random.Generator | None = None,
        temperature: float = 1.0,
    ) -> str:
        """Greedy decode, or temperature sampling when an rng is given."""
        ids: list[int] = []
        for _ in range(self.max_steps):
            logits = self._run(latent, ids)[-1]
            logits[PAD_ID] = -torch.inf
            if rng is None:
                next_id = int(torch.argmax(logits))
            else:
                probs = torch.softmax(logits / temperature, dim=-1).detach().cpu().numpy()
                next_id = int(np.searchsorted(np.cumsum(probs), rng.random()))
                next_id = min(next_id, self.vocab_size - 1)
            if next_id == END_ID:
                break
            ids.append(next_id)
            if len(ids) >= self.spec.text.max_length:
                break
        return "".join(self.spec.text.vocab[i - N_SPECIAL_TOKENS] for i in ids)


class EntityDenoiser(nn.Module):
    """Typed denoiser over one entity schema."""

    def __init__(self, config: ModelConfig, schema: EntitySchema):
        super().__init__()
        self.config = config
        self.schema = schema
        dim = config.model_dim
        if config.numeric_embedding == "periodic" and dim % 2 != 0:
            raise ConfigError("periodic numeric embedding needs an even model_dim")

        self.key_paths = KeyPathEncoder(schema, dim)
        self.null_anchor = nn.Parameter(torch.zeros(dim, dtype=DTYPE))

        shared_features = None
        if config.tied_numeric_embedding and config.numeric_embedding == "periodic":
            shared_features = PeriodicFeatures(dim)

        encoders: dict[str, nn.Module] = {}
        decoders: dict[str, nn.Module] = {}
        for leaf in schema.leaves:
            key = _module_key(leaf.path)
            if leaf.kind == PropertyKind.CATEGORICAL:
                encoders[key] = CategoricalEncoder(leaf, config)
                decoders[key] = CategoricalDecoder(leaf, config)
            elif leaf.kind == PropertyKind.NUMERICAL:
                if config.numeric_embedding == "dice":
                    features: nn.Module = DiceFeatures(NumericEmbeddingConfig("dice", dim))
                elif shared_features is not None:
                    features = shared_features
                else:
                    features = PeriodicFeatures(dim)
                encoders[key] = NumericalEncoder(leaf, config, features)
                decoders[key] = NumericDecoder(leaf, config)
            else:
                encoders[key] = TextEncoder(leaf, config)
                decoders[key] = TextDecoder(leaf, config)
        self.encoders = nn.ModuleDict(encoders)
        self.decoders = nn.ModuleDict(decoders)

        layer = nn.TransformerEncoderLayer(
            d_model=dim, nhead=config.n_heads, dim_feedforward=4 * dim,
            dropout=config.dropout, batch_first=True,
        )
        self.entity_encoder = nn.TransformerEncoder(
            layer, config.n_entity_layers, enable_nested_tensor=False
        )
        self.to(DTYPE)
        if config.init == "mup":
            self._apply_mup_init()

    # -- parameter setup ----------------------------------------------------

    def _apply_mup_init(self):
        base = self.config.mup_base_width
        width = self.config.model_dim
        for name, param in self.named_parameters():
            if param.dim() == 2 and "token_emb" not in name and "token_table" not in name:
                fan_in = param.shape[1]
                nn.init.normal_(param, std=(1.0 / fan_in) ** 0.5)
        for module in self.modules():
            if isinstance(module, (CategoricalDecoder, NumericDecoder, TextDecoder)):
                nn.init.zeros_(module.head.weight)
                nn.init.zeros_(module.head.bias)
        self._mup_lr_scale = base / width

    def parameter_groups(self, lr: float) -> list[dict]:
        """Optimizer groups; width-scaled learning rates for matrices under mup."""
        if self.config.init != "mup":
            return [{"params": list(self.parameters()), "lr": lr}]
        matrices, others = [], []
        for name, param in self.named_parameters():
            if param.dim() == 2 and "token_emb" not in name and "token_table" not in name:
                matrices.append(param)
            else:
                others.append(param)
        return [
            {"params": matrices, "lr": lr * self._mup_lr_scale},
            {"params": others, "lr": lr},
        ]

    # -- encodings ----------------------------------------------------------

    def hierarchical_encoding(self, path: str) -> torch.Tensor:
        """Key-path RNN output for one property path."""
        return self.key_paths.single(path)

    def encode_property(self, value, path: str) -> torch.Tensor:
        """Type-specific value encoding for a Present cell."""
        leaf = self.schema.leaf(path)
        encoder = self.encoders[_module_key(path)]
        if leaf.kind == PropertyKind.CATEGORICAL:
            if not isinstance(value, int):
                raise SchemaError(f"categorical leaf {path!r} takes an int index")
            return encoder.encode_batch([value]).squeeze(0)
        if leaf.kind == PropertyKind.NUMERICAL:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise SchemaError(f"numerical leaf {path!r} takes a float")
            return encoder.encode_batch([float(value)]).squeeze(0)
        if not isinstance(value, str):
            raise SchemaError(f"text leaf {path!r} takes a str")
        return encoder.encode_batch([value]).squeeze(0)

    # -- forward ------------------------------------------------------------

    def forward_grouped(
        self,
        entities: list[EntityInstance],
        leaf_order: list[int] | None = None,
    ) -> dict[str, "LeafBatch"]:
        """Leaf-major predictions for every Masked leaf of every entity.

        Returns, per leaf path with at least one masked row, the batch row
        indices and a stacked prediction for exactly those rows. ``leaf_order``
        feeds the transformer an alternative token order; the result is keyed
        by path and must not depend on it (the encoder is set-structured).
        """
        schema = self.schema
        n_leaves = schema.n_leaves
        batch = len(entities)
        for entity in entities:
            if len(entity.values) != n_leaves:
                raise SchemaError("entity does not match the model's schema")
            if all(v is not MASKED for v in entity.values) and not any(
                entity.is_present(i) for i in range(n_leaves)
            ):
                raise SchemaError("entity has no Present and no Masked leaves")

        order = list(range(n_leaves)) if leaf_order is None else list(leaf_order)
        if sorted(order) != list(range(n_leaves)):
            raise ConfigError("leaf_order must be a permutation of the leaf indices")
        position_of = {leaf_idx: pos for pos, leaf_idx in enumerate(order)}

        key_enc = self.key_paths.all_leaves()  # (D, dim)
        tokens = key_enc[order].unsqueeze(0).repeat(batch, 1, 1)

        pad_mask = torch.ones(batch, n_leaves + 1, dtype=torch.bool)
        pad_mask[:, n_leaves] = False
        for d, leaf in enumerate(schema.leaves):
            rows = [b for b in range(batch) if entities[b].is_present(d)]
            if rows:
                values = [entities[b].values[d] for b in rows]
                encoded = self.encoders[_module_key(leaf.path)].encode_batch(values)
                tokens[torch.tensor(rows), position_of[d]] += encoded
                pad_mask[torch.tensor(rows), position_of[d]] = False

        anchor = self.null_anchor.view(1, 1, -1).expand(batch, 1, -1)
        seq = torch.cat([tokens, anchor], dim=1)
        hidden = self.entity_encoder(seq, src_key_padding_mask=pad_mask)

        grouped: dict[str, LeafBatch] = {}
        for d, leaf in enumerate(schema.leaves):
            rows = [b for b in range(batch) if entities[b].values[d] is MASKED]
            if not rows:
                continue
            latents = hidden[torch.tensor(rows), position_of[d]]
            decoder = self.decoders[_module_key(leaf.path)]
            if leaf.kind == PropertyKind.CATEGORICAL:
                grouped[leaf.path] = LeafBatch(
                    kind=leaf.kind, rows=rows, logits=decoder(latents)
                )
            elif leaf.kind == PropertyKind.NUMERICAL:
                grouped[leaf.path] = LeafBatch(
                    kind=leaf.kind, rows=rows, params=decoder(latents)
                )
            else:
                grouped[leaf.path] = LeafBatch(
                    kind=leaf.kind, rows=rows, latents=latents, head=decoder
                )
        return grouped

    def forward_batch(
        self,
        entities: list[EntityInstance],
        leaf_order: list[int] | None = None,
    ) -> list[dict[str, PropertyPrediction]]:
        """Per-entity prediction maps for every Masked leaf."""
        grouped = self.forward_grouped(entities, leaf_order)
        results: list[dict[str, PropertyPrediction]] = [dict() for _ in entities]
        for path, leaf_batch in grouped.items():
            for i, b in enumerate(leaf_batch.rows):
                results[b][path] = leaf_batch.single(i)
        return results

    def forward(self, entity: EntityInstance) -> dict[str, PropertyPrediction]:
        return self.forward_batch([entity])[0]


def _module_key(path: str) -> str:
    # ModuleDict forbids dots in keys
    return path.replace(".", "__")


def init_parameters(config: ModelConfig, schema: EntitySchema, seed: int) -> EntityDenoiser:
    """Build a model with deterministically seeded parameters."""
    torch.manual_seed(split_seed(seed, "model-init"))
    return EntityDenoiser(config, schema)


CHECKPOINT_FORMAT = "entdiff-checkpoint-v1"


def save_checkpoint(model: EntityDenoiser, path: str) -> str:
    """Write a self-describing checkpoint; returns its content fingerprint."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "schema_document": save_schema(model.schema),
        "schema_fingerprint": model.schema.fingerprint(),
        "state_dict": model.state_dict(),
    }
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    data = buffer.getvalue()
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: str) -> EntityDenoiser:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"not an entdiff checkpoint: {path}")
    config = ModelConfig(**payload["config"])
    schema = load_schema(payload["schema_document"])
    model = EntityDenoiser(config, schema)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def checkpoint_fingerprint(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def checkpoint_schema_fingerprint(path: str) -> str:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    return payload["schema_fingerprint"]
