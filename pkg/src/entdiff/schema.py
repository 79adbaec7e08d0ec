"""Hierarchical entity data model, ingestion, and reversible preprocessing.

An entity schema is a tree of typed properties. Composite nodes group other
properties; leaves are numerical, categorical, or text. Entities are
leaf-aligned value vectors where every cell is Present (a typed value),
Missing (absent in the source data, outside the diffusion), or Masked (the
diffusion's absorbing state).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence

from .errors import DataError, SchemaError

DEFAULT_MISSING_SENTINEL = "NA"
DEFAULT_CATEGORICAL_CUTOFF = 20
DEFAULT_TEXT_MAX_LENGTH = 32
# Printable ASCII, stable across platforms. Character-level tokens.
DEFAULT_TEXT_VOCAB = tuple(chr(c) for c in range(32, 127))


class PropertyKind(str, Enum):
    NUMERICAL = "numerical"
    CATEGORICAL = "categorical"
    TEXT = "text"
    COMPOSITE = "composite"


class _Sentinel:
    __slots__ = ("_name",)

    def __init__(self, name: str):
        self._name = name

    def __repr__(self) -> str:
        return self._name

    def __deepcopy__(self, memo):
        return self

    def __copy__(self):
        return self


#: Cell absent in the source data; never masked, predicted, or attended.
MISSING = _Sentinel("Missing")
#: Cell in the diffusion's absorbing mask state, awaiting prediction.
MASKED = _Sentinel("Masked")


@dataclass(frozen=True)
class Normalizer:
    """Fitted min-max range for one numerical leaf."""

    min: float
    max: float
    constant: bool = False


@dataclass(frozen=True)
class TextSpec:
    vocab: tuple[str, ...] = DEFAULT_TEXT_VOCAB
    max_length: int = DEFAULT_TEXT_MAX_LENGTH


@dataclass(frozen=True)
class PropertySpec:
    """One node of the schema tree."""

    name: str
    path: str
    kind: PropertyKind
    categories: tuple[str, ...] = ()
    text: TextSpec | None = None
    normalizer: Normalizer | None = None
    children: tuple["PropertySpec", ...] = ()

    def __post_init__(self):
        if self.kind == PropertyKind.COMPOSITE:
            if not self.children:
                raise SchemaError(f"composite property {self.path!r} has no children")
        elif self.children:
            raise SchemaError(f"{self.kind.value} property {self.path!r} cannot have children")
        if self.kind == PropertyKind.CATEGORICAL:
            if not self.categories:
                raise SchemaError(f"categorical property {self.path!r} has empty categories")
            if len(set(self.categories)) != len(self.categories):
                raise SchemaError(f"categorical property {self.path!r} has duplicate labels")
        if self.kind == PropertyKind.TEXT and self.text is None:
            object.__setattr__(self, "text", TextSpec())
        if self.normalizer is not None and self.normalizer.max < self.normalizer.min:
            raise SchemaError(f"normalizer for {self.path!r} has max < min")

    @property
    def is_leaf(self) -> bool:
        return self.kind != PropertyKind.COMPOSITE

    def category_index(self, label: str) -> int:
        try:
            return self.categories.index(label)
        except ValueError:
            raise DataError(f"unknown label {label!r} for categorical leaf {self.path!r}") from None


@dataclass(frozen=True)
class EntitySchema:
    """A validated property tree with a fixed, stable leaf order."""

    root: PropertySpec
    leaves: tuple[PropertySpec, ...] = field(init=False)
    _leaf_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        leaves: list[PropertySpec] = []
        seen: set[str] = set()

        def walk(node: PropertySpec):
            if node.is_leaf:
                if node.path in seen:
                    raise SchemaError(f"duplicate leaf path {node.path!r}")
                seen.add(node.path)
                leaves.append(node)
            else:
                for child in node.children:
                    walk(child)

        walk(self.root)
        if not leaves:
            raise SchemaError("schema has no leaves")
        object.__setattr__(self, "leaves", tuple(leaves))
        object.__setattr__(self, "_leaf_index", {leaf.path: i for i, leaf in enumerate(leaves)})

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    def leaf(self, path: str) -> PropertySpec:
        try:
            return self.leaves[self._leaf_index[path]]
        except KeyError:
            raise SchemaError(f"unknown leaf path {path!r}") from None

    def leaf_position(self, path: str) -> int:
        try:
            return self._leaf_index[path]
        except KeyError:
            raise SchemaError(f"unknown leaf path {path!r}") from None

    def fingerprint(self) -> str:
        return hashlib.sha256(save_schema(self).encode()).hexdigest()


@dataclass
class EntityInstance:
    """Leaf-aligned cells: Present value | MISSING | MASKED.

    Present cells hold a float (numerical, original units), an int index
    into the leaf's categories, or a str (text).
    """

    values: list

    def copy(self) -> "EntityInstance":
        return EntityInstance(list(self.values))

    def present_indices(self) -> list[int]:
        return [i for i, v in enumerate(self.values) if v is not MISSING and v is not MASKED]

    def masked_indices(self) -> list[int]:
        return [i for i, v in enumerate(self.values) if v is MASKED]

    def non_missing_indices(self) -> list[int]:
        return [i for i, v in enumerate(self.values) if v is not MISSING]

    def is_present(self, i: int) -> bool:
        v = self.values[i]
        return v is not MISSING and v is not MASKED

    def with_masked(self, indices: Iterable[int]) -> "EntityInstance":
        out = self.copy()
        for i in indices:
            if out.values[i] is MISSING:
                raise DataError("cannot mask a Missing cell")
            out.values[i] = MASKED
        return out


def validate_entity(entity: EntityInstance, schema: EntitySchema) -> None:
    if len(entity.values) != schema.n_leaves:
        raise DataError(
            f"entity has {len(entity.values)} cells, schema has {schema.n_leaves} leaves"
        )
    for leaf, value in zip(schema.leaves, entity.values):
        if value is MISSING or value is MASKED:
            continue
        if leaf.kind == PropertyKind.NUMERICAL:
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise DataError(f"non-finite numerical value {value!r} at {leaf.path!r}")
        elif leaf.kind == PropertyKind.CATEGORICAL:
            if not isinstance(value, int) or not 0 <= value < len(leaf.categories):
                raise DataError(f"categorical index {value!r} out of range at {leaf.path!r}")
        elif leaf.kind == PropertyKind.TEXT:
            if not isinstance(value, str):
                raise DataError(f"text cell at {leaf.path!r} holds {type(value).__name__}")
            if len(value) > leaf.text.max_length:
                raise DataError(f"text at {leaf.path!r} exceeds max_length {leaf.text.max_length}")


# ---------------------------------------------------------------------------
# Schema documents (JSON-shaped tree with kind / children / categories / text)
# ---------------------------------------------------------------------------

_VALID_KINDS = {k.value for k in PropertyKind}


def _node_from_doc(name: str, path: str, doc: dict) -> PropertySpec:
    if not isinstance(doc, dict):
        raise SchemaError(f"schema node {path or '<root>'!r} is not an object")
    kind = doc.get("kind")
    if kind not in _VALID_KINDS:
        raise SchemaError(f"unknown kind {kind!r} at {path or '<root>'!r}")
    kind = PropertyKind(kind)
    if kind == PropertyKind.COMPOSITE:
        children_doc = doc.get("children")
        if not isinstance(children_doc, dict) or not children_doc:
            raise SchemaError(f"composite node {path or '<root>'!r} needs a non-empty children map")
        children = []
        for child_name, child_doc in children_doc.items():
            if not child_name or "." in child_name:
                raise SchemaError(f"invalid property name {child_name!r} under {path or '<root>'!r}")
            child_path = f"{path}.{child_name}" if path else child_name
            children.append(_node_from_doc(child_name, child_path, child_doc))
        return PropertySpec(name=name, path=path, kind=kind, children=tuple(children))

    categories: tuple[str, ...] = ()
    text: TextSpec | None = None
    normalizer: Normalizer | None = None
    if kind == PropertyKind.CATEGORICAL:
        raw = doc.get("categories")
        if not isinstance(raw, list) or not raw:
            raise SchemaError(f"categorical leaf {path!r} needs a non-empty categories list")
        categories = tuple(str(c) for c in raw)
    if kind == PropertyKind.TEXT:
        raw = doc.get("text", {})
        vocab = tuple(raw.get("vocab", DEFAULT_TEXT_VOCAB))
        if len(set(vocab)) != len(vocab) or not vocab:
            raise SchemaError(f"text leaf {path!r} has an empty or duplicated vocab")
        text = TextSpec(vocab=vocab, max_length=int(raw.get("max_length", DEFAULT_TEXT_MAX_LENGTH)))
    if kind == PropertyKind.NUMERICAL and "normalizer" in doc:
        raw = doc["normalizer"]
        normalizer = Normalizer(
            min=float(raw["min"]), max=float(raw["max"]), constant=bool(raw.get("constant", False))
        )
    return PropertySpec(
        name=name, path=path, kind=kind, categories=categories, text=text, normalizer=normalizer
    )


def load_schema(document: str) -> EntitySchema:
    """Parse a schema document; leaves are enumerated in document order."""
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"schema document is not valid JSON: {exc}") from exc
    root = _node_from_doc("", "", doc)
    if root.is_leaf:
        raise SchemaError("schema root must be a composite node")
    return EntitySchema(root=root)


def _node_to_doc(node: PropertySpec) -> dict:
    doc: dict = {"kind": node.kind.value}
    if node.kind == PropertyKind.COMPOSITE:
        doc["children"] = {child.name: _node_to_doc(child) for child in node.children}
    if node.kind == PropertyKind.CATEGORICAL:
        doc["categories"] = list(node.categories)
    if node.kind == PropertyKind.TEXT:
        doc["text"] = {"vocab": list(node.text.vocab), "max_length": node.text.max_length}
    if node.kind == PropertyKind.NUMERICAL and node.normalizer is not None:
        doc["normalizer"] = {
            "min": node.normalizer.min,
            "max": node.normalizer.max,
            "constant": node.normalizer.constant,
        }
    return doc


def save_schema(schema: EntitySchema) -> str:
    """Serialize to the canonical document form; save/load round-trips bit-exactly."""
    return json.dumps(_node_to_doc(schema.root), indent=2) + "\n"


# ---------------------------------------------------------------------------
# CSV / JSON-lines ingestion
# ---------------------------------------------------------------------------


def _parse_csv(text: str) -> tuple[list[str], list[list[str]]]:
    reader = csv.reader(io.StringIO(text))
    rows = list(reader)
    while rows and not rows[0]:
        rows.pop(0)
    if not rows:
        raise DataError("empty CSV")
    header = rows[0]
    if not header or all(not h for h in header):
        raise DataError("CSV has zero columns")
    body = []
    for i, row in enumerate(rows[1:]):
        if not row:
            # a blank line is one empty cell in a single-column file,
            # a separator line otherwise
            if len(header) == 1:
                body.append([""])
            continue
        if len(row) != len(header):
            raise DataError(f"ragged CSV: row {i + 2} has {len(row)} cells, header has {len(header)}")
        body.append(row)
    return header, body


def infer_schema_from_csv(
    text: str,
    type_hints: dict[str, str] | None = None,
    categorical_cutoff: int = DEFAULT_CATEGORICAL_CUTOFF,
    missing_sentinel: str = DEFAULT_MISSING_SENTINEL,
) -> EntitySchema:
    """Infer leaf kinds from a CSV: numbers -> numerical, few distinct strings
    -> categorical, otherwise text. Hints override inference per column."""
    header, body = _parse_csv(text)
    if len(set(header)) != len(header):
        raise SchemaError("duplicate column names in CSV header")
    hints = dict(type_hints or {})

    leaf_docs: dict[str, dict] = {}
    for col, name in enumerate(header):
        cells = [row[col] for row in body]
        observed = [c for c in cells if c != "" and c != missing_sentinel]
        kind = hints.pop(name, None)
        if kind is None:
            kind = _infer_kind(observed, categorical_cutoff)
        if kind == "numerical":
            leaf_docs[name] = {"kind": "numerical"}
        elif kind == "categorical":
            leaf_docs[name] = {"kind": "categorical", "categories": sorted(set(observed))}
        elif kind == "text":
            max_len = max([len(c) for c in observed], default=0)
            leaf_docs[name] = {
                "kind": "text",
                "text": {
                    "vocab": list(DEFAULT_TEXT_VOCAB),
                    "max_length": max(DEFAULT_TEXT_MAX_LENGTH, max_len),
                },
            }
        else:
            raise SchemaError(f"unknown kind {kind!r} in type hints for column {name!r}")
    if hints:
        raise SchemaError(f"type hints for unknown columns: {sorted(hints)}")

    root_doc: dict = {"kind": "composite", "children": {}}
    for name, leaf_doc in leaf_docs.items():
        node = root_doc
        segments = name.split(".")
        for seg in segments[:-1]:
            child = node["children"].setdefault(seg, {"kind": "composite", "children": {}})
            if child.get("kind") != "composite":
                raise SchemaError(f"column {name!r} nests under non-composite {seg!r}")
            node = child
        if segments[-1] in node["children"]:
            raise SchemaError(f"duplicate leaf path {name!r}")
        node["children"][segments[-1]] = leaf_doc
    return load_schema(json.dumps(root_doc))


def _infer_kind(observed: list[str], categorical_cutoff: int) -> str:
    if observed and all(_parses_as_number(c) for c in observed):
        return "numerical"
    if len(set(observed)) <= categorical_cutoff:
        return "categorical"
    return "text"


def _parses_as_number(cell: str) -> bool:
    try:
        return math.isfinite(float(cell))
    except ValueError:
        return False


def _parse_cell(cell: str, leaf: PropertySpec, missing_sentinel: str):
    if cell == "" or cell == missing_sentinel:
        return MISSING
    if leaf.kind == PropertyKind.NUMERICAL:
        try:
            value = float(cell)
        except ValueError:
            raise DataError(f"cannot parse {cell!r} as a number for leaf {leaf.path!r}") from None
        if not math.isfinite(value):
            raise DataError(f"non-finite value {cell!r} at {leaf.path!r}")
        return value
    if leaf.kind == PropertyKind.CATEGORICAL:
        return leaf.category_index(cell)
    if len(cell) > leaf.text.max_length:
        raise DataError(f"text cell at {leaf.path!r} exceeds max_length {leaf.text.max_length}")
    return cell


def read_csv_dataset(
    text: str, schema: EntitySchema, missing_sentinel: str = DEFAULT_MISSING_SENTINEL
) -> list[EntityInstance]:
    header, body = _parse_csv(text)
    positions = [schema.leaf_position(name) for name in header]
    if len(set(positions)) != len(positions):
        raise DataError("CSV maps two columns to the same leaf")
    entities = []
    for row in body:
        values: list = [MISSING] * schema.n_leaves
        for cell, pos in zip(row, positions):
            values[pos] = _parse_cell(cell, schema.leaves[pos], missing_sentinel)
        entity = EntityInstance(values)
        validate_entity(entity, schema)
        entities.append(entity)
    return entities


def _format_cell(value, leaf: PropertySpec) -> str:
    if value is MISSING:
        return ""
    if value is MASKED:
        raise DataError(f"cannot serialize a Masked cell at {leaf.path!r}")
    if leaf.kind == PropertyKind.NUMERICAL:
        return repr(float(value))
    if leaf.kind == PropertyKind.CATEGORICAL:
        return leaf.categories[value]
    return value


def write_csv_dataset(entities: Sequence[EntityInstance], schema: EntitySchema) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([leaf.path for leaf in schema.leaves])
    for entity in entities:
        writer.writerow([_format_cell(v, leaf) for v, leaf in zip(entity.values, schema.leaves)])
    return buf.getvalue()


def read_jsonl_dataset(text: str, schema: EntitySchema) -> list[EntityInstance]:
    entities = []
    for i, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"line {i + 1} is not valid JSON: {exc}") from exc
        values: list = []
        for leaf in schema.leaves:
            node = obj
            for seg in leaf.path.split("."):
                node = node.get(seg) if isinstance(node, dict) else None
                if node is None:
                    break
            if node is None:
                values.append(MISSING)
            elif leaf.kind == PropertyKind.NUMERICAL:
                values.append(float(node))
            elif leaf.kind == PropertyKind.CATEGORICAL:
                values.append(leaf.category_index(str(node)))
            else:
                values.append(str(node))
        entity = EntityInstance(values)
        validate_entity(entity, schema)
        entities.append(entity)
    return entities


def write_jsonl_dataset(entities: Sequence[EntityInstance], schema: EntitySchema) -> str:
    lines = []
    for entity in entities:
        obj: dict = {}
        for leaf, value in zip(schema.leaves, entity.values):
            if value is MISSING:
                continue
            if value is MASKED:
                raise DataError(f"cannot serialize a Masked cell at {leaf.path!r}")
            node = obj
            segments = leaf.path.split(".")
            for seg in segments[:-1]:
                node = node.setdefault(seg, {})
            if leaf.kind == PropertyKind.CATEGORICAL:
                node[segments[-1]] = leaf.categories[value]
            else:
                node[segments[-1]] = value
        lines.append(json.dumps(obj))
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# Min-max normalization
# ---------------------------------------------------------------------------


def fit_normalizers(schema: EntitySchema, train: Sequence[EntityInstance]) -> EntitySchema:
    """Return a new schema with min/max fitted over Present cells per numerical leaf."""
    if not train:
        raise DataError("cannot fit normalizers on an empty training set")
    stats: dict[str, Normalizer] = {}
    for i, leaf in enumerate(schema.leaves):
        if leaf.kind != PropertyKind.NUMERICAL:
            continue
        cells = [e.values[i] for e in train if e.is_present(i)]
        if not cells:
            raise DataError(f"numerical leaf {leaf.path!r} has zero Present cells")
        lo, hi = min(cells), max(cells)
        stats[leaf.path] = Normalizer(min=lo, max=hi, constant=lo == hi)

    def rebuild(node: PropertySpec) -> PropertySpec:
        if node.is_leaf:
            if node.path in stats:
                return replace(node, normalizer=stats[node.path])
            return node
        return replace(node, children=tuple(rebuild(c) for c in node.children))

    return EntitySchema(root=rebuild(schema.root))


def normalize_value(leaf: PropertySpec, value: float) -> float:
    norm = leaf.normalizer
    if norm is None:
        raise SchemaError(f"normalizer for {leaf.path!r} has not been fitted")
    if norm.constant:
        return 0.0
    return (value - norm.min) / (norm.max - norm.min)


def denormalize_value(leaf: PropertySpec, value: float) -> float:
    norm = leaf.normalizer
    if norm is None:
        raise SchemaError(f"normalizer for {leaf.path!r} has not been fitted")
    if norm.constant:
        return norm.min
    return norm.min + value * (norm.max - norm.min)


def normalize(entity: EntityInstance, schema: EntitySchema) -> EntityInstance:
    """Map Present numerical cells onto the fitted [0, 1] training range.

    Values outside the range extrapolate linearly; the map stays invertible.
    """
    out = entity.copy()
    for i, leaf in enumerate(schema.leaves):
        if leaf.kind == PropertyKind.NUMERICAL and entity.is_present(i):
            out.values[i] = normalize_value(leaf, entity.values[i])
    return out


def denormalize(entity: EntityInstance, schema: EntitySchema) -> EntityInstance:
    out = entity.copy()
    for i, leaf in enumerate(schema.leaves):
        if leaf.kind == PropertyKind.NUMERICAL and entity.is_present(i):
            out.values[i] = denormalize_value(leaf, entity.values[i])
    return out
