"""Feature schema, embedding tables and self-attention sequence pooling."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .core import Module, ShapeError, StateError, check_dim, uniform_init

FIELD_KINDS = ("profile", "scenario_context", "scenario_cross", "behavior_sequence")
DEFAULT_MAX_LEN = 50


class OOVError(IndexError):
    pass


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class FieldSpec:
    """One feature field.

    For ``behavior_sequence`` fields, ``item_fields`` names the embedding
    tables whose rows are concatenated into each sequence element, ``dim``
    is the pooled output width and ``vocab_size`` the item vocabulary.
    """

    name: str
    vocab_size: int
    dim: int
    kind: str
    table: str | None = None
    item_fields: tuple[str, ...] = ()
    max_len: int = DEFAULT_MAX_LEN

    @property
    def table_name(self) -> str:
        return self.table or self.name


@dataclass(frozen=True)
class FeatureSchema:
    side: str
    fields: tuple[FieldSpec, ...]

    def __post_init__(self) -> None:
        if self.side not in ("user", "item"):
            raise SchemaError(f"side must be 'user' or 'item', got {self.side!r}")
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate field names in {self.side} schema")
        for f in self.fields:
            if f.kind not in FIELD_KINDS:
                raise SchemaError(f"field {f.name}: unknown kind {f.kind!r}")
            if f.vocab_size <= 0 or f.dim <= 0:
                raise SchemaError(f"field {f.name}: vocab_size and dim must be positive")
            if f.kind == "behavior_sequence":
                if self.side != "user":
                    raise SchemaError(f"field {f.name}: behavior sequences are user-side only")
                if not f.item_fields:
                    raise SchemaError(f"field {f.name}: sequence needs item_fields")
                if f.max_len <= 0:
                    raise SchemaError(f"field {f.name}: max_len must be positive")
        n_ctx = sum(f.kind == "scenario_context" for f in self.fields)
        if n_ctx != 1:
            raise SchemaError(f"{self.side} schema needs exactly one scenario_context field, found {n_ctx}")

    @property
    def scenario_field(self) -> FieldSpec:
        return next(f for f in self.fields if f.kind == "scenario_context")

    @property
    def input_fields(self) -> list[FieldSpec]:
        """Fields feeding the towers, in schema order (scenario context excluded)."""
        return [f for f in self.fields if f.kind != "scenario_context"]

    @property
    def sequence_fields(self) -> list[FieldSpec]:
        return [f for f in self.fields if f.kind == "behavior_sequence"]

    def to_dict(self) -> dict:
        return {"side": self.side, "fields": [asdict(f) for f in self.fields]}

    @classmethod
    def from_dict(cls, d: dict) -> FeatureSchema:
        fields = []
        for f in d["fields"]:
            f = dict(f)
            f["item_fields"] = tuple(f.get("item_fields", ()))
            fields.append(FieldSpec(**f))
        return cls(side=d["side"], fields=tuple(fields))


def schema_hash(*parts: object) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def table_shapes(schemas: Sequence[FeatureSchema]) -> dict[str, tuple[int, int]]:
    """Collect ``table -> (vocab, dim)`` across schemas, rejecting conflicts."""
    shapes: dict[str, tuple[int, int]] = {}
    for schema in schemas:
        for f in schema.fields:
            if f.kind == "behavior_sequence":
                continue
            shape = (f.vocab_size, f.dim)
            prev = shapes.setdefault(f.table_name, shape)
            if prev != shape:
                raise SchemaError(f"table {f.table_name} declared as {prev} and {shape}")
    for schema in schemas:
        for f in schema.sequence_fields:
            for name in f.item_fields:
                if name not in shapes:
                    raise SchemaError(f"sequence {f.name} references unknown table {name!r}")
    return shapes


class EmbeddingTable(Module):
    """Named embedding matrices shared by both towers.

    Lookups are stateless; callers hand row gradients back through
    :meth:`backward`, which records them as row-sparse updates.
    """

    def __init__(self, shapes: dict[str, tuple[int, int]], rng: np.random.Generator) -> None:
        super().__init__()
        for name, (vocab, dim) in shapes.items():
            # a lookup is a one-hot product, so fan-in is the vocabulary size
            self.params[name] = uniform_init(rng, (vocab, dim), vocab)
        self.sparse_grads: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {}

    def vocab_size(self, table: str) -> int:
        return self.params[table].shape[0]

    def dim(self, table: str) -> int:
        return self.params[table].shape[1]

    def lookup(self, table: str, ids) -> np.ndarray:
        ids = np.asarray(ids)
        mat = self.params[table]
        if ids.size and (ids.min() < 0 or ids.max() >= mat.shape[0]):
            bad = ids[(ids < 0) | (ids >= mat.shape[0])].ravel()[0]
            raise OOVError(f"id {bad} out of vocabulary for {table} (size {mat.shape[0]})")
        return mat[ids]

    def backward(self, table: str, ids, grad: np.ndarray) -> None:
        ids = np.asarray(ids).ravel()
        grad = np.asarray(grad, dtype=np.float64).reshape(len(ids), self.dim(table))
        self.sparse_grads.setdefault(table, []).append((ids, grad))

    def dense_grad(self, table: str) -> np.ndarray:
        """Sum of recorded sparse gradients as a dense matrix (for checks)."""
        g = np.zeros_like(self.params[table])
        for ids, vals in self.sparse_grads.get(table, []):
            np.add.at(g, ids, vals)
        return g


def embed_lookup(table: EmbeddingTable, field: str, id: int) -> np.ndarray:
    return table.lookup(field, id)


def concat_fields(vectors: Sequence[np.ndarray]) -> np.ndarray:
    if len(vectors) == 0:
        raise ShapeError("concat_fields needs at least one vector")
    return np.concatenate([np.asarray(v, dtype=np.float64) for v in vectors], axis=-1)


class SelfAttentionPool(Module):
    """Single-head scaled dot-product self-attention followed by mean pooling.

    No positional encoding, so the output is invariant to the order of the
    sequence. Empty sequences map to a trainable ``empty`` vector.
    """

    def __init__(self, in_dim: int, key_dim: int, value_dim: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.params["W_q"] = uniform_init(rng, (in_dim, key_dim), in_dim)
        self.params["W_k"] = uniform_init(rng, (in_dim, key_dim), in_dim)
        self.params["W_v"] = uniform_init(rng, (in_dim, value_dim), in_dim)
        self.params["empty"] = uniform_init(rng, (value_dim,), value_dim)
        self._cache = None

    @property
    def in_dim(self) -> int:
        return self.params["W_q"].shape[0]

    @property
    def out_dim(self) -> int:
        return self.params["W_v"].shape[1]

    def attention_weights(self, x: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        self.forward(x, lengths)
        return self._cache["A"]

    def forward(self, x: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3:
            raise ShapeError(f"expected (batch, length, dim) input, got shape {x.shape}")
        check_dim("attention input", x.shape[2], self.in_dim)
        lengths = np.asarray(lengths)
        B, L, _ = x.shape
        if lengths.shape != (B,) or (lengths > L).any() or (lengths < 0).any():
            raise ShapeError(f"lengths must have shape ({B},) with values in [0, {L}]")
        valid = np.arange(L)[None, :] < lengths[:, None]
        empty = lengths == 0
        # empty rows attend to position 0 only; their output is replaced below
        keys = valid.copy()
        keys[empty, 0] = True
        q = x @ self.params["W_q"]
        k = x @ self.params["W_k"]
        v = x @ self.params["W_v"]
        scale = 1.0 / math.sqrt(q.shape[2])
        s = np.einsum("bik,bjk->bij", q, k) * scale
        s = np.where(keys[:, None, :], s, -np.inf)
        s = s - s.max(axis=2, keepdims=True)
        e = np.exp(s)
        a = e / e.sum(axis=2, keepdims=True)
        o = a @ v
        w = valid / np.maximum(lengths, 1)[:, None]
        pooled = np.einsum("bi,bid->bd", w, o)
        out = np.where(empty[:, None], self.params["empty"], pooled)
        self._cache = {"x": x, "q": q, "k": k, "v": v, "A": a, "w": w, "empty": empty, "scale": scale}
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("SelfAttentionPool.backward called before forward")
        c = self._cache
        grad_out = np.asarray(grad_out, dtype=np.float64)
        empty = c["empty"]
        self._accumulate("empty", grad_out[empty].sum(axis=0))
        g = np.where(empty[:, None], 0.0, grad_out)
        d_o = c["w"][:, :, None] * g[:, None, :]
        a = c["A"]
        d_a = d_o @ np.swapaxes(c["v"], 1, 2)
        d_v = np.swapaxes(a, 1, 2) @ d_o
        d_s = a * (d_a - (d_a * a).sum(axis=2, keepdims=True)) * c["scale"]
        d_q = d_s @ c["k"]
        d_k = np.swapaxes(d_s, 1, 2) @ c["q"]
        x = c["x"]
        self._accumulate("W_q", np.einsum("bld,blk->dk", x, d_q))
        self._accumulate("W_k", np.einsum("bld,blk->dk", x, d_k))
        self._accumulate("W_v", np.einsum("bld,blk->dk", x, d_v))
        return d_q @ self.params["W_q"].T + d_k @ self.params["W_k"].T + d_v @ self.params["W_v"].T


def self_attention_pool(seq: Sequence[np.ndarray], pool: SelfAttentionPool) -> np.ndarray:
    """Pool one sequence of item vectors (possibly empty)."""
    if len(seq) == 0:
        x = np.zeros((1, 1, pool.in_dim))
        return pool.forward(x, np.array([0]))[0]
    x = np.stack([np.asarray(s, dtype=np.float64) for s in seq])[None]
    return pool.forward(x, np.array([len(seq)]))[0]


@dataclass
class SequenceBatch:
    """Padded behavior sequences: per-item-field id arrays of shape (B, L)."""

    ids: dict[str, np.ndarray]
    lengths: np.ndarray


@dataclass
class SideBatch:
    """Features for one tower: categorical ids per field plus sequences."""

    scenario: np.ndarray
    categorical: dict[str, np.ndarray] = field(default_factory=dict)
    sequences: dict[str, SequenceBatch] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.scenario)

    def take(self, idx: np.ndarray) -> SideBatch:
        return SideBatch(
            scenario=self.scenario[idx],
            categorical={k: v[idx] for k, v in self.categorical.items()},
            sequences={
                k: SequenceBatch({f: a[idx] for f, a in s.ids.items()}, s.lengths[idx])
                for k, s in self.sequences.items()
            },
        )

    @staticmethod
    def concat(batches: Sequence[SideBatch]) -> SideBatch:
        first = batches[0]
        seqs = {}
        for name in first.sequences:
            L = max(b.sequences[name].ids[next(iter(first.sequences[name].ids))].shape[1] for b in batches)
            ids = {}
            for f in first.sequences[name].ids:
                parts = []
                for b in batches:
                    a = b.sequences[name].ids[f]
                    parts.append(np.pad(a, ((0, 0), (0, L - a.shape[1]))))
                ids[f] = np.concatenate(parts)
            seqs[name] = SequenceBatch(ids, np.concatenate([b.sequences[name].lengths for b in batches]))
        return SideBatch(
            scenario=np.concatenate([b.scenario for b in batches]),
            categorical={k: np.concatenate([b.categorical[k] for b in batches]) for k in first.categorical},
            sequences=seqs,
        )


class SideEncoder(Module):
    """Embeds one side's fields into ``(base_input, scenario_context)``.

    The shared :class:`EmbeddingTable` is referenced, not owned, so it is not
    listed among this module's children.
    """

    def __init__(
        self,
        schema: FeatureSchema,
        table: EmbeddingTable,
        rng: np.random.Generator,
        key_dim: int = 16,
    ) -> None:
        super().__init__()
        self.schema = schema
        self.table = table
        self.pools: dict[str, SelfAttentionPool] = {}
        for f in schema.sequence_fields:
            in_dim = sum(table.dim(t) for t in f.item_fields)
            self.pools[f.name] = SelfAttentionPool(in_dim, key_dim, f.dim, rng)
        self._cache = None

    def children(self) -> dict[str, Module]:
        return {f"pool_{k}": v for k, v in self.pools.items()}

    @property
    def out_dim(self) -> int:
        return sum(f.dim for f in self.schema.input_fields)

    @property
    def context_dim(self) -> int:
        return self.schema.scenario_field.dim

    def forward(self, batch: SideBatch) -> tuple[np.ndarray, np.ndarray]:
        parts = []
        for f in self.schema.input_fields:
            if f.kind == "behavior_sequence":
                seq = batch.sequences[f.name]
                x = concat_fields([self.table.lookup(t, seq.ids[t]) for t in f.item_fields])
                parts.append(self.pools[f.name].forward(x, seq.lengths))
            else:
                parts.append(self.table.lookup(f.table_name, batch.categorical[f.name]))
        ctx = self.schema.scenario_field
        x_a = self.table.lookup(ctx.table_name, batch.scenario)
        self._cache = batch
        return concat_fields(parts), x_a

    def backward(self, grad_x: np.ndarray, grad_context: np.ndarray) -> None:
        if self._cache is None:
            raise StateError("SideEncoder.backward called before forward")
        batch = self._cache
        offset = 0
        for f in self.schema.input_fields:
            g = grad_x[:, offset : offset + f.dim]
            offset += f.dim
            if f.kind == "behavior_sequence":
                seq = batch.sequences[f.name]
                gx = self.pools[f.name].backward(g)
                o2 = 0
                for t in f.item_fields:
                    d = self.table.dim(t)
                    self.table.backward(t, seq.ids[t], gx[:, :, o2 : o2 + d])
                    o2 += d
            else:
                self.table.backward(f.table_name, batch.categorical[f.name], g)
        ctx = self.schema.scenario_field
        self.table.backward(ctx.table_name, batch.scenario, grad_context)
