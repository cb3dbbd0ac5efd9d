from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import Module
from .features import EmbeddingTable, FeatureSchema, SideBatch, SideEncoder, schema_hash, table_shapes
from .mlsat import GATE_VARIANTS, MLSAT


@dataclass
class ModelConfig:
    hidden: int = 32
    depth: int = 3
    gate: str = "sass_gate"
    use_fusion: bool = True
    aux_hidden: tuple[int, ...] = (16,)
    key_dim: int = 16
    single_item_embedding: bool = False

    def __post_init__(self) -> None:
        self.aux_hidden = tuple(self.aux_hidden)
        if self.gate not in GATE_VARIANTS:
            raise ValueError(f"gate must be one of {GATE_VARIANTS}, got {self.gate!r}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.hidden < 1 or self.key_dim < 1:
            raise ValueError("hidden and key_dim must be positive")


class SASSModel(Module):
    """User and item sides over one shared embedding table.

    Each side returns ``(e_s, g_T)`` per row: the scenario-specific vector used
    for matching and the global shared tower output used by the auxiliary
    loss. With ``single_item_embedding`` the item side has one tower and is
    fed scenario-agnostic features, so every item gets one vector.
    """

    def __init__(
        self,
        user_schema: FeatureSchema,
        item_schema: FeatureSchema,
        n_scenarios: int,
        config: ModelConfig | None = None,
        seed: int = 0,
    ) -> None:
        super().__init__()
        self.config = config or ModelConfig()
        self.user_schema = user_schema
        self.item_schema = item_schema
        self.n_scenarios = n_scenarios
        self.seed = seed
        cfg = self.config
        rng = np.random.default_rng(seed)
        self.embeddings = EmbeddingTable(table_shapes([user_schema, item_schema]), rng)
        self.user_encoder = SideEncoder(user_schema, self.embeddings, rng, cfg.key_dim)
        self.item_encoder = SideEncoder(item_schema, self.embeddings, rng, cfg.key_dim)
        self.user_tower = self._tower(self.user_encoder, n_scenarios, rng)
        n_item_towers = 1 if cfg.single_item_embedding else n_scenarios
        self.item_tower = self._tower(self.item_encoder, n_item_towers, rng)

    def _tower(self, encoder: SideEncoder, n: int, rng: np.random.Generator) -> MLSAT:
        cfg = self.config
        return MLSAT(
            encoder.out_dim,
            encoder.context_dim,
            cfg.hidden,
            cfg.depth,
            n,
            rng,
            gate=cfg.gate,
            use_fusion=cfg.use_fusion,
            aux_hidden=cfg.aux_hidden,
        )

    def children(self) -> dict[str, Module]:
        return {
            "embeddings": self.embeddings,
            "user_encoder": self.user_encoder,
            "item_encoder": self.item_encoder,
            "user_tower": self.user_tower,
            "item_tower": self.item_tower,
        }

    def architecture(self) -> dict:
        return {
            "user_schema": self.user_schema.to_dict(),
            "item_schema": self.item_schema.to_dict(),
            "n_scenarios": self.n_scenarios,
            "config": asdict(self.config),
        }

    def schema_hash(self) -> str:
        return schema_hash(self.architecture())

    @classmethod
    def from_architecture(cls, arch: dict, seed: int = 0) -> SASSModel:
        cfg = dict(arch["config"])
        cfg["aux_hidden"] = tuple(cfg["aux_hidden"])
        return cls(
            FeatureSchema.from_dict(arch["user_schema"]),
            FeatureSchema.from_dict(arch["item_schema"]),
            arch["n_scenarios"],
            ModelConfig(**cfg),
            seed=seed,
        )

    def _side(self, side: str) -> tuple[SideEncoder, MLSAT]:
        if side == "user":
            return self.user_encoder, self.user_tower
        if side == "item":
            return self.item_encoder, self.item_tower
        raise ValueError(f"side must be 'user' or 'item', got {side!r}")

    def encode(self, side: str, batch: SideBatch) -> tuple[np.ndarray, np.ndarray]:
        encoder, tower = self._side(side)
        x, x_a = encoder.forward(batch)
        scenario = batch.scenario
        if side == "item" and self.config.single_item_embedding:
            scenario = np.zeros_like(scenario)
        return tower.forward(x, scenario, x_a)

    def backward(self, side: str, d_e: np.ndarray, d_g: np.ndarray | None = None) -> None:
        encoder, tower = self._side(side)
        dx, dx_a = tower.backward(d_e, d_g)
        encoder.backward(dx, dx_a)
