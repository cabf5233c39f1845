"""Model configuration: per-stage structure, named presets, JSON round trip.

A model is four stages.  Each stage is a run of blocks over a fixed
resolution; between stages the map halves and channels double.  Blocks
come in two kinds, encoded in a per-stage layout string: 'B' is the
routing-attention-only block, 'D' is the full deformable block.  The two
kinds use separate top-k schedules (k_bra / k_dbra).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .dbra import ConfigError, DbraConfig


@dataclass
class StageConfig:
    N: int
    C: int
    r: int
    M: int
    G: int
    D_r: int
    B_r: int
    K: int
    S: int
    k_bra: int
    k_dbra: int
    layout: str

    def __post_init__(self):
        if len(self.layout) != self.N:
            raise ConfigError(f"layout {self.layout!r} length != N={self.N}")
        if set(self.layout) - {"B", "D"}:
            raise ConfigError(f"layout {self.layout!r} may only contain 'B' and 'D'")
        self.dbra_config()  # validates divisibility constraints

    def dbra_config(self) -> DbraConfig:
        return DbraConfig(
            C=self.C, M=self.M, r=self.r, G=self.G, S=self.S, k_route=self.k_dbra,
            D_r=self.D_r, B_r=self.B_r, K=self.K,
        )


@dataclass
class ModelConfig:
    variant: str
    input_size: int
    num_classes: int
    stages: list[StageConfig]

    def __post_init__(self):
        if len(self.stages) != 4:
            raise ConfigError(f"expected 4 stages, got {len(self.stages)}")
        if self.input_size % 32:
            raise ConfigError(f"input_size {self.input_size} must be divisible by 32")
        for i, st in enumerate(self.stages):
            H = self.stage_resolution(i)
            st.dbra_config().validate(H, H)
            if H % st.S:
                raise ConfigError(f"stage {i + 1}: S={st.S} must divide resolution {H}")

    def stage_resolution(self, index: int) -> int:
        return self.input_size // (4 * 2 ** index)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid config JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("config JSON must be an object")
        try:
            stages = [StageConfig(**s) for s in raw["stages"]]
            return cls(
                variant=raw["variant"], input_size=raw["input_size"],
                num_classes=raw["num_classes"], stages=stages,
            )
        except (KeyError, TypeError) as e:
            raise ConfigError(f"config JSON missing or extra fields: {e}") from e


def _alternating(n: int) -> str:
    """B,D pairs; odd tails end with D so every stage keeps both kinds paired."""
    return ("BD" * ((n + 1) // 2))[:n]


_K_BRA = (1, 4, 16, 49)
_K_DBRA = (4, 8, 16, 49)
_R = (8, 4, 2, 1)
_G = (1, 2, 4, 8)
_K = (9, 7, 5, 3)


def _classification_preset(
    variant: str,
    depths: tuple[int, ...],
    widths: tuple[int, ...],
    heads: tuple[int, ...],
    d_r: tuple[int, ...],
    b_r: tuple[int, ...],
) -> ModelConfig:
    stages = []
    for i in range(4):
        n = depths[i]
        layout = _alternating(n) if i < 3 else "D" * n
        stages.append(
            StageConfig(
                N=n, C=widths[i], r=_R[i], M=heads[i], G=_G[i], D_r=d_r[i], B_r=b_r[i],
                K=_K[i], S=7, k_bra=_K_BRA[i], k_dbra=_K_DBRA[i], layout=layout,
            )
        )
    return ModelConfig(variant=variant, input_size=224, num_classes=1000, stages=stages)


def make_variant(name: str) -> ModelConfig:
    """Named presets: T/S/B classification models, the Swin-T-layout model
    (STL), and a fast toy model for smoke tests."""
    if name == "T":
        return _classification_preset(
            "T", (2, 2, 8, 2), (64, 128, 256, 512), (2, 4, 8, 16),
            (3, 3, 3, 3), (3, 3, 3, 3),
        )
    if name == "S":
        return _classification_preset(
            "S", (4, 4, 18, 6), (64, 128, 256, 512), (2, 4, 8, 16),
            (3, 3, 3, 1), (3, 3, 3, 2),
        )
    if name == "B":
        return _classification_preset(
            "B", (4, 4, 18, 4), (96, 192, 384, 768), (3, 6, 12, 24),
            (3, 3, 3, 3), (3, 3, 3, 3),
        )
    if name == "STL":
        return _classification_preset(
            "STL", (2, 2, 6, 2), (96, 192, 384, 768), (3, 6, 12, 24),
            (4, 4, 4, 4), (4, 4, 4, 4),
        )
    if name == "toy":
        stages = [
            StageConfig(N=1, C=16, r=1, M=2, G=1, D_r=1, B_r=1, K=3, S=2,
                        k_bra=1, k_dbra=2, layout="B"),
            StageConfig(N=1, C=32, r=1, M=4, G=2, D_r=1, B_r=1, K=3, S=2,
                        k_bra=1, k_dbra=2, layout="D"),
            StageConfig(N=1, C=64, r=1, M=8, G=4, D_r=1, B_r=1, K=3, S=1,
                        k_bra=1, k_dbra=1, layout="B"),
            StageConfig(N=1, C=128, r=1, M=16, G=8, D_r=1, B_r=1, K=3, S=1,
                        k_bra=1, k_dbra=1, layout="D"),
        ]
        return ModelConfig(variant="toy", input_size=32, num_classes=10, stages=stages)
    raise ConfigError(f"unknown variant {name!r}; expected one of T, S, B, STL, toy")


VARIANTS = ("T", "S", "B", "STL", "toy")
