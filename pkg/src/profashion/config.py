"""Model hyper-parameters and the U-Net block plan."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .numcore import ConfigError


@dataclass
class ModelConfig:
    block_size: int = 8           # codec space-to-depth factor
    image_channels: int = 3
    base_channels: int = 32
    channel_cap: int = 64
    down_blocks: int = 4
    mid_blocks: int = 1
    up_blocks: int = 4
    heads: int = 4
    d_global: int = 64
    d_time: int = 64
    gn_groups: int = 8
    offset_hidden: int = 16
    pose_widths: tuple = (16, 32, 64)
    global_widths: tuple = (16, 32, 64)
    selector_groups: int = 8

    @property
    def latent_channels(self) -> int:
        return self.image_channels * self.block_size ** 2

    def level_channels(self, level: int) -> int:
        return min(self.base_channels * 2 ** level, self.channel_cap)

    @property
    def n_levels(self) -> int:
        return self.down_blocks

    def validate(self) -> "ModelConfig":
        if self.up_blocks != self.down_blocks:
            raise ConfigError("up_blocks must equal down_blocks (one skip per down block)")
        if self.mid_blocks < 1:
            raise ConfigError("need at least one mid block")
        for lvl in range(self.n_levels):
            c = self.level_channels(lvl)
            if c % self.gn_groups or c % self.heads:
                raise ConfigError(f"level {lvl}: {c} channels incompatible with groups/heads")
        if self.latent_channels % self.selector_groups:
            raise ConfigError("latent channels not divisible by selector_groups")
        return self

    def as_dict(self) -> dict:
        d = asdict(self)
        d["pose_widths"] = list(self.pose_widths)
        d["global_widths"] = list(self.global_widths)
        return d


@dataclass(frozen=True)
class Block:
    kind: str        # "down", "mid" or "up"
    index: int       # position within its kind
    order: int       # position in the full plan
    level: int       # pyramid level (resolution / channel index)
    stride: int
    fta: bool

    @property
    def name(self) -> str:
        return f"{self.kind}{self.index}"


def block_plan(cfg: ModelConfig) -> list[Block]:
    """Down blocks, mid blocks, up blocks in execution order.

    FTA sits on every block from the last down block to the first up block.
    """
    plan: list[Block] = []
    for i in range(cfg.down_blocks):
        plan.append(Block("down", i, len(plan), i, 1 if i == 0 else 2, False))
    for i in range(cfg.mid_blocks):
        plan.append(Block("mid", i, len(plan), cfg.n_levels - 1, 1, False))
    for i in range(cfg.up_blocks):
        plan.append(Block("up", i, len(plan), cfg.n_levels - 1 - i, 1, False))
    first, last = cfg.down_blocks - 1, cfg.down_blocks + cfg.mid_blocks
    return [Block(b.kind, b.index, b.order, b.level, b.stride, first <= b.order <= last) for b in plan]


def fta_range(cfg: ModelConfig) -> list[int]:
    return [b.order for b in block_plan(cfg) if b.fta]
