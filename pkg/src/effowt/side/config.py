from __future__ import annotations

from dataclasses import dataclass, field

from ..backbone import BackboneConfig, ConfigurationError
from ..sim import sim_supported


@dataclass(frozen=True)
class ScaleSpec:
    dim_divisor: int
    num_blocks: int


DEFAULT_SCALES = (ScaleSpec(4, 1), ScaleSpec(8, 2), ScaleSpec(16, 3))


@dataclass(frozen=True)
class SideConfig:
    """Structure of the side network.

    ``tap_assignment[k]`` is the backbone layer feeding block k's side
    connection; ``None`` partitions the backbone depth contiguously.
    ``sim_scales`` lists the dim divisors whose blocks use SIM mixers.
    """

    r: int = 4
    N: int = 4
    scales: tuple[ScaleSpec, ...] = DEFAULT_SCALES
    tap_assignment: tuple[int, ...] | None = None
    sim_scales: frozenset[int] = field(default_factory=frozenset)
    mlp_ratio: int = 4
    gn_groups: int = 8
    common_dim: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(
            s if isinstance(s, ScaleSpec) else ScaleSpec(*s) for s in self.scales))
        object.__setattr__(self, "sim_scales", frozenset(self.sim_scales))
        if self.tap_assignment is not None:
            object.__setattr__(self, "tap_assignment", tuple(int(t) for t in self.tap_assignment))
        if not self.scales:
            raise ConfigurationError("at least one scale is required")
        divs = [s.dim_divisor for s in self.scales]
        if any(b <= a for a, b in zip(divs, divs[1:])):
            raise ConfigurationError(f"dim divisors must be strictly increasing, got {divs}")
        if divs[0] != self.r:
            raise ConfigurationError(f"first scale divisor {divs[0]} must equal r={self.r}")
        if any(s.num_blocks < 1 for s in self.scales):
            raise ConfigurationError("num_blocks must be >= 1 for every scale")
        if self.N < 1:
            raise ConfigurationError("N must be >= 1")
        unknown = self.sim_scales - set(divs)
        if unknown:
            raise ConfigurationError(f"sim_scales {sorted(unknown)} not among scale divisors {divs}")
        if self.tap_assignment is not None and len(self.tap_assignment) != self.num_blocks:
            raise ConfigurationError(
                f"tap_assignment has {len(self.tap_assignment)} entries for {self.num_blocks} blocks")

    @property
    def num_blocks(self) -> int:
        return sum(s.num_blocks for s in self.scales)

    @property
    def num_side_layers(self) -> int:
        return self.num_blocks * self.N

    def block_divisors(self) -> list[int]:
        return [s.dim_divisor for s in self.scales for _ in range(s.num_blocks)]

    def taps(self, depth: int) -> tuple[int, ...]:
        if self.tap_assignment is not None:
            return self.tap_assignment
        b = self.num_blocks
        return tuple((k + 1) * depth // b - 1 for k in range(b))

    def init_source_layers(self, depth: int) -> list[int]:
        """Backbone layer whose weights initialize each side layer (contiguous partition)."""
        s = self.num_side_layers
        return [j * depth // s for j in range(s)]

    def grids(self, backbone_grid: int) -> list[int]:
        """Spatial side of each scale's grid; transitions halve it."""
        out, g = [], backbone_grid
        for k in range(len(self.scales)):
            if k:
                if g < 2 or g % 2:
                    raise ConfigurationError(f"grid {g}x{g} too small or odd to halve at scale {k}")
                g //= 2
            out.append(g)
        return out

    def validate(self, backbone: BackboneConfig) -> None:
        for s in self.scales:
            if backbone.dim % s.dim_divisor:
                raise ConfigurationError(f"backbone dim {backbone.dim} not divisible by {s.dim_divisor}")
            d = backbone.dim // s.dim_divisor
            if d % self.gn_groups:
                raise ConfigurationError(f"side dim {d} not divisible into {self.gn_groups} norm groups")
        if self.num_blocks > backbone.depth:
            raise ConfigurationError(
                f"{self.num_blocks} side blocks need at least as many backbone layers (depth {backbone.depth})")
        taps = self.taps(backbone.depth)
        if any(not 0 <= t < backbone.depth for t in taps):
            raise ConfigurationError(f"tap_assignment {taps} out of range for depth {backbone.depth}")
        grids = self.grids(backbone.grid)
        for s, g in zip(self.scales, grids):
            if s.dim_divisor in self.sim_scales and not sim_supported(backbone.dim // s.dim_divisor, g):
                raise ConfigurationError(
                    f"SIM at 1/{s.dim_divisor} (dim {backbone.dim // s.dim_divisor}, grid {g}) would not save parameters")

    def with_sim(self, divisors=None) -> "SideConfig":
        from dataclasses import replace
        return replace(self, sim_scales=frozenset(divisors if divisors is not None else {self.scales[0].dim_divisor}))

    def side_heads(self, backbone: BackboneConfig, divisor: int) -> int:
        return max(1, backbone.heads // divisor)
