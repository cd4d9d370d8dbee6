"""BEV feature extraction: per-frame encoder, temporal slot embeddings, and
the concatenation-based temporal fusion that feeds the main detection head.

The encoder is a small conv stack standing in for a camera-to-BEV pipeline;
its last two layers are addressable so the training-time detach policy can
keep gradients flowing through just those for historical frames.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
from torch import nn

from .errors import ArityError, ConfigError, InvariantError, ShapeError
from .torchutil import init_conv


@dataclass(frozen=True)
class BEVGridSpec:
    """Square top-down grid: H == W cells covering ``extent`` meters per side.

    Grid coordinate convention: cell (i, j) is centered at world
    x = (j + 0.5) * cell_size - extent / 2 (and the same for y with i). The
    reference pipeline upstream runs 200x200; the desk default is 64x64.
    """

    H: int
    W: int
    extent: float

    def __post_init__(self):
        if self.H != self.W:
            raise ConfigError(f"grid must be square, got {self.H}x{self.W}")
        if self.H < 1 or self.extent <= 0:
            raise ConfigError(f"invalid grid: H={self.H}, extent={self.extent}")

    @property
    def cell_size(self) -> float:
        return self.extent / self.H

    def world_to_grid(self, x, y):
        """Continuous (row, col) grid coordinates of a world point."""
        half = self.extent / 2.0
        return (y + half) / self.cell_size - 0.5, (x + half) / self.cell_size - 0.5

    def grid_to_world(self, row, col):
        half = self.extent / 2.0
        return (col + 0.5) * self.cell_size - half, (row + 0.5) * self.cell_size - half

    def contains(self, x, y) -> bool:
        half = self.extent / 2.0
        return -half <= x <= half and -half <= y <= half

    def to_dict(self):
        return {"h": self.H, "w": self.W, "extent": self.extent}


@dataclass
class BEVFeature:
    """One frame's (H, W, C) feature grid, expressed in the current ego frame.

    ``slot`` is the temporal position in the window: 0 = oldest, N = current.
    """

    values: torch.Tensor
    frame_index: int
    slot: int

    def detached(self):
        return replace(self, values=self.values.detach())


class BevEncoder(nn.Module):
    """Conv stack mapping observation channels to C feature channels.

    ``n_layers`` 3x3 convolutions with ReLU between them (none after the
    last). ``forward(x, detach_stem=True)`` runs everything up to the final
    two convolutions without building a graph edge (the keep_last_two detach
    policy for historical frames).
    """

    def __init__(self, in_channels, channels, n_layers=4, dtype=torch.float64, generator=None):
        super().__init__()
        if n_layers < 3:
            raise ConfigError("encoder needs at least 3 layers so 'last two' is a proper suffix")
        self.in_channels = in_channels
        self.channels = channels
        convs = []
        for i in range(n_layers):
            c_in = in_channels if i == 0 else channels
            conv = nn.Conv2d(c_in, channels, kernel_size=3, padding=1, dtype=dtype)
            init_conv(conv, generator, zero_bias=True)
            convs.append(conv)
        self.convs = nn.ModuleList(convs)

    def _run(self, x, layers):
        for i, conv in layers:
            x = conv(x)
            if i < len(self.convs) - 1:
                x = torch.relu(x)
        return x

    def stem(self, x):
        return self._run(x, [(i, c) for i, c in enumerate(self.convs[:-2])])

    def last_two(self, x):
        n = len(self.convs)
        return self._run(x, [(n - 2, self.convs[-2]), (n - 1, self.convs[-1])])

    def stem_parameters(self):
        return [p for conv in self.convs[:-2] for p in conv.parameters()]

    def last_two_parameters(self):
        return [p for conv in self.convs[-2:] for p in conv.parameters()]

    def forward(self, values, detach_stem=False):
        """Encode an (H, W, C_obs) grid into (H, W, C)."""
        if values.ndim != 3 or values.shape[-1] != self.in_channels:
            raise ShapeError(
                f"observation must be (H, W, {self.in_channels}), got {tuple(values.shape)}"
            )
        x = values.permute(2, 0, 1).unsqueeze(0)
        h = self.stem(x)
        if detach_stem:
            h = h.detach()
        y = self.last_two(h)
        return y.squeeze(0).permute(1, 2, 0)

    def forward_batch(self, values, detach_stem=False):
        """Encode a (B, H, W, C_obs) stack into (B, H, W, C) in one pass."""
        if values.ndim != 4 or values.shape[-1] != self.in_channels:
            raise ShapeError(
                f"observation batch must be (B, H, W, {self.in_channels}), got {tuple(values.shape)}"
            )
        x = values.permute(0, 3, 1, 2)
        h = self.stem(x)
        if detach_stem:
            h = h.detach()
        return self.last_two(h).permute(0, 2, 3, 1)

    def encode(self, obs, slot, detach="none"):
        """Encode an observation grid into a BEVFeature.

        ``detach``: "none" (full graph), "all" (feature detached), or
        "stem" (gradients only through the last two layers).
        """
        values = obs.values if hasattr(obs, "values") else obs
        if not torch.is_tensor(values):
            values = torch.as_tensor(values, dtype=self.convs[0].weight.dtype)
        values = values.to(self.convs[0].weight.dtype)
        if detach == "all":
            with torch.no_grad():
                feat = self.forward(values)
        elif detach == "stem":
            feat = self.forward(values, detach_stem=True)
        elif detach == "none":
            feat = self.forward(values)
        else:
            raise ConfigError(f"unknown detach mode {detach!r}")
        frame_index = getattr(obs, "frame_index", -1)
        return BEVFeature(values=feat, frame_index=frame_index, slot=slot)


class TemporalPositionEmbedding(nn.Module):
    """Learned per-slot C-vector added to each frame's feature grid.

    Initialized to zero, so a fresh model's features pass through unchanged.
    """

    def __init__(self, n_slots, channels, dtype=torch.float64):
        super().__init__()
        self.table = nn.Parameter(torch.zeros(n_slots, channels, dtype=dtype))

    def forward(self, features):
        slots = [f.slot for f in features]
        if len(set(slots)) != len(slots):
            raise InvariantError(f"duplicate temporal slots: {slots}")
        if any(s < 0 or s >= self.table.shape[0] for s in slots):
            raise InvariantError(f"slot out of range for {self.table.shape[0]} slots: {slots}")
        return [replace(f, values=f.values + self.table[f.slot]) for f in features]


class TemporalFusion(nn.Module):
    """Concatenate the N+1 per-frame features in slot order, then 1x1 and 3x3
    convolutions back to C channels. Purely linear, so a constructed
    slot-averaging kernel reproduces a shared input feature exactly.
    """

    def __init__(self, n_slots, channels, dtype=torch.float64, generator=None):
        super().__init__()
        self.n_slots = n_slots
        self.channels = channels
        self.mix = nn.Conv2d(n_slots * channels, channels, kernel_size=1, dtype=dtype)
        self.smooth = nn.Conv2d(channels, channels, kernel_size=3, padding=1, dtype=dtype)
        init_conv(self.mix, generator, zero_bias=True)
        init_conv(self.smooth, generator, zero_bias=True)

    def set_slot_averaging(self):
        """Configure the kernels to average slots and pass through (tests)."""
        with torch.no_grad():
            self.mix.weight.zero_()
            self.mix.bias.zero_()
            for c in range(self.channels):
                for s in range(self.n_slots):
                    self.mix.weight[c, s * self.channels + c, 0, 0] = 1.0 / self.n_slots
            self.smooth.weight.zero_()
            self.smooth.bias.zero_()
            for c in range(self.channels):
                self.smooth.weight[c, c, 1, 1] = 1.0
        return self

    def forward(self, features) -> BEVFeature:
        if len(features) != self.n_slots:
            raise ArityError(f"fusion expects {self.n_slots} features, got {len(features)}")
        slots = sorted(f.slot for f in features)
        if slots != list(range(self.n_slots)):
            raise InvariantError(f"fusion expects slots 0..{self.n_slots - 1}, got {slots}")
        ordered = sorted(features, key=lambda f: f.slot)
        stacked = torch.cat([f.values for f in ordered], dim=-1)
        x = stacked.permute(2, 0, 1).unsqueeze(0)
        y = self.smooth(self.mix(x)).squeeze(0).permute(1, 2, 0)
        current = ordered[-1]
        return BEVFeature(values=y, frame_index=current.frame_index, slot=current.slot)
