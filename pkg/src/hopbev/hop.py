"""Historical object prediction: reconstruct a discarded frame's BEV feature
from its neighbors and supervise detections on it.

Two deformable-attention branches read the feature window with the target
frame removed. The short-term branch attends only to the adjacent frames
(one-sided at the window edges and for future prediction), the long-term
branch attends to the whole remaining window at reduced channel width, and a
3x3 convolution fuses the concatenated branch outputs into the pseudo
feature handed to the auxiliary object decoder. The branch is training-only;
nothing here runs at inference time.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .attention import DeformableAttention, DeformAttnParams, identity_ref_grid
from .bevnet import BEVFeature
from .errors import ArityError, ConfigError, InvariantError, ShapeError
from .torchutil import init_conv, init_linear, normal_

DETACH_POLICIES = ("full_detach", "keep_last_two")
TARGET_MODES = ("objects", "features", "both")


@dataclass
class HopConfig:
    """Auxiliary-task knobs.

    ``k`` is the prediction index: the frame t-k is discarded and predicted
    (default 1, the best accuracy/cost trade-off upstream); k = -1 predicts
    one frame into the future. ``detach_policy`` controls gradient flow into
    the encoder for historical frames. ``target_mode`` selects object-set
    supervision, feature reconstruction, or both.
    """

    enabled: bool = True
    k: int = 1
    n_history: int = 4
    detach_policy: str = "full_detach"
    aux_loss_weight: float = 1.0
    feature_loss_weight: float = 1.0
    target_mode: str = "objects"
    use_short_term: bool = True
    use_long_term: bool = True
    aux_head: str = "center"

    def validate(self):
        if self.k == 0:
            raise InvariantError("k=0 would predict the current frame, which is the main task")
        if self.k != -1 and not (1 <= self.k <= self.n_history):
            raise ConfigError(f"k must be -1 or in [1, {self.n_history}], got {self.k}")
        if self.detach_policy not in DETACH_POLICIES:
            raise ConfigError(f"detach_policy must be one of {DETACH_POLICIES}, got {self.detach_policy!r}")
        if self.target_mode not in TARGET_MODES:
            raise ConfigError(f"target_mode must be one of {TARGET_MODES}, got {self.target_mode!r}")
        if self.aux_loss_weight < 0:
            raise ConfigError(f"aux_loss_weight must be >= 0, got {self.aux_loss_weight}")
        if self.k == -1 and self.target_mode in ("features", "both"):
            raise ConfigError("future prediction (k=-1) has no encoded target feature to reconstruct")
        if not (self.use_short_term or self.use_long_term):
            raise ConfigError("at least one temporal-decoder branch must be enabled")
        if self.aux_head not in ("center", "query"):
            raise ConfigError(f"aux_head must be 'center' or 'query', got {self.aux_head!r}")
        return self


class _BranchFFN(nn.Module):
    """Residual feed-forward block: LayerNorm(x + W2 relu(W1 x)), hidden
    width twice the branch channel count."""

    def __init__(self, channels, dtype, generator):
        super().__init__()
        self.fc1 = nn.Linear(channels, 2 * channels, dtype=dtype)
        self.fc2 = nn.Linear(2 * channels, channels, dtype=dtype)
        self.norm = nn.LayerNorm(channels, dtype=dtype)
        init_linear(self.fc1, generator)
        init_linear(self.fc2, generator)

    def forward(self, x):
        return self.norm(x + self.fc2(torch.relu(self.fc1(x))))


class ShortTermDecoder(nn.Module):
    """Grid-shaped learnable queries attending to the adjacent frame pair."""

    def __init__(self, H, W, channels, params: DeformAttnParams, dtype=torch.float64, generator=None):
        super().__init__()
        self.queries = nn.Parameter(torch.empty(H, W, channels, dtype=dtype))
        normal_(self.queries, 1.0, generator)
        self.attn = DeformableAttention(channels, params, dtype=dtype, generator=generator)
        self.ffn = _BranchFFN(channels, dtype, generator)
        self.register_buffer("ref", identity_ref_grid(H, W, dtype=dtype), persistent=False)

    def attend(self, maps):
        """Pre-FFN attention output: the joint-normalized sum over maps."""
        if len(maps) == 0:
            raise ArityError("short-term decoder needs at least one adjacent map")
        return self.attn(self.queries, self.ref, maps)

    def forward(self, maps):
        return self.ffn(self.attend(maps))


class LongTermDecoder(nn.Module):
    """Reduced-width queries attending to the whole remaining window.

    Each value map is right-multiplied by the C x C/r reduction first
    (default r=4); a learned expansion maps the branch output back to C for
    fusion with the short-term branch.
    """

    def __init__(self, H, W, channels, reduction_ratio, params: DeformAttnParams, dtype=torch.float64, generator=None):
        super().__init__()
        if channels % reduction_ratio != 0:
            raise ConfigError(f"channels {channels} not divisible by reduction ratio {reduction_ratio}")
        self.reduced = channels // reduction_ratio
        self.reduction = nn.Linear(channels, self.reduced, bias=False, dtype=dtype)
        self.queries = nn.Parameter(torch.empty(H, W, self.reduced, dtype=dtype))
        normal_(self.queries, 1.0, generator)
        self.attn = DeformableAttention(self.reduced, params, dtype=dtype, generator=generator)
        self.ffn = _BranchFFN(self.reduced, dtype, generator)
        self.expand = nn.Linear(self.reduced, channels, dtype=dtype)
        init_linear(self.reduction, generator)
        init_linear(self.expand, generator)
        self.register_buffer("ref", identity_ref_grid(H, W, dtype=dtype), persistent=False)

    def attend(self, maps):
        if len(maps) == 0:
            raise ArityError("long-term decoder needs at least one map")
        reduced = [self.reduction(m) for m in maps]
        return self.attn(self.queries, self.ref, reduced)

    def forward(self, maps):
        return self.expand(self.ffn(self.attend(maps)))


class PseudoFeatureFusion(nn.Module):
    """Concatenate branch outputs and fuse with a 3x3 convolution."""

    def __init__(self, channels, dtype=torch.float64, generator=None):
        super().__init__()
        self.conv = nn.Conv2d(2 * channels, channels, 3, padding=1, dtype=dtype)
        init_conv(self.conv, generator, zero_bias=True)

    def forward(self, short_out, long_out):
        if short_out.shape != long_out.shape:
            raise ShapeError(f"branch shapes differ: {tuple(short_out.shape)} vs {tuple(long_out.shape)}")
        x = torch.cat([short_out, long_out], dim=-1).permute(2, 0, 1).unsqueeze(0)
        return self.conv(x).squeeze(0).permute(1, 2, 0)


class HopBranch(nn.Module):
    """Short-term plus long-term temporal decoders and their fusion."""

    def __init__(
        self,
        H,
        W,
        channels,
        reduction_ratio=4,
        params: DeformAttnParams | None = None,
        use_short_term=True,
        use_long_term=True,
        dtype=torch.float64,
        generator=None,
    ):
        super().__init__()
        params = params or DeformAttnParams()
        self.channels = channels
        self.use_short_term = use_short_term
        self.use_long_term = use_long_term
        if not (use_short_term or use_long_term):
            raise ConfigError("at least one branch must be enabled")
        self.short = ShortTermDecoder(H, W, channels, params, dtype=dtype, generator=generator)
        self.long = LongTermDecoder(H, W, channels, reduction_ratio, params, dtype=dtype, generator=generator)
        self.fusion = PseudoFeatureFusion(channels, dtype=dtype, generator=generator)

    @staticmethod
    def split_window(features, k):
        """Partition a slot-ordered window into (adjacent, remaining) for
        prediction index ``k``, dropping the discarded slot N-k entirely.

        For 1 <= k <= N-1 the adjacent set is the two neighbors of the
        discarded frame; k = N keeps only the later neighbor; k = -1 (future)
        keeps only the current frame and the remaining set is the full
        window.
        """
        n = len(features) - 1
        by_slot = sorted(features, key=lambda f: f.slot)
        if [f.slot for f in by_slot] != list(range(n + 1)):
            raise InvariantError(f"window must carry slots 0..{n}, got {[f.slot for f in features]}")
        discarded = n - k
        adj = [by_slot[s] for s in (discarded - 1, discarded + 1) if 0 <= s <= n]
        rem = [f for f in by_slot if f.slot != discarded]
        return adj, rem

    def forward(self, features, k) -> torch.Tensor:
        if k == 0:
            raise InvariantError("k=0: the current frame is the main task, not a prediction target")
        n = len(features) - 1
        if k != -1 and not (1 <= k <= n):
            raise ConfigError(f"k must be -1 or in [1, {n}] for a window of {n + 1} frames")
        adj, rem = self.split_window(features, k)
        adj_maps = [f.values for f in adj]
        rem_maps = [f.values for f in rem]
        if self.use_short_term:
            short_out = self.short(adj_maps)
        else:
            short_out = torch.zeros_like(rem_maps[0])
        if self.use_long_term:
            long_out = self.long(rem_maps)
        else:
            long_out = torch.zeros_like(rem_maps[0])
        return self.fusion(short_out, long_out)


def hop_forward(features, cfg: HopConfig, branch: HopBranch, object_decoder, return_pseudo=False):
    """Run the auxiliary branch on an N+1 window and decode predictions.

    ``features`` is the full slot-ordered window including the frame to be
    discarded; the branch removes slot N-k itself, so the discarded feature
    never reaches any computation (NaN probes on it stay contained).
    ``object_decoder`` maps a BEVFeature to head outputs.
    """
    cfg.validate()
    if len(features) != cfg.n_history + 1:
        raise ArityError(f"expected {cfg.n_history + 1} features, got {len(features)}")
    pseudo_values = branch(features, cfg.k)
    current = max(features, key=lambda f: f.slot)
    target_frame = current.frame_index - cfg.k
    pseudo = BEVFeature(values=pseudo_values, frame_index=target_frame, slot=cfg.n_history - cfg.k)
    predictions = object_decoder(pseudo)
    if return_pseudo:
        return predictions, pseudo
    return predictions


def feature_reconstruction_loss(pseudo_values, target_values) -> torch.Tensor:
    """Mean squared error against the encoder's own (detached) feature."""
    if torch.is_tensor(target_values) and target_values.requires_grad:
        raise InvariantError("reconstruction target must be detached from the graph")
    if pseudo_values.shape != target_values.shape:
        raise ShapeError(f"shape mismatch: {tuple(pseudo_values.shape)} vs {tuple(target_values.shape)}")
    return ((pseudo_values - target_values) ** 2).mean()
