"""Bilinear grid sampling and multi-head deformable attention.

The attention primitive used by both temporal-decoder branches and by the
query-based detection head. A query at location ``p`` predicts, from its own
embedding, per-head sampling offsets around its reference point and attention
logits; logits are softmax-normalized *jointly* over (value map, point) per
head, the weighted bilinear samples are summed per head, heads are
concatenated, and an output linear map finishes the job. Offsets and logits
are shared across value maps, so the operation is symmetric under permuting
the value-map list; temporal identity must come from the features themselves
(per-slot embeddings added upstream).

Everything is differentiable with respect to queries, value maps, reference
points and all parameters. ``grad_check`` verifies exactly that with central
finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ShapeError
from .torchutil import init_linear


def bilinear_sample(grid: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Sample a (H, W, C) grid at continuous (row, col) points.

    ``points`` has shape (..., 2); the result has shape (..., C). Integer
    coordinates hit cell values exactly; everything else is bilinear in the
    four neighbors. Samples outside the grid use zero padding (a point fully
    outside returns the zero vector). Differentiable w.r.t. both the grid
    values and the points.
    """
    if grid.ndim != 3:
        raise ShapeError(f"grid must be (H, W, C), got {tuple(grid.shape)}")
    if points.shape[-1] != 2:
        raise ShapeError(f"points must end in (row, col), got {tuple(points.shape)}")
    H, W, C = grid.shape
    r = points[..., 0]
    c = points[..., 1]
    r0 = torch.floor(r)
    c0 = torch.floor(c)
    fr = r - r0
    fc = c - c0
    flat = grid.reshape(H * W, C)
    out = torch.zeros(points.shape[:-1] + (C,), dtype=grid.dtype, device=grid.device)
    for dr, dc, weight in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        ri = r0 + dr
        ci = c0 + dc
        valid = (ri >= 0) & (ri < H) & (ci >= 0) & (ci < W)
        idx = (ri.clamp(0, H - 1) * W + ci.clamp(0, W - 1)).long()
        vals = flat[idx.reshape(-1)].reshape(idx.shape + (C,))
        out = out + (weight * valid.to(grid.dtype)).unsqueeze(-1) * vals
    return out


def _sample_all_heads(vmap: torch.Tensor, locs: torch.Tensor, n_heads: int) -> torch.Tensor:
    """Bilinear-sample every head's channel slice at its own points.

    ``vmap`` is (H, W, C) with C = n_heads * d; ``locs`` is (n, h, p, 2).
    Returns (n, h, p, d). Same math as ``bilinear_sample`` per head slice,
    with one gather per corner instead of one per (head, corner).
    """
    H, W, C = vmap.shape
    d = C // n_heads
    flat = vmap.reshape(H * W * n_heads, d)
    r = locs[..., 0]
    c = locs[..., 1]
    r0 = torch.floor(r)
    c0 = torch.floor(c)
    fr = r - r0
    fc = c - c0
    head_idx = torch.arange(n_heads, device=vmap.device).view(1, n_heads, 1)
    out = torch.zeros(locs.shape[:-1] + (d,), dtype=vmap.dtype, device=vmap.device)
    for dr, dc, weight in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        ri = r0 + dr
        ci = c0 + dc
        valid = (ri >= 0) & (ri < H) & (ci >= 0) & (ci < W)
        cell = (ri.clamp(0, H - 1) * W + ci.clamp(0, W - 1)).long() * n_heads + head_idx
        vals = flat[cell.reshape(-1)].reshape(cell.shape + (d,))
        out = out + (weight * valid.to(vmap.dtype)).unsqueeze(-1) * vals
    return out


@dataclass
class DeformAttnParams:
    """Head/point geometry of the deformable attention op."""

    n_heads: int = 4
    n_points: int = 4
    offset_scale: float = 2.0

    def head_dim(self, channels: int) -> int:
        if channels % self.n_heads != 0:
            raise ShapeError(f"channels {channels} not divisible by n_heads {self.n_heads}")
        return channels // self.n_heads


@dataclass
class SampledAttentionOutput:
    """Attention result plus the sampling state kept for inspection."""

    values: torch.Tensor  # same leading shape as the queries, channel dim last
    locations: torch.Tensor  # (..., n_heads, n_points, 2) in grid coordinates
    weights: torch.Tensor  # (..., n_heads, n_maps, n_points), sums to 1 per head


class DeformableAttention(nn.Module):
    """Multi-head deformable attention over a list of value grids.

    Initialization is identity-like: offset and logit projections start at
    zero (samples sit at the reference points with uniform weights) and the
    output map starts as the identity, so a fresh module reproduces the mean
    of the value maps at the reference points.
    """

    def __init__(self, channels, params: DeformAttnParams | None = None, dtype=torch.float64, generator=None):
        super().__init__()
        self.params = params or DeformAttnParams()
        self.channels = channels
        self.head_dim = self.params.head_dim(channels)
        h, p = self.params.n_heads, self.params.n_points
        self.offset_proj = nn.Linear(channels, h * p * 2, dtype=dtype)
        self.logit_proj = nn.Linear(channels, h * p, dtype=dtype)
        self.out_proj = nn.Linear(channels, channels, dtype=dtype)
        init_linear(self.offset_proj, generator, zero=True)
        init_linear(self.logit_proj, generator, zero=True)
        init_linear(self.out_proj, generator, identity=True)

    def forward(self, queries, ref_points, value_maps, return_aux=False):
        """Attend from queries (..., C) at ref_points (..., 2) into value maps.

        ``value_maps`` is a non-empty sequence of (H, W, C) grids of one
        shared shape. Returns (..., C), or a SampledAttentionOutput when
        ``return_aux`` is set.
        """
        if len(value_maps) == 0:
            raise ShapeError("deform_attn needs at least one value map")
        vshape = value_maps[0].shape
        for v in value_maps:
            if v.shape != vshape:
                raise ShapeError(f"value map shapes differ: {tuple(v.shape)} vs {tuple(vshape)}")
        if queries.shape[-1] != self.channels or vshape[-1] != self.channels:
            raise ShapeError(
                f"channel mismatch: queries {queries.shape[-1]}, values {vshape[-1]}, module {self.channels}"
            )
        if queries.shape[:-1] != ref_points.shape[:-1]:
            raise ShapeError("queries and ref_points must share leading shape")

        lead = queries.shape[:-1]
        h, p, d = self.params.n_heads, self.params.n_points, self.head_dim
        n_maps = len(value_maps)
        q = queries.reshape(-1, self.channels)
        n = q.shape[0]

        offsets = self.offset_proj(q).reshape(n, h, p, 2) * self.params.offset_scale
        logits = self.logit_proj(q).reshape(n, h, p)
        locs = ref_points.reshape(n, 1, 1, 2) + offsets  # (n, h, p, 2)

        # Joint softmax over (map, point) per head; logits are shared across
        # maps, so each map receives an equal share of its point's weight.
        tiled = logits.unsqueeze(2).expand(n, h, n_maps, p)
        weights = torch.softmax(tiled.reshape(n, h, n_maps * p), dim=-1).reshape(n, h, n_maps, p)

        acc = torch.zeros(n, h, d, dtype=queries.dtype, device=queries.device)
        for m, vmap in enumerate(value_maps):
            samples = _sample_all_heads(vmap, locs, h)  # (n, h, p, d)
            acc = acc + (weights[:, :, m].unsqueeze(-1) * samples).sum(dim=2)
        out = self.out_proj(acc.reshape(n, self.channels)).reshape(lead + (self.channels,))
        if not return_aux:
            return out
        return SampledAttentionOutput(
            values=out,
            locations=locs.reshape(lead + (h, p, 2)),
            weights=weights.reshape(lead + (h, n_maps, p)),
        )


def identity_ref_grid(H, W, dtype=torch.float64, device=None):
    """The (H, W, 2) grid of each cell's own (row, col) coordinates."""
    rows = torch.arange(H, dtype=dtype, device=device)
    cols = torch.arange(W, dtype=dtype, device=device)
    return torch.stack(torch.meshgrid(rows, cols, indexing="ij"), dim=-1)


def np_unravel(flat_index, shape):
    if not shape:
        return ()
    idx = []
    for dim in reversed(shape):
        idx.append(flat_index % dim)
        flat_index //= dim
    return tuple(reversed(idx))


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    worst_index: tuple
    finite: bool

    @property
    def ok(self):
        return self.finite


@dataclass
class GradCheckReport:
    entries: list = field(default_factory=list)
    tol: float = 1e-4

    @property
    def max_rel_error(self):
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def ok(self):
        return all(e.finite for e in self.entries) and self.max_rel_error <= self.tol

    def __str__(self):
        lines = [f"grad_check tol={self.tol:g} ok={self.ok}"]
        for e in self.entries:
            flag = "" if e.finite else " NON-FINITE"
            lines.append(f"  {e.name}: max_rel={e.max_rel_error:.3e} at {e.worst_index}{flag}")
        return "\n".join(lines)


def grad_check(op, inputs, eps=1e-6, tol=1e-4, seed=0, names=None):
    """Compare analytic gradients of ``op`` against central finite differences.

    ``inputs`` is a sequence of float64 tensors; every element of every input
    is perturbed. The op may return a tensor or a tuple of tensors; a fixed
    random cotangent reduces the output to a scalar. Relative error is
    |analytic - numeric| / max(1, |analytic|, |numeric|). Non-finite analytic
    gradients are flagged with their location in the report.
    """
    names = names or [f"input{i}" for i in range(len(inputs))]
    leaves = [x.detach().clone().double().requires_grad_(True) for x in inputs]

    cot_gen = torch.Generator().manual_seed(seed)

    def as_tuple(out):
        return out if isinstance(out, (tuple, list)) else (out,)

    outs = as_tuple(op(*leaves))
    cotangents = [torch.randn(o.shape, generator=cot_gen, dtype=torch.float64) for o in outs]

    def scalar(values):
        outs_local = as_tuple(op(*values))
        return sum((o * v).sum() for o, v in zip(outs_local, cotangents))

    loss = sum((o * v).sum() for o, v in zip(outs, cotangents))
    analytic = torch.autograd.grad(loss, leaves, allow_unused=True)

    report = GradCheckReport(tol=tol)
    for name, leaf, grad in zip(names, leaves, analytic):
        g = torch.zeros_like(leaf) if grad is None else grad
        finite = bool(torch.isfinite(g).all())
        worst = 0.0
        worst_idx = ()
        if not finite:
            bad = torch.nonzero(~torch.isfinite(g))[0]
            worst_idx = tuple(int(i) for i in bad)
            worst = float("inf")
        else:
            base = leaf.detach().clone()
            flat = base.reshape(-1)
            others = [l.detach() for l in leaves]
            pos = names.index(name)
            gflat = g.reshape(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                with torch.no_grad():
                    flat[j] = orig + eps
                    args = others[:pos] + [base] + others[pos + 1 :]
                    up = scalar(args).item()
                    flat[j] = orig - eps
                    args = others[:pos] + [base] + others[pos + 1 :]
                    down = scalar(args).item()
                    flat[j] = orig
                numeric = (up - down) / (2 * eps)
                a = gflat[j].item()
                rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                if rel > worst:
                    worst = rel
                    worst_idx = tuple(int(i) for i in np_unravel(j, leaf.shape))
        report.entries.append(GradCheckEntry(name, worst, worst_idx, finite))
    return report
