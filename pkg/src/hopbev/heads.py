"""Pluggable object decoders and the 3D detection losses.

Two interchangeable heads map a BEV feature grid to 3D box predictions: a
center-based head (class heatmaps plus dense regression, the default) and a
query-based set-prediction head (learned object queries refined by
deformable cross-attention, required for temporal query fusion). Both come
with their target encoders and losses, plus decoding back to box lists.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from scipy.optimize import linear_sum_assignment

from .attention import DeformableAttention, DeformAttnParams
from .bevnet import BEVFeature, BEVGridSpec
from .errors import ShapeError
from .synthworld import Box3D, boxes_in_extent
from .torchutil import init_linear, init_conv, normal_

# Regression channel layout: dx, dy (sub-cell offsets in cells), z,
# log w, log l, log h, sin yaw, cos yaw.
REG_CHANNELS = 8
VEL_CHANNELS = 2

HEATMAP_WEIGHT = 1.0
REG_WEIGHT = 0.25
VEL_WEIGHT = 0.25
FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0

MATCH_COST_CLASS = 1.0
MATCH_COST_CENTER = 0.25
BACKGROUND_CE_WEIGHT = 0.1
SET_BOX_WEIGHT = 0.25


@dataclass
class Detection:
    box: Box3D
    score: float


@dataclass
class CenterHeadOutput:
    heatmap: torch.Tensor  # (H, W, C_cls), sigmoid probabilities
    reg: torch.Tensor  # (H, W, 8)
    vel: torch.Tensor  # (H, W, 2)


@dataclass
class CenterTargets:
    heatmap: torch.Tensor
    reg: torch.Tensor
    vel: torch.Tensor
    peak_mask: torch.Tensor  # (H, W) bool, True at encoded peak cells
    n_objects: int


class CenterHead(nn.Module):
    """Shared 3x3 conv trunk plus per-task 1x1 heads.

    The heatmap head bias starts at -2.19 (sigmoid ~0.1) so an untrained
    model is not swamped by negative focal loss.
    """

    def __init__(self, channels, n_classes, dtype=torch.float64, generator=None):
        super().__init__()
        self.n_classes = n_classes
        self.trunk = nn.Conv2d(channels, channels, 3, padding=1, dtype=dtype)
        self.heatmap_head = nn.Conv2d(channels, n_classes, 1, dtype=dtype)
        self.reg_head = nn.Conv2d(channels, REG_CHANNELS, 1, dtype=dtype)
        self.vel_head = nn.Conv2d(channels, VEL_CHANNELS, 1, dtype=dtype)
        init_conv(self.trunk, generator, zero_bias=True)
        init_conv(self.heatmap_head, generator)
        init_conv(self.reg_head, generator)
        init_conv(self.vel_head, generator)
        with torch.no_grad():
            self.heatmap_head.bias.fill_(-2.19)

    def forward(self, feature) -> CenterHeadOutput:
        values = feature.values if isinstance(feature, BEVFeature) else feature
        x = values.permute(2, 0, 1).unsqueeze(0)
        h = torch.relu(self.trunk(x))
        heat = torch.sigmoid(self.heatmap_head(h)).squeeze(0).permute(1, 2, 0)
        reg = self.reg_head(h).squeeze(0).permute(1, 2, 0)
        vel = self.vel_head(h).squeeze(0).permute(1, 2, 0)
        return CenterHeadOutput(heatmap=heat, reg=reg, vel=vel)


def gaussian_radius_cells(w, l, cell_size) -> int:
    return max(2, math.ceil(min(w, l) / (2.0 * cell_size)))


def encode_center_targets(gt, grid: BEVGridSpec, n_classes, dtype=torch.float64) -> CenterTargets:
    """Encode a frame's boxes into center-head target maps.

    Per class, a Gaussian peak of 1.0 at each box's center cell with radius
    max(2, ceil(min(w, l) / (2 cell))); sigma = (2r+1)/6, truncated beyond
    Chebyshev distance r, overlapping stamps combined by max. Regression and
    velocity targets are written at peak cells only. Boxes whose center lies
    outside the extent are excluded.
    """
    H, W = grid.H, grid.W
    heat = np.zeros((H, W, n_classes), dtype=np.float64)
    reg = np.zeros((H, W, REG_CHANNELS), dtype=np.float64)
    vel = np.zeros((H, W, VEL_CHANNELS), dtype=np.float64)
    mask = np.zeros((H, W), dtype=bool)

    inside, _ = boxes_in_extent(gt, grid)
    for b in inside:
        gr, gc = grid.world_to_grid(b.x, b.y)
        ci = int(np.clip(math.floor(gr + 0.5), 0, H - 1))
        cj = int(np.clip(math.floor(gc + 0.5), 0, W - 1))
        radius = gaussian_radius_cells(b.w, b.l, grid.cell_size)
        sigma = (2 * radius + 1) / 6.0
        for r in range(max(0, ci - radius), min(H, ci + radius + 1)):
            for c in range(max(0, cj - radius), min(W, cj + radius + 1)):
                g = math.exp(-((r - ci) ** 2 + (c - cj) ** 2) / (2 * sigma**2))
                heat[r, c, b.cls] = max(heat[r, c, b.cls], g)
        heat[ci, cj, b.cls] = 1.0
        reg[ci, cj] = [
            gr - ci,
            gc - cj,
            b.z,
            math.log(b.w),
            math.log(b.l),
            math.log(b.h),
            math.sin(b.yaw),
            math.cos(b.yaw),
        ]
        vel[ci, cj] = [b.vx, b.vy]
        mask[ci, cj] = True

    return CenterTargets(
        heatmap=torch.as_tensor(heat, dtype=dtype),
        reg=torch.as_tensor(reg, dtype=dtype),
        vel=torch.as_tensor(vel, dtype=dtype),
        peak_mask=torch.as_tensor(mask),
        n_objects=len(inside),
    )


def detection_loss_center(pred: CenterHeadOutput, targets: CenterTargets) -> torch.Tensor:
    """Penalty-reduced focal loss on heatmaps plus L1 at peak cells.

    All terms are normalized by the in-extent object count (min 1); weights
    are 1.0 heatmap, 0.25 regression, 0.25 velocity.
    """
    p = pred.heatmap
    t = targets.heatmap
    if p.shape != t.shape:
        raise ShapeError(f"heatmap shape {tuple(p.shape)} vs target {tuple(t.shape)}")
    norm = max(1, targets.n_objects)
    pos = t == 1.0
    eps = 1e-12
    pos_term = (1 - p) ** FOCAL_ALPHA * torch.log(p.clamp(min=eps))
    neg_term = (1 - t) ** FOCAL_BETA * p**FOCAL_ALPHA * torch.log((1 - p).clamp(min=eps))
    focal = -(torch.where(pos, pos_term, neg_term)).sum() / norm

    m = targets.peak_mask
    reg_l1 = (pred.reg[m] - targets.reg[m]).abs().sum() / norm
    vel_l1 = (pred.vel[m] - targets.vel[m]).abs().sum() / norm
    return HEATMAP_WEIGHT * focal + REG_WEIGHT * reg_l1 + VEL_WEIGHT * vel_l1


def decode_detections(pred: CenterHeadOutput, grid: BEVGridSpec, max_det=24, score_thresh=0.1):
    """Top-K local maxima of the heatmap, with regression applied.

    A cell is a peak when it equals the 3x3 max-pool of its class channel and
    its score clears the threshold. Returns a list of Detection sorted by
    descending score; track ids are synthesized ranks.
    """
    heat = pred.heatmap.detach()
    H, W, n_classes = heat.shape
    hm = heat.permute(2, 0, 1).unsqueeze(0)
    pooled = torch.nn.functional.max_pool2d(hm, 3, stride=1, padding=1)
    peaks = (hm == pooled).squeeze(0).permute(1, 2, 0) & (heat >= score_thresh)
    idx = torch.nonzero(peaks)
    if idx.numel() == 0:
        return []
    scores = heat[idx[:, 0], idx[:, 1], idx[:, 2]]
    order = torch.argsort(scores, descending=True)[:max_det]
    reg = pred.reg.detach()
    vel = pred.vel.detach()
    out = []
    for rank, oi in enumerate(order.tolist()):
        r, c, cls = (int(v) for v in idx[oi])
        dr, dc, z, lw, ll, lh, sy, cy = (float(v) for v in reg[r, c])
        x, y = grid.grid_to_world(r + dr, c + dc)
        out.append(
            Detection(
                box=Box3D(
                    x=x, y=y, z=z,
                    w=math.exp(lw), l=math.exp(ll), h=math.exp(lh),
                    yaw=math.atan2(sy, cy),
                    vx=float(vel[r, c, 0]), vy=float(vel[r, c, 1]),
                    cls=cls, track_id=rank,
                ),
                score=float(scores[oi]),
            )
        )
    return out


@dataclass
class QuerySet:
    """M query embeddings with their pipeline role."""

    embeddings: torch.Tensor  # (M, C_q)
    role: str = "predefined"  # predefined | output | historical

    def __post_init__(self):
        if self.role not in ("predefined", "output", "historical"):
            raise ValueError(f"unknown query role {self.role!r}")


@dataclass
class QueryHeadOutput:
    class_logits: torch.Tensor  # (M, C_cls + 1); last column is background
    boxes: torch.Tensor  # (M, 10): x, y, z, w, l, h, sin, cos, vx, vy
    queries: torch.Tensor  # refined query embeddings (M, C_q)


class _SelfAttention(nn.Module):
    def __init__(self, channels, n_heads, dtype, generator):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = channels // n_heads
        self.qkv = nn.Linear(channels, 3 * channels, dtype=dtype)
        self.out = nn.Linear(channels, channels, dtype=dtype)
        init_linear(self.qkv, generator)
        init_linear(self.out, generator, zero=True)

    def forward(self, x):
        m, c = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.reshape(m, self.n_heads, self.head_dim).transpose(0, 1)
        k = k.reshape(m, self.n_heads, self.head_dim).transpose(0, 1)
        v = v.reshape(m, self.n_heads, self.head_dim).transpose(0, 1)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        y = (attn @ v).transpose(0, 1).reshape(m, c)
        return self.out(y)


class _QueryFFN(nn.Module):
    def __init__(self, channels, dtype, generator):
        super().__init__()
        self.fc1 = nn.Linear(channels, 2 * channels, dtype=dtype)
        self.fc2 = nn.Linear(2 * channels, channels, dtype=dtype)
        init_linear(self.fc1, generator)
        init_linear(self.fc2, generator)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))


class _QueryDecoderLayer(nn.Module):
    """Pre-norm layer: deformable cross-attention into the BEV grid at the
    query's reference point, self-attention over queries, then an FFN. With
    the attention output maps zeroed the layer reduces to the FFN residual
    path."""

    def __init__(self, channels, n_heads, n_points, offset_scale, dtype, generator):
        super().__init__()
        params = DeformAttnParams(n_heads=n_heads, n_points=n_points, offset_scale=offset_scale)
        self.cross = DeformableAttention(channels, params, dtype=dtype, generator=generator)
        self.self_attn = _SelfAttention(channels, n_heads, dtype, generator)
        self.ffn = _QueryFFN(channels, dtype, generator)
        self.ln1 = nn.LayerNorm(channels, dtype=dtype)
        self.ln2 = nn.LayerNorm(channels, dtype=dtype)
        self.ln3 = nn.LayerNorm(channels, dtype=dtype)

    def forward(self, q, refs, bev_values):
        q = q + self.cross(self.ln1(q), refs, [bev_values])
        q = q + self.self_attn(self.ln2(q))
        q = q + self.ffn(self.ln3(q))
        return q


class QueryHead(nn.Module):
    """DETR-style set prediction head over a BEV feature grid.

    M pre-defined queries cross-attend to the grid at learned per-query
    reference points through ``n_layers`` decoder layers; class and box heads
    read the refined queries. Box centers are offsets from the reference
    point's world position; sizes are exponentiated, so decoded boxes always
    have positive dimensions.
    """

    def __init__(
        self,
        channels,
        n_classes,
        grid: BEVGridSpec,
        n_queries=32,
        n_layers=2,
        n_heads=4,
        n_points=4,
        offset_scale=2.0,
        dtype=torch.float64,
        generator=None,
    ):
        super().__init__()
        self.grid = grid
        self.n_classes = n_classes
        self.n_queries = n_queries
        self.query_embed = nn.Parameter(torch.empty(n_queries, channels, dtype=dtype))
        normal_(self.query_embed, 1.0, generator)
        # Reference points spread over the grid via a sigmoid of this raw param.
        raw = torch.rand(n_queries, 2, generator=generator, dtype=dtype) * 0.96 + 0.02
        self.ref_raw = nn.Parameter(torch.log(raw / (1 - raw)))
        self.layers = nn.ModuleList(
            [
                _QueryDecoderLayer(channels, n_heads, n_points, offset_scale, dtype, generator)
                for _ in range(n_layers)
            ]
        )
        self.class_head = nn.Linear(channels, n_classes + 1, dtype=dtype)
        self.box_head = nn.Linear(channels, 10, dtype=dtype)
        init_linear(self.class_head, generator)
        init_linear(self.box_head, generator)

    def predefined_queries(self) -> QuerySet:
        return QuerySet(embeddings=self.query_embed, role="predefined")

    def reference_points(self):
        scale = torch.tensor(
            [self.grid.H - 1.0, self.grid.W - 1.0], dtype=self.ref_raw.dtype
        )
        return torch.sigmoid(self.ref_raw) * scale

    def forward(self, feature, queries: QuerySet | None = None) -> QueryHeadOutput:
        values = feature.values if isinstance(feature, BEVFeature) else feature
        q = (queries or self.predefined_queries()).embeddings
        if q.shape != self.query_embed.shape:
            raise ShapeError(f"queries must be {tuple(self.query_embed.shape)}, got {tuple(q.shape)}")
        refs = self.reference_points()
        for layer in self.layers:
            q = layer(q, refs, values)
        logits = self.class_head(q)
        raw = self.box_head(q)
        ref_r = refs[:, 0]
        ref_c = refs[:, 1]
        half = self.grid.extent / 2.0
        ref_x = (ref_c + 0.5) * self.grid.cell_size - half
        ref_y = (ref_r + 0.5) * self.grid.cell_size - half
        boxes = torch.stack(
            [
                ref_x + raw[:, 0],
                ref_y + raw[:, 1],
                raw[:, 2],
                torch.exp(raw[:, 3]),
                torch.exp(raw[:, 4]),
                torch.exp(raw[:, 5]),
                raw[:, 6],
                raw[:, 7],
                raw[:, 8],
                raw[:, 9],
            ],
            dim=-1,
        )
        return QueryHeadOutput(class_logits=logits, boxes=boxes, queries=q)


def box_target_vector(b: Box3D):
    return [b.x, b.y, b.z, b.w, b.l, b.h, math.sin(b.yaw), math.cos(b.yaw), b.vx, b.vy]


def hungarian_match(cost) -> list:
    """Minimum-total-cost one-to-one assignment over an n_pred x n_gt matrix.

    Returns (pred, gt) pairs sorted by pred index, covering min(n_pred, n_gt)
    pairs. Ties between equally cheap assignments break toward the
    lexicographically smallest (pred index, gt index) pair list.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ShapeError(f"cost must be 2-d, got shape {c.shape}")
    if c.size == 0:
        return []
    if not np.isfinite(c).all():
        raise ValueError("cost matrix must be finite")

    rows, cols = linear_sum_assignment(c)
    total = float(c[rows, cols].sum())
    n_pred, n_gt = c.shape
    n_pairs = min(n_pred, n_gt)

    # Sequential fixing: a pred matched at all in some optimal assignment
    # always beats leaving it out lexicographically, and within a pred the
    # smallest workable gt index wins. ``remaining`` tracks the optimal total
    # of the still-open subproblem.
    tol = 1e-9 * max(1.0, abs(total))
    avail_preds = list(range(n_pred))
    avail_gts = list(range(n_gt))
    pairs = []
    remaining = total
    while avail_preds and len(pairs) < n_pairs:
        i = avail_preds.pop(0)
        need_after = n_pairs - len(pairs) - 1
        can_skip = len(avail_preds) >= n_pairs - len(pairs)
        chosen = None
        fallback = None
        for j in avail_gts:
            rest_gts = [g for g in avail_gts if g != j]
            if need_after > len(avail_preds) or need_after > len(rest_gts):
                continue
            if need_after > 0:
                rest = c[np.ix_(avail_preds, rest_gts)]
                rr, cc = linear_sum_assignment(rest)
                rest_total = float(rest[rr, cc].sum())
            else:
                rest_total = 0.0
            cand = float(c[i, j]) + rest_total
            if fallback is None or cand < fallback[0]:
                fallback = (cand, j, rest_total)
            if cand <= remaining + tol:
                chosen = (j, rest_total)
                break
        if chosen is None and not can_skip and fallback is not None:
            chosen = (fallback[1], fallback[2])  # float pathology guard
        if chosen is not None:
            j, rest_total = chosen
            pairs.append((i, j))
            avail_gts.remove(j)
            remaining = rest_total
        # else: pred i is unmatched in every optimal assignment; skip it and
        # the open subproblem's optimum is unchanged.
    return sorted(pairs)


def match_cost_matrix(out: QueryHeadOutput, gt) -> np.ndarray:
    """Class negative-probability plus weighted L1 center distance."""
    with torch.no_grad():
        probs = torch.softmax(out.class_logits, dim=-1).double().numpy()
        boxes = out.boxes.double().numpy()
    n_pred = probs.shape[0]
    cost = np.zeros((n_pred, len(gt)), dtype=np.float64)
    for j, b in enumerate(gt):
        center_l1 = np.abs(boxes[:, 0] - b.x) + np.abs(boxes[:, 1] - b.y)
        cost[:, j] = MATCH_COST_CLASS * (-probs[:, b.cls]) + MATCH_COST_CENTER * center_l1
    return cost


def set_loss(out: QueryHeadOutput, gt, match) -> torch.Tensor:
    """Cross-entropy (matched to class, unmatched to background at weight
    0.1, weight-normalized mean) plus 0.25-weighted L1 over the 10 box
    numbers of matched pairs, normalized by match count."""
    m, n_logits = out.class_logits.shape
    background = n_logits - 1
    dtype = out.class_logits.dtype
    targets = torch.full((m,), background, dtype=torch.long)
    weights = torch.full((m,), BACKGROUND_CE_WEIGHT, dtype=dtype)
    box_rows = []
    box_targets = []
    for pred_i, gt_j in match:
        targets[pred_i] = gt[gt_j].cls
        weights[pred_i] = 1.0
        box_rows.append(pred_i)
        box_targets.append(box_target_vector(gt[gt_j]))

    log_probs = torch.log_softmax(out.class_logits, dim=-1)
    ce = -log_probs[torch.arange(m), targets]
    loss_cls = (weights * ce).sum() / weights.sum()

    if box_rows:
        pred_boxes = out.boxes[box_rows]
        target_boxes = torch.as_tensor(box_targets, dtype=dtype)
        loss_box = SET_BOX_WEIGHT * (pred_boxes - target_boxes).abs().sum() / len(box_rows)
    else:
        loss_box = torch.zeros((), dtype=dtype)
    return loss_cls + loss_box


def decode_query_detections(out: QueryHeadOutput, max_det=24, score_thresh=0.1):
    """Detections from a query head output: per query, the best foreground
    class probability is the score."""
    with torch.no_grad():
        probs = torch.softmax(out.class_logits, dim=-1)
        fg = probs[:, :-1]
        scores, classes = fg.max(dim=-1)
        order = torch.argsort(scores, descending=True)
        boxes = out.boxes
    dets = []
    for rank, qi in enumerate(order.tolist()):
        s = float(scores[qi])
        if s < score_thresh or len(dets) >= max_det:
            break
        b = [float(v) for v in boxes[qi]]
        dets.append(
            Detection(
                box=Box3D(
                    x=b[0], y=b[1], z=b[2], w=max(b[3], 1e-6), l=max(b[4], 1e-6), h=max(b[5], 1e-6),
                    yaw=math.atan2(b[6], b[7]), vx=b[8], vy=b[9],
                    cls=int(classes[qi]), track_id=rank,
                ),
                score=s,
            )
        )
    return dets


def brute_force_assignment(cost) -> list:
    """Exhaustive minimum-cost assignment with the same lexicographic
    tie-break as hungarian_match. Exponential; for tests with n <= 6."""
    c = np.asarray(cost, dtype=np.float64)
    n_pred, n_gt = c.shape
    best = None
    if n_pred <= n_gt:
        for combo in itertools.permutations(range(n_gt), n_pred):
            pairs = sorted(zip(range(n_pred), combo))
            total = sum(c[i, j] for i, j in pairs)
            key = (total, pairs)
            if best is None or key < best:
                best = key
    else:
        for preds in itertools.combinations(range(n_pred), n_gt):
            for perm in itertools.permutations(range(n_gt)):
                pairs = sorted(zip(preds, perm))
                total = sum(c[i, j] for i, j in pairs)
                key = (total, pairs)
                if best is None or key < best:
                    best = key
    return best[1] if best else []
