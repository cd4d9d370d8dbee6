"""Model assembly, the training step, the run loop, and checkpointing.

The model is a per-frame BEV encoder, per-slot temporal embeddings, a
concatenation fusion feeding the main detection head, and (training only)
the historical-prediction branch with its own object decoder plus the
optional query adaptor. Every submodule draws its initial weights from a
generator seeded by (seed, module name), so a model built without the
training-only branches carries bit-identical main weights; that is what the
equivalence checks in the test suite rely on.

Checkpoints are a binary container (magic ``HOPCKPT1``) holding the config
echo, step, a metric snapshot, a payload checksum, and every parameter array
by hierarchical name. Resuming restores parameters and the step counter;
optimizer moments are not part of the checkpoint contract and restart fresh.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time

import numpy as np
import torch
from torch import nn

from . import metrics as metrics_mod
from .bevnet import BevEncoder, BEVFeature, TemporalFusion, TemporalPositionEmbedding
from .config import RunConfig
from .attention import DeformAttnParams
from .errors import ArchitectureMismatchError, ChecksumError, ConfigError, NonFiniteLossError
from .geometry import pose_relative, transform_boxes
from .heads import (
    CenterHead,
    QueryHead,
    QuerySet,
    decode_detections,
    decode_query_detections,
    detection_loss_center,
    encode_center_targets,
    hungarian_match,
    match_cost_matrix,
    set_loss,
)
from .hop import HopBranch, HopConfig, feature_reconstruction_loss, hop_forward
from .queryfusion import QueryAdaptor, collect_history, merge_queries
from .serialization import read_container, write_container
from .synthworld import NoiseConfig, boxes_in_extent, obs_channels, rasterize_in_frame, read_dataset
from .torchutil import seeded_generator

CKPT_MAGIC = b"HOPCKPT1"


def apply_thread_cap():
    """Honor HOPBEV_NUM_THREADS as an upper bound on intra-run parallelism."""
    cap = os.environ.get("HOPBEV_NUM_THREADS")
    if cap:
        try:
            n = max(1, int(cap))
        except ValueError:
            raise ConfigError(f"HOPBEV_NUM_THREADS must be an integer, got {cap!r}")
        torch.set_num_threads(min(torch.get_num_threads(), n))


class BevDetectionModel(nn.Module):
    """Full detector; training-only branches exist only when ``include_aux``."""

    def __init__(self, cfg: RunConfig, include_aux=True):
        super().__init__()
        self.cfg = cfg
        self.grid = cfg.grid()
        self.n_classes = cfg.doc["world"]["n_classes"]
        self.z_norm = cfg.doc["world"]["z_norm"]
        m = cfg.model
        self.n_history = m["history_length"]
        self.head_kind = m["head"]
        dtype = cfg.dtype
        self.dtype = dtype
        seed = cfg.seed
        attn = DeformAttnParams(
            n_heads=m["n_heads"], n_points=m["n_points"], offset_scale=m["offset_scale"]
        )

        self.encoder = BevEncoder(
            obs_channels(self.n_classes),
            m["channels"],
            n_layers=m["encoder_layers"],
            dtype=dtype,
            generator=seeded_generator(seed, "encoder"),
        )
        self.pos_embed = TemporalPositionEmbedding(self.n_history + 1, m["channels"], dtype=dtype)
        self.fusion = TemporalFusion(
            self.n_history + 1, m["channels"], dtype=dtype, generator=seeded_generator(seed, "fusion")
        )
        if self.head_kind == "center":
            self.main_head = CenterHead(
                m["channels"], self.n_classes, dtype=dtype, generator=seeded_generator(seed, "main_head")
            )
        else:
            self.main_head = QueryHead(
                m["channels"],
                self.n_classes,
                self.grid,
                n_queries=m["n_queries"],
                n_layers=m["query_decoder_layers"],
                n_heads=m["n_heads"],
                n_points=m["n_points"],
                offset_scale=m["offset_scale"],
                dtype=dtype,
                generator=seeded_generator(seed, "main_head"),
            )

        self.fusion_form = cfg.fusion_form
        if self.fusion_form != "none":
            self.query_adaptor = QueryAdaptor(
                m["channels"], dtype=dtype, generator=seeded_generator(seed, "query_adaptor")
            )
        else:
            self.query_adaptor = None

        self.hop_cfg = cfg.hop() if include_aux and cfg.doc["hop"]["enabled"] else None
        if self.hop_cfg is not None:
            self.hop_branch = HopBranch(
                self.grid.H,
                self.grid.W,
                m["channels"],
                reduction_ratio=m["reduction_ratio"],
                params=attn,
                use_short_term=self.hop_cfg.use_short_term,
                use_long_term=self.hop_cfg.use_long_term,
                dtype=dtype,
                generator=seeded_generator(seed, "hop_branch"),
            )
            if self.hop_cfg.aux_head == "center":
                self.aux_head = CenterHead(
                    m["channels"], self.n_classes, dtype=dtype, generator=seeded_generator(seed, "aux_head")
                )
            else:
                self.aux_head = QueryHead(
                    m["channels"],
                    self.n_classes,
                    self.grid,
                    n_queries=m["n_queries"],
                    n_layers=m["query_decoder_layers"],
                    n_heads=m["n_heads"],
                    n_points=m["n_points"],
                    offset_scale=m["offset_scale"],
                    dtype=dtype,
                    generator=seeded_generator(seed, "aux_head"),
                )
        else:
            self.hop_branch = None
            self.aux_head = None

    # Data preparation -------------------------------------------------------

    def window_frames(self, seq, for_future=False):
        """Frame indices of the model window, ending one frame early when the
        auxiliary task predicts the future (so a target frame exists)."""
        t_idx = seq.n_frames - 1 - (1 if for_future else 0)
        start = t_idx - self.n_history
        if start < 0:
            raise ConfigError(
                f"sequence has {seq.n_frames} frames, too short for history {self.n_history}"
                + (" with future prediction" if for_future else "")
            )
        return list(range(start, t_idx + 1)), t_idx

    def rasterize_window(self, seq, noise: NoiseConfig | None, for_future=False):
        frames, t_idx = self.window_frames(seq, for_future=for_future)
        obs = [
            rasterize_in_frame(seq, j, t_idx, self.grid, self.n_classes, noise=noise, z_norm=self.z_norm)
            for j in frames
        ]
        return obs, frames, t_idx

    def encode_window(self, obs_list, detach_policy=None):
        """Encode a window into slot-tagged, temporally embedded features.

        ``detach_policy`` applies to historical frames only (the current
        frame always carries the full graph); None means no detaching
        (inference / oracle runs handle their own no_grad scope). Historical
        frames run through the encoder as one batch.
        """
        n = len(obs_list) - 1
        dtype = self.encoder.convs[0].weight.dtype
        stack = torch.stack([torch.as_tensor(o.values, dtype=dtype) for o in obs_list])
        if detach_policy is None:
            values = self.encoder.forward_batch(stack)
        else:
            current = self.encoder.forward_batch(stack[n:])
            if detach_policy == "full_detach":
                with torch.no_grad():
                    hist = self.encoder.forward_batch(stack[:n])
            elif detach_policy == "keep_last_two":
                with torch.no_grad():
                    stems = self.encoder.stem(stack[:n].permute(0, 3, 1, 2))
                hist = self.encoder.last_two(stems).permute(0, 2, 3, 1)
            else:
                raise ConfigError(f"unknown detach policy {detach_policy!r}")
            values = torch.cat([hist, current], dim=0)
        features = [
            BEVFeature(values=values[slot], frame_index=obs.frame_index, slot=slot)
            for slot, obs in enumerate(obs_list)
        ]
        return self.pos_embed(features)

    # Forward paths ----------------------------------------------------------

    def main_forward(self, features):
        """Main-task head output on the fused feature.

        For the query head with fusion enabled, history frames are decoded in
        time order under no_grad and their adapted outputs seed the current
        frame's queries.
        """
        fused = self.fusion(features)
        if self.head_kind == "center":
            return self.main_head(fused)
        if self.fusion_form == "none":
            return self.main_head(fused)
        outputs = []
        with torch.no_grad():
            for f in sorted(features, key=lambda x: x.slot)[:-1]:
                k = self.n_history - f.slot
                o_his = collect_history(
                    self.fusion_form, outputs, k, self.query_adaptor, self.main_head.n_queries
                )
                merged = merge_queries(self.main_head.predefined_queries(), o_his)
                out = self.main_head(f, merged)
                outputs.append(QuerySet(embeddings=out.queries.detach(), role="output"))
        o_his = collect_history(self.fusion_form, outputs, 0, self.query_adaptor, self.main_head.n_queries)
        merged = merge_queries(self.main_head.predefined_queries(), o_his)
        return self.main_head(fused, merged)

    def main_loss(self, head_out, gt_boxes):
        if self.head_kind == "center":
            targets = encode_center_targets(gt_boxes, self.grid, self.n_classes, dtype=self.dtype)
            return detection_loss_center(head_out, targets)
        inside, _ = boxes_in_extent(gt_boxes, self.grid)
        match = hungarian_match(match_cost_matrix(head_out, inside)) if inside else []
        return set_loss(head_out, inside, match)

    def aux_decoder(self):
        head = self.aux_head
        if isinstance(head, CenterHead):
            return head
        return lambda feature: head(feature)

    def aux_loss_for(self, head_out, gt_boxes):
        if isinstance(self.aux_head, CenterHead):
            targets = encode_center_targets(gt_boxes, self.grid, self.n_classes, dtype=self.dtype)
            return detection_loss_center(head_out, targets)
        inside, _ = boxes_in_extent(gt_boxes, self.grid)
        match = hungarian_match(match_cost_matrix(head_out, inside)) if inside else []
        return set_loss(head_out, inside, match)

    def decode(self, head_out):
        d = self.cfg.decode
        if self.head_kind == "center":
            return decode_detections(head_out, self.grid, max_det=d["max_det"], score_thresh=d["score_thresh"])
        return decode_query_detections(head_out, max_det=d["max_det"], score_thresh=d["score_thresh"])

    @torch.no_grad()
    def inference(self, seq, noise: NoiseConfig | None = None):
        """Detections for the last frame of a sequence. Never touches the
        auxiliary branch; a model built without it gives identical output."""
        obs, _, t_idx = self.rasterize_window(seq, noise)
        features = self.encode_window(obs)
        head_out = self.main_forward(features)
        return self.decode(head_out), t_idx


def build_model(cfg: RunConfig, include_aux=True) -> BevDetectionModel:
    return BevDetectionModel(cfg, include_aux=include_aux)


def hop_targets(seq, t_idx, k):
    """Ground truth of frame t-k expressed in the current ego frame e(t)."""
    source = t_idx - k
    transform = pose_relative(seq.poses[t_idx], seq.poses[source])
    return transform_boxes(seq.gt[source], transform)


def train_step(batch, model: BevDetectionModel, optimizer, step, noise: NoiseConfig | None = None):
    """One optimizer step over a batch of sequences; returns the loss terms.

    Pipeline per sequence: rasterize and encode the window aligned to e(t)
    with the configured detach policy, main detection loss on the fused
    feature, auxiliary historical-prediction loss on the branch output (when
    enabled with positive weight), feature reconstruction when configured.
    """
    hop_cfg: HopConfig | None = model.hop_cfg
    use_hop = hop_cfg is not None and (
        (hop_cfg.target_mode in ("objects", "both") and hop_cfg.aux_loss_weight > 0)
        or hop_cfg.target_mode in ("features", "both")
    )
    for_future = bool(use_hop and hop_cfg.k == -1)
    detach_policy = hop_cfg.detach_policy if hop_cfg is not None else "full_detach"

    zero = torch.zeros((), dtype=model.dtype)
    total = zero
    main_sum = zero
    hop_sum = zero
    feat_sum = zero
    for seq in batch:
        obs, frames, t_idx = model.rasterize_window(seq, noise, for_future=for_future)
        features = model.encode_window(obs, detach_policy=detach_policy)
        head_out = model.main_forward(features)
        loss_main = model.main_loss(head_out, seq.gt[t_idx])
        main_sum = main_sum + loss_main
        loss_seq = loss_main
        if use_hop:
            preds, pseudo = hop_forward(
                features, hop_cfg, model.hop_branch, model.aux_decoder(), return_pseudo=True
            )
            if hop_cfg.target_mode in ("objects", "both") and hop_cfg.aux_loss_weight > 0:
                gt_hat = hop_targets(seq, t_idx, hop_cfg.k)
                loss_hop = model.aux_loss_for(preds, gt_hat)
                hop_sum = hop_sum + loss_hop
                loss_seq = loss_seq + hop_cfg.aux_loss_weight * loss_hop
            if hop_cfg.target_mode in ("features", "both"):
                target = features[model.n_history - hop_cfg.k].values.detach()
                loss_feat = feature_reconstruction_loss(pseudo.values, target)
                feat_sum = feat_sum + loss_feat
                loss_seq = loss_seq + hop_cfg.feature_loss_weight * loss_feat
        total = total + loss_seq

    n = len(batch)
    total = total / n
    terms = {
        "loss_total": float(total.detach()),
        "loss_main": float(main_sum.detach()) / n,
        "loss_hop": float(hop_sum.detach()) / n,
        "loss_feat": float(feat_sum.detach()) / n,
    }
    if not math.isfinite(terms["loss_total"]):
        raise NonFiniteLossError({"step": step, "seed": model.cfg.seed, **terms})

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    grad_norm = torch.nn.utils.clip_grad_norm_(
        [p for p in model.parameters() if p.grad is not None], model.cfg.train["grad_clip"]
    )
    terms["grad_norm"] = float(grad_norm)
    if not math.isfinite(terms["grad_norm"]):
        raise NonFiniteLossError({"step": step, "seed": model.cfg.seed, **terms})
    optimizer.step()
    return terms


@torch.no_grad()
def evaluate_model(model: BevDetectionModel, sequences, noise: NoiseConfig | None = None):
    """Score the model's final-frame detections over held-out sequences."""
    frames = []
    for seq in sequences:
        dets, t_idx = model.inference(seq, noise=noise)
        gts, _ = boxes_in_extent(seq.gt[t_idx], model.grid)
        frames.append((dets, gts))
    return metrics_mod.evaluate_detections(frames, classes=range(model.n_classes), with_curves=True)


def save_checkpoint(model: BevDetectionModel, path, step=0, metric_snapshot=None):
    arrays = []
    payload_hash = hashlib.sha256()
    for name, p in model.named_parameters():
        a = p.detach().cpu().numpy()
        arrays.append((name, a))
        payload_hash.update(np.ascontiguousarray(a).tobytes())
    meta = {
        "step": int(step),
        "config": model.cfg.to_dict(),
        "metrics": metric_snapshot or {},
        "params_sha256": payload_hash.hexdigest(),
    }
    write_container(path, CKPT_MAGIC, meta, arrays)
    return meta


def _param_checksum(arrays_in_order):
    h = hashlib.sha256()
    for _, a in arrays_in_order:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def load_parameters(model: BevDetectionModel, path, allow_extra=False):
    """Copy checkpoint arrays into an existing model, strictly by name.

    Raises ArchitectureMismatchError listing every missing or shape-differing
    array. ``allow_extra`` permits checkpoint arrays the model does not have
    (used when loading a training checkpoint into an inference-only build).
    """
    meta, arrays = read_container(path, CKPT_MAGIC)
    recomputed = _param_checksum(list(arrays.items()))
    if recomputed != meta.get("params_sha256"):
        raise ChecksumError(f"{path}: parameter payload checksum mismatch")
    params = dict(model.named_parameters())
    mismatches = []
    for name, p in params.items():
        if name not in arrays:
            mismatches.append((name, "missing from checkpoint"))
        elif tuple(arrays[name].shape) != tuple(p.shape):
            mismatches.append((name, f"checkpoint {tuple(arrays[name].shape)} vs model {tuple(p.shape)}"))
    if not allow_extra:
        for name in arrays:
            if name not in params:
                mismatches.append((name, "not present in model"))
    if mismatches:
        raise ArchitectureMismatchError(mismatches)
    with torch.no_grad():
        for name, p in params.items():
            p.copy_(torch.from_numpy(arrays[name].copy()))
    return meta


def load_checkpoint(path, include_aux=None):
    """Rebuild the saved model from its config echo and load its weights."""
    meta, _ = read_container(path, CKPT_MAGIC)
    cfg = RunConfig.from_dict(meta["config"])
    if include_aux is None:
        include_aux = bool(cfg.doc["hop"]["enabled"])
    model = build_model(cfg, include_aux=include_aux)
    load_parameters(model, path, allow_extra=not include_aux)
    return model, meta


def run_training(cfg: RunConfig, data_path, out_dir, resume=False, quiet=True):
    """Config-driven training with periodic held-out evaluation.

    Writes config.json (echo), metrics.jsonl, checkpoint_best.ckpt,
    checkpoint_final.ckpt and result.json into ``out_dir``. Fully seeded:
    identical (config, dataset) runs produce identical logs in float64 mode.
    """
    apply_thread_cap()
    os.makedirs(out_dir, exist_ok=True)
    manifest, seqs = read_dataset(data_path)
    holdout = cfg.train["eval_holdout"]
    if holdout >= len(seqs):
        raise ConfigError(f"eval_holdout {holdout} >= dataset size {len(seqs)}")
    train_seqs = seqs[:-holdout]
    eval_seqs = seqs[-holdout:]

    model = build_model(cfg, include_aux=cfg.doc["hop"]["enabled"])
    model.train()
    start_step = 0
    final_path = os.path.join(out_dir, "checkpoint_final.ckpt")
    best_path = os.path.join(out_dir, "checkpoint_best.ckpt")
    if resume and os.path.exists(final_path):
        meta = load_parameters(model, final_path)
        start_step = int(meta["step"])

    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.train["lr"], weight_decay=cfg.train["weight_decay"]
    )
    noise = NoiseConfig(dropout=cfg.doc["world"]["dropout"], seed=cfg.seed)
    cfg.dump(os.path.join(out_dir, "config.json"))

    log_path = os.path.join(out_dir, "metrics.jsonl")
    log_mode = "a" if (resume and start_step > 0) else "w"
    steps = cfg.train["steps"]
    warmup = cfg.train["warmup_steps"]
    base_lr = cfg.train["lr"]
    best = {"composite": -1.0, "step": -1}
    last_eval = {}
    t0 = time.time()

    with open(log_path, log_mode, encoding="utf-8") as log:

        def write_line(payload):
            log.write(json.dumps(payload) + "\n")
            log.flush()

        for step in range(start_step, steps):
            lr = base_lr * min(1.0, (step + 1) / max(1, warmup))
            for group in optimizer.param_groups:
                group["lr"] = lr
            rng = np.random.default_rng([cfg.seed & 0x7FFFFFFF, 9261, step])
            idx = rng.choice(len(train_seqs), size=min(cfg.train["batch_size"], len(train_seqs)), replace=False)
            batch = [train_seqs[i] for i in idx]
            try:
                terms = train_step(batch, model, optimizer, step, noise=noise)
            except NonFiniteLossError as e:
                with open(os.path.join(out_dir, "abort_dump.json"), "w", encoding="utf-8") as f:
                    json.dump(e.dump, f, indent=2)
                raise

            is_eval = (step + 1) % cfg.train["eval_every"] == 0 or step + 1 == steps
            if is_eval:
                model.eval()
                result = evaluate_model(model, eval_seqs, noise=noise)
                model.train()
                last_eval = {"mAP": result.mAP, "composite": result.composite}
                if result.composite > best["composite"]:
                    best = {"composite": result.composite, "step": step + 1}
                    save_checkpoint(model, best_path, step=step + 1, metric_snapshot=result.to_dict())
            if is_eval or (step + 1) % cfg.train["log_every"] == 0 or step == start_step:
                write_line(
                    {
                        "step": step + 1,
                        "loss_total": terms["loss_total"],
                        "loss_main": terms["loss_main"],
                        "loss_hop": terms["loss_hop"],
                        "loss_feat": terms["loss_feat"],
                        "grad_norm": terms["grad_norm"],
                        "lr": lr,
                        "mAP": last_eval.get("mAP"),
                        "composite": last_eval.get("composite"),
                    }
                )
            if not quiet and (step + 1) % 100 == 0:
                print(
                    f"step {step + 1}/{steps} loss {terms['loss_total']:.4f} "
                    f"mAP {last_eval.get('mAP')}",
                    flush=True,
                )

    model.eval()
    final_result = evaluate_model(model, eval_seqs, noise=noise)
    save_checkpoint(model, final_path, step=steps, metric_snapshot=final_result.to_dict())
    summary = {
        "steps": steps,
        "final": final_result.to_dict(),
        "best": best,
        "seconds": time.time() - t0,
        "n_train": len(train_seqs),
        "n_eval": len(eval_seqs),
    }
    with open(os.path.join(out_dir, "result.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
    return summary
