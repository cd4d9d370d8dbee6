import copy
import json
import math
import os

import numpy as np
import pytest
import torch

from hopbev.config import RunConfig
from hopbev.errors import ArchitectureMismatchError, ConfigError
from hopbev.geometry import pose_relative, transform_boxes
from hopbev.synthworld import NoiseConfig, generate_dataset, generate_scene
from hopbev.train import (
    build_model,
    hop_targets,
    load_checkpoint,
    load_parameters,
    run_training,
    save_checkpoint,
    train_step,
)

TINY = {
    "grid": {"h": 16, "w": 16, "extent": 16.0},
    "world": {"extent": 16.0, "n_sequences": 6, "n_objects": [1, 3]},
    "model": {"channels": 16},
    "train": {"dtype": "float64", "eval_holdout": 2, "steps": 4, "eval_every": 2, "log_every": 1},
}


def tiny_cfg(**overrides):
    doc = copy.deepcopy(TINY)
    for dotted, value in overrides.items():
        node = doc
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return RunConfig.from_dict(doc)


def batch_for(cfg, seeds=(0,)):
    return [generate_scene(s, cfg.world()) for s in seeds]


def clone_params(model):
    return {k: v.detach().clone() for k, v in model.named_parameters()}


class TestEquivalence:
    def test_zero_aux_weight_matches_hopfree_build_bitwise(self):
        cfg_with = tiny_cfg(**{"hop.aux_loss_weight": 0.0})
        cfg_without = tiny_cfg(**{"hop.enabled": False})
        m_with = build_model(cfg_with, include_aux=True)
        m_without = build_model(cfg_without, include_aux=False)
        batch = batch_for(cfg_with)
        noise = NoiseConfig(0.15, 0)
        opt_a = torch.optim.AdamW(m_with.parameters(), lr=1e-3, weight_decay=0.01)
        opt_b = torch.optim.AdamW(m_without.parameters(), lr=1e-3, weight_decay=0.01)
        for step in range(2):
            train_step(batch, m_with, opt_a, step, noise=noise)
            train_step(batch, m_without, opt_b, step, noise=noise)
        params_b = clone_params(m_without)
        for name, value in clone_params(m_with).items():
            if name in params_b:
                assert torch.equal(value, params_b[name]), name

    def test_inference_bit_identical_without_hop_module(self):
        cfg = tiny_cfg()
        full = build_model(cfg, include_aux=True)
        bare = build_model(cfg, include_aux=False)
        seq = batch_for(cfg)[0]
        dets_full, _ = full.inference(seq, noise=NoiseConfig(0.15, 0))
        dets_bare, _ = bare.inference(seq, noise=NoiseConfig(0.15, 0))
        assert len(dets_full) == len(dets_bare)
        for a, b in zip(dets_full, dets_bare):
            assert a.score == b.score and a.box == b.box

    def test_zero_adaptor_fusion_reproduces_no_fusion_bitwise(self):
        cfg_fused = tiny_cfg(**{"model.head": "query", "query_fusion.form": "recurrent"})
        cfg_plain = tiny_cfg(**{"model.head": "query", "query_fusion.form": "none"})
        fused = build_model(cfg_fused, include_aux=True)
        plain = build_model(cfg_plain, include_aux=True)
        fused.query_adaptor.zero_final_layer()
        seq = batch_for(cfg_fused)[0]
        d_fused, _ = fused.inference(seq, noise=NoiseConfig(0.15, 0))
        d_plain, _ = plain.inference(seq, noise=NoiseConfig(0.15, 0))
        assert len(d_fused) == len(d_plain)
        for a, b in zip(d_fused, d_plain):
            assert a.score == b.score and a.box == b.box


class TestDetachPolicies:
    def frozen_history_grads(self, cfg, batch, noise):
        """Oracle: historical features computed under no_grad."""
        model = build_model(cfg, include_aux=True)
        obs, frames, t_idx = model.rasterize_window(batch[0], noise)
        feats = []
        for slot, o in enumerate(obs):
            if slot < len(obs) - 1:
                with torch.no_grad():
                    f = model.encoder.encode(o, slot)
            else:
                f = model.encoder.encode(o, slot)
            feats.append(f)
        feats = model.pos_embed(feats)
        head_out = model.main_forward(feats)
        loss = model.main_loss(head_out, batch[0].gt[t_idx])
        from hopbev.hop import hop_forward

        preds = hop_forward(feats, model.hop_cfg, model.hop_branch, model.aux_decoder())
        loss = loss + model.hop_cfg.aux_loss_weight * model.aux_loss_for(
            preds, hop_targets(batch[0], t_idx, model.hop_cfg.k)
        )
        loss.backward()
        return {k: (p.grad.clone() if p.grad is not None else None) for k, p in model.named_parameters()}

    def policy_grads(self, cfg, batch, noise, policy):
        model = build_model(cfg.with_overrides({"hop.detach_policy": policy}), include_aux=True)
        obs, frames, t_idx = model.rasterize_window(batch[0], noise)
        feats = model.encode_window(obs, detach_policy=policy)
        head_out = model.main_forward(feats)
        loss = model.main_loss(head_out, batch[0].gt[t_idx])
        from hopbev.hop import hop_forward

        preds = hop_forward(feats, model.hop_cfg, model.hop_branch, model.aux_decoder())
        loss = loss + model.hop_cfg.aux_loss_weight * model.aux_loss_for(
            preds, hop_targets(batch[0], t_idx, model.hop_cfg.k)
        )
        loss.backward()
        return model, {k: (p.grad.clone() if p.grad is not None else None) for k, p in model.named_parameters()}

    def test_full_detach_equals_frozen_history_oracle(self):
        cfg = tiny_cfg()
        batch = batch_for(cfg, seeds=(1,))
        noise = NoiseConfig(0.15, 0)
        oracle = self.frozen_history_grads(cfg, batch, noise)
        _, got = self.policy_grads(cfg, batch, noise, "full_detach")
        for name, g in got.items():
            o = oracle[name]
            if g is None or o is None:
                assert (g is None or g.abs().sum() == 0) and (o is None or o.abs().sum() == 0), name
            else:
                assert torch.allclose(g, o, atol=1e-9), name

    def test_keep_last_two_gradient_localization(self):
        cfg = tiny_cfg()
        batch = batch_for(cfg, seeds=(2,))
        noise = NoiseConfig(0.15, 0)
        model_full, full = self.policy_grads(cfg, batch, noise, "full_detach")
        model_keep, keep = self.policy_grads(cfg, batch, noise, "keep_last_two")
        stem_names = set()
        last_names = set()
        for name, p in model_keep.named_parameters():
            for q in model_keep.encoder.stem_parameters():
                if p is q:
                    stem_names.add(name)
            for q in model_keep.encoder.last_two_parameters():
                if p is q:
                    last_names.add(name)
        assert stem_names and last_names
        diff_last = 0.0
        for name in sorted(full):
            if full[name] is None or keep[name] is None:
                continue
            diff = (full[name] - keep[name]).abs().max().item()
            if name in stem_names:
                assert diff < 1e-9, f"historical gradients leaked into stem layer {name}"
            elif name in last_names:
                diff_last = max(diff_last, diff)
        assert diff_last > 0, "keep_last_two produced no extra gradient in the last two layers"


class TestHopTargets:
    def test_matches_direct_transform(self):
        cfg = tiny_cfg()
        seq = batch_for(cfg, seeds=(3,))[0]
        t_idx = seq.n_frames - 1
        for k in (1, 2, -1):
            got = hop_targets(seq, t_idx if k != -1 else t_idx - 1, k)
            ref_idx = t_idx if k != -1 else t_idx - 1
            expected = transform_boxes(
                seq.gt[ref_idx - k], pose_relative(seq.poses[ref_idx], seq.poses[ref_idx - k])
            )
            assert got == expected

    def test_static_world_zero_ego_targets_equal_gt(self):
        cfg = tiny_cfg(**{
            "world.object_speed": [0.0, 0.0],
            "world.ego_speed": [0.0, 0.0],
            "world.ego_turn_rate": [0.0, 0.0],
        })
        seq = generate_scene(5, cfg.world())
        t_idx = seq.n_frames - 1
        for k in (1, 2, 3):
            assert hop_targets(seq, t_idx, k) == seq.gt[t_idx - k]


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        cfg = tiny_cfg()
        model = build_model(cfg, include_aux=True)
        path = tmp_path / "model.ckpt"
        meta = save_checkpoint(model, path, step=7, metric_snapshot={"mAP": 0.5})
        loaded, meta2 = load_checkpoint(path)
        assert meta2["step"] == 7
        for (n1, p1), (n2, p2) in zip(model.named_parameters(), loaded.named_parameters()):
            assert n1 == n2
            assert torch.equal(p1, p2), n1
        seq = batch_for(cfg)[0]
        d1, _ = model.inference(seq)
        d2, _ = loaded.inference(seq)
        for a, b in zip(d1, d2):
            assert a.score == b.score and a.box == b.box

    def test_architecture_mismatch_lists_shapes(self, tmp_path):
        cfg = tiny_cfg()
        model = build_model(cfg, include_aux=True)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        other = build_model(tiny_cfg(**{"model.channels": 32}), include_aux=True)
        with pytest.raises(ArchitectureMismatchError) as err:
            load_parameters(other, path)
        assert err.value.mismatches

    def test_checksum_recomputation(self, tmp_path):
        import hashlib

        cfg = tiny_cfg()
        model = build_model(cfg, include_aux=False)
        path = tmp_path / "model.ckpt"
        meta = save_checkpoint(model, path)
        h = hashlib.sha256()
        for _, p in model.named_parameters():
            h.update(np.ascontiguousarray(p.detach().numpy()).tobytes())
        assert meta["params_sha256"] == h.hexdigest()

    def test_inference_build_allows_training_extras(self, tmp_path):
        cfg = tiny_cfg()
        model = build_model(cfg, include_aux=True)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        bare, _ = load_checkpoint(path, include_aux=False)
        assert bare.hop_branch is None


class TestRunTraining:
    @pytest.fixture()
    def dataset(self, tmp_path):
        cfg = tiny_cfg()
        data = tmp_path / "data"
        generate_dataset(cfg.seed, cfg.world(), cfg.grid(), data)
        return cfg, data

    def test_log_schema_and_artifacts(self, dataset, tmp_path):
        cfg, data = dataset
        out = tmp_path / "run"
        summary = run_training(cfg, data, out)
        assert (out / "checkpoint_final.ckpt").exists()
        assert (out / "checkpoint_best.ckpt").exists()
        assert (out / "config.json").exists()
        rows = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
        assert rows
        for row in rows:
            assert {"step", "loss_main", "loss_hop", "mAP"} <= set(row)
        assert "final" in summary and "composite" in summary["final"]

    def test_deterministic_loss_curves_float64(self, dataset, tmp_path):
        cfg, data = dataset
        s1 = run_training(cfg, data, tmp_path / "run1")
        s2 = run_training(cfg, data, tmp_path / "run2")
        rows1 = (tmp_path / "run1" / "metrics.jsonl").read_text()
        rows2 = (tmp_path / "run2" / "metrics.jsonl").read_text()
        assert rows1 == rows2
        assert s1["final"] == s2["final"]

    def test_resume_from_checkpoint(self, dataset, tmp_path):
        cfg, data = dataset
        out = tmp_path / "run"
        run_training(cfg, data, out)
        resumed = run_training(cfg, data, out, resume=True)
        assert resumed["steps"] == cfg.train["steps"]

    def test_loss_is_finite_and_all_terms_logged(self, dataset):
        cfg, data = dataset
        model = build_model(cfg, include_aux=True)
        opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
        from hopbev.synthworld import read_dataset

        _, seqs = read_dataset(data)
        terms = train_step(seqs[:2], model, opt, 0, noise=NoiseConfig(0.15, 0))
        for key in ("loss_total", "loss_main", "loss_hop", "loss_feat", "grad_norm"):
            assert math.isfinite(terms[key])


class TestInterchangeableDecoders:
    def test_query_head_as_aux_decoder(self):
        cfg = tiny_cfg(**{"hop.aux_head": "query"})
        model = build_model(cfg, include_aux=True)
        opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
        terms = train_step(batch_for(cfg), model, opt, 0, noise=NoiseConfig(0.1, 0))
        assert math.isfinite(terms["loss_hop"]) and terms["loss_hop"] > 0

    def test_center_head_as_main_with_query_aux_and_vice_versa(self):
        for main, aux in (("center", "query"), ("query", "center")):
            cfg = tiny_cfg(**{"model.head": main, "hop.aux_head": aux})
            model = build_model(cfg, include_aux=True)
            opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
            terms = train_step(batch_for(cfg), model, opt, 0, noise=NoiseConfig(0.1, 0))
            assert math.isfinite(terms["loss_total"])


def test_thread_cap_env(monkeypatch):
    import torch as _torch

    from hopbev.train import apply_thread_cap

    before = _torch.get_num_threads()
    monkeypatch.setenv("HOPBEV_NUM_THREADS", "1")
    apply_thread_cap()
    assert _torch.get_num_threads() == 1
    _torch.set_num_threads(before)
    monkeypatch.setenv("HOPBEV_NUM_THREADS", "not-a-number")
    with pytest.raises(ConfigError):
        apply_thread_cap()


def test_non_finite_loss_aborts_with_dump():
    from hopbev.errors import NonFiniteLossError

    cfg = tiny_cfg()
    model = build_model(cfg, include_aux=True)
    with torch.no_grad():
        model.encoder.convs[0].weight.fill_(float("nan"))
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
    with pytest.raises(NonFiniteLossError) as err:
        train_step(batch_for(cfg), model, opt, 3, noise=NoiseConfig(0.1, 0))
    assert err.value.dump["step"] == 3
    assert "loss_main" in err.value.dump and "seed" in err.value.dump


class TestConfig:
    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"nope": 1})
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"hop": {"bogus": True}})

    def test_fusion_requires_query_head(self):
        with pytest.raises(ConfigError):
            tiny_cfg(**{"query_fusion.form": "recurrent"})

    def test_future_k_needs_longer_sequences(self):
        with pytest.raises(ConfigError):
            tiny_cfg(**{"hop.k": -1, "world.n_frames": 5})
        tiny_cfg(**{"hop.k": -1, "world.n_frames": 6})

    def test_target_modes(self):
        cfg = tiny_cfg(**{"hop.target_mode": "both"})
        model = build_model(cfg, include_aux=True)
        opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
        terms = train_step(batch_for(cfg), model, opt, 0, noise=NoiseConfig(0.1, 0))
        assert terms["loss_feat"] > 0 and terms["loss_hop"] > 0
        cfg = tiny_cfg(**{"hop.target_mode": "features"})
        model = build_model(cfg, include_aux=True)
        opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
        terms = train_step(batch_for(cfg), model, opt, 0, noise=NoiseConfig(0.1, 0))
        assert terms["loss_feat"] > 0 and terms["loss_hop"] == 0.0
