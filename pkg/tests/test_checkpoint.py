"""Checkpoint container: canonical serialization, corruption detection, and
model reconstruction."""

import numpy as np
import pytest

from fusionmt.checkpoint import (
    Checkpoint,
    CheckpointError,
    build_fused,
    build_lm,
    build_nmt,
    checkpoint_from_fused,
    checkpoint_from_lm,
    checkpoint_from_nmt,
    load_checkpoint,
    param_digests,
    restore_params,
    save_checkpoint,
    snapshot_params,
)
from fusionmt.models import FusedModel, LmConfig, NmtConfig, NmtModel, RnnLm


def tiny_nmt(seed=0):
    return NmtModel(NmtConfig(src_vocab=6, tgt_vocab=5, embed_dim=3,
                              hidden=4), np.random.default_rng(seed))


def tiny_lm(seed=0):
    return RnnLm(LmConfig(vocab=5, embed_dim=3, hidden=4),
                 np.random.default_rng(seed))


class TestContainer:
    def test_save_load_save_byte_identical(self, tmp_path):
        ckpt = checkpoint_from_nmt(tiny_nmt(), meta={"updates": 7,
                                                     "best_dev_bleu": 33.25})
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, ckpt)
        save_checkpoint(p2, load_checkpoint(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_values_roundtrip_exactly(self, tmp_path):
        model = tiny_nmt(seed=3)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, checkpoint_from_nmt(model))
        loaded = load_checkpoint(path)
        for p in model.params:
            np.testing.assert_array_equal(loaded.params[p.id], p.value.data)

    def test_meta_types_preserved(self, tmp_path):
        ckpt = Checkpoint("lm", {"vocab": 5, "embed_dim": 3, "hidden": 4},
                          snapshot_params(tiny_lm().params),
                          meta={"updates": 3, "best_dev_perplexity": 1.25,
                                "flag": True, "note": "plain"})
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, ckpt)
        meta = load_checkpoint(path).meta
        assert meta == {"updates": 3, "best_dev_perplexity": 1.25,
                        "flag": True, "note": "plain"}

    def test_corruption_detected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, checkpoint_from_lm(tiny_lm()))
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncation_detected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, checkpoint_from_lm(tiny_lm()))
        path.write_bytes(path.read_bytes()[:-40])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"something else entirely, long enough to parse ok")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


class TestModelReconstruction:
    def test_nmt_roundtrip(self, tmp_path):
        model = tiny_nmt(seed=1)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, checkpoint_from_nmt(model))
        rebuilt = build_nmt(load_checkpoint(path))
        assert rebuilt.cfg == model.cfg
        assert param_digests(rebuilt.params) == param_digests(model.params)

    def test_lm_roundtrip(self, tmp_path):
        lm = tiny_lm(seed=2)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, checkpoint_from_lm(lm))
        rebuilt = build_lm(load_checkpoint(path))
        assert param_digests(rebuilt.params) == param_digests(lm.params)

    def test_fused_roundtrip(self, tmp_path):
        fm = FusedModel(tiny_nmt(seed=3), tiny_lm(seed=4),
                        np.random.default_rng(5))
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, checkpoint_from_fused(fm))
        rebuilt = build_fused(load_checkpoint(path))
        assert param_digests(rebuilt.params) == param_digests(fm.params)
        trainable = sorted(p.id for p in rebuilt.params.trainable())
        assert all(t.startswith(("fuse.ctrl", "fuse.out")) for t in trainable)

    def test_kind_mismatch(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, checkpoint_from_lm(tiny_lm()))
        with pytest.raises(CheckpointError):
            build_nmt(load_checkpoint(path))

    def test_restore_shape_guard(self):
        model = tiny_nmt()
        values = snapshot_params(model.params)
        values["nmt.W_init"] = np.zeros((2, 2))
        with pytest.raises(CheckpointError):
            restore_params(model.params, values)

    def test_restore_missing_param_guard(self):
        model = tiny_nmt()
        values = snapshot_params(model.params)
        del values["nmt.W_init"]
        with pytest.raises(CheckpointError):
            restore_params(model.params, values)


class TestParamDigests:
    def test_detects_single_bit_change(self):
        model = tiny_nmt()
        before = param_digests(model.params)
        model.params.get("nmt.b_init").value.data[0] += 1e-300
        after = param_digests(model.params)
        assert before != after
        changed = [k for k in before if before[k] != after[k]]
        assert changed == ["nmt.b_init"]

    def test_selector(self):
        model = tiny_nmt()
        subset = param_digests(model.params,
                               lambda p: p.id.startswith("nmt.attn"))
        assert sorted(subset) == ["nmt.attn.U_a", "nmt.attn.V_a",
                                  "nmt.attn.W_a", "nmt.attn.b_a",
                                  "nmt.attn.v_a"]
