import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from essnet.data import LabelMap
from essnet.evaluation import oracle_split
from essnet.losses import LossWeights
from essnet.networks import Generator, images_to_tensor, labels_to_tensor
from essnet.trainer import (
    CheckpointError,
    NumericError,
    TrainConfig,
    TrainingRun,
    argmax_labels,
    best_epoch_index,
    infer_segmentation,
    init_state,
    load_checkpoint,
    save_checkpoint,
    select_best_epoch,
    train,
    train_step,
    train_two_stage,
    translate,
)


def _batch(bundle, i=0, j=0):
    x = images_to_tensor([bundle.A_train.items[i].image])
    m = labels_to_tensor([bundle.A_train.items[i].labels])
    y = images_to_tensor([bundle.B_train.items[j].image])
    return x, m, y


def test_train_step_report_identity(tiny_bundle, tiny_config):
    state = init_state(tiny_config)
    _, rep = train_step(state, *_batch(tiny_bundle))
    w = tiny_config.weights
    assert rep.total == w.gan_g1 * rep.gan_G1 + w.gan_g2 * rep.gan_G2 + w.cycle_a * rep.cycle_A \
        + w.cycle_b * rep.cycle_B + w.seg * rep.seg
    assert all(np.isfinite(v) for v in rep.as_dict().values())


def test_train_step_reproducible(tiny_bundle, tiny_config):
    def run():
        state = init_state(tiny_config)
        return [train_step(state, *_batch(tiny_bundle, k % 4, k % 3))[1] for k in range(4)]

    assert run() == run()


def test_discriminator_update_leaves_generators_alone(tiny_bundle, tiny_config):
    # zero generator-side weights: only the discriminator steps can move anything
    state = init_state(replace(tiny_config, weights=LossWeights(0, 0, 0, 0, 0)))
    g1 = [p.detach().clone() for p in state.nets["G1"].parameters()]
    d1 = [p.detach().clone() for p in state.nets["D1"].parameters()]
    train_step(state, *_batch(tiny_bundle))
    assert all(torch.equal(a, b) for a, b in zip(g1, state.nets["G1"].parameters()))
    assert any(not torch.equal(a, b) for a, b in zip(d1, state.nets["D1"].parameters()))


def test_seg_only_objective_reduces_seg_loss(tiny_bundle, tiny_config):
    cfg = replace(tiny_config, weights=LossWeights(0, 0, 0, 0, 1), lr_g=1e-3)
    state = init_state(cfg)
    for p in state.nets["G1"].parameters():
        p.requires_grad_(False)
    x, m, y = _batch(tiny_bundle)
    losses = [train_step(state, x, m, y)[1].seg for _ in range(10)]
    assert losses[-1] < losses[0]


def test_non_finite_loss_raises(tiny_bundle, tiny_config):
    state = init_state(tiny_config)
    x, m, y = _batch(tiny_bundle)
    with pytest.raises(NumericError):
        train_step(state, x * float("nan"), m, y)


def test_train_records_and_sequestration(tmp_path, tiny_bundle, tiny_config):
    run = train(tiny_config, tiny_bundle, tmp_path / "run")
    assert [r.epoch for r in run.records] == [1, 2]
    assert all(np.isfinite(v) for r in run.records for v in r.losses.values())
    assert all(0 <= r.val_dice <= 1 for r in run.records)
    assert tiny_bundle.B_train.labels.access_count == 0
    lines = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("epoch,gan_G1") and len(lines) == 3


def test_two_stage_never_builds_segmenter_in_synthesis(tmp_path, tiny_bundle, tiny_config):
    syn, seg = train_two_stage(tiny_config, tiny_bundle, tmp_path / "ts")
    ck = load_checkpoint(syn.last_checkpoint)
    assert "S" not in ck.arch
    assert not any(k.startswith("net/S/") for k in ck.tensors)
    assert set(load_checkpoint(seg.last_checkpoint).arch) == {"S"}
    assert tiny_bundle.B_train.labels.access_count == 0


def test_modes_share_architectures(tiny_config):
    ess = init_state(tiny_config)
    syn = init_state(replace(tiny_config, mode="two_stage_synthesis"))
    seg = init_state(replace(tiny_config, mode="seg_only"))
    for role in ("G1", "G2", "D1", "D2"):
        assert ess.nets[role].config == syn.nets[role].config
    assert ess.nets["S"].config == seg.nets["S"].config
    assert ess.optimizers["gen"].defaults["lr"] == seg.optimizers["gen"].defaults["lr"] == 1e-4


def test_seg_only_on_b_needs_oracle(tmp_path, tiny_bundle, tiny_config):
    cfg = replace(tiny_config, mode="seg_only", seg_source="B", epochs=1)
    with pytest.raises(ValueError):
        train(cfg, tiny_bundle, tmp_path / "o")
    run = train(cfg, tiny_bundle, tmp_path / "o", oracle_split=oracle_split(tiny_bundle))
    assert len(run.records) == 1
    assert tiny_bundle.B_train.labels.access_count == len(tiny_bundle.B_train)


@pytest.mark.parametrize("dices,expected", [([0.2, 0.8, 0.8, 0.5], 1), ([0.3], 0), ([0.1, 0.2, 0.3], 2),
                                            ([float("nan")] * 3, 2)])
def test_best_epoch_index(dices, expected):
    assert best_epoch_index(dices) == expected


def test_best_epoch_empty():
    with pytest.raises(ValueError):
        best_epoch_index([])
    with pytest.raises(ValueError):
        select_best_epoch(TrainingRun(TrainConfig()))


def test_select_best_epoch_loads_argmax(tmp_path, tiny_bundle, tiny_config):
    run = train(replace(tiny_config, epochs=3), tiny_bundle, tmp_path / "r")
    ck = select_best_epoch(run)
    assert ck.epoch == best_epoch_index(run.val_dice) + 1
    run_bl = train(replace(tiny_config, epochs=3, keep_checkpoints="best_last"), tiny_bundle, tmp_path / "bl")
    assert select_best_epoch(run_bl).epoch == ck.epoch


def test_checkpoint_round_trip_bytes(tmp_path, tiny_bundle, tiny_config):
    state = init_state(tiny_config)
    for k in range(3):
        train_step(state, *_batch(tiny_bundle, k, k))
    save_checkpoint(state, tmp_path / "a")
    save_checkpoint(load_checkpoint(tmp_path / "a"), tmp_path / "b")
    for name in ("manifest.json", "tensors.f32"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_checkpoint_manifest_tampering(tmp_path, tiny_config):
    save_checkpoint(init_state(tiny_config), tmp_path / "c")
    path = tmp_path / "c" / "manifest.json"
    manifest = json.loads(path.read_text())
    good = path.read_text()
    manifest["tensors"][0]["shape"][0] += 1
    path.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c")
    manifest = json.loads(good)
    manifest["arch"]["G1"]["kind"] = "transformer"
    path.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c")
    manifest = json.loads(good)
    manifest["arch"]["G9"] = manifest["arch"]["G1"]
    path.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c")


def test_resume_matches_uninterrupted(tmp_path, tiny_bundle, tiny_config):
    cfg = replace(tiny_config, epochs=3)
    full = train(cfg, tiny_bundle, tmp_path / "full")
    part = train(cfg, tiny_bundle, tmp_path / "part", stop_after=2)
    resumed = train(cfg, tiny_bundle, tmp_path / "part", resume_from=part.last_checkpoint)
    assert [r.losses for r in resumed.records] == [r.losses for r in full.records]
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "part" / "metrics.csv").read_bytes()


def test_translate_shape_range_determinism(tiny_bundle, tiny_config):
    g1 = init_state(tiny_config).nets["G1"]
    img = tiny_bundle.A_train.items[0].image
    out = translate(g1, img)
    assert out.shape == img.shape and out.modality == "B"
    assert np.abs(out.pixels).max() < 1
    np.testing.assert_array_equal(out.pixels, translate(g1, img).pixels)


def test_argmax_rules():
    probs = np.zeros((7, 2, 2))
    probs[3] = 1.0
    assert (argmax_labels(probs) == 3).all()
    tie = np.zeros((7, 1, 1))
    tie[2] = tie[5] = 0.5
    assert argmax_labels(tie)[0, 0] == 2


def test_argmax_naive_oracle():
    rng = np.random.default_rng(0)
    probs = rng.random((7, 6, 5))
    probs[:, 0, 0] = 0.3  # full tie
    got = argmax_labels(probs)
    for i in range(6):
        for j in range(5):
            best, best_c = -1.0, -1
            for c in range(7):
                if probs[c, i, j] > best:
                    best, best_c = probs[c, i, j], c
            assert got[i, j] == best_c


def test_inference_uses_only_segmenter(tiny_bundle, tiny_config):
    state = init_state(tiny_config)
    calls = {"G": 0}

    def hook(*_):
        calls["G"] += 1

    handles = [state.nets[r].register_forward_hook(hook) for r in ("G1", "G2")]
    orig = Generator.forward

    def counting(self, x):
        if self.role in ("G1", "G2"):
            calls["G"] += 1
        return orig(self, x)

    Generator.forward = counting
    try:
        lab = infer_segmentation(state.nets["S"], tiny_bundle.B_test.items[0].image)
    finally:
        Generator.forward = orig
        for h in handles:
            h.remove()
    assert isinstance(lab, LabelMap) and lab.shape == (32, 32)
    assert calls["G"] == 0
