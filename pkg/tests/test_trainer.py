import os

import numpy as np
import pytest
import torch

from vlinknet import trainer as T
from vlinknet.config import RunConfig, desk_config, load_config, save_config
from vlinknet.synthetic import blob_masks, textured_images


def tiny_config(**overrides):
    base = {"generator": {"base_channels": 2}, "batch_size": 2,
            "pretrain": {"steps": 2}, "adversarial": {"steps": 2}, "finetune": {"steps": 2}}
    base.update(overrides)
    return desk_config(**base)


@pytest.fixture
def data():
    return T.TrainingData(textured_images(4, 32, seed=1), blob_masks(3, 32, seed=2),
                          [f"i{k}" for k in range(4)], [f"m{k}" for k in range(3)])


def params(module):
    return [p.detach().clone() for p in module.parameters()]


# configuration ------------------------------------------------------------------------


def test_default_schedule():
    cfg = RunConfig()
    assert (cfg.pretrain.lr, cfg.adversarial.lr, cfg.finetune.lr) == (5e-4, 1e-4, 1e-5)
    assert cfg.batch_size == 5
    assert (cfg.adversarial.beta1, cfg.adversarial.beta2) == (0.5, 0.999)


def test_config_yaml_round_trip(tmp_path):
    cfg = tiny_config(seed=9)
    save_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml").to_dict() == cfg.to_dict()
    assert cfg.with_seed(4).seed == 4
    with pytest.raises(ValueError, match="bogus"):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(FileNotFoundError, match="missing.yaml"):
        load_config(tmp_path / "missing.yaml")


def test_resolution_propagates():
    cfg = tiny_config()
    assert cfg.generator.input_resolution == 32 == cfg.critic.input_resolution
    assert cfg.critic.resolution("local") == 16


# batches --------------------------------------------------------------------------------


def test_batches_are_pure_functions_of_seed_and_step(data):
    a = data.batch(3, 7, 2)
    b = data.batch(3, 7, 2)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1]) and a[2] == b[2]
    assert data.batch(4, 7, 2)[2] != a[2] or data.batch(3, 8, 2)[2] != a[2]


def test_epoch_visits_every_image(data):
    ids = [data.batch(0, s, 2)[2] for s in range(2)]
    seen = {i.split("|")[0] for batch in ids for i in batch}
    assert seen == {"i0", "i1", "i2", "i3"}


def test_load_training_data(image_dirs):
    images, masks = image_dirs
    cfg = tiny_config(data={"images": images, "masks": masks})
    d = T.load_training_data(cfg)
    assert d.images.shape == (4, 3, 32, 32) and d.masks.shape == (4, 1, 32, 32)
    with pytest.raises(ValueError):
        T.load_training_data(tiny_config())


# steps -----------------------------------------------------------------------------------


def test_zero_learning_rate_leaves_parameters(data):
    tr = T.Trainer(tiny_config(pretrain={"lr": 0.0}))
    before = params(tr.generator)
    gt, mask, ids = data.batch(0, 0, 2)
    tr.pretrain_step(gt, mask, ids)
    assert all(torch.equal(p, q) for p, q in zip(before, params(tr.generator)))


def test_pretrain_step_changes_parameters_and_logs(data):
    tr = T.Trainer(tiny_config())
    before = params(tr.generator)
    gt, mask, ids = data.batch(0, 0, 2)
    row = tr.pretrain_step(gt, mask, ids)
    assert row["step"] == 1 and row["phase"] == "pretrain"
    assert {"loss", "l_phi", "l_edge", "l_pix"} <= set(row)
    assert any(not torch.equal(p, q) for p, q in zip(before, params(tr.generator)))


def test_feature_edge_term_optional(data):
    tr = T.Trainer(tiny_config(losses={"feature_edge": 0.5}))
    row = tr.pretrain_step(*data.batch(0, 0, 2))
    assert "l_fedge" in row


def test_adversarial_step_clips_critics(data):
    tr = T.Trainer(tiny_config(n_critic=2))
    row = tr.adversarial_step(*data.batch(0, 0, 2))
    assert {"loss", "l_vgg", "l_rm", "l_pix", "l_adv", "critic"} <= set(row)
    assert max(p.abs().max().item() for p in tr.critics.parameters()) <= 0.01


def test_critics_start_inside_clip_box():
    tr = T.Trainer(tiny_config())
    assert max(p.abs().max().item() for p in tr.critics.parameters()) <= 0.01
    gp = T.Trainer(tiny_config(critic={"lipschitz": "gp"}))
    assert max(p.abs().max().item() for p in gp.critics.parameters()) > 0.01


def test_adversarial_step_gradient_penalty(data):
    tr = T.Trainer(tiny_config(critic={"lipschitz": "gp"}))
    row = tr.adversarial_step(*data.batch(0, 0, 2))
    assert np.isfinite(row["loss"])


def test_finetune_step_and_phase_order(data):
    tr = T.Trainer(tiny_config())
    tr.finetune_step(*data.batch(0, 0, 2))
    with pytest.raises(T.PhaseError):
        tr.pretrain_step(*data.batch(0, 1, 2))
    assert tr.phase_done == {"pretrain": 0, "adversarial": 0, "finetune": 1}


def test_nan_loss_reports_batch_ids(data):
    tr = T.Trainer(tiny_config(generator={"base_channels": 2, "check_finite": False}))
    gt, mask, ids = data.batch(0, 0, 2)
    gt = gt.clone()
    gt[0, 0, 0, 0] = float("nan")
    with pytest.raises(T.TrainingDivergedError, match=ids[0].replace("|", r"\|")):
        tr.pretrain_step(gt, mask, ids)


def test_run_phase_with_log_and_checkpoints(tmp_path, data):
    tr = T.Trainer(tiny_config())
    log = T.LossLog(tmp_path / "l.csv", seed=0)
    rows = T.run_phase(tr, "pretrain", data, 3, log, tmp_path, checkpoint_every=2)
    log.close()
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == "# seed=0" and lines[1].startswith("step,phase,loss")
    assert len(lines) == 5 and len(rows) == 3
    assert float(lines[2].split(",")[2]) == rows[0]["loss"]
    assert os.path.exists(tmp_path / "step0000002.ckpt")


def test_phase_steps_from_epochs(data):
    cfg = tiny_config(adversarial={"epochs": 3, "steps": None})
    assert T.phase_steps(cfg, "adversarial", data) == 3 * 2


# checkpoints ------------------------------------------------------------------------------


def test_resume_matches_uninterrupted(tmp_path, data):
    cfg = tiny_config()
    ref = T.Trainer(cfg)
    T.run_phase(ref, "pretrain", data, 2)
    T.save_checkpoint(ref, tmp_path / "mid.ckpt")
    expected = [r["loss"] for r in T.run_phase(ref, "adversarial", data, 3)]
    resumed = T.load_checkpoint(tmp_path / "mid.ckpt")
    got = [r["loss"] for r in T.run_phase(resumed, "adversarial", data, 3)]
    assert got == expected
    assert T.tensor_digest(resumed.generator) == T.tensor_digest(ref.generator)


def test_checkpoint_bytes_deterministic(tmp_path, data):
    def run(path):
        tr = T.Trainer(tiny_config())
        T.run_phase(tr, "pretrain", data, 2)
        T.save_checkpoint(tr, path)
        return path.read_bytes()

    assert run(tmp_path / "a.ckpt") == run(tmp_path / "b.ckpt")


def test_truncated_and_corrupt_checkpoints(tmp_path):
    tr = T.Trainer(tiny_config())
    path = tmp_path / "c.ckpt"
    T.save_checkpoint(tr, path)
    raw = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(T.CheckpointIntegrityError):
        T.load_checkpoint(tmp_path / "trunc.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(b"PK" + raw[2:])
    with pytest.raises(T.CheckpointIntegrityError):
        T.read_checkpoint(tmp_path / "magic.ckpt")
    (tmp_path / "ver.ckpt").write_bytes(raw.replace(b"VLINKNET-CKPT 1\n", b"VLINKNET-CKPT 7\n", 1))
    with pytest.raises(T.CheckpointVersionError, match="7"):
        T.read_checkpoint(tmp_path / "ver.ckpt")
    with pytest.raises(FileNotFoundError, match="none.ckpt"):
        T.read_checkpoint(tmp_path / "none.ckpt")
    assert not os.path.exists(str(path) + ".tmp")


# test-time optimization -------------------------------------------------------------------


def test_stochastic_clip():
    g = torch.Generator().manual_seed(0)
    x = torch.tensor([0.5, -2.0, 3.0, -0.99, 1.0])
    y = T.stochastic_clip(x, 1.0, g)
    assert y[0] == 0.5 and y[3] == -0.99 and y[4] == 1.0
    assert y.abs().max() <= 1.0 and y[1] != -2.0


def test_test_time_contract(data):
    tr = T.Trainer(tiny_config())
    gt, mask, _ = data.batch(0, 0, 1)
    digest = T.tensor_digest(tr.generator)
    seen = []
    res = T.test_time_optimize(tr.generator, tr.extractor, gt[0], mask[0], 4,
                               callback=lambda d: seen.append(d.abs().max().item()))
    assert T.tensor_digest(tr.generator) == digest
    assert all(p.requires_grad for p in tr.generator.parameters())
    assert tr.generator.training
    assert all(b <= a for a, b in zip(res.objectives, res.objectives[1:]))
    assert len(seen) == 4 and max(seen) <= 1.0
    assert res.image.shape == gt[0].shape
    known = mask[0].expand_as(gt[0]) == 1
    assert torch.equal(res.image[known], gt[0][known])
    with pytest.raises(ValueError):
        T.test_time_optimize(tr.generator, tr.extractor, gt[0], mask[0], 0)
