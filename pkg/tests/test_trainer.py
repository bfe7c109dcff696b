import csv
import json

import numpy as np
import pytest
import torch

from crossseq import trainer as T
from crossseq.config import ConfigError, ExperimentConfig, config_hash, from_dict, load_config, save_config
from crossseq.data import list_subjects, save_subject
from crossseq.losses import supervised_loss
from crossseq.metrics import evaluate_masks
from crossseq.trainer import (
    COMPONENTS, CheckpointError, TrainingAborted, ablation_variants, build_model, build_split, evaluate,
    load_checkpoint, predict_probabilities, run_ablation, save_checkpoint, train,
)
from conftest import tiny_config


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = tiny_config(epochs=1)
    return cfg, out, train(cfg, out)


def test_smoke_run_outputs(trained):
    cfg, out, res = trained
    assert len(res.steps) == cfg.steps_per_epoch and len(res.epochs) == 1
    for name in ("checkpoint.pt", "log_steps.csv", "log_epochs.csv", "loss_curves.png", "config.yaml",
                 "split.jsonl", "cse/cse_epoch_000.csv"):
        assert (out / name).exists(), name
    rows = list(csv.DictReader((out / "log_steps.csv").open()))
    assert len(rows) == cfg.steps_per_epoch
    assert {"sup", "dcp", "cons", "total", "cons_weight", "accepted"} <= set(rows[0])
    audit = list(csv.DictReader((out / "cse/cse_epoch_000.csv").open()))
    assert len(audit) == cfg.steps_per_epoch * cfg.batch_unlabeled
    assert res.checkpoint.epoch == 1


def test_teacher_is_ema_of_student(trained):
    _, _, res = trained
    s = dict(res.student.named_parameters())
    moved = [name for name, p in res.teacher.named_parameters() if not torch.equal(p, s[name])]
    assert moved
    assert not any(p.requires_grad for p in res.teacher.parameters())


def test_without_cse_every_unlabeled_sample_counts(tmp_path):
    res = train(tiny_config(epochs=1, use_cse=False), tmp_path)
    assert all(r["accepted"] == r["scored"] == 2 for r in res.steps)
    assert not (tmp_path / "cse").exists() or not any((tmp_path / "cse").iterdir())
    assert all(r["cons"] > 0 for r in res.steps)


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg = tiny_config(epochs=5)
    full = train(cfg, None, plots=False)
    part = train(cfg, tmp_path, stop_after=2, plots=False)
    assert part.checkpoint.epoch == 2
    ckpt = load_checkpoint(tmp_path / "checkpoint.pt", expected=cfg)
    rest = train(cfg, None, resume=ckpt, plots=False)
    a = [r["total"] for r in full.steps]
    b = [r["total"] for r in rest.steps]
    assert len(a) == len(b) == 5 * cfg.steps_per_epoch
    assert max(abs(x - y) for x, y in zip(a, b)) <= 1e-6
    for k, v in full.checkpoint.teacher.items():
        assert torch.allclose(v.float(), rest.checkpoint.teacher[k].float(), atol=1e-6)


def test_teacher_audit_passes():
    res = train(tiny_config(epochs=1, audit_teacher=True), None, plots=False)
    assert len(res.steps) == 3


def test_non_finite_loss_aborts_with_batch_ids(tmp_path, monkeypatch):
    monkeypatch.setattr(T, "supervised_loss", lambda pred, y: supervised_loss(pred, y) * float("nan"))
    with pytest.raises(TrainingAborted, match="batch"):
        train(tiny_config(epochs=1), tmp_path)
    dump = json.loads((tmp_path / "abort_batch.json").read_text())
    assert dump["epoch"] == 0 and dump["step"] == 0 and len(dump["batch"]) == 4


def test_zero_beta_no_unlabeled_is_plain_supervised_training():
    cfg = tiny_config(epochs=2, use_cse=False, use_unlabeled=False, augment=False, **{"weights.beta": 0.0})
    res = train(cfg, None, plots=False)

    # independent supervised loop over the same labeled batches
    split = build_split(cfg)
    torch.manual_seed(cfg.seed)
    net = build_model(cfg)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    n, bs = len(split.labeled), cfg.batch_labeled
    losses = []
    for _ in range(cfg.epochs):
        need = cfg.steps_per_epoch * bs
        order = np.concatenate([rng.permutation(n) for _ in range(-(-need // n))])[:need]
        for step in range(cfg.steps_per_epoch):
            pairs = [split.labeled[i] for i in order[step * bs:(step + 1) * bs]]
            t1 = torch.tensor(np.stack([p.t1 for p in pairs])[:, None], dtype=torch.float32)
            fa = torch.tensor(np.stack([p.fa for p in pairs])[:, None], dtype=torch.float32)
            y = torch.tensor(np.stack([p.label for p in pairs])[:, None], dtype=torch.float32)
            loss = cfg.weights.alpha * supervised_loss(net(t1, fa).pred, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            net.clamp_()
            losses.append(float(loss.detach()))
    assert np.allclose([r["total"] for r in res.steps], losses, atol=1e-6)
    for name, p in net.state_dict().items():
        assert torch.allclose(p.float(), res.student.state_dict()[name].float(), atol=1e-5)


def test_augmentation_geometry_shared_and_label_untouched():
    rng = np.random.default_rng(0)
    t1 = np.arange(16.0).reshape(4, 4)
    lab = (t1 % 3 == 0).astype(np.uint8)
    flips = 0
    for _ in range(20):
        a1, afa, alab = T._augment(rng, t1, t1.copy(), lab)
        flipped = not np.array_equal(alab, lab)
        flips += flipped
        assert set(np.unique(alab)) <= {0, 1}
        expected = lab[:, ::-1] if flipped else lab
        np.testing.assert_array_equal(alab, expected)
        # intensity jitter is affine, so the flip is still visible in the ordering of t1
        ref = t1[:, ::-1] if flipped else t1
        assert np.corrcoef(a1.ravel(), ref.ravel())[0, 1] == pytest.approx(1.0)
    assert 0 < flips < 20


# evaluation


def test_evaluate_deterministic_and_uses_teacher(trained):
    _, out, res = trained
    a = evaluate(out / "checkpoint.pt", res.split.test)
    b = evaluate(res.checkpoint, res.split.test)
    assert a == b and len(a) == 2
    c = evaluate(res.teacher, res.split.test)
    assert [r.dsc for r in c] == [r.dsc for r in a]


def test_ground_truth_as_prediction_is_perfect(trained):
    _, _, res = trained
    for s in res.split.test:
        r = evaluate_masks(s.label.voxels, s.label.voxels, s.label.spacing)
        assert (r.dsc, r.hd95, r.asd) == (1.0, 0.0, 0.0)


def test_threshold_only_changes_binarization(trained):
    _, _, res = trained
    net = T.model_from_checkpoint(res.checkpoint)
    subj = res.split.test[0]
    probs = predict_probabilities(net, subj)
    np.testing.assert_array_equal(probs, predict_probabilities(net, subj))
    for thr in (0.5, 0.9):
        got = evaluate(res.checkpoint, [subj], threshold=thr)[0]
        want = evaluate_masks((probs >= thr).astype(np.uint8), subj.label.voxels, subj.label.spacing,
                              subject=subj.subject)
        assert got == want


def test_missing_sequence_only_fails_that_subject(trained, tmp_path):
    _, _, res = trained
    for s in res.split.test:
        save_subject(s, tmp_path)
    broken = tmp_path / res.split.test[0].subject
    next(broken.glob("fa.nii*")).unlink()
    errors = {}
    out = evaluate(res.checkpoint, list_subjects(tmp_path), errors=errors)
    assert len(out) == 1 and list(errors) == [res.split.test[0].subject]


# checkpoints


def test_checkpoint_refuses_config_mismatch(trained, tmp_path):
    cfg, out, _ = trained
    other = cfg.replace(lr=5e-4)
    with pytest.raises(CheckpointError):
        load_checkpoint(out / "checkpoint.pt", expected=other)
    ck = load_checkpoint(out / "checkpoint.pt", expected=other, force=True)
    assert ck.config_hash == config_hash(cfg)
    with pytest.raises(CheckpointError):
        train(other, None, resume=ck)


def test_checkpoint_tamper_and_format(trained, tmp_path):
    _, out, _ = trained
    payload = torch.load(out / "checkpoint.pt", weights_only=False)
    payload["config"]["lr"] = 1.0
    torch.save(payload, tmp_path / "tampered.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "tampered.pt")
    payload["format"] = "other"
    torch.save(payload, tmp_path / "foreign.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "foreign.pt", force=True)


def test_checkpoint_roundtrip(trained, tmp_path):
    _, _, res = trained
    path = save_checkpoint(res.checkpoint, tmp_path / "c.pt")
    back = load_checkpoint(path)
    assert back.epoch == res.checkpoint.epoch
    assert all(torch.equal(v, back.student[k]) for k, v in res.checkpoint.student.items())


# configuration


def test_config_defaults():
    cfg = ExperimentConfig()
    assert (cfg.lr, cfg.weight_decay, cfg.epochs) == (2e-4, 1e-5, 200)
    assert (cfg.weights.alpha, cfg.weights.beta, cfg.M, cfg.threshold) == (10, 1, 3, 0.05)


def test_config_yaml_roundtrip(tmp_path):
    cfg = tiny_config(seed=7)
    save_config(cfg, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back == cfg and config_hash(back) == config_hash(cfg)
    assert config_hash(cfg.replace(seed=8)) != config_hash(cfg)


def test_config_rejects_unknown_and_invalid():
    with pytest.raises(ConfigError):
        from_dict({"learning_rate": 0.1})
    with pytest.raises(ConfigError):
        from_dict({"weights": {"gama": 1}})
    with pytest.raises(ConfigError):
        from_dict({"epsilon": 1.0})
    with pytest.raises(ConfigError):
        tiny_config().replace(nope=1)


# ablations


def test_ablation_variants():
    base = tiny_config()
    names = [n for n, _ in ablation_variants(base, "components", [])]
    assert names == list(COMPONENTS) == ["Model 1", "Model 2", "Model 3", "ours"]
    variants = dict(ablation_variants(base, "components", []))
    assert not variants["Model 1"].use_dcp and not variants["Model 1"].use_cse
    assert variants["ours"].use_dcp and variants["ours"].use_cse
    ab = ablation_variants(base, "alpha_beta", ["10:1", "1:1"])
    assert [c.weights.alpha for _, c in ab] == [10, 1]
    assert [c.threshold for _, c in ablation_variants(base, "thres", ["0.01", "0.1"])] == [0.01, 0.1]
    with pytest.raises(ValueError):
        ablation_variants(base, "depth", [1])


def test_ablation_table_rows_and_determinism(tmp_path):
    base = tiny_config(epochs=1)
    table = run_ablation(base, "M", ["1", "3"], out_dir=tmp_path)
    assert [n for n, _ in table.rows] == ["M=1", "M=3"]
    text = table.text()
    assert "DSC" in text and "HD95 (mm)" in text and "ASD (mm)" in text
    assert (tmp_path / "ablation_M.csv").exists() and (tmp_path / "ablation_M.png").exists()
    again = run_ablation(base, "M", ["3"])
    assert again.rows[0][1] == table.rows[1][1]
