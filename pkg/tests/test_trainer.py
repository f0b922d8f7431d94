"""Trainer tests: config files, LR schedule, loop invariants, checkpoint
round trips, resume equivalence, and the ablation table."""

import math
import os
from dataclasses import asdict, replace
from fractions import Fraction

import numpy as np
import pytest
import torch

from depthprompt.data import Sample, default_scene_spec, generate_scene_full
from depthprompt.depth_branch import OraclePseudoLabelProvider
from depthprompt.errors import (
    ConfigError,
    DivergenceError,
    InputError,
    MissingLabelError,
)
from depthprompt.trainer import (
    ABLATION_TOGGLES,
    DEFAULT_BATCH_SIZES,
    TrainConfig,
    _epoch_order,
    build_training_set,
    evaluate,
    load_checkpoint,
    loss_log_from_text,
    loss_log_to_text,
    lr_at,
    read_config,
    restore_model,
    run_ablation,
    schedule_boundaries,
    train,
    write_config,
)


def make_dataset(n_tiles, size=64, seed0=100):
    samples = []
    heights = {}
    for k in range(n_tiles):
        scene = generate_scene_full(default_scene_spec(seed=seed0 + k, size=size))
        samples.append(Sample(tile=scene.tile, mask=scene.mask))
        heights[scene.tile.tile_id] = scene.height
    return samples, OraclePseudoLabelProvider(heights)


# ---------------------------------------------------------------- config


def test_default_recipe_values():
    cfg = TrainConfig()
    assert cfg.lr0 == 1e-4
    assert cfg.weight_decay == 0.001
    assert (cfg.beta1, cfg.beta2) == (0.9, 0.95)
    assert cfg.epochs == 50
    assert cfg.milestones == (0.3, 0.6)
    assert cfg.gamma == 0.2
    assert DEFAULT_BATCH_SIZES == {"tiny": 8, "vit_s": 8, "vit_b": 4, "vit_l": 2}
    cfg.validate()


@pytest.mark.parametrize(
    "bad",
    [
        dict(lr0=0.0),
        dict(lr0=-1e-4),
        dict(gamma=1.0),
        dict(gamma=0.0),
        dict(milestones=(0.6, 0.3)),
        dict(milestones=(0.3, 0.3)),
        dict(milestones=(0.0, 0.6)),
        dict(epochs=0),
        dict(backbone="resnet50"),
        dict(batch_size=0),
        dict(max_steps=0),
        dict(weight_decay=-0.1),
    ],
)
def test_config_validation_rejects(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad).validate()


def test_resolved_batch_size_per_backbone():
    assert TrainConfig(backbone="tiny").resolved_batch_size() == 8
    assert TrainConfig(backbone="vit_l").resolved_batch_size() == 2
    assert TrainConfig(backbone="vit_l", batch_size=6).resolved_batch_size() == 6


def test_config_file_roundtrip(tmp_path):
    cfg = TrainConfig(
        backbone="vit_s",
        adapter_enabled=False,
        lr0=3e-4,
        milestones=(0.25, 0.75),
        batch_size=None,
        max_steps=123,
        seed=9,
    )
    path = str(tmp_path / "run.cfg")
    write_config(path, cfg)
    assert asdict(read_config(path)) == asdict(cfg)


def test_config_file_comments_and_errors(tmp_path):
    path = str(tmp_path / "run.cfg")
    with open(path, "w") as fh:
        fh.write("# a comment line\n")
        fh.write("lr0 = 0.0002  # inline comment\n")
        fh.write("\n")
    cfg = read_config(path)
    assert cfg.lr0 == 2e-4

    with open(path, "w") as fh:
        fh.write("learning_rate = 0.1\n")
    with pytest.raises(ConfigError):
        read_config(path)

    with open(path, "w") as fh:
        fh.write("epochs = many\n")
    with pytest.raises(ConfigError):
        read_config(path)

    with pytest.raises(ConfigError):
        read_config(str(tmp_path / "missing.cfg"))


# -------------------------------------------------------------- schedule


def test_schedule_boundaries_match_exact_ceil():
    cfg = TrainConfig()
    for total in (7, 300, 1000, 2867, 12345):
        expect = [
            math.ceil(Fraction(3, 10) * total),
            math.ceil(Fraction(3, 5) * total),
        ]
        assert schedule_boundaries(total, cfg) == expect
    assert schedule_boundaries(300, cfg) == [90, 180]
    assert schedule_boundaries(1000, cfg) == [300, 600]


def test_lr_values_are_exact_floats():
    cfg = TrainConfig()
    assert lr_at(0, 1000, cfg) == 1e-4
    assert lr_at(299, 1000, cfg) == 1e-4
    assert lr_at(300, 1000, cfg) == 2e-5
    assert lr_at(500, 1000, cfg) == 2e-5
    assert lr_at(600, 1000, cfg) == 4e-6
    assert lr_at(900, 1000, cfg) == 4e-6
    # naive repeated float multiplication lands on 4.000000000000001e-06
    assert 1e-4 * 0.2 * 0.2 != 4e-6
    assert lr_at(999, 1000, cfg) == 4e-6


def test_lr_piecewise_constant_three_values():
    cfg = TrainConfig()
    total = 97
    values = [lr_at(s, total, cfg) for s in range(total)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert sorted(set(values)) == [4e-6, 2e-5, 1e-4]
    b1, b2 = schedule_boundaries(total, cfg)
    assert values[b1 - 1] == 1e-4 and values[b1] == 2e-5
    assert values[b2 - 1] == 2e-5 and values[b2] == 4e-6


def test_lr_step_out_of_range():
    cfg = TrainConfig()
    with pytest.raises(InputError):
        lr_at(-1, 100, cfg)
    with pytest.raises(InputError):
        lr_at(100, 100, cfg)


def test_epoch_order_depends_only_on_seed_epoch_n():
    a = _epoch_order(3, 7, 16)
    b = _epoch_order(3, 7, 16)
    assert np.array_equal(a, b)
    assert sorted(a.tolist()) == list(range(16))
    assert not np.array_equal(_epoch_order(3, 8, 16), a)
    assert not np.array_equal(_epoch_order(4, 7, 16), a)


# ------------------------------------------------------------- train set


def test_build_training_set_missing_label_fails_early():
    samples, provider = make_dataset(3)
    partial = OraclePseudoLabelProvider(
        {samples[0].tile.tile_id: np.zeros((64, 64), dtype=np.float32)}
    )
    with pytest.raises(MissingLabelError):
        build_training_set(samples, partial, need_depth=True)
    with pytest.raises(MissingLabelError):
        build_training_set(samples, None, need_depth=True)
    items = build_training_set(samples, None, need_depth=False)
    assert len(items) == 3 and all(it.depth_maps is None for it in items)


def test_build_training_set_rejects_empty_and_mixed_sizes():
    with pytest.raises(InputError):
        build_training_set([], None, need_depth=False)
    small, _ = make_dataset(1, size=64, seed0=1)
    big, _ = make_dataset(1, size=96, seed0=2)
    with pytest.raises(InputError):
        build_training_set(small + big, None, need_depth=False)


# ------------------------------------------------------------- loss log


def test_loss_log_roundtrip_with_and_without_depth():
    from depthprompt.trainer import LossLogRow

    rows = [
        LossLogRow(step=0, lr=1e-4, depth_loss=0.5, class_loss=1.9, total=2.4),
        LossLogRow(step=1, lr=2e-5, depth_loss=None, class_loss=1.7, total=1.7),
    ]
    text = loss_log_to_text(rows)
    lines = text.splitlines()
    assert lines[0] == "step,lr,depth_loss,class_loss,total"
    assert lines[2].split(",")[2] == ""
    assert loss_log_from_text(text) == rows
    with pytest.raises(InputError):
        loss_log_from_text("nonsense\n1,2,3\n")


# ------------------------------------------------------------------ train


@pytest.fixture(scope="module")
def short_run(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("short_run"))
    samples, provider = make_dataset(4)
    cfg = TrainConfig(backbone="tiny", batch_size=2, max_steps=6, seed=0)
    result = train(cfg, samples, provider=provider, out_dir=out)
    return cfg, samples, provider, result, out


def test_train_history_and_log_file(short_run):
    cfg, _, _, result, out = short_run
    assert result.final_step == 6
    assert result.total_steps == 6
    assert [r.step for r in result.history] == list(range(6))
    for row in result.history:
        assert row.lr == lr_at(row.step, 6, cfg)
        assert row.depth_loss is not None
        assert row.total == row.depth_loss + row.class_loss
    with open(result.loss_log_path) as fh:
        parsed = loss_log_from_text(fh.read())
    assert parsed == result.history


def test_train_backbone_frozen(short_run):
    _, _, _, result, _ = short_run
    assert result.backbone_checksum_start == result.backbone_checksum_end
    for p in result.model.backbone.parameters():
        assert not p.requires_grad


def test_train_without_prompter_logs_no_depth_column():
    samples, _ = make_dataset(2, seed0=40)
    cfg = TrainConfig(
        backbone="tiny", batch_size=2, max_steps=2, prompter_enabled=False
    )
    result = train(cfg, samples)
    assert all(r.depth_loss is None for r in result.history)
    assert all(r.total == r.class_loss for r in result.history)
    text = loss_log_to_text(result.history)
    assert ",," in text.splitlines()[1]


def test_train_divergence_raises_with_step():
    samples, provider = make_dataset(2, seed0=60)
    cfg = TrainConfig(backbone="tiny", batch_size=2, max_steps=8, lr0=1e18)
    with pytest.raises(DivergenceError) as err:
        train(cfg, samples, provider=provider)
    assert 0 < err.value.step < 8


# ------------------------------------------------------------ checkpoints


def test_checkpoint_roundtrip(short_run):
    cfg, _, _, result, out = short_run
    path = os.path.join(out, "checkpoint.npz")
    assert result.checkpoint_path == path and os.path.isfile(path)
    ckpt = load_checkpoint(path)
    assert asdict(ckpt.config) == asdict(cfg)
    assert ckpt.step == 6 and ckpt.total_steps == 6
    assert ckpt.history == result.history
    assert ckpt.backbone_checksum == result.backbone_checksum_end
    assert any(k.startswith("seg_decoder.") for k in ckpt.model_state)
    assert not any(k.startswith("backbone.") for k in ckpt.model_state)
    assert ckpt.optimizer_state, "optimizer moments missing"
    for entries in ckpt.optimizer_state.values():
        assert set(entries) == {"step", "exp_avg", "exp_avg_sq"}


def test_restore_model_matches_trained_weights(short_run):
    _, _, _, result, out = short_run
    ckpt = load_checkpoint(os.path.join(out, "checkpoint.npz"))
    restored = restore_model(ckpt)
    want = result.model.state_dict()
    got = restored.state_dict()
    assert set(want) == set(got)
    for name in want:
        assert torch.equal(want[name], got[name]), name


def test_restore_model_rejects_checksum_mismatch(short_run):
    _, _, _, result, out = short_run
    ckpt = load_checkpoint(os.path.join(out, "checkpoint.npz"))
    ckpt.backbone_checksum = "0" * 64
    with pytest.raises(ConfigError):
        restore_model(ckpt)


def test_load_checkpoint_rejects_foreign_npz(tmp_path):
    path = str(tmp_path / "bogus.npz")
    np.savez(path, weights=np.zeros(3))
    with pytest.raises(ConfigError):
        load_checkpoint(path)
    with pytest.raises(ConfigError):
        load_checkpoint(str(tmp_path / "missing.npz"))


def test_resume_config_must_match(short_run):
    cfg, samples, provider, _, out = short_run
    other = replace(cfg, seed=1)
    with pytest.raises(ConfigError):
        train(
            other,
            samples,
            provider=provider,
            resume_from=os.path.join(out, "checkpoint.npz"),
        )


def test_resume_matches_uninterrupted_run(tmp_path):
    samples, provider = make_dataset(4, seed0=70)
    cfg = TrainConfig(backbone="tiny", batch_size=2, max_steps=14, seed=5)

    full = train(cfg, samples, provider=provider, out_dir=str(tmp_path / "full"))

    part_dir = str(tmp_path / "part")
    stopped = train(cfg, samples, provider=provider, out_dir=part_dir, stop_after=7)
    assert stopped.final_step == 7
    assert stopped.total_steps == 14, "schedule must still span the full run"

    resumed = train(
        cfg,
        samples,
        provider=provider,
        out_dir=part_dir,
        resume_from=os.path.join(part_dir, "checkpoint.npz"),
    )
    assert resumed.final_step == 14
    assert [r.step for r in resumed.history] == list(range(14))
    for row_a, row_b in zip(full.history, resumed.history):
        assert row_a.lr == row_b.lr
        assert math.isclose(row_a.total, row_b.total, rel_tol=0, abs_tol=1e-6)
        assert math.isclose(
            row_a.class_loss, row_b.class_loss, rel_tol=0, abs_tol=1e-6
        )
    with open(os.path.join(part_dir, "loss_log.csv")) as fh:
        assert len(loss_log_from_text(fh.read())) == 14


# -------------------------------------------------------------- evaluate


def test_evaluate_report_shape(short_run):
    _, samples, _, result, _ = short_run
    report = evaluate(result.model, samples)
    assert len(report.per_class["iou"]) == 7
    assert 0.0 <= report.m_iou <= 1.0
    assert report.class_names[0] == "water"
    with pytest.raises(InputError):
        evaluate(result.model, [])


# -------------------------------------------------------------- ablation


def test_run_ablation_rows_and_deltas():
    samples, provider = make_dataset(4, seed0=90)
    cfg = TrainConfig(backbone="tiny", batch_size=4, max_steps=2)
    table = run_ablation(cfg, samples, samples, provider, seeds=(0,))
    assert len(table.rows) == 4
    combos = [(r.adapter_enabled, r.prompter_enabled) for r in table.rows]
    assert combos == list(ABLATION_TOGGLES)
    base = table.row(0, False, False)
    assert base.delta_miou == 0.0 and base.delta_oa == 0.0 and base.delta_kappa == 0.0
    both = table.row(0, True, True)
    assert both.delta_miou == both.miou - base.miou
    text = table.to_text()
    assert text.splitlines()[0].startswith("seed\tadapter\tprompter")
    assert len(text.splitlines()) == 5

    with pytest.raises(ConfigError):
        run_ablation(cfg, samples, samples, provider, seeds=())
