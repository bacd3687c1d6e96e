import dataclasses
import math

import numpy as np
import pytest

from dcsam.config import TrainConfig
from dcsam.episodes import class_registry, gen_episode, split_folds
from dcsam.errors import CheckpointMissing, DivergenceDetected, EmptyReport, IoError
from dcsam.pipeline import init_params
from dcsam.tensor import Tensor
from dcsam.trainer import (
    AdamW,
    cosine_lr,
    evaluate,
    grad_check,
    grad_check_episode,
    load_checkpoint,
    save_checkpoint,
    train,
)

FOLD = split_folds(class_registry(), 0)
TINY = TrainConfig(lr=1e-2, steps=4, batch=2, seed=11, canvas=8,
                   embed_dim=6, n_queries=4, mid_channels=3, high_channels=3)


def test_cosine_lr_endpoints():
    assert cosine_lr(0.1, 0, 100) == pytest.approx(0.1, abs=1e-12)
    assert cosine_lr(0.1, 100, 100) == pytest.approx(0.0, abs=1e-12)
    assert cosine_lr(0.1, 50, 100) == pytest.approx(0.05, abs=1e-12)
    for step in range(100):
        assert cosine_lr(0.1, step, 100) > cosine_lr(0.1, step + 1, 100)
    with pytest.raises(ValueError):
        cosine_lr(0.1, 101, 100)
    with pytest.raises(ValueError):
        cosine_lr(0.1, 0, 0)


def test_adamw_zero_grad_is_pure_decay():
    opt = AdamW(lr=0.1, total_steps=10, weight_decay=0.01)
    theta = Tensor(np.array([2.0, -4.0]))
    zero = Tensor(np.zeros(2))
    out = opt.step({"p": theta}, {"p": zero})["p"]
    # first step runs at full base lr, so the contraction is 1 - lr*wd
    assert np.allclose(out.data, theta.data * (1.0 - 0.1 * 0.01), atol=1e-15)


def test_adamw_step_direction_and_magnitude():
    opt = AdamW(lr=0.1, total_steps=10, weight_decay=0.0)
    theta = Tensor(np.array([1.0]))
    g = Tensor(np.array([0.5]))
    out = opt.step({"p": theta}, {"p": g})["p"]
    # bias-corrected first step moves by ~lr against the gradient sign
    assert out.data[0] == pytest.approx(1.0 - 0.1, abs=1e-6)

    opt2 = AdamW(lr=0.1, total_steps=10, weight_decay=0.0)
    down = opt2.step({"p": theta}, {"p": Tensor(np.array([-0.5]))})["p"]
    assert down.data[0] == pytest.approx(1.0 + 0.1, abs=1e-6)


def test_adamw_lr_decays_with_schedule():
    opt = AdamW(lr=0.1, total_steps=2, weight_decay=0.0)
    theta = {"p": Tensor(np.array([0.0]))}
    g = {"p": Tensor(np.array([1.0]))}
    theta = {"p": opt.step(theta, g)["p"]}
    first_move = abs(theta["p"].data[0])
    before = theta["p"].data[0]
    theta = {"p": opt.step(theta, g)["p"]}
    second_move = abs(theta["p"].data[0] - before)
    assert second_move < first_move  # cosine halves the rate at mid-schedule


def test_train_is_deterministic():
    a = train(TINY, FOLD)
    b = train(TINY, FOLD)
    assert a.losses == b.losses
    for name, t in a.params.named().items():
        assert np.array_equal(t.data, b.params.named()[name].data), name


def test_train_losses_are_finite_and_recorded():
    result = train(TINY, FOLD)
    assert len(result.losses) == TINY.steps
    assert all(math.isfinite(v) for v in result.losses)
    assert result.config == TINY


def test_train_with_tube_steps_extends_schedule():
    cfg = dataclasses.replace(TINY, tube_steps=2, tube_frames=3)
    result = train(cfg, FOLD)
    assert len(result.losses) == cfg.steps + cfg.tube_steps


def test_train_seed_changes_outcome():
    a = train(TINY, FOLD)
    b = train(dataclasses.replace(TINY, seed=12), FOLD)
    assert a.losses != b.losses


def test_train_zero_lr_keeps_params_bitwise():
    cfg = dataclasses.replace(TINY, lr=0.0, steps=2)
    result = train(cfg, FOLD)
    fresh = init_params(cfg.pipeline_config(), cfg.seed)
    for name, t in result.params.named().items():
        assert np.array_equal(t.data, fresh.named()[name].data), name


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_detected():
    # an absurd learning rate overflows the forward pass within a few steps
    cfg = dataclasses.replace(TINY, lr=1e80, steps=5)
    with pytest.raises(DivergenceDetected):
        train(cfg, FOLD)


def test_evaluate_protocol_fixed_seeds():
    params = init_params(TINY.pipeline_config(), seed=0)
    rep_a = evaluate(params, TINY, FOLD, episodes_per_class=3)
    rep_b = evaluate(params, TINY, FOLD, episodes_per_class=3)
    assert rep_a == rep_b
    assert set(rep_a.per_class_iou) == set(FOLD.test_classes)
    assert 0.0 <= rep_a.miou <= 1.0
    assert rep_a.jf == pytest.approx(0.5 * (rep_a.j + rep_a.f), abs=1e-12)


def test_evaluate_sees_the_same_episodes_for_any_params():
    # the seed set is fixed by config, not by the model under test
    params_a = init_params(TINY.pipeline_config(), seed=0)
    params_b = init_params(TINY.pipeline_config(), seed=99)
    rep_a = evaluate(params_a, TINY, FOLD, episodes_per_class=2)
    rep_b = evaluate(params_b, TINY, FOLD, episodes_per_class=2)
    assert set(rep_a.per_class_iou) == set(rep_b.per_class_iou)


def test_evaluate_guards():
    params = init_params(TINY.pipeline_config(), seed=0)
    with pytest.raises(EmptyReport):
        evaluate(params, TINY, FOLD, episodes_per_class=0)
    empty_fold = dataclasses.replace(FOLD, test_classes=())
    with pytest.raises(EmptyReport):
        evaluate(params, TINY, empty_fold)


def test_grad_check_passes_on_healthy_params():
    pcfg = TINY.pipeline_config()
    params = init_params(pcfg, seed=3)
    ep = grad_check_episode(TINY, canvas=8)
    result = grad_check(params, ep, pcfg, pcfg.encoder(TINY.seed), samples_per_param=3)
    assert result.passed, result.per_param
    assert set(result.per_param) == set(params.named())
    assert result.worst < 1e-4


def test_grad_check_deterministic():
    pcfg = TINY.pipeline_config()
    params = init_params(pcfg, seed=3)
    ep = grad_check_episode(TINY, canvas=8)
    enc = pcfg.encoder(TINY.seed)
    a = grad_check(params, ep, pcfg, enc, samples_per_param=2, seed=5)
    b = grad_check(params, ep, pcfg, enc, samples_per_param=2, seed=5)
    assert a.per_param == b.per_param


def test_checkpoint_round_trip(tmp_path):
    result = train(TINY, FOLD)
    save_checkpoint(tmp_path / "ckpt", result.params, TINY, TINY.steps)
    params, cfg, step = load_checkpoint(tmp_path / "ckpt")
    assert cfg == TINY
    assert step == TINY.steps
    for name, t in params.named().items():
        # float32 storage: round trip is exact only to storage precision
        assert np.allclose(t.data, result.params.named()[name].data, atol=1e-7), name


def test_checkpoint_missing_pieces(tmp_path):
    result = train(TINY, FOLD)
    save_checkpoint(tmp_path / "ckpt", result.params, TINY, 4)

    (tmp_path / "ckpt" / "q_pos.dcst").unlink()
    with pytest.raises(CheckpointMissing):
        load_checkpoint(tmp_path / "ckpt")

    save_checkpoint(tmp_path / "ckpt2", result.params, TINY, 4)
    (tmp_path / "ckpt2" / "config.txt").unlink()
    with pytest.raises(CheckpointMissing):
        load_checkpoint(tmp_path / "ckpt2")

    with pytest.raises(CheckpointMissing):
        load_checkpoint(tmp_path / "never_saved")


def test_checkpoint_shape_mismatch(tmp_path):
    result = train(TINY, FOLD)
    save_checkpoint(tmp_path / "ckpt", result.params, TINY, 4)
    # a config that disagrees with the stored tensor shapes must be rejected
    wrong = dataclasses.replace(TINY, n_queries=9)
    from dcsam.config import config_text
    (tmp_path / "ckpt" / "config.txt").write_text(config_text(wrong))
    with pytest.raises(IoError):
        load_checkpoint(tmp_path / "ckpt")


def test_checkpoint_optimizer_step_parsed(tmp_path):
    result = train(TINY, FOLD)
    save_checkpoint(tmp_path / "ckpt", result.params, TINY, 4)
    (tmp_path / "ckpt" / "optimizer.txt").write_text("# nothing here\n")
    with pytest.raises(CheckpointMissing):
        load_checkpoint(tmp_path / "ckpt")
