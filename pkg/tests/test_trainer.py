import json

import numpy as np
import pytest

from fatlab.attacks import AttackConfig, pgd_config
from fatlab.augment import AugmentSpec
from fatlab.data import synthetic_blobs
from fatlab.digits import synthetic_digits
from fatlab.models import ModelParams, ModelSpec, init_params, load_checkpoint
from fatlab.regularizers import RegularizerSpec
from fatlab.trainer import (Cyclic, MonitorConfig, MultiStep, RECORD_COLUMNS, TrainConfig, TrainingError,
                            WeightAveraging, co_monitor, init_state, lr_at, run_training, sgd_step, train_epoch)


def blobs(n=256, dim=4, seed=0):
    ds = synthetic_blobs(n + 100, dim, 2, 0.3, seed)
    return ds.subset(slice(0, n)), ds.subset(slice(n, None))


def small_config(**overrides):
    base = dict(epochs=2, batch_size=64, lr_schedule=MultiStep(0.05), attack=AttackConfig(0.1, init_scheme="bernoulli_half"),
                regularizer=RegularizerSpec("lipschitz", 1.0), augment=AugmentSpec("none"),
                wa=WeightAveraging("auto_ema", 0.9), co_monitor=MonitorConfig(pgd_config(0.1, 3), eval_samples=100))
    base.update(overrides)
    return TrainConfig(**base)


SPEC = ModelSpec(4, (8,), 2)


def test_multistep_examples():
    sched = MultiStep(0.1, (100, 105), 0.1)
    assert lr_at(sched, 99, 0, 10, 110) == 0.1
    assert lr_at(sched, 102, 0, 10, 110) == pytest.approx(0.01, rel=1e-15)
    assert lr_at(sched, 106, 0, 10, 110) == pytest.approx(0.001, rel=1e-15)


def test_cyclic_triangle():
    sched = Cyclic(0.2)
    assert lr_at(sched, 0, 0, 5, 4) == 0.0
    assert lr_at(sched, 3, 4, 5, 4) == 0.0
    peak = max(lr_at(sched, e, s, 5, 4) for e in range(4) for s in range(5))
    assert peak == pytest.approx(0.2 * 9 / 9.5)
    assert lr_at(sched, 0, 0, 1, 1) == 0.0


def test_sgd_closed_form_on_quadratic():
    spec = ModelSpec(1, (), 1)
    theta = ModelParams.from_arrays(spec, [np.ones((1, 1)), np.zeros(1)])
    vel = [np.zeros((1, 1)), np.zeros(1)]
    for expected in (0.9, 0.81):
        grads = [a.copy() for a in theta]  # d/dθ of θ²/2
        theta, vel = sgd_step(theta, grads, vel, 0.1, 0.0, 0.0)
        assert theta.layers[0][0][0, 0] == pytest.approx(expected, rel=1e-15)


def test_sgd_zero_gradient_is_identity():
    p = init_params(SPEC, 0)
    zeros = [np.zeros_like(a) for a in p]
    q, _ = sgd_step(p, zeros, zeros, 0.1, 0.9, 0.0)
    assert q.equal(p)


def test_sgd_rejects_bad_gradients():
    p = init_params(SPEC, 0)
    zeros = [np.zeros_like(a) for a in p]
    bad = [np.full_like(a, np.nan) for a in p]
    with pytest.raises(TrainingError, match="non-finite"):
        sgd_step(p, bad, zeros, 0.1, 0.9, 0.0)
    with pytest.raises(TrainingError):
        sgd_step(p, [np.zeros(3)] * len(zeros), zeros, 0.1, 0.9, 0.0)


@pytest.mark.parametrize("history, fraction, label", [
    ((0.40, 0.42, 0.43), 0.5, "healthy"),
    ((0.45, 0.02), 0.5, "collapsed(2)"),
    ((0.45, 0.0, 0.0), 0.0, "healthy"),
    ((0.1, 0.5, 0.3, 0.05, 0.6), 0.2, "collapsed(4)"),
])
def test_co_monitor_examples(history, fraction, label):
    assert co_monitor(history, fraction).label == label


def test_co_monitor_needs_history():
    with pytest.raises(ValueError):
        co_monitor([], 0.2)


def test_config_validation():
    with pytest.raises(ValueError):
        small_config(epochs=0)
    with pytest.raises(ValueError):
        small_config(lr_schedule=MultiStep(0.1, (5, 3)))
    with pytest.raises(ValueError):
        small_config(dtype="float16")


def test_zero_epsilon_is_standard_training():
    train, _ = blobs()
    cfg = small_config(attack=AttackConfig(0.0, init_scheme="zero"), epochs=1)
    state = init_state(SPEC, cfg, len(train))
    state, rec = train_epoch(state, train, cfg)
    assert rec.train_robust_acc == rec.train_clean_acc
    assert rec.delta_ratio_mean == 1.0
    assert rec.regularizer == 0.0


def test_zero_epsilon_ce_decreases():
    train, _ = blobs(512)
    cfg = small_config(attack=AttackConfig(0.0, init_scheme="zero"), lr_schedule=MultiStep(0.1), wa=WeightAveraging("none"),
                       epochs=5)
    ces = [r.ce for r in run_training(cfg, SPEC, train).records]
    assert sum(b > a for a, b in zip(ces, ces[1:])) <= 1


def test_auto_ema_with_open_gate_matches_ema():
    train, _ = blobs()
    zero = AttackConfig(0.0, init_scheme="zero")  # every batch has ratio 1
    auto = run_training(small_config(attack=zero, wa=WeightAveraging("auto_ema", 0.9, threshold=1.0)), SPEC, train)
    plain = run_training(small_config(attack=zero, wa=WeightAveraging("ema", 0.9)), SPEC, train)
    assert auto.state.ema.theta_avg.equal(plain.state.ema.theta_avg)
    assert auto.records[-1].wa_updates_skipped == 0


def test_non_finite_training_reports_batch():
    train, _ = blobs()
    cfg = small_config(lr_schedule=MultiStep(1e6), wa=WeightAveraging("none"), epochs=3)
    with pytest.raises(TrainingError, match="batch"):
        run_training(cfg, SPEC, train)


def test_dimension_mismatch_rejected():
    train, _ = blobs(dim=3)
    with pytest.raises(TrainingError, match="3 features"):
        run_training(small_config(), SPEC, train)


def test_run_layout_and_determinism(tmp_path):
    train, held = blobs()
    cfg = small_config(lr_schedule=MultiStep(0.05, (1,)))
    outs = []
    for name in ("a", "b"):
        result = run_training(cfg, SPEC, train, held, tmp_path / name)
        outs.append(tmp_path / name)
    a, b = outs
    for rel in ("records.csv", "records.jsonl", "checkpoints/final.ckpt", "checkpoints/final_live.ckpt",
                "checkpoints/best.ckpt", "checkpoints/milestone_001.ckpt", "reports/co_report.json"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    header = (a / "records.csv").read_text().splitlines()[0]
    assert header.split(",") == list(RECORD_COLUMNS)
    assert len((a / "records.jsonl").read_text().splitlines()) == 2
    assert (a / "reports" / "timing.csv").exists()
    report = json.loads((a / "reports" / "co_report.json").read_text())
    assert report["status"] == result.co.label
    params, _ = load_checkpoint(a / "checkpoints" / "final.ckpt")
    assert params.equal(result.state.deployed)


def test_prior_schemes_and_mixing_augmentations_run():
    digits = synthetic_digits(96, seed=1)
    spec = ModelSpec(784, (16,), 10)
    for init in ("atta_prior", "pgi_momentum"):
        cfg = small_config(attack=AttackConfig(8 / 255, init_scheme=init), epochs=2, batch_size=32)
        state = run_training(cfg, spec, digits).state
        assert np.abs(state.prior.eta).max() <= 8 / 255
    for kind in ("cutout", "mixup", "cutmix"):
        run_training(small_config(augment=AugmentSpec(kind), epochs=1, batch_size=32), spec, digits)


def test_float32_run_is_float32():
    train, _ = blobs()
    state = run_training(small_config(dtype="float32", epochs=1), SPEC, train).state
    assert state.params.dtype == np.float32 and state.deployed.dtype == np.float32
