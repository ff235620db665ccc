import math

import numpy as np
import pytest

from fadct import engine as E
from fadct.config import RunConfig
from fadct.data import SynthSpec, generate_synth
from fadct.engine import Tensor
from fadct.model import build_model
from fadct.rng import Rng
from fadct.training import (Adam, LossConfig, LrSchedule, NumericError,
                            batch_loss_parts, clip_gradients, composite_loss,
                            cosine_lr, evaluate, train,
                            _accumulate_worker_grads)
from tests.test_model import batch, tiny_cfg


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(alpha=1.5)
    with pytest.raises(ValueError):
        LossConfig(kl_scale=0.0)


def test_composite_loss_alpha_endpoints():
    logits = Tensor(np.array([2.0, -1.0, 0.5]))
    kl = Tensor(4.0)
    ce = E.cross_entropy(Tensor(logits.data), 0).item()
    zero = composite_loss(logits, 0, kl, LossConfig(alpha=0.0, kl_scale=8.0))
    assert zero.item() == ce
    one = composite_loss(Tensor(logits.data), 0, kl, LossConfig(alpha=1.0, kl_scale=8.0))
    assert one.item() == pytest.approx(ce + 0.5, abs=1e-15)


def test_composite_loss_matches_unsimplified_form():
    # alpha*(CE + KL') + (1-alpha)*CE must equal CE + alpha*KL'
    logits = Tensor(np.array([0.3, 1.7]))
    kl, alpha, scale = 4.0, 0.5, 8.0
    ce = E.cross_entropy(Tensor(logits.data), 1).item()
    got = composite_loss(logits, 1, Tensor(kl), LossConfig(alpha, scale)).item()
    want = alpha * (ce + kl / scale) + (1 - alpha) * ce
    assert got == pytest.approx(want, abs=1e-15)


def test_composite_loss_worked_example():
    # CE = 2.0 forced via a crafted two-class instance is awkward; check the
    # algebra on raw numbers instead: alpha=0.5, CE=2, KL=4, scale=8 -> 2.25
    ce, kl, alpha, scale = 2.0, 4.0, 0.5, 8.0
    simplified = ce + alpha * kl / scale
    unsimplified = alpha * (ce + kl / scale) + (1 - alpha) * ce
    assert simplified == pytest.approx(2.25, abs=1e-15)
    assert unsimplified == pytest.approx(2.25, abs=1e-15)


def test_adam_zero_gradient_keeps_parameters():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    opt = Adam({"g": [p]}, weight_decay=0.0)
    opt.step({"g": 0.1})
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_is_signed_lr():
    p = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    p.grad = np.array([0.3, -7.0])
    opt = Adam({"g": [p]})
    opt.step({"g": 0.01})
    assert np.abs(p.data - [-0.01, 0.01]).max() < 1e-6


def test_adam_three_steps_match_hand_reference():
    # independent reference implementation stepped by hand on f(x) = x^2
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    x_ref, m, v = 1.0, 0.0, 0.0
    trajectory = []
    for t in range(1, 4):
        g = 2.0 * x_ref
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        x_ref = x_ref - lr * mhat / (math.sqrt(vhat) + eps)
        trajectory.append(x_ref)

    p = Tensor(1.0, requires_grad=True)
    opt = Adam({"g": [p]}, beta1=b1, beta2=b2, eps=eps)
    got = []
    for _ in range(3):
        p.zero_grad()
        E.mul(p, p).backward()
        opt.step({"g": lr})
        got.append(float(p.data))
    assert np.abs(np.array(got) - np.array(trajectory)).max() < 1e-12


def test_adam_decoupled_weight_decay():
    p = Tensor(np.array([2.0]), requires_grad=True)
    p.grad = np.zeros(1)
    opt = Adam({"g": [p]}, weight_decay=0.5)
    opt.step({"g": 0.1})
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5), abs=1e-15)


def test_adam_missing_gradient_is_dead_parameter_error():
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = Adam({"g": [p]})
    with pytest.raises(NumericError):
        opt.step({"g": 0.1})


def test_cosine_schedule_endpoints_and_midpoint():
    sched = LrSchedule({"head": 1e-4}, total=10, eta_min=0.0)
    assert cosine_lr(0, "head", sched) == 1e-4
    assert cosine_lr(10, "head", sched) == 0.0
    assert cosine_lr(5, "head", sched) == pytest.approx(5e-5, abs=1e-20)
    assert cosine_lr(17, "head", sched) == 0.0  # past the horizon clamps


def test_schedule_validation():
    with pytest.raises(ValueError):
        LrSchedule({"g": 1e-4}, total=0)
    with pytest.raises(ValueError):
        LrSchedule({"g": 0.0}, total=5)


def test_clip_gradients_scales_to_max_norm():
    p = Tensor(np.zeros(4), requires_grad=True)
    p.grad = np.full(4, 3.0)
    norm = clip_gradients([p], 2.0)
    assert norm == pytest.approx(6.0)
    assert np.linalg.norm(p.grad) == pytest.approx(2.0, rel=1e-12)


def _tiny_dataset(seed=0, per_class=4):
    spec = SynthSpec(image_size=8, train_per_class=per_class, val_per_class=2,
                     test_per_class=2, seed=seed, noise_std=0.2)
    return generate_synth(spec)


def test_worker_gradients_match_single_graph():
    cfg = tiny_cfg("dctvitres", loss_alpha=0.3)
    model = build_model(cfg)
    x = batch(n=4)
    labels = np.array([0, 1, 2, 0])
    noise = model.draw_head_noise(Rng(5))
    params = [p for _, p in model.named_parameters()]

    loss, _, _ = batch_loss_parts(model, x, labels, 0.3, 10.0, noise)
    single_value = loss.item()
    loss.backward()
    single = {id(p): p.grad.copy() for p in params}

    for p in params:
        p.zero_grad()
    shards = [(Tensor(x.data[:2]), labels[:2]), (Tensor(x.data[2:]), labels[2:])]
    multi_value, _, _ = _accumulate_worker_grads(model, shards, 0.3, 10.0, 0.0,
                                                 noise, 4, params)
    assert abs(multi_value - single_value) < 1e-12
    for p in params:
        a, b = single[id(p)], p.grad
        assert np.abs(a - b).max() < 1e-10 * max(1.0, np.abs(a).max())


def test_train_smoke_metrics_and_checkpoints(tmp_path):
    splits = _tiny_dataset()
    cfg = tiny_cfg("dctvit", epochs=2, batch_size=4, lr_head=1e-3,
                   lr_backbone=1e-4)
    model = build_model(cfg)
    result = train(model, splits["train"], splits["val"], cfg, tmp_path)

    assert len(result.metrics) == 2
    assert (tmp_path / "metrics.csv").exists()
    assert (tmp_path / "checkpoint_last.fadc").exists()
    assert (tmp_path / "checkpoint_best.fadc").exists()

    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header == ("epoch,train_loss,train_ce,train_kl,val_acc,lr_backbone,"
                      "lr_head,c1,c2,alpha_low,alpha_mid,alpha_high,alpha_res")

    sched = LrSchedule({"backbone": cfg.lr_backbone, "head": cfg.lr_head},
                       total=max(1, cfg.epochs - 1), eta_min=cfg.lr_min)
    for row in result.metrics:
        assert row["lr_backbone"] == cosine_lr(row["epoch"], "backbone", sched)
        assert row["lr_head"] == cosine_lr(row["epoch"], "head", sched)
        assert 0.0 < row["c1"] <= row["c2"] < 1.0

    # loss decomposition identity, same association as the loss construction
    kl_scale = cfg.resolve_kl_scale(len(splits["train"]))
    for loss, ce, kl in result.step_losses:
        assert abs(loss - (ce + kl * (cfg.loss_alpha / kl_scale))) < 1e-12


def test_train_bit_reproducible(tmp_path):
    splits = _tiny_dataset(seed=4)
    cfg = tiny_cfg("dctvitres", epochs=2, batch_size=4, hflip_prob=0.5,
                   spectral_noise_std=0.05)
    train(build_model(cfg), splits["train"], splits["val"], cfg, tmp_path / "a")
    train(build_model(cfg), splits["train"], splits["val"], cfg, tmp_path / "b")
    csv_a = (tmp_path / "a" / "metrics.csv").read_bytes()
    csv_b = (tmp_path / "b" / "metrics.csv").read_bytes()
    assert csv_a == csv_b
    ck_a = (tmp_path / "a" / "checkpoint_last.fadc").read_bytes()
    ck_b = (tmp_path / "b" / "checkpoint_last.fadc").read_bytes()
    assert ck_a == ck_b


def test_train_multiworker_is_deterministic(tmp_path):
    splits = _tiny_dataset(seed=6)
    cfg = tiny_cfg("dctvit", epochs=1, batch_size=4, workers=2)
    train(build_model(cfg), splits["train"], splits["val"], cfg, tmp_path / "a")
    train(build_model(cfg), splits["train"], splits["val"], cfg, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == \
        (tmp_path / "b" / "metrics.csv").read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_aborts_on_nan_with_group_norms(tmp_path):
    splits = _tiny_dataset(seed=7)
    cfg = tiny_cfg("dctvit", epochs=1, batch_size=4)
    model = build_model(cfg)
    model.head.mu_w.data[0, 0] = np.inf
    with pytest.raises(NumericError) as err:
        train(model, splits["train"], splits["val"], cfg, tmp_path)
    assert "gradient norms by group" in str(err.value)


def test_early_stopping(tmp_path):
    splits = _tiny_dataset(seed=8)
    cfg = tiny_cfg("vit", epochs=50, batch_size=4, early_stop_val_acc=0.01,
                   lr_head=1e-3)
    result = train(build_model(cfg), splits["train"], splits["val"], cfg, tmp_path)
    assert result.stopped_early
    assert len(result.metrics) < 50


def test_metrics_csv_parses_with_stdlib_reader(tmp_path):
    import csv

    splits = _tiny_dataset(seed=11)
    cfg = tiny_cfg("dctvit", epochs=2, batch_size=4)
    train(build_model(cfg), splits["train"], splits["val"], cfg, tmp_path)
    with open(tmp_path / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert rows[0]["epoch"] == "0"
    assert float(rows[1]["val_acc"]) >= 0.0
    assert rows[0]["alpha_res"] == ""  # three-branch variant leaves it blank


def test_kl_monotone_response_to_alpha():
    # raising the mixing weight from 0 to 1 cannot leave the posterior
    # farther from the prior, as a trend over seeds
    splits = _tiny_dataset(seed=12, per_class=6)
    final_kl = {0.0: [], 1.0: []}
    for alpha in final_kl:
        for seed in (0, 1, 2):
            cfg = tiny_cfg("dctvit", seed=seed, epochs=5, batch_size=4,
                           loss_alpha=alpha, lr_head=3e-3, lr_backbone=1e-3)
            model = build_model(cfg)
            res = train(model, splits["train"], [], cfg, f"/tmp/klmono_{alpha}_{seed}")
            final_kl[alpha].append(res.metrics[-1]["train_kl"])
    assert np.mean(final_kl[1.0]) <= np.mean(final_kl[0.0])


def test_evaluate_counts_and_determinism():
    splits = _tiny_dataset(seed=9)
    cfg = tiny_cfg("resnet")
    model = build_model(cfg)
    a = evaluate(model, splits["test"], batch_size=3)
    b = evaluate(model, splits["test"], batch_size=5)
    assert a.n == len(splits["test"])
    assert a.accuracy == b.accuracy  # chunking cannot change argmax decisions
    assert set(a.per_class) == {0, 1, 2}
    assert a.mean_entropy <= math.log(3.0) + 1e-12
