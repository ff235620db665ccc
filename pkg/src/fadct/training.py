"""Loss assembly, AdamW-style optimization, cosine schedule, and the
training loop with per-epoch metrics and checkpointing.

The composite objective mixes the Bayesian evidence bound with plain
cross-entropy through a weight a in [0, 1]. Since the bound's likelihood
term is estimated by the same single-sample cross-entropy, the mixture
algebraically simplifies to

    L = CE + a * KL / kl_scale,

which is what gets built (the unsimplified weighted sum would compute the
cross-entropy twice). kl_scale defaults to the training-set size.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import engine as E
from .bayes import kl_loss
from .checkpoint import save_checkpoint
from .config import RunConfig, serialize_config
from .data import ImageSample, augment_spatial, augment_spectral
from .engine import Tensor
from .fusion import fusion_entropy
from .model import PipelineModel
from .rng import Rng

METRICS_COLUMNS = ("epoch", "train_loss", "train_ce", "train_kl", "val_acc",
                   "lr_backbone", "lr_head", "c1", "c2",
                   "alpha_low", "alpha_mid", "alpha_high", "alpha_res")


class NumericError(RuntimeError):
    """Training aborted on a non-finite loss."""


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.1
    kl_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.kl_scale <= 0:
            raise ValueError(f"kl_scale must be positive, got {self.kl_scale}")


def composite_loss(logits: Tensor, label: int, kl: Tensor | None,
                   cfg: LossConfig) -> Tensor:
    """Single-sample objective: cross-entropy plus the scaled KL term."""
    ce = E.cross_entropy(logits, label)
    if kl is None:
        return ce
    return E.add(ce, E.mul(kl, cfg.alpha / cfg.kl_scale))


def batch_loss_parts(model: PipelineModel, images: Tensor, labels: np.ndarray,
                     alpha: float, kl_scale: float, noise,
                     entropy_reg: float = 0.0):
    """(loss tensor, mean-CE tensor, kl tensor or None) for one batch."""
    logits, kl = model.forward_train(images, noise)
    ce = E.tmean(E.cross_entropy(logits, labels))
    loss = ce
    if kl is not None and alpha > 0.0:
        loss = E.add(loss, E.mul(kl, alpha / kl_scale))
    if entropy_reg > 0.0 and model.uses_bands:
        loss = E.add(loss, E.mul(E.neg(fusion_entropy(model.fusion)), entropy_reg))
    return loss, ce, kl


def batch_loss(model: PipelineModel, images: Tensor, labels: np.ndarray,
               alpha: float, kl_scale: float, noise) -> Tensor:
    return batch_loss_parts(model, images, labels, alpha, kl_scale, noise)[0]


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


class Adam:
    """Adam with bias correction and decoupled weight decay.

    The decay step parameter <- parameter - lr * wd * parameter is applied
    separately from the adaptive update. One `step` call advances the shared
    timestep for every group.
    """

    def __init__(self, groups: dict[str, list[Tensor]], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.groups = groups
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.moments = {id(p): (np.zeros_like(p.data), np.zeros_like(p.data))
                        for params in groups.values() for p in params}

    def step(self, lrs: dict[str, float]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for group, params in self.groups.items():
            lr = lrs[group]
            for p in params:
                if p.grad is None:
                    raise NumericError(
                        f"parameter of shape {p.shape} in group {group!r} has no "
                        f"gradient; the graph no longer reaches it (dead parameter)")
                m, v = self.moments[id(p)]
                g = p.grad
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                if self.weight_decay:
                    p.data -= lr * self.weight_decay * p.data
                p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for params in self.groups.values():
            for p in params:
                p.grad = None


@dataclass(frozen=True)
class LrSchedule:
    base_rates: dict
    total: int
    eta_min: float = 0.0

    def __post_init__(self):
        if self.total < 1:
            raise ValueError(f"schedule length must be >= 1, got {self.total}")
        if any(r <= 0 for r in self.base_rates.values()) or self.eta_min < 0:
            raise ValueError("base rates must be positive and eta_min nonnegative")


def cosine_lr(t: float, group: str, sched: LrSchedule) -> float:
    """eta_min + 0.5 (eta_base - eta_min) (1 + cos(pi t / T)); t > T clamps."""
    base = sched.base_rates[group]
    if t <= 0:
        return base
    if t >= sched.total:
        return sched.eta_min
    return sched.eta_min + 0.5 * (base - sched.eta_min) \
        * (1.0 + math.cos(math.pi * t / sched.total))


def clip_gradients(params: list[Tensor], max_norm: float) -> float:
    """Global-norm clipping; returns the pre-clip norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    accuracy: float
    per_class: dict
    mean_ce: float
    mean_entropy: float
    n: int


def evaluate(model: PipelineModel, samples: list[ImageSample],
             batch_size: int = 32, mode: str | None = None,
             rng: Rng | None = None) -> EvalResult:
    """Deterministic metrics over a sample list (no augmentation, no graph)."""
    correct = 0
    ce_sum = 0.0
    ent_sum = 0.0
    hits: dict[int, int] = {}
    totals: dict[int, int] = {}
    with E.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            images = Tensor(np.stack([s.pixels for s in chunk]))
            labels = np.array([s.label for s in chunk])
            logits = model.forward_eval(images, mode=mode, rng=rng).data
            shifted = logits - logits.max(axis=1, keepdims=True)
            log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            preds = logits.argmax(axis=1)
            correct += int((preds == labels).sum())
            ce_sum += float(-log_probs[np.arange(len(chunk)), labels].sum())
            probs = np.exp(log_probs)
            ent_sum += float(-(probs * log_probs).sum())
            for lab, pred in zip(labels, preds):
                totals[int(lab)] = totals.get(int(lab), 0) + 1
                hits[int(lab)] = hits.get(int(lab), 0) + int(pred == lab)
    n = len(samples)
    per_class = {c: hits.get(c, 0) / t for c, t in sorted(totals.items())}
    return EvalResult(correct / n, per_class, ce_sum / n, ent_sum / n, n)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    metrics: list            # one dict per epoch, METRICS_COLUMNS keys
    step_losses: list        # (loss, ce, kl) floats per optimization step
    best_val_acc: float
    best_epoch: int
    last_checkpoint: str
    best_checkpoint: str
    metrics_path: str
    stopped_early: bool = False


def format_metric(value) -> str:
    return "" if value is None else repr(float(value))


def write_metrics_csv(path, rows: list[dict]) -> None:
    lines = [",".join(METRICS_COLUMNS)]
    for row in rows:
        lines.append(",".join(
            str(row["epoch"]) if col == "epoch" else format_metric(row.get(col))
            for col in METRICS_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")


def _augmented_batch(samples, order, cfg: RunConfig, aug, epoch: int, master: Rng):
    batch = []
    for pos in order:
        s = samples[pos]
        if aug.enabled:
            arng = master.derive(f"augment:{epoch}:{pos}")
            s = augment_spatial(s, aug, arng)
            if aug.spectral_noise_std > 0 or aug.band_mask_prob > 0:
                s = augment_spectral(s, aug, arng)
        batch.append(s)
    return batch


def _grad_norms_by_group(groups: dict[str, list[Tensor]]) -> dict[str, float]:
    out = {}
    for name, params in groups.items():
        total = sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None)
        out[name] = math.sqrt(total)
    return out


def _accumulate_worker_grads(model, shards, alpha, kl_scale, entropy_reg,
                             noise, batch_n, params):
    """Data-parallel gradient path: per-shard losses on private graphs.

    Each worker backwards its shard's summed cross-entropy (scaled by 1/B)
    into a private gradient map; the trainer adds the KL/regularizer graph
    once, then sums the maps in shard order. Returns (loss, ce, kl) floats.
    """
    grad_maps = [dict() for _ in shards]
    values = [None] * len(shards)

    def run(i):
        images, labels = shards[i]
        logits, _ = model.forward_train(images, noise)
        shard_ce = E.mul(E.tsum(E.cross_entropy(logits, labels)), 1.0 / batch_n)
        shard_ce.backward(into=grad_maps[i])
        values[i] = shard_ce.item()

    threads = [threading.Thread(target=run, args=(i,)) for i in range(len(shards))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    ce_value = float(sum(values))
    kl_value = None
    extra = None
    if model.bayes_head:
        kl = kl_loss(model.head)
        kl_value = kl.item()
        if alpha > 0.0:
            extra = E.mul(kl, alpha / kl_scale)
    if entropy_reg > 0.0 and model.uses_bands:
        reg = E.mul(E.neg(fusion_entropy(model.fusion)), entropy_reg)
        extra = reg if extra is None else E.add(extra, reg)
    extra_value = 0.0
    if extra is not None:
        extra_map: dict = {}
        extra.backward(into=extra_map)
        grad_maps.append(extra_map)
        extra_value = extra.item()

    for p in params:
        for gm in grad_maps:
            if p in gm:
                p.grad = gm[p] if p.grad is None else p.grad + gm[p]
    return ce_value + extra_value, ce_value, kl_value


def train(model: PipelineModel, train_samples: list[ImageSample],
          val_samples: list[ImageSample], cfg: RunConfig, out_dir) -> TrainResult:
    if not train_samples:
        raise ValueError("training set is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    kl_scale = cfg.resolve_kl_scale(len(train_samples))
    snapshot = serialize_config(cfg.with_values(num_classes=cfg.num_classes,
                                                kl_scale=kl_scale))
    groups = model.param_groups()
    all_params = groups["backbone"] + groups["head"]
    optimizer = Adam(groups, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
                     cfg.weight_decay)
    sched = LrSchedule({"backbone": cfg.lr_backbone, "head": cfg.lr_head},
                       total=max(1, cfg.epochs - 1), eta_min=cfg.lr_min)
    aug = cfg.augment_config()
    master = Rng(cfg.seed)

    last_path = out / "checkpoint_last.fadc"
    best_path = out / "checkpoint_best.fadc"
    metrics_path = out / "metrics.csv"

    rows: list[dict] = []
    step_losses: list[tuple] = []
    best_val, best_epoch = -1.0, -1
    stopped_early = False

    for epoch in range(cfg.epochs):
        lrs = {g: cosine_lr(epoch, g, sched) for g in sched.base_rates}
        order = list(range(len(train_samples)))
        master.derive(f"shuffle:{epoch}").shuffle(order)

        epoch_loss, epoch_ce, epoch_kl, steps = 0.0, 0.0, 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = _augmented_batch(train_samples, order[start:start + cfg.batch_size],
                                     cfg, aug, epoch, master)
            labels = np.array([s.label for s in batch])
            pixels = np.stack([s.pixels for s in batch])
            noise = model.draw_head_noise(master.derive(f"noise:{epoch}:{start}"))
            optimizer.zero_grad()

            if cfg.workers > 1 and len(batch) > 1:
                n_shards = min(cfg.workers, len(batch))
                bounds = np.linspace(0, len(batch), n_shards + 1, dtype=int)
                shards = [(Tensor(pixels[a:b]), labels[a:b])
                          for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
                loss_value, ce_value, kl_value = _accumulate_worker_grads(
                    model, shards, cfg.loss_alpha, kl_scale,
                    cfg.fusion_entropy_reg, noise, len(batch), all_params)
            else:
                loss, ce, kl = batch_loss_parts(model, Tensor(pixels), labels,
                                                cfg.loss_alpha, kl_scale, noise,
                                                cfg.fusion_entropy_reg)
                loss.backward()
                loss_value, ce_value = loss.item(), ce.item()
                kl_value = kl.item() if kl is not None else None

            if not math.isfinite(loss_value):
                norms = _grad_norms_by_group(groups)
                diag = ", ".join(f"{g}={v:.6g}" for g, v in norms.items())
                raise NumericError(f"non-finite loss {loss_value} at epoch {epoch} "
                                   f"step {steps}; gradient norms by group: {diag}")

            clip_gradients(all_params, cfg.grad_clip)
            optimizer.step(lrs)

            step_losses.append((loss_value, ce_value, kl_value))
            epoch_loss += loss_value
            epoch_ce += ce_value
            epoch_kl += kl_value if kl_value is not None else 0.0
            steps += 1

        val = evaluate(model, val_samples, cfg.batch_size,
                       mode=cfg.predictive_mode,
                       rng=master.derive(f"val:{epoch}")) if val_samples else None
        cut = model.cutoff_values()
        if cut is not None and cfg.ordered_cutoffs:
            # guaranteed by the ordered parameterization; catches regressions
            assert 0.0 < cut[0] <= cut[1] < 1.0, f"cutoffs left (0,1) order: {cut}"
        alphas = model.fusion_values()
        row = {
            "epoch": epoch,
            "train_loss": epoch_loss / steps,
            "train_ce": epoch_ce / steps,
            "train_kl": (epoch_kl / steps) if model.bayes_head else None,
            "val_acc": val.accuracy if val else None,
            "lr_backbone": lrs["backbone"],
            "lr_head": lrs["head"],
            "c1": cut[0] if cut else None,
            "c2": cut[1] if cut else None,
            "alpha_low": alphas[0] if alphas is not None else None,
            "alpha_mid": alphas[1] if alphas is not None else None,
            "alpha_high": alphas[2] if alphas is not None else None,
            "alpha_res": (None if alphas is None or np.isnan(alphas[3])
                          else alphas[3]),
        }
        rows.append(row)

        if val and val.accuracy > best_val:
            best_val, best_epoch = val.accuracy, epoch
            save_checkpoint(best_path, model.state_dict(), snapshot,
                            dtype=cfg.checkpoint_dtype)
        if val and cfg.early_stop_val_acc > 0 and val.accuracy >= cfg.early_stop_val_acc:
            stopped_early = True
            break

    save_checkpoint(last_path, model.state_dict(), snapshot, dtype=cfg.checkpoint_dtype)
    if best_epoch < 0:  # no validation set: last state is the best state
        save_checkpoint(best_path, model.state_dict(), snapshot,
                        dtype=cfg.checkpoint_dtype)
    write_metrics_csv(metrics_path, rows)
    return TrainResult(rows, step_losses, best_val, best_epoch,
                       str(last_path), str(best_path), str(metrics_path),
                       stopped_early)
