"""Central finite-difference verification of every registered backward rule.

The oracle side only ever calls forward passes, so it stays independent of
the backward implementation it checks. Pass criterion: elementwise error
|analytic - numeric| / max(|analytic|, |numeric|, 1e-3) < 1e-4, which is a
1e-4 relative tolerance away from zero and a 1e-7 absolute tolerance near
zero.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from . import engine as E
from .engine import Tensor
from .rng import Rng

DEFAULT_H = 1e-5
REL_TOL = 1e-4
_ZERO_FLOOR = 1e-3


def grad_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst normalized disagreement between two gradient buffers."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), _ZERO_FLOOR)
    return float((np.abs(a - n) / denom).max())


def finite_difference(forward: Callable[[], float], param: Tensor,
                      h: float = DEFAULT_H) -> np.ndarray:
    """Central-difference gradient of `forward()` w.r.t. every element of param.

    Perturbs the parameter buffer in place and restores it exactly.
    """
    buf = param.data
    grad = np.zeros_like(buf)
    flat = buf.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = forward()
        flat[i] = orig - h
        f_minus = forward()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def check_gradients(build_loss: Callable[[], Tensor], params: Iterable[Tensor],
                    h: float = DEFAULT_H) -> float:
    """Compare backward gradients of build_loss() against finite differences.

    Returns the worst error over all parameters; see grad_error for the
    metric.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = build_loss()
    loss.backward()
    worst = 0.0
    for p in params:
        if p.grad is None:
            raise AssertionError(f"parameter {p!r} received no gradient")
        numeric = finite_difference(lambda: build_loss().item(), p, h)
        worst = max(worst, grad_error(p.grad, numeric))
    return worst


# ---------------------------------------------------------------------------
# per-op random cases
# ---------------------------------------------------------------------------


def _t(rng: Rng, shape, shift: float = 0.0, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normals(shape) * scale + shift, requires_grad=True)


def _weighted(out: Tensor, rng: Rng) -> Tensor:
    """Reduce to a scalar through a fixed random projection.

    A plain sum would hide backward errors that cancel across elements
    (softmax rows, for instance, always sum to one).
    """
    w = Tensor(rng.normals(out.shape))
    return E.tsum(E.mul(out, w)) if out.ndim else E.mul(out, w)


def _case_binary(op):
    def build(rng: Rng, i: int):
        if i % 3 == 2:  # scalar operand variant
            a = _t(rng, (3, 4), shift=2.0 if op is E.div else 0.0)
            s = _t(rng, (), shift=2.0 if op is E.div else 0.0)
            params = [a, s]
            fwd = lambda: op(a, s) if i % 2 else op(s, a)
        else:
            a, b = _t(rng, (3, 4)), _t(rng, (3, 4), shift=2.0 if op is E.div else 0.0)
            params = [a, b]
            fwd = lambda: op(a, b)
        return params, fwd
    return build


def _case_unary(op, shift=0.0, scale=1.0):
    def build(rng: Rng, i: int):
        a = _t(rng, (2, 5), shift=shift, scale=scale)
        if op is E.relu:
            # keep inputs off the kink so central differences are valid
            a.data += 0.2 * np.sign(a.data)
        return [a], (lambda: op(a))
    return build


def _case_pow(rng: Rng, i: int):
    a = Tensor(np.abs(rng.normals((3, 3))) + 0.5, requires_grad=True)
    p = 0.5 + 2.5 * rng.uniform()
    return [a], (lambda: E.power(a, p))


def _case_matmul(rng: Rng, i: int):
    m, k, n = rng.randint(4) + 1, rng.randint(4) + 1, rng.randint(4) + 1
    if i % 3 == 0:
        a, b = _t(rng, (m, k)), _t(rng, (k, n))
    elif i % 3 == 1:
        a, b = _t(rng, (2, m, k)), _t(rng, (2, k, n))
    else:  # shared rank-2 operand across a stack
        a, b = _t(rng, (2, 3, m, k)), _t(rng, (k, n))
    return [a, b], (lambda: E.matmul(a, b))


def _case_sum(rng, i):
    a = _t(rng, (3, 4))
    return [a], (lambda: E.tsum(a))


def _case_sum_axis(rng, i):
    a = _t(rng, (2, 3, 4))
    axis, keep = i % 3, bool(i % 2)
    return [a], (lambda: E.tsum(a, axis=axis, keepdims=keep))


def _case_mean(rng, i):
    a = _t(rng, (3, 4))
    return [a], (lambda: E.tmean(a))


def _case_mean_axis(rng, i):
    a = _t(rng, (2, 3, 4))
    axis, keep = i % 3, bool(i % 2)
    return [a], (lambda: E.tmean(a, axis=axis, keepdims=keep))


def _case_reshape(rng, i):
    a = _t(rng, (3, 4))
    return [a], (lambda: E.reshape(a, (2, 6) if i % 2 else (12,)))


def _case_transpose(rng, i):
    a = _t(rng, (2, 3, 4))
    perms = [(1, 0, 2), (2, 1, 0), (0, 2, 1), (2, 0, 1)]
    perm = perms[i % len(perms)]
    return [a], (lambda: E.transpose(a, perm))


def _case_expand(rng, i):
    a = _t(rng, (2, 1, 3))
    return [a], (lambda: E.expand(a, 1, 4))


def _case_slice(rng, i):
    a = _t(rng, (4, 5))
    keys = [(slice(1, 3), slice(None)), (2,), (slice(None), slice(0, 5, 2)),
            (slice(None, None, -1), 1)]
    key = keys[i % len(keys)]
    return [a], (lambda: E.tslice(a, key))


def _case_concat(rng, i):
    axis = i % 2
    a, b, c = _t(rng, (2, 3)), _t(rng, (2, 3)), _t(rng, (2, 3))
    return [a, b, c], (lambda: E.concat([a, b, c], axis=axis))


def _case_softmax(rng, i):
    if i % 2:
        a = _t(rng, (5,), scale=2.0)
        return [a], (lambda: E.softmax(a))
    a = _t(rng, (2, 3, 4), scale=2.0)
    return [a], (lambda: E.softmax(a, axis=-1))


def _case_cross_entropy(rng, i):
    if i % 2:
        a = _t(rng, (5,), scale=2.0)
        label = rng.randint(5)
        return [a], (lambda: E.cross_entropy(a, label))
    a = _t(rng, (3, 4), scale=2.0)
    labels = np.array([rng.randint(4) for _ in range(3)])
    return [a], (lambda: E.cross_entropy(a, labels))


def _case_layernorm(rng, i):
    x = _t(rng, (2, 3, 6))
    gamma = Tensor(1.0 + 0.2 * rng.normals((6,)), requires_grad=True)
    beta = _t(rng, (6,), scale=0.2)
    return [x, gamma, beta], (lambda: E.layernorm(x, gamma, beta))


def _case_channel_affine(rng, i):
    x = _t(rng, (2, 3, 4, 4))
    gamma = Tensor(1.0 + 0.2 * rng.normals((3,)), requires_grad=True)
    beta = _t(rng, (3,), scale=0.2)
    return [x, gamma, beta], (lambda: E.channel_affine(x, gamma, beta))


def _case_conv2d(rng, i):
    stride = 1 + i % 2
    padding = (i // 2) % 2
    x = _t(rng, (2, 3, 6, 6))
    w = _t(rng, (4, 3, 3, 3), scale=0.5)
    b = _t(rng, (4,), scale=0.2) if i % 3 else None
    params = [x, w] + ([b] if b is not None else [])
    return params, (lambda: E.conv2d(x, w, b, stride=stride, padding=padding))


OP_CASES: dict[str, Callable[[Rng, int], tuple]] = {
    "add": _case_binary(E.add),
    "sub": _case_binary(E.sub),
    "mul": _case_binary(E.mul),
    "div": _case_binary(E.div),
    "neg": _case_unary(E.neg),
    "exp": _case_unary(E.exp, scale=0.8),
    "log": _case_unary(E.log, shift=2.0, scale=0.3),
    "sigmoid": _case_unary(E.sigmoid, scale=2.0),
    "cos": _case_unary(E.cos, scale=2.0),
    "relu": _case_unary(E.relu),
    "pow": _case_pow,
    "matmul": _case_matmul,
    "sum": _case_sum,
    "sum_axis": _case_sum_axis,
    "mean": _case_mean,
    "mean_axis": _case_mean_axis,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "expand": _case_expand,
    "slice": _case_slice,
    "concat": _case_concat,
    "softmax": _case_softmax,
    "cross_entropy": _case_cross_entropy,
    "layernorm": _case_layernorm,
    "channel_affine": _case_channel_affine,
    "conv2d": _case_conv2d,
}


def check_op(name: str, seed: int = 7, cases: int = 10) -> float:
    """Worst finite-difference error for one op over `cases` random instances."""
    rng = Rng(seed).derive(f"gradcheck:{name}")
    builder = OP_CASES[name]
    worst = 0.0
    for i in range(cases):
        params, fwd = builder(rng, i)
        case_rng = rng.derive(f"case:{i}")

        def build_loss():
            return _weighted(fwd(), Rng(case_rng._seed))

        worst = max(worst, check_gradients(build_loss, params))
    return worst


def run_op_suite(seed: int = 7, cases: int = 10) -> dict[str, float]:
    """Check every registered op; raises if coverage is incomplete."""
    missing = set(E.REGISTERED_OPS) - set(OP_CASES)
    if missing:
        raise AssertionError(f"registered ops without gradcheck coverage: {sorted(missing)}")
    return {name: check_op(name, seed=seed, cases=cases) for name in E.REGISTERED_OPS}


def run_pipeline_check(seed: int = 7) -> dict[str, float]:
    """Finite-difference check of the full model loss at miniature sizes.

    Covers every learnable parameter of the full-fusion variant: cutoffs,
    fusion scores, posterior means/log-variances, and both backbones.
    """
    from .config import RunConfig
    from .model import build_model
    from .training import batch_loss

    cfg = RunConfig(
        variant="dctvitres", seed=seed, num_classes=3,
        image_size=8, patch_size=4, vit_embed_dim=8, vit_layers=1,
        vit_heads=2, vit_mlp_ratio=2.0, feature_dim=8,
        resnet_channels=(8,), resnet_blocks_per_stage=1,
        loss_alpha=0.3, kl_scale=10.0,
    )
    model = build_model(cfg, Rng(seed))
    data_rng = Rng(seed).derive("gradcheck:pipeline")
    images = np.clip(0.5 + 0.25 * data_rng.normals((2, 3, 8, 8)), 0.0, 1.0)
    labels = np.array([0, 2])
    noise = model.draw_head_noise(data_rng)  # fixed across FD evaluations

    def build_loss():
        return batch_loss(model, Tensor(images), labels, cfg.loss_alpha,
                          float(cfg.kl_scale), noise)

    results = {}
    params = dict(model.named_parameters())
    for p in params.values():
        p.zero_grad()
    build_loss().backward()
    analytic = {name: p.grad for name, p in params.items()}
    for name, p in params.items():
        if analytic[name] is None:
            raise AssertionError(f"parameter {name} received no gradient")
        numeric = finite_difference(lambda: build_loss().item(), p)
        results[name] = grad_error(analytic[name], numeric)
    return results


def run_full_suite(seed: int = 7, cases: int = 10):
    """(op results, pipeline results, all_passed) for the CLI and tests."""
    op_results = run_op_suite(seed=seed, cases=cases)
    pipe_results = run_pipeline_check(seed=seed)
    ok = all(v < REL_TOL for v in op_results.values()) and \
        all(v < REL_TOL for v in pipe_results.values())
    return op_results, pipe_results, ok
