"""Finite-difference gradient checks for every layer and the full models.

All checks run in float64.  For each checked tensor the error is

    max |analytic - numeric| / max(max |analytic|, max |numeric|, FLOOR)

over the probed entries, where the numeric gradient is a central difference
with step ``eps``.  Large tensors are probed at a random subset of entries.
FLOOR keeps entries whose true gradient is exactly zero (e.g. the key bias
of attention, to which softmax is invariant) from turning difference
round-off (~1e-11) into a relative error of 1.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .multinet import ModelSpec, build_model
from .nn import functional as F
from .nn.layers import Conv2d, LayerNorm, Linear
from .tensor import Tensor, no_grad

TOLERANCE = 1e-4
EPS = 1e-5
FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), FLOOR)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(loss_fn: Callable[[], Tensor], tensors: dict, eps: float = EPS, max_entries: int = 24,
                    rng: np.random.Generator | None = None) -> dict:
    """Compare backprop gradients of ``loss_fn()`` against central differences.

    ``tensors`` maps names to leaf tensors that ``loss_fn`` reads.  Returns
    ``{name: relative error}``.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors.values():
        t.grad = None
    loss_fn().backward()
    errors = {}
    for name, t in tensors.items():
        analytic_full = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        if flat.size <= max_entries:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(len(idx))
        with no_grad():
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(loss_fn().data)
                flat[i] = orig - eps
                fm = float(loss_fn().data)
                flat[i] = orig
                numeric[j] = (fp - fm) / (2 * eps)
        errors[name] = relative_error(analytic_full.reshape(-1)[idx], numeric)
    return errors


@dataclass
class GradCheckRow:
    component: str
    max_rel_error: float
    tensors: int
    seconds: float
    error: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error <= TOLERANCE)


# ------------------------------------------------------------------ cases
def _leaf(rng, shape, scale=1.0):
    return Tensor(rng.uniform(-1, 1, shape) * scale, requires_grad=True, dtype=np.float64)


def _case_elementwise(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (4,))
    c = Tensor(rng.uniform(1.5, 2.5, (3, 4)), requires_grad=True, dtype=np.float64)
    w = rng.uniform(-1, 1, (3, 4))
    return (lambda: ((a + b) * c - a / c - b * 2.0 + T.exp(a * 0.5) + T.log(c) + T.tanh(a) + T.sqrt(c)
                     + (a ** 2)).__mul__(Tensor(w)).sum()), {"a": a, "b": b, "c": c}


def _case_matmul(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (4, 2))
    w = Tensor(rng.uniform(-1, 1, (3, 2)))
    return (lambda: (a @ b * w).sum()), {"a": a, "b": b}


def _case_batched_matmul(rng):
    a, b = _leaf(rng, (2, 3, 3, 4)), _leaf(rng, (2, 3, 4, 5))
    w = Tensor(rng.uniform(-1, 1, (2, 3, 3, 5)))
    return (lambda: (a @ b * w).sum()), {"a": a, "b": b}


def _case_shape_ops(rng):
    a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 5))
    w = Tensor(rng.uniform(-1, 1, (4, 4)))

    def f():
        c = T.concat([a, b], axis=1)
        r = c.reshape(4, 4).transpose(1, 0)
        return (r * w).sum() + (c[:, 1:6] * c[:, 2:7]).sum() + T.broadcast_to(a[:1], (3, 3)).mean()

    return f, {"a": a, "b": b}


def _case_reductions(rng):
    a = _leaf(rng, (2, 3, 4))
    return (lambda: (a.sum(axis=1) * a.mean(axis=(0, 1))).sum() + (a * a.mean(axis=2, keepdims=True)).sum()), {"a": a}


def _case_relu_gelu(rng):
    a = _leaf(rng, (4, 5))
    w = Tensor(rng.uniform(-1, 1, (4, 5)))
    return (lambda: ((T.relu(a) + F.gelu(a)) * w).sum()), {"a": a}


def _case_softmax(rng):
    a = _leaf(rng, (3, 6), scale=3.0)
    w = Tensor(rng.uniform(-1, 1, (3, 6)))
    return (lambda: (F.softmax(a) * w).sum() + (F.log_softmax(a) * w).sum()), {"a": a}


def _case_layernorm(rng):
    x = _leaf(rng, (2, 3, 6))
    ln = LayerNorm(6)
    ln.weight.data = rng.uniform(0.5, 1.5, 6)
    ln.bias.data = rng.uniform(-0.5, 0.5, 6)
    w = Tensor(rng.uniform(-1, 1, (2, 3, 6)))
    return (lambda: (ln(x) * w).sum()), {"x": x, "gamma": ln.weight, "beta": ln.bias}


def _case_dropout(rng):
    x = _leaf(rng, (4, 6))
    w = Tensor(rng.uniform(-1, 1, (4, 6)))
    return (lambda: (F.dropout(x, 0.3, True, np.random.default_rng(5)) * w).sum()), {"x": x}


def _case_linear(rng):
    lin = Linear(5, 3, rng)
    lin.bias.data = rng.uniform(-1, 1, 3)
    x = _leaf(rng, (2, 4, 5))
    w = Tensor(rng.uniform(-1, 1, (2, 4, 3)))
    return (lambda: (lin(x) * w).sum()), {"x": x, "weight": lin.weight, "bias": lin.bias}


def _conv_case(kernel, stride, padding):
    def case(rng):
        conv = Conv2d(2, 3, kernel, rng, stride=stride, padding=padding)
        conv.bias.data = rng.uniform(-1, 1, 3)
        x = _leaf(rng, (2, 2, 5, 6))
        out_shape = conv(x).shape
        w = Tensor(rng.uniform(-1, 1, out_shape))
        return (lambda: (conv(x) * w).sum()), {"x": x, "weight": conv.weight, "bias": conv.bias}

    return case


def _case_maxpool(rng):
    x = _leaf(rng, (2, 2, 6, 6))
    w1 = Tensor(rng.uniform(-1, 1, (2, 2, 3, 3)))
    w2 = Tensor(rng.uniform(-1, 1, (2, 2, 2, 2)))
    return (lambda: (F.maxpool2d(x, 2, 2) * w1).sum() + (F.maxpool2d(x, 3, 2) * w2).sum()), {"x": x}


def _case_adaptive_pool(rng):
    x = _leaf(rng, (1, 2, 7, 5))
    w = Tensor(rng.uniform(-1, 1, (1, 2, 3, 2)))
    return (lambda: (F.adaptive_avg_pool2d(x, (3, 2)) * w).sum()), {"x": x}


def _case_attention(rng):
    from .vit import MultiHeadAttention

    mha = MultiHeadAttention(8, 2, rng)
    x = _leaf(rng, (2, 5, 8))
    w = Tensor(rng.uniform(-1, 1, (2, 5, 8)))
    params = dict(mha.named_parameters())
    return (lambda: (mha(x) * w).sum()), {"x": x, **params}


def _case_encoder_block(rng):
    from .vit import EncoderBlock, EncoderConfig

    blk = EncoderBlock(EncoderConfig(depth=1, heads=2, embed_dim=8, mlp_dim=16, dropout=0.0), rng)
    x = _leaf(rng, (2, 4, 8))
    w = Tensor(rng.uniform(-1, 1, (2, 4, 8)))
    return (lambda: (blk(x) * w).sum()), {"x": x, **dict(blk.named_parameters())}


def _case_residual_block(rng):
    from .multinet import ResidualBlock

    blk = ResidualBlock(2, 3, 2, rng)
    x = _leaf(rng, (2, 2, 6, 6))
    w = Tensor(rng.uniform(-1, 1, blk(x).shape))
    return (lambda: (blk(x) * w).sum()), {"x": x, **dict(blk.named_parameters())}


def _case_bottleneck(rng):
    from .multinet import InvertedBottleneck

    blk = InvertedBottleneck(3, 3, 1, 2, rng)
    x = _leaf(rng, (2, 3, 4, 4))
    w = Tensor(rng.uniform(-1, 1, blk(x).shape))
    return (lambda: (blk(x) * w).sum()), {"x": x, **dict(blk.named_parameters())}


def _loss_case(form):
    def case(rng):
        from .train.losses import cross_entropy, one_hot

        logits = _leaf(rng, (4, 8), scale=2.0)
        target = one_hot(rng.integers(0, 8, 4), 8, dtype=np.float64)
        return (lambda: cross_entropy(logits, target, form)), {"logits": logits}

    return case


def _distill_case(mode):
    def case(rng):
        from .train.losses import distillation_loss, one_hot

        cl, dl = _leaf(rng, (4, 8), 2.0), _leaf(rng, (4, 8), 2.0)
        teacher = rng.uniform(-2, 2, (4, 8))
        target = one_hot(rng.integers(0, 8, 4), 8, dtype=np.float64)
        return (lambda: distillation_loss({"class_logits": cl, "distill_logits": dl}, target, teacher, mode)), \
            {"class_logits": cl, "distill_logits": dl}

    return case


def _model_case(pairing, image_size):
    def case(rng):
        from .train.losses import one_hot
        from .train.loop import TrainConfig, model_loss

        spec = ModelSpec(pairing=pairing, image_size=image_size, vit_preset="micro", cnn_preset="tiny",
                         patch_size=4)
        model = build_model(spec, rng).eval()
        # non-zero biases so every parameter influences the loss
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.data = rng.uniform(-0.1, 0.1, p.shape)
        x = _leaf(rng, (2, 3, image_size, image_size))
        target = one_hot(rng.integers(0, 8, 2), 8, dtype=np.float64)
        cfg = TrainConfig()
        tensors = {"input": x, **dict(model.named_parameters())}
        return (lambda: model_loss(model, model(x), target, cfg)), tensors

    return case


LAYER_CASES = {
    "elementwise": _case_elementwise,
    "matmul": _case_matmul,
    "matmul-batched": _case_batched_matmul,
    "reshape/transpose/concat/slice": _case_shape_ops,
    "sum/mean": _case_reductions,
    "relu+gelu": _case_relu_gelu,
    "softmax+log_softmax": _case_softmax,
    "layernorm": _case_layernorm,
    "dropout(train, fixed mask)": _case_dropout,
    "linear": _case_linear,
    "conv2d 3x3 same": _conv_case(3, 1, "same"),
    "conv2d 3x3 same stride2": _conv_case(3, 2, "same"),
    "conv2d 2x3 valid": _conv_case(2, 1, "valid"),
    "conv2d 1x1": _conv_case(1, 1, "same"),
    "maxpool2d": _case_maxpool,
    "adaptive_avg_pool2d": _case_adaptive_pool,
    "multi_head_attention": _case_attention,
    "encoder_block": _case_encoder_block,
    "residual_block": _case_residual_block,
    "inverted_bottleneck": _case_bottleneck,
    "loss categorical": _loss_case("categorical"),
    "loss eq3-literal": _loss_case("eq3-literal"),
    "distill hard": _distill_case("hard"),
    "distill soft:2": _distill_case("soft:2"),
}

MODEL_CASES = {
    "ViT-tiny (D=8, depth 1, 2 heads, 8x8, P=4)": _model_case("vit", 8),
    "DeiT-tiny (D=8, depth 1, 2 heads, 8x8, P=4)": _model_case("deit", 8),
    "MultiNet-reduced (tiny widths, 16x16)": _model_case("multinet", 16),
    "ViT+MultiNet fused (16x16)": _model_case("vit+multinet", 16),
}


def all_cases() -> dict:
    return {**LAYER_CASES, **MODEL_CASES}


def run_gradcheck(cases: dict | None = None, seed: int = 0, max_entries: int = 12, eps: float = EPS) -> list:
    """Run each case at float64 and return one :class:`GradCheckRow` per component."""
    cases = cases if cases is not None else all_cases()
    rows = []
    with T.default_dtype(np.float64):
        for i, (name, build) in enumerate(cases.items()):
            start = time.perf_counter()
            rng = np.random.default_rng([seed, i])
            loss_fn, tensors = build(rng)
            message = ""
            try:
                errors = check_gradients(loss_fn, tensors, eps=eps, max_entries=max_entries, rng=rng)
                worst = max(errors.values()) if errors else 0.0
            except Exception as exc:  # a crashing backward counts as a failure of that component
                worst, errors, message = float("inf"), {}, f"{type(exc).__name__}: {exc}"
            rows.append(GradCheckRow(name, worst, len(errors), time.perf_counter() - start, message))
    return rows


def format_rows(rows: list) -> str:
    width = max(len(r.component) for r in rows)
    lines = [f"{'component':<{width}}  {'max rel err':>11}  status"]
    for r in rows:
        line = f"{r.component:<{width}}  {r.max_rel_error:>11.3e}  {'PASS' if r.passed else 'FAIL'}"
        lines.append(line + (f"  ({r.error})" if r.error else ""))
    return "\n".join(lines)
