"""Task and distillation losses, and the rules for composing them.

Cross-entropy keeps a 1/num_classes factor by default (`scale_by_classes`
restores the conventional form when cleared).  The distillation KLD is
computed between temperature-scaled distributions and batch-averaged; its
gradient w.r.t. student logits is (yS - yT) / tau per row.  Attention and
hidden distillation are plain per-element MSEs averaged over taps.  The
product-quantization composite adds per-layer reconstruction error plus an
attention term restricted to the already-quantized layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

LOG_FLOOR = 1e-12

VARIANTS = ("ce", "kld", "att", "hid", "att_kld")


@dataclass(frozen=True)
class LossConfig:
    """Composite-loss knobs: alpha scales KLD, beta scales attention/hidden."""

    alpha: float = 0.5
    beta: float = 10.0
    tau: float = 2.0
    variant: str = "ce"
    scale_ce_by_classes: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"loss config: alpha must be in [0, 1], got {self.alpha}")
        if self.beta < 0.0:
            raise ValueError(f"loss config: beta must be >= 0, got {self.beta}")
        if not self.tau > 0.0:
            raise ValueError(f"loss config: tau must be positive, got {self.tau}")
        if self.variant not in VARIANTS:
            raise ValueError(f"loss config: variant must be one of {VARIANTS}, got {self.variant!r}")


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"one_hot: label out of range [0, {classes})")
    out = np.zeros(labels.shape + (classes,), dtype=np.float32)
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def _check_distribution(name: str, probs: np.ndarray):
    rows = probs.reshape(-1, probs.shape[-1])
    if not np.allclose(rows.sum(axis=-1), 1.0, atol=1e-4):
        raise ValueError(f"{name}: rows must sum to 1 (got a non-normalized distribution)")
    if (rows < -1e-7).any():
        raise ValueError(f"{name}: negative probabilities")


def cross_entropy(probs: Tensor, onehot: np.ndarray, scale_by_classes: bool = True) -> Tensor:
    """Mean CE over rows: -(1/d_y) sum y log yhat (1/d_y dropped on request)."""
    onehot = np.asarray(onehot, dtype=probs.dtype)
    if onehot.shape != probs.shape:
        raise ValueError(f"cross_entropy: shape mismatch {probs.shape} vs {onehot.shape}")
    _check_distribution("cross_entropy", probs.data)
    rows = onehot.reshape(-1, onehot.shape[-1])
    if not (np.all((rows == 0.0) | (rows == 1.0)) and np.all(rows.sum(axis=-1) == 1.0)):
        raise ValueError("cross_entropy: targets must be one-hot rows")
    num_rows = rows.shape[0]
    classes = probs.shape[-1]
    scale = -1.0 / (num_rows * classes) if scale_by_classes else -1.0 / num_rows
    return T.mul_scalar(T.sum_all(T.mul(T.Tensor(onehot), T.log_clamped(probs, LOG_FLOOR))), scale)


def kld_distill(student_probs: Tensor, teacher_probs: np.ndarray, tau: float) -> Tensor:
    """Mean over rows of sum yT (log yT - log yS); zero exactly when yS == yT.

    Both inputs must already be temperature-tau softmax outputs; tau is
    validated here and applied by the caller's softmax.
    """
    if not tau > 0.0:
        raise ValueError(f"kld_distill: tau must be positive, got {tau}")
    teacher = np.asarray(teacher_probs, dtype=student_probs.dtype)
    if teacher.shape != student_probs.shape:
        raise ValueError(f"kld_distill: shape mismatch {student_probs.shape} vs {teacher.shape}")
    _check_distribution("kld_distill (student)", student_probs.data)
    _check_distribution("kld_distill (teacher)", teacher)
    num_rows = int(np.prod(teacher.shape[:-1])) if teacher.ndim > 1 else 1
    # same clamped-log expression as the student side, so yS == yT cancels exactly
    log_teacher = T.Tensor(np.log(np.maximum(teacher, LOG_FLOOR)))
    gap = T.sub(log_teacher, T.log_clamped(student_probs, LOG_FLOOR))
    return T.mul_scalar(T.sum_all(T.mul(T.Tensor(teacher), gap)), 1.0 / num_rows)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else T.Tensor(x)


def attention_distill(student_trace, teacher_trace) -> Tensor:
    """Mean over all layer/head taps of the per-element MSE between them."""
    if len(student_trace) != len(teacher_trace) or not student_trace:
        raise ValueError(
            f"attention_distill: trace layer counts differ "
            f"({len(student_trace)} vs {len(teacher_trace)})")
    terms = []
    for l, (s_heads, t_heads) in enumerate(zip(student_trace, teacher_trace)):
        if len(s_heads) != len(t_heads):
            raise ValueError(f"attention_distill: head counts differ at layer {l}")
        for s, t in zip(s_heads, t_heads):
            s, t = _as_tensor(s), _as_tensor(t)
            if s.shape != t.shape:
                raise ValueError(
                    f"attention_distill: trace shape mismatch {s.shape} vs {t.shape}")
            terms.append(T.mean_all(T.square(T.sub(s, t))))
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    return T.mul_scalar(total, 1.0 / len(terms))


def hidden_distill(student_hidden, teacher_hidden) -> Tensor:
    """Mean over layers of the per-element MSE between hidden states."""
    if len(student_hidden) != len(teacher_hidden) or not student_hidden:
        raise ValueError(
            f"hidden_distill: layer counts differ "
            f"({len(student_hidden)} vs {len(teacher_hidden)})")
    terms = []
    for s, t in zip(student_hidden, teacher_hidden):
        s, t = _as_tensor(s), _as_tensor(t)
        if s.shape != t.shape:
            raise ValueError(f"hidden_distill: shape mismatch {s.shape} vs {t.shape}")
        terms.append(T.mean_all(T.square(T.sub(s, t))))
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    return T.mul_scalar(total, 1.0 / len(terms))


def compose_sdq(cfg: LossConfig, ce: Tensor, kld: Tensor | None = None,
                att: Tensor | None = None, hid: Tensor | None = None) -> Tensor:
    """Combine the task loss with the variant's distillation terms.

    kld enters as alpha * tau^2 * kld (the tau^2 keeps soft-target gradients
    on the hard-loss scale); att/hid enter as beta * term.
    """
    needs = {"ce": (), "kld": ("kld",), "att": ("att",), "hid": ("hid",),
             "att_kld": ("kld", "att")}[cfg.variant]
    supplied = {"kld": kld, "att": att, "hid": hid}
    for key in needs:
        if supplied[key] is None:
            raise ValueError(f"compose_sdq: variant {cfg.variant!r} requires a {key} term")
    total = ce
    if "kld" in needs:
        total = T.add(total, T.mul_scalar(kld, cfg.alpha * cfg.tau * cfg.tau))
    if "att" in needs:
        total = T.add(total, T.mul_scalar(att, cfg.beta))
    if "hid" in needs:
        total = T.add(total, T.mul_scalar(hid, cfg.beta))
    return total


def sdq_ipq_loss(weights, reconstructions, student_att, teacher_att,
                 beta: float, finetuned: int, total_layers: int) -> Tensor:
    """Codebook-training composite over the quantized layers.

    Per quantized layer: squared reconstruction error of its weights, plus
    beta / (num quantized) times the raw sum of squared attention-output
    differences for that layer.  With everything still finetuned (F == L)
    the contribution is zero.
    """
    if not 0 <= finetuned <= total_layers:
        raise ValueError(
            f"sdq_ipq_loss: finetuned must be in [0, {total_layers}], got {finetuned}")
    num_quantized = total_layers - finetuned
    if num_quantized == 0:
        return T.Tensor(np.float32(0.0))
    if len(weights) != num_quantized or len(reconstructions) != num_quantized:
        raise ValueError(
            f"sdq_ipq_loss: expected {num_quantized} quantized layers, got "
            f"{len(weights)} weights / {len(reconstructions)} reconstructions")
    if student_att is not None and (len(student_att) != num_quantized
                                    or len(teacher_att) != num_quantized):
        raise ValueError(
            f"sdq_ipq_loss: attention taps must cover exactly {num_quantized} layers")
    total = None
    for i in range(num_quantized):
        w_list = weights[i] if isinstance(weights[i], (list, tuple)) else [weights[i]]
        r_list = (reconstructions[i] if isinstance(reconstructions[i], (list, tuple))
                  else [reconstructions[i]])
        if len(w_list) != len(r_list):
            raise ValueError("sdq_ipq_loss: weight/reconstruction count mismatch in a layer")
        term = None
        for w, r in zip(w_list, r_list):
            w, r = _as_tensor(w), _as_tensor(r)
            if w.shape != r.shape:
                raise ValueError(f"sdq_ipq_loss: shape mismatch {w.shape} vs {r.shape}")
            piece = T.sum_all(T.square(T.sub(r, w)))
            term = piece if term is None else T.add(term, piece)
        if student_att is not None and beta > 0.0:
            att_term = None
            for s, t in zip(student_att[i], teacher_att[i]):
                s, t = _as_tensor(s), _as_tensor(t)
                if s.shape != t.shape:
                    raise ValueError(
                        f"sdq_ipq_loss: attention shape mismatch {s.shape} vs {t.shape}")
                piece = T.sum_all(T.square(T.sub(s, t)))
                att_term = piece if att_term is None else T.add(att_term, piece)
            term = T.add(term, T.mul_scalar(att_term, beta / num_quantized))
        total = term if total is None else T.add(total, term)
    return total
