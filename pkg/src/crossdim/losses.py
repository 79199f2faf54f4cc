"""Image-text contrastive loss, DINO-style self-distillation and the EMA teacher."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .nn import ParamRegistry
from .tensor import Tensor
from .tokenizers import TokenSequence


# ---------------------------------------------------------------------------
# image-text contrastive


def info_nce_from_logits(logits: Tensor) -> Tensor:
    """Symmetric cross-entropy with matching pairs on the diagonal of (n, n) logits."""
    n = logits.shape[0]
    if logits.ndim != 2 or logits.shape[1] != n:
        raise T.ShapeError(f"contrastive logits must be square, got {logits.shape}")
    diag = (np.arange(n), np.arange(n))
    rows = T.log_softmax(logits, axis=1)[diag]
    cols = T.log_softmax(logits, axis=0)[diag]
    return T.scale(T.add(T.sum(rows), T.sum(cols)), -0.5 / n)


def info_nce_vl(img: Tensor, txt: Tensor, log_temperature) -> Tensor:
    """CLIP loss between image and report embeddings (rows are re-normalised).

    ``log_temperature`` is the (learnable) log of the softmax temperature.
    """
    img, txt = T._as_tensor(img), T._as_tensor(txt)
    if img.ndim != 2 or img.shape != txt.shape:
        raise T.ShapeError(f"image batch {img.shape} and text batch {txt.shape} do not pair up")
    if img.shape[0] < 1:
        raise ValueError("empty batch")
    sims = T.matmul(T.l2_normalize(img), T.transpose(T.l2_normalize(txt)))
    if isinstance(log_temperature, Tensor):
        logits = T.mul(sims, T.exp(T.neg(log_temperature)))
    else:
        logits = T.scale(sims, math.exp(-float(log_temperature)))
    return info_nce_from_logits(logits)


# ---------------------------------------------------------------------------
# self-distillation


@dataclass
class DinoHead:
    """Temperatures and centring state of the distillation head.

    The head's MLP weights live in the parameter registry (``dino.*``).
    """

    center: np.ndarray
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    center_momentum: float = 0.9

    def __post_init__(self):
        if not 0 < self.teacher_temp < self.student_temp:
            raise ValueError("teacher temperature must be positive and below the student's")
        self.center = np.asarray(self.center)
        if not np.issubdtype(self.center.dtype, np.floating):
            self.center = self.center.astype(np.float64)

    @classmethod
    def zeros(cls, num_prototypes: int, **kw) -> "DinoHead":
        return cls(np.zeros(num_prototypes), **kw)


def teacher_probs(teacher_logits, head: DinoHead) -> np.ndarray:
    """Centred, sharpened teacher distribution; never part of the tape."""
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    z = (t - head.center.astype(t.dtype)) / head.teacher_temp
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dino_pair_loss(student_logits: Tensor, teacher_logits, head: DinoHead, reduce: bool = True) -> Tensor:
    """H(p_t, p_s) = -sum p_t log p_s per row; mean over rows when ``reduce``.

    Gradient reaches only ``student_logits``.
    """
    student_logits = T._as_tensor(student_logits)
    t_shape = teacher_logits.shape
    if student_logits.shape != tuple(t_shape):
        raise T.ShapeError(f"student logits {student_logits.shape} vs teacher {tuple(t_shape)}")
    pt = teacher_probs(teacher_logits, head).astype(student_logits.dtype)
    log_ps = T.log_softmax(T.scale(student_logits, 1.0 / head.student_temp), axis=-1)
    per_row = T.neg(T.sum(T.mul(log_ps, Tensor(pt, dtype=pt.dtype)), axis=-1))
    return T.mean(per_row) if reduce else per_row


def match_tokens(student: TokenSequence, teacher: TokenSequence) -> np.ndarray:
    """Teacher position of each student patch token, matched by provenance -> (B, K)."""
    if student.batch_size != teacher.batch_size:
        raise T.ShapeError("student and teacher views have different batch sizes")
    s_start = 1 if student.has_cls else 0
    t_start = 1 if teacher.has_cls else 0
    out = []
    for b in range(student.batch_size):
        lookup = {key: pos for pos, key in enumerate(teacher.provenance(b)) if pos >= t_start}
        row = []
        for key in student.provenance(b)[s_start:]:
            if key not in lookup:
                raise KeyError(f"student token {key} has no teacher counterpart")
            row.append(lookup[key])
        out.append(row)
    matched = np.asarray(out, dtype=np.intp).reshape(student.batch_size, -1)
    if matched.shape[1] == 0:
        raise ValueError("no patch tokens shared between student and teacher views")
    return matched


def icl_loss(student_cls_logits: Tensor, teacher_cls_logits, head: DinoHead) -> Tensor:
    """Distillation on the global [CLS] token, averaged over the batch."""
    return dino_pair_loss(student_cls_logits, teacher_cls_logits, head)


def pcl_loss(student_patch_logits: Tensor, teacher_patch_logits, head: DinoHead) -> Tensor:
    """Per-sample mean distillation over matched patch tokens -> (B,)."""
    if student_patch_logits.ndim != 3 or student_patch_logits.shape[1] == 0:
        raise ValueError("patch distillation needs at least one matched token per sample")
    return T.mean(dino_pair_loss(student_patch_logits, teacher_patch_logits, head, reduce=False), axis=1)


def center_update(head: DinoHead, teacher_logits, momentum: float | None = None) -> DinoHead:
    """c <- m c + (1 - m) mean(teacher logits over the batch rows)."""
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    t = t.reshape(-1, t.shape[-1])
    if t.shape[0] == 0:
        raise ValueError("center update needs a nonempty batch")
    m = head.center_momentum if momentum is None else momentum
    c = head.center
    return replace(head, center=(m * c + (1.0 - m) * t.mean(axis=0)).astype(c.dtype, copy=False))


# ---------------------------------------------------------------------------
# EMA teacher


@dataclass
class TeacherState:
    params: ParamRegistry
    head: DinoHead
    momentum: float = 0.99

    @classmethod
    def from_student(cls, student: ParamRegistry, head: DinoHead, momentum: float = 0.99) -> "TeacherState":
        return cls({k: Tensor(v.data, dtype=v.dtype) for k, v in student.items()}, head, momentum)


def ema_update(teacher: TeacherState, student: ParamRegistry, momentum: float) -> TeacherState:
    """teacher <- m * teacher + (1 - m) * student, elementwise, in place."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"EMA momentum {momentum} outside [0, 1]")
    if teacher.params.keys() != student.keys():
        raise KeyError("teacher and student registries differ")
    for name, t in teacher.params.items():
        s = student[name]
        if s.shape != t.shape:
            raise T.ShapeError(f"{name}: teacher {t.shape} vs student {s.shape}")
        t.data = (momentum * t.data + (1.0 - momentum) * s.data).astype(t.dtype, copy=False)
    teacher.momentum = momentum
    return teacher


def ema_momentum(step: int, total_steps: int, start: float = 0.99, end: float = 0.9995) -> float:
    """Cosine ramp of the EMA momentum from ``start`` to ``end``."""
    if total_steps <= 0:
        return end
    frac = min(max(step / total_steps, 0.0), 1.0)
    return end - (end - start) * (math.cos(math.pi * frac) + 1.0) / 2.0


# ---------------------------------------------------------------------------
# combination


@dataclass
class LossReport:
    vl: float
    icl: float
    pcl: float
    total: float
    lambda_icl: float = 1.0
    lambda_pcl: float = 1.0


def combine_losses(vl: Tensor, icl, pcl, lambda_icl: float = 1.0, lambda_pcl: float = 1.0) -> Tensor:
    """Differentiable total L_vl + lambda_icl L_icl + lambda_pcl L_pcl."""
    total = vl
    for term, lam in ((icl, lambda_icl), (pcl, lambda_pcl)):
        if isinstance(term, Tensor) and lam != 0.0:
            total = T.add(total, T.scale(term, lam))
    return total


def total_loss(vl, icl, pcl, lambda_icl: float = 1.0, lambda_pcl: float = 1.0) -> LossReport:
    vals = [float(x.item() if isinstance(x, Tensor) else x) for x in (vl, icl, pcl)]
    if not all(math.isfinite(v) for v in vals):
        raise FloatingPointError(f"non-finite loss terms {vals}")
    vl_f, icl_f, pcl_f = vals
    return LossReport(vl_f, icl_f, pcl_f, vl_f + lambda_icl * icl_f + lambda_pcl * pcl_f, lambda_icl, lambda_pcl)
