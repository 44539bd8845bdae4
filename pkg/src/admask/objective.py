"""Losses, mask application, teacher centering/sharpening, EMA update.

Sign conventions: the encoder minimizes l_mpm + l_cls; the mask generator
minimizes alpha*l_spar + beta*l_div - l_mpm - l_cls (the adversarial flip).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ParamStore

SIN_CLAMP = 1e-3


@dataclass
class DistillState:
    center_cls: np.ndarray
    center_patch: np.ndarray
    center_momentum: float = 0.9
    teacher_temp: float = 0.04
    student_temp: float = 0.1

    @classmethod
    def fresh(cls, n_prototypes, **kw):
        return cls(center_cls=np.zeros(n_prototypes, dtype=np.float32),
                   center_patch=np.zeros(n_prototypes, dtype=np.float32), **kw)


@dataclass
class LossReport:
    l_mpm: float
    l_cls: float
    l_spar: float
    l_div: float
    l_encoder_total: float
    l_mask_total: float


def apply_mask(tokens, mask_row, mask_token):
    """Blend tokens with the mask token: token_j <- (1-m_j) x_j + m_j x_MASK.

    tokens: (..., p, d); mask_row: (..., p); mask_token: (d,). The CLS token is
    prepended after masking and is never touched here.
    """
    tokens = ad.as_tensor(tokens)
    mask_row = ad.as_tensor(mask_row)
    if mask_row.shape[-1] != tokens.shape[-2]:
        raise ValueError(
            f"mask length {mask_row.shape[-1]} != patch count {tokens.shape[-2]}")
    m = ad.reshape(mask_row, mask_row.shape + (1,))
    return ad.add(ad.mul(ad.sub(1.0, m), tokens), ad.mul(m, mask_token))


def sparsity_loss(m):
    """(1/N) sum_i 1/sin(pi/p * sum_j m_ij); extra leading axes are averaged.

    The sine argument is clamped to [eps, pi-eps] so full or empty masks give a
    large but finite penalty.
    """
    m = ad.as_tensor(m)
    p = m.shape[-1]
    row_sums = ad.reduce_sum(m, axis=-1)
    arg = ad.clip(ad.mul(row_sums, np.pi / p), SIN_CLAMP, np.pi - SIN_CLAMP)
    return ad.reduce_mean(ad.div(1.0, ad.sin(arg)))


def diversity_loss(m):
    """(1/N^2) sum_ik (1 - cos(m_i, m_k)) over mask rows, i=k terms included."""
    m = ad.as_tensor(m)
    gram = ad.matmul(m, ad.swapaxes(m, -1, -2))                    # (..., N, N)
    sq = ad.reduce_sum(ad.mul(m, m), axis=-1, keepdims=True)
    norms = ad.sqrt(ad.add(sq, 1e-24))
    cos = ad.div(gram, ad.mul(norms, ad.swapaxes(norms, -1, -2)))
    return ad.reduce_mean(ad.sub(1.0, cos))


def sharpen_teacher(logits, state: DistillState, which):
    """Teacher probabilities: softmax((logits - center) / teacher_temp).

    Pure numpy; the teacher side never participates in the gradient tape.
    """
    center = state.center_cls if which == "cls" else state.center_patch
    z = (logits - center) / state.teacher_temp
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def update_center(state: DistillState, batch_logits, which):
    """center <- momentum*center + (1-momentum)*batch_mean(logits)."""
    mean = np.asarray(batch_logits).reshape(-1, np.asarray(batch_logits).shape[-1]).mean(axis=0)
    mom = state.center_momentum
    if which == "cls":
        state.center_cls = mom * state.center_cls + (1.0 - mom) * mean
    elif which == "patch":
        state.center_patch = mom * state.center_patch + (1.0 - mom) * mean
    else:
        raise ValueError(f"unknown center {which!r}")


def mpm_loss(student_patch_probs, teacher_patch_probs):
    """Masked patch modeling cross-entropy, averaged over patch rows.

    Both arguments are row-stochastic over K prototypes; the teacher side is a
    plain array (detached).
    """
    sp = ad.as_tensor(student_patch_probs)
    tp = np.asarray(teacher_patch_probs.data if isinstance(teacher_patch_probs, Tensor)
                    else teacher_patch_probs)
    rows = int(np.prod(sp.shape[:-1]))
    ce = ad.mul(Tensor(tp.astype(sp.dtype)), ad.log(sp))
    return ad.div(ad.neg(ad.reduce_sum(ce)), float(rows))


def cls_loss(student_cls_probs, teacher_cls_probs, pairing):
    """Mean cross-entropy over (teacher view, student view) pairs.

    pairing: list of (teacher_row, student_row) index pairs; must include at
    least one pair (i.e. at least one global teacher view).
    """
    if len(pairing) < 1:
        raise ValueError("cls_loss needs at least one (teacher, student) pair")
    sp = ad.as_tensor(student_cls_probs)
    tp = np.asarray(teacher_cls_probs.data if isinstance(teacher_cls_probs, Tensor)
                    else teacher_cls_probs)
    t_idx = np.asarray([t for t, _ in pairing], dtype=np.int64)
    s_idx = np.asarray([s for _, s in pairing], dtype=np.int64)
    log_s = ad.log(sp[s_idx])
    ce = ad.mul(Tensor(tp[t_idx].astype(sp.dtype)), log_s)
    return ad.div(ad.neg(ad.reduce_sum(ce)), float(len(pairing)))


def combine_losses(l_mpm, l_cls, l_spar, l_div, alpha, beta) -> LossReport:
    """Scalar bookkeeping per the adversarial objective split."""
    vals = [float(v.data) if isinstance(v, Tensor) else float(v)
            for v in (l_mpm, l_cls, l_spar, l_div)]
    l_mpm, l_cls, l_spar, l_div = vals
    return LossReport(
        l_mpm=l_mpm, l_cls=l_cls, l_spar=l_spar, l_div=l_div,
        l_encoder_total=l_mpm + l_cls,
        l_mask_total=alpha * l_spar + beta * l_div - l_mpm - l_cls)


def ema_update(teacher: ParamStore, student: ParamStore, lam):
    """theta_t <- lam*theta_t + (1-lam)*theta_s over matching names."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"EMA momentum must be in [0, 1], got {lam}")
    t_names, s_names = set(teacher.names()), set(student.names())
    if t_names != s_names:
        raise ValueError(
            f"EMA name sets differ: only-teacher={sorted(t_names - s_names)}, "
            f"only-student={sorted(s_names - t_names)}")
    for name, t in teacher.items():
        s = student[name]
        t.data = (lam * t.data.astype(np.float64)
                  + (1.0 - lam) * s.data.astype(np.float64)).astype(t.dtype)


def entropy(probs):
    """Mean Shannon entropy of probability rows (natural log)."""
    p = np.asarray(probs)
    return float(-(p * np.log(np.maximum(p, ad.LOG_CLAMP))).sum(axis=-1).mean())
