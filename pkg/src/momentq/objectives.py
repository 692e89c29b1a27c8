"""Training losses: focal + L1 moment loss, intra-video saliency contrast,
symmetric InfoNCE alignment, and their weighted total.

Per-clip head tensors have shape (..., T, 1) for confidence logits and
saliency and (..., T, 2) for start/end offsets; a leading batch axis is
optional. Batched losses average per-video losses over the batch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, part: str, value: float, where: str = ""):
        self.part = part
        msg = f"non-finite loss part {part!r} = {value}"
        super().__init__(msg + (f" ({where})" if where else ""))


@dataclass
class LossWeights:
    lambda_hd: float = 1.0
    lambda_mq: float = 1.0
    lambda_align: float = 0.3
    lambda_cmt: float = 0.25

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{k} must be finite and non-negative, got {v}")


@dataclass
class LossBreakdown:
    l_mr: float
    l_hd: float
    l_mq: float
    l_align: float
    total: float
    l_cb: float = 0.0
    l_cmt: float = 0.0
    total_tensor: Optional[Tensor] = None

    def to_dict(self):
        return {k: getattr(self, k) for k in ("l_mr", "l_hd", "l_mq", "l_align", "l_cb",
                                              "l_cmt", "total")}


# ---------------------------------------------------------------- targets


def clip_targets(gt_windows, num_clips: int, clip_len: float):
    """Foreground labels (T,) and start/end offset targets (T, 2) in clip units.

    A clip is foreground iff its center lies inside a window; offsets run from
    the center to the first such window's boundaries.
    """
    labels = np.zeros(num_clips)
    offsets = np.zeros((num_clips, 2))
    centers = np.arange(num_clips) + 0.5
    for s, e in gt_windows:
        s, e = s / clip_len, e / clip_len
        inside = (centers >= s) & (centers <= e) & (labels == 0)
        labels[inside] = 1.0
        offsets[inside, 0] = centers[inside] - s
        offsets[inside, 1] = e - centers[inside]
    return labels, offsets


def _as_batch(x: Tensor):
    return x.ndim == 3


# ---------------------------------------------------------------- moment retrieval


def focal_terms(logits, targets, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Elementwise sigmoid focal loss computed from logits.

    log p = -softplus(-x), log(1-p) = -softplus(x), and the modulating
    factors are exp(-gamma * softplus(.)), so no probability is ever logged.
    """
    t = np.asarray(targets, dtype=np.float64)
    sp_pos = ad.softplus(logits)                 # -log(1 - p)
    sp_neg = ad.softplus(ad.scale(logits, -1.0))  # -log p
    pos = ad.multiply(ad.exp(ad.scale(sp_pos, -gamma)), sp_neg) if gamma else sp_neg
    neg = ad.multiply(ad.exp(ad.scale(sp_neg, -gamma)), sp_pos) if gamma else sp_pos
    return ad.add(ad.multiply(pos, alpha * t), ad.multiply(neg, (1.0 - alpha) * (1.0 - t)))


def moment_retrieval_loss(heads, gt_windows, clip_len, alpha: float = 0.25,
                          gamma: float = 2.0) -> Tensor:
    """Focal loss over all clips plus L1 offset loss averaged over foreground clips.

    ``heads`` exposes ``confidence_logits`` (..., T, 1) and ``offsets`` (..., T, 2).
    For a batch, ``gt_windows`` and ``clip_len`` are per-video sequences.
    """
    logits, offsets = heads.confidence_logits, heads.offsets
    batched = _as_batch(logits)
    T = logits.shape[-2]
    windows = gt_windows if batched else [gt_windows]
    B = len(windows)
    lens = np.broadcast_to(np.asarray(clip_len, dtype=np.float64), (B,))
    labels = np.zeros((B, T, 1))
    targets = np.zeros((B, T, 2))
    l1_w = np.zeros((B, T, 1))
    for b, (w, cl) in enumerate(zip(windows, lens)):
        lab, off = clip_targets(w, T, cl)
        labels[b, :, 0] = lab
        targets[b] = off
        n = lab.sum()
        if n > 0:
            l1_w[b, :, 0] = lab / n
    if not batched:
        labels, targets, l1_w = labels[0], targets[0], l1_w[0]
    focal = ad.scale(ad.sum(focal_terms(logits, labels, alpha, gamma)), 1.0 / (B * T))
    l1 = ad.multiply(ad.absolute(ad.subtract(offsets, targets)), l1_w)
    return ad.add(focal, ad.scale(ad.sum(l1), 1.0 / B))


# ---------------------------------------------------------------- highlight detection


def saliency_loss(saliency, labels, temperature: float = 0.07) -> Tensor:
    """Intra-video contrast: each positive clip against all clips of its video.

    ``saliency`` is (T,), (T, 1) or (B, T, 1); ``labels`` matches without the
    trailing unit axis. Videos without positives contribute zero.
    """
    s = saliency if isinstance(saliency, Tensor) else Tensor(saliency)
    lab = np.asarray(labels, dtype=np.float64)
    if s.ndim == 1:
        s_axis = 0
        lab = lab.reshape(s.shape)
        B = 1
    else:
        s_axis = -2
        lab = lab.reshape(s.shape)
        B = s.shape[0] if s.ndim == 3 else 1
    pos = (lab > 0).astype(np.float64)
    npos = pos.sum(axis=s_axis, keepdims=True)
    if np.any(npos == 0):
        log.warning("saliency loss: %d video(s) without positive clips contribute 0",
                    int((npos == 0).sum()))
    w = np.divide(pos, npos, out=np.zeros_like(pos), where=npos > 0)
    logp = ad.log_softmax(ad.scale(s, 1.0 / temperature), axis=s_axis)
    return ad.scale(ad.sum(ad.multiply(logp, w)), -1.0 / B)


# ---------------------------------------------------------------- alignment


def info_nce_from_similarity(sim, temperature: float = 0.07) -> Tensor:
    """Symmetric InfoNCE on a B x B similarity matrix whose diagonal holds the positives."""
    sim = sim if isinstance(sim, Tensor) else Tensor(sim)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"expected a square similarity matrix, got {sim.shape}")
    B = sim.shape[0]
    if B < 2:
        raise ValueError("alignment loss needs a batch of at least 2 pairs")
    logits = ad.scale(sim, 1.0 / temperature)
    eye = np.eye(B)
    v2t = ad.sum(ad.multiply(ad.log_softmax(logits, axis=1), eye))
    t2v = ad.sum(ad.multiply(ad.log_softmax(logits, axis=0), eye))
    return ad.scale(ad.add(v2t, t2v), -0.5 / B)


def alignment_loss(video, text, temperature: float = 0.07) -> Tensor:
    """Symmetric InfoNCE over cosine similarities of B pooled video/text vectors."""
    if video.shape[0] < 2:
        raise ValueError("alignment loss needs a batch of at least 2 pairs")
    return info_nce_from_similarity(ad.cosine_similarity(video, text), temperature)


# ---------------------------------------------------------------- total


def _value(x) -> float:
    return float(x.values) if isinstance(x, Tensor) else float(x)


def total_loss(parts: Mapping[str, object], weights: LossWeights, where: str = "") -> LossBreakdown:
    """l_mr + λ_hd l_hd + λ_mq (l_cb + λ_cmt l_cmt) + λ_align l_align.

    ``parts`` holds l_mr, l_hd, l_cb, l_cmt, l_align as Tensors or floats;
    missing parts count as zero.
    """
    for name in ("l_mr", "l_hd", "l_cb", "l_cmt", "l_align"):
        if name in parts and not math.isfinite(_value(parts[name])):
            raise NonFiniteLossError(name, _value(parts[name]), where)
    terms = []

    def term(name, w):
        if name in parts and w != 0:
            terms.append(ad.scale(parts[name], w) if w != 1 else ad._as_tensor(parts[name]))

    term("l_mr", 1.0)
    term("l_hd", weights.lambda_hd)
    term("l_cb", weights.lambda_mq)
    term("l_cmt", weights.lambda_mq * weights.lambda_cmt)
    term("l_align", weights.lambda_align)
    total = terms[0] if terms else Tensor(0.0)
    for t in terms[1:]:
        total = ad.add(total, t)

    l_cb = _value(parts.get("l_cb", 0.0))
    l_cmt = _value(parts.get("l_cmt", 0.0))
    l_mq = l_cb + weights.lambda_cmt * l_cmt
    bd = LossBreakdown(
        l_mr=_value(parts.get("l_mr", 0.0)), l_hd=_value(parts.get("l_hd", 0.0)), l_mq=l_mq,
        l_align=_value(parts.get("l_align", 0.0)), total=float(total.values),
        l_cb=l_cb, l_cmt=l_cmt, total_tensor=total)
    return bd
