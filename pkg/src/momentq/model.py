"""Encoder-only grounding model with a switchable quantization site.

Pipeline: clip features -> linear projection (z_s) -> L layers of
self-attention / cross-attention to text / feed-forward (z_t) -> heads.
The codebook lookup can sit on the patch features (``image``), on z_s
(``clip``) or on z_t (``moment``); ``fusion`` decides what flows on from the
lookup site.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codebook import Assignment, Codebook, codebook_loss, commitment_loss, lookup, project
from .metrics import temporal_iou

PLACEMENTS = ("none", "image", "clip", "moment")
FUSIONS = ("hard", "soft", "add", "concat")
PROJECTIONS = ("projected", "basic")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d: int = 256
    encoder_layers: int = 2
    attention_heads: int = 4
    placement: str = "moment"
    fusion: Optional[str] = None
    K: int = 1024
    projection: str = "projected"
    input_dim: Optional[int] = None
    ffn_dim: Optional[int] = None

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")
        if self.fusion is None:
            # lookup before the encoder feeds it discrete rows; after it, continuous ones
            self.fusion = "soft" if self.placement in ("moment", "none") else "hard"
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.projection not in PROJECTIONS:
            raise ConfigError(f"projection must be one of {PROJECTIONS}, got {self.projection!r}")
        if self.d < 1 or self.K < 1 or self.encoder_layers < 0 or self.attention_heads < 1:
            raise ConfigError("d, K, attention_heads must be positive and encoder_layers >= 0")
        if self.d % self.attention_heads:
            raise ConfigError(f"d={self.d} is not divisible by attention_heads={self.attention_heads}")
        if self.input_dim is None:
            self.input_dim = self.d
        if self.ffn_dim is None:
            self.ffn_dim = 2 * self.d
        if self.placement == "image" and self.input_dim != self.d:
            raise ConfigError("image placement quantizes raw patches and needs input_dim == d")

    @property
    def quantized(self) -> bool:
        return self.placement != "none"

    def to_dict(self):
        return asdict(self)


@dataclass
class HeadOutputs:
    confidence_logits: Tensor
    offsets: Tensor
    saliency: Tensor

    @property
    def confidence(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.confidence_logits.values))

    def numpy(self) -> Dict[str, np.ndarray]:
        return {"confidence": self.confidence, "offsets": self.offsets.values,
                "saliency": self.saliency.values}


@dataclass
class ForwardResult:
    heads: HeadOutputs
    z_s: Tensor
    z_t: Tensor
    features: Tensor
    text: Tensor
    assignment: Optional[Assignment] = None
    l_cb: Optional[Tensor] = None
    l_cmt: Optional[Tensor] = None
    lookups: int = 0

    def video_vector(self) -> Tensor:
        return ad.mean(self.z_t, axis=-2)

    def text_vector(self) -> Tensor:
        return ad.mean(self.text, axis=-2)


@dataclass
class MomentPrediction:
    spans: List[Tuple[float, float, float]]
    saliency: np.ndarray = field(default_factory=lambda: np.zeros(0))


# ---------------------------------------------------------------- helpers


def positional_encoding(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _affine_norm(x, gain, bias):
    return ad.add(ad.multiply(ad.layer_norm(x), gain), bias)


def attention(x, memory, wq, wk, wv) -> Tensor:
    q = ad.matmul(x, wq)
    k = ad.matmul(memory, wk)
    v = ad.matmul(memory, wv)
    scores = ad.scale(ad.matmul(q, k, transpose_b=True), 1.0 / np.sqrt(wq.shape[1]))
    return ad.matmul(ad.softmax(scores, axis=-1), v)


# ---------------------------------------------------------------- quantization


def fuse(features: Tensor, assignment: Assignment, fusion: str,
         fuse_weight: Optional[Tensor] = None, fuse_bias: Optional[Tensor] = None) -> Tensor:
    """Combine continuous features with their quantized rows."""
    if fusion == "soft":
        return features
    if fusion == "hard":
        # straight-through: value is exactly the codeword (z - sg(z) == 0), gradient goes to z
        q = ad.stop_gradient(assignment.quantized)
        return ad.add(q, ad.subtract(features, ad.stop_gradient(features)))
    if fusion == "add":
        return ad.add(features, assignment.quantized)
    if fusion == "concat":
        if fuse_weight is None:
            raise ConfigError("concat fusion needs a 2d -> d projection")
        return ad.linear(ad.concat([features, assignment.quantized], axis=-1), fuse_weight, fuse_bias)
    raise ConfigError(f"unknown fusion {fusion!r}")


def apply_quantization(features: Tensor, codebook: Codebook, fusion: str,
                       fuse_weight=None, fuse_bias=None):
    """Look up ``features`` in the projected codebook; return (downstream, assignment, l_cb, l_cmt)."""
    if features.shape[-1] != codebook.d:
        raise ConfigError(f"codebook has d={codebook.d}, features have d={features.shape[-1]}")
    projected = project(codebook)
    assignment = lookup(features, projected)
    out = fuse(features, assignment, fusion, fuse_weight, fuse_bias)
    return out, assignment, codebook_loss(features, assignment), commitment_loss(features, assignment)


# ---------------------------------------------------------------- model


class GroundingModel:
    def __init__(self, config: ModelConfig, seed: int = 0, codebook_entries=None):
        self.config = config
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        rng = np.random.default_rng(seed)
        c = config
        d, dh = c.d, c.d // c.attention_heads

        def w(name, fan_in, shape):
            self._add(name, rng.normal(scale=1.0 / np.sqrt(fan_in), size=shape))

        def zeros(name, shape):
            self._add(name, np.zeros(shape))

        def ones(name, shape):
            self._add(name, np.ones(shape))

        w("input_proj.weight", c.input_dim, (c.input_dim, d))
        zeros("input_proj.bias", (d,))
        w("text_proj.weight", c.input_dim, (c.input_dim, d))
        zeros("text_proj.bias", (d,))
        for l in range(c.encoder_layers):
            for block in ("self", "cross"):
                p = f"enc{l}.{block}"
                for h in range(c.attention_heads):
                    for m in ("q", "k", "v"):
                        w(f"{p}.{m}{h}", d, (d, dh))
                w(f"{p}.out.weight", d, (d, d))
                zeros(f"{p}.out.bias", (d,))
                ones(f"{p}.ln.gain", (d,))
                zeros(f"{p}.ln.bias", (d,))
            p = f"enc{l}.ffn"
            w(f"{p}.w1", d, (d, c.ffn_dim))
            zeros(f"{p}.b1", (c.ffn_dim,))
            w(f"{p}.w2", c.ffn_dim, (c.ffn_dim, d))
            zeros(f"{p}.b2", (d,))
            ones(f"{p}.ln.gain", (d,))
            zeros(f"{p}.ln.bias", (d,))
        w("head.cls.weight", d, (d, 1))
        zeros("head.cls.bias", (1,))
        w("head.reg.weight", d, (d, 2))
        zeros("head.reg.bias", (2,))
        ones("head.sal.scale", (1,))
        if c.quantized:
            if c.fusion == "concat":
                # starts as the continuous half, i.e. equivalent to soft fusion
                self._add("fuse.weight", np.vstack([np.eye(d), np.zeros((d, d))]))
                zeros("fuse.bias", (d,))
            entries = (codebook_entries if codebook_entries is not None
                       else rng.normal(scale=1.0 / np.sqrt(d), size=(c.K, d)))
            entries = np.asarray(entries, dtype=np.float64)
            if entries.shape != (c.K, d):
                raise ConfigError(f"codebook entries must be {(c.K, d)}, got {entries.shape}")
            self._add("codebook.entries", entries)
            self._add("codebook.projector_weight", np.eye(d))
            zeros("codebook.projector_bias", (d,))

    def _add(self, name, values):
        self.params[name] = Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)

    # -- parameter access

    @property
    def codebook(self) -> Optional[Codebook]:
        if not self.config.quantized:
            return None
        p = self.params
        return Codebook(p["codebook.entries"], p["codebook.projector_weight"],
                        p["codebook.projector_bias"])

    def state_dict(self) -> Dict[str, np.ndarray]:
        return OrderedDict((k, v.values.copy()) for k, v in self.params.items())

    def load_state_dict(self, state) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in self.params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.size != t.values.size:
                raise ConfigError(f"parameter {k}: expected shape {t.shape}, got {v.shape}")
            t.values = v.reshape(t.shape).copy()

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    # -- forward pieces

    def pool(self, clip_features, patch_features=None) -> Tensor:
        """z_s: max-pool patches (when given) then project."""
        p = self.params
        x = patch_features if patch_features is not None else clip_features
        if patch_features is not None:
            x = ad.max_pool(x, axis=-2)
        return ad.linear(x, p["input_proj.weight"], p["input_proj.bias"])

    def project_text(self, query_features) -> Tensor:
        p = self.params
        return ad.linear(query_features, p["text_proj.weight"], p["text_proj.bias"])

    def encode_video(self, pooled, text) -> Tensor:
        """z_t = E_t(z_s, text); zero layers is the identity."""
        c, p = self.config, self.params
        pooled = ad._as_tensor(pooled)
        text = ad._as_tensor(text)
        if pooled.shape[-1] != c.d or text.shape[-1] != c.d:
            raise ConfigError(f"encoder expects d={c.d}, got {pooled.shape} and {text.shape}")
        if c.encoder_layers == 0:
            return pooled
        x = ad.add(pooled, positional_encoding(pooled.shape[-2], c.d))
        for l in range(c.encoder_layers):
            for block, memory in (("self", None), ("cross", text)):
                pre = f"enc{l}.{block}"
                mem = x if memory is None else memory
                heads = [attention(x, mem, p[f"{pre}.q{h}"], p[f"{pre}.k{h}"], p[f"{pre}.v{h}"])
                         for h in range(c.attention_heads)]
                y = ad.concat(heads, axis=-1) if len(heads) > 1 else heads[0]
                y = ad.linear(y, p[f"{pre}.out.weight"], p[f"{pre}.out.bias"])
                x = _affine_norm(ad.add(x, y), p[f"{pre}.ln.gain"], p[f"{pre}.ln.bias"])
            pre = f"enc{l}.ffn"
            h = ad.relu(ad.linear(x, p[f"{pre}.w1"], p[f"{pre}.b1"]))
            y = ad.linear(h, p[f"{pre}.w2"], p[f"{pre}.b2"])
            x = _affine_norm(ad.add(x, y), p[f"{pre}.ln.gain"], p[f"{pre}.ln.bias"])
        return x

    def predict_heads(self, z, text) -> HeadOutputs:
        p = self.params
        logits = ad.linear(z, p["head.cls.weight"], p["head.cls.bias"])
        offsets = ad.softplus(ad.linear(z, p["head.reg.weight"], p["head.reg.bias"]))
        text_mean = ad.mean(text, axis=-2, keepdims=True)
        sal = ad.multiply(ad.cosine_similarity(z, text_mean), p["head.sal.scale"])
        return HeadOutputs(logits, offsets, sal)

    def _quantize(self, x):
        p = self.params
        return apply_quantization(x, self.codebook, self.config.fusion,
                                  p.get("fuse.weight"), p.get("fuse.bias"))

    def forward(self, clip_features, query_features, patch_features=None) -> ForwardResult:
        """Run the full model on one video (T x d) or a stacked batch (B x T x d)."""
        c = self.config
        clip_features = ad._as_tensor(clip_features)
        query_features = ad._as_tensor(query_features)
        if clip_features.shape[-1] != c.input_dim or query_features.shape[-1] != c.input_dim:
            raise ConfigError(f"model expects input_dim={c.input_dim}, got clip "
                              f"{clip_features.shape} and query {query_features.shape}")
        text = self.project_text(query_features)
        assignment = l_cb = l_cmt = None
        lookups = 0
        if c.placement == "image":
            if patch_features is None:
                raise ConfigError("image placement needs patch features")
            patches, assignment, l_cb, l_cmt = self._quantize(ad._as_tensor(patch_features))
            lookups += 1
            z_s = self.pool(clip_features, patches)
        else:
            z_s = self.pool(clip_features)
        enc_in = z_s
        if c.placement == "clip":
            enc_in, assignment, l_cb, l_cmt = self._quantize(z_s)
            lookups += 1
        z_t = self.encode_video(enc_in, text)
        feats = z_t
        if c.placement == "moment":
            feats, assignment, l_cb, l_cmt = self._quantize(z_t)
            lookups += 1
        heads = self.predict_heads(feats, text)
        return ForwardResult(heads, z_s, z_t, feats, text, assignment, l_cb, l_cmt, lookups)


# ---------------------------------------------------------------- decoding


def nms(candidates, iou_threshold: float, top_k: int):
    """Greedy NMS over (start, end, score); drops spans with IoU > threshold to a kept one."""
    order = sorted(candidates, key=lambda c: -c[2])
    kept = []
    for cand in order:
        if len(kept) >= top_k:
            break
        if all(temporal_iou(cand[:2], k[:2]) <= iou_threshold for k in kept):
            kept.append(cand)
    return kept


def decode_moments(confidence, offsets, clip_len: float, duration: Optional[float] = None,
                   nms_iou: float = 0.7, top_k: int = 10, saliency=None) -> MomentPrediction:
    """Turn per-clip confidences and start/end offsets (clip units) into ranked spans."""
    if not 0 < nms_iou <= 1:
        raise ValueError("nms_iou must lie in (0, 1]")
    if top_k < 1:
        raise ValueError("top_k must be at least 1")
    conf = np.asarray(confidence, dtype=np.float64).reshape(-1)
    off = np.asarray(offsets, dtype=np.float64).reshape(-1, 2)
    sal = np.zeros(0) if saliency is None else np.asarray(saliency, dtype=np.float64).reshape(-1)
    T = conf.shape[0]
    if T == 0:
        return MomentPrediction([], sal)
    if duration is None:
        duration = T * clip_len
    centers = np.arange(T) + 0.5
    starts = np.clip((centers - off[:, 0]) * clip_len, 0.0, duration)
    ends = np.clip((centers + off[:, 1]) * clip_len, 0.0, duration)
    cands = [(float(s), float(e), float(c)) for s, e, c in zip(starts, ends, conf)]
    return MomentPrediction(nms(cands, nms_iou, top_k), sal)
