"""Seeded training / evaluation loop, Adam, codebook snapshots and MQCK checkpoints."""

from __future__ import annotations

import io
import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import objectives as ob
from .codebook import index_histogram, kmeans_init, random_init, selection_init, utilization
from .config import config_hash, from_dict, to_dict
from .data import VideoSample, encode_features, read_matrix
from .metrics import MetricsReport, compute_report
from .model import GroundingModel, ModelConfig, MomentPrediction, decode_moments
from .objectives import LossWeights

log = logging.getLogger(__name__)

INITS = ("random", "selection", "kmeans")
CODEBOOK_PARAMS = ("codebook.entries", "codebook.projector_weight", "codebook.projector_bias")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    codebook_init: str = "kmeans"
    codebook_frozen: bool = False
    snapshot_every: int = 1
    kmeans_iters: int = 50
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    saliency_temperature: float = 0.07
    align_temperature: float = 0.07
    nms_iou: float = 0.7
    top_k: int = 10

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (alignment loss needs pairs)")
        if self.codebook_init not in INITS:
            raise ValueError(f"codebook_init must be one of {INITS}")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be at least 1")
        if not (self.lr > 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid optimizer settings")

    def to_dict(self):
        return to_dict(self)

    @classmethod
    def from_dict(cls, data):
        return from_dict(cls, data)

    def hash(self) -> bytes:
        return config_hash(self)


# ---------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, params: Dict[str, ad.Tensor], lr=1e-3, beta1=0.9, beta2=0.999,
                 eps=1e-8, weight_decay=0.0, no_decay: Sequence[str] = ()):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.step_count = 0
        self.m = OrderedDict((k, np.zeros_like(p.values)) for k, p in params.items())
        self.v = OrderedDict((k, np.zeros_like(p.values)) for k, p in params.items())

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.values)
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.weight_decay and k not in self.no_decay:
                update = update + self.weight_decay * p.values
            p.values = p.values - self.lr * update

    def state(self):
        return {"step": self.step_count, "m": self.m, "v": self.v}

    def load_state(self, state):
        self.step_count = int(state["step"])
        for k in self.m:
            self.m[k] = np.asarray(state["m"][k]).reshape(self.m[k].shape).copy()
            self.v[k] = np.asarray(state["v"][k]).reshape(self.v[k].shape).copy()


# ---------------------------------------------------------------- checkpoints


class CheckpointError(ValueError):
    pass


MQCK_MAGIC = b"MQCK"
MQCK_VERSION = 1


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    optimizer: dict
    epoch: int
    config: Optional[TrainConfig] = None
    config_hash: bytes = b"\0" * 32

    def model(self, config: Optional[TrainConfig] = None) -> GroundingModel:
        cfg = config or self.config
        if cfg is None:
            raise CheckpointError("a TrainConfig is needed to rebuild the model")
        if cfg.hash() != self.config_hash:
            raise CheckpointError("config hash does not match the checkpoint")
        m = GroundingModel(cfg.model, seed=cfg.seed)
        m.load_state_dict(self.params)
        return m


def _block(name: str, matrix) -> bytes:
    raw = name.encode("utf-8")
    m = np.asarray(matrix, dtype=np.float64)
    m = m.reshape(1, -1) if m.ndim < 2 else m.reshape(-1, m.shape[-1]) if m.ndim > 2 else m
    return struct.pack("<H", len(raw)) + raw + encode_features(m, version=2)


def encode_blocks(chash: bytes, blocks) -> bytes:
    """MQCK container: header, then (name, matrix) blocks in the given order."""
    if len(chash) != 32:
        raise CheckpointError("config hash must be 32 bytes")
    body = [_block(name, m) for name, m in blocks]
    head = MQCK_MAGIC + struct.pack("<I", MQCK_VERSION) + chash
    return head + struct.pack("<I", len(body)) + b"".join(body)


def decode_blocks(raw: bytes):
    fh = io.BytesIO(raw)
    if fh.read(4) != MQCK_MAGIC:
        raise CheckpointError("not an MQCK file")
    (version,) = struct.unpack("<I", fh.read(4))
    if version != MQCK_VERSION:
        raise CheckpointError(f"unsupported MQCK version {version}")
    chash = fh.read(32)
    raw_n = fh.read(4)
    if len(chash) != 32 or len(raw_n) != 4:
        raise CheckpointError("truncated MQCK header")
    (n,) = struct.unpack("<I", raw_n)
    blocks = OrderedDict()
    for _ in range(n):
        head = fh.read(2)
        if len(head) != 2:
            raise CheckpointError("truncated MQCK block table")
        (ln,) = struct.unpack("<H", head)
        name = fh.read(ln).decode("utf-8")
        blocks[name], _ = read_matrix(fh)
    if fh.read(1):
        raise CheckpointError("trailing bytes after the last MQCK block")
    return chash, blocks


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    blocks = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    opt = ckpt.optimizer or {}
    blocks += [(f"adam.m/{k}", v) for k, v in opt.get("m", {}).items()]
    blocks += [(f"adam.v/{k}", v) for k, v in opt.get("v", {}).items()]
    blocks.append(("meta/step", [[opt.get("step", 0)]]))
    blocks.append(("meta/epoch", [[ckpt.epoch]]))
    return encode_blocks(ckpt.config_hash, blocks)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path, config: Optional[TrainConfig] = None) -> Checkpoint:
    chash, blocks = decode_blocks(Path(path).read_bytes())
    if config is not None and config.hash() != chash:
        raise CheckpointError("config hash does not match the checkpoint")
    params, m, v, meta = OrderedDict(), OrderedDict(), OrderedDict(), {}
    for name, mat in blocks.items():
        kind, _, key = name.partition("/")
        target = {"param": params, "adam.m": m, "adam.v": v, "meta": meta}.get(kind)
        if target is None:
            raise CheckpointError(f"unknown block {name!r}")
        target[key] = mat
    opt = {"step": int(meta.get("step", [[0]])[0][0]), "m": m, "v": v}
    return Checkpoint(params, opt, int(meta.get("epoch", [[0]])[0][0]), config, chash)


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    samples: List[VideoSample]
    clips: np.ndarray
    queries: np.ndarray
    patches: Optional[np.ndarray]


def make_batches(samples: Sequence[VideoSample], need_patches: bool) -> List[Batch]:
    """Stack samples that share clip/query shapes; order inside groups is preserved."""
    groups: "OrderedDict[tuple, List[VideoSample]]" = OrderedDict()
    for s in samples:
        key = (s.clip_features.shape, s.query_features.shape,
               None if s.patch_features is None or not need_patches else s.patch_features.shape)
        groups.setdefault(key, []).append(s)
    out = []
    for group in groups.values():
        patches = None
        if need_patches:
            if any(s.patch_features is None for s in group):
                raise ValueError("image placement needs patch features for every video")
            patches = np.stack([s.patch_features for s in group])
        out.append(Batch(group, np.stack([s.clip_features for s in group]),
                         np.stack([s.query_features for s in group]), patches))
    return out


def _epoch_batches(n: int, batch_size: int, rng) -> List[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


# ---------------------------------------------------------------- loss on a batch


@dataclass
class StepResult:
    breakdown: ob.LossBreakdown
    indices: List[np.ndarray]


def batch_loss(model: GroundingModel, samples: Sequence[VideoSample], cfg: TrainConfig,
               where: str = "") -> StepResult:
    B = len(samples)
    c = cfg.model
    parts_mr, parts_hd, parts_cb, parts_cmt = [], [], [], []
    vids, texts, indices = [], [], []
    for batch in make_batches(samples, c.placement == "image"):
        res = model.forward(batch.clips, batch.queries, batch.patches)
        frac = len(batch.samples) / B
        windows = [s.gt_windows for s in batch.samples]
        lens = [s.clip_len for s in batch.samples]
        parts_mr.append(ad.scale(ob.moment_retrieval_loss(
            res.heads, windows, lens, cfg.focal_alpha, cfg.focal_gamma), frac))
        labels = np.stack([s.saliency_labels for s in batch.samples])
        parts_hd.append(ad.scale(ob.saliency_loss(res.heads.saliency, labels,
                                                  cfg.saliency_temperature), frac))
        if res.assignment is not None:
            parts_cb.append(ad.scale(res.l_cb, frac))
            parts_cmt.append(ad.scale(res.l_cmt, frac))
            indices.extend(list(res.assignment.indices))
        vids.append(res.video_vector())
        texts.append(res.text_vector())

    def total(ts):
        out = ts[0]
        for t in ts[1:]:
            out = ad.add(out, t)
        return out

    video = vids[0] if len(vids) == 1 else ad.concat(vids, axis=0)
    text = texts[0] if len(texts) == 1 else ad.concat(texts, axis=0)
    parts = {"l_mr": total(parts_mr), "l_hd": total(parts_hd),
             "l_align": ob.alignment_loss(video, text, cfg.align_temperature)}
    if parts_cb:
        parts["l_cb"] = total(parts_cb)
        parts["l_cmt"] = total(parts_cmt)
    return StepResult(ob.total_loss(parts, cfg.weights, where), indices)


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalOutput:
    report: MetricsReport
    predictions: List[MomentPrediction]
    indices: List[Optional[np.ndarray]]
    features: List[np.ndarray]
    histogram: Optional[np.ndarray] = None


Predictor = Callable[[VideoSample], MomentPrediction]


def evaluate(model: Optional[GroundingModel], samples: Sequence[VideoSample],
             cfg: Optional[TrainConfig] = None, predictor: Optional[Predictor] = None,
             batch_size: int = 32) -> EvalOutput:
    """Forward + decode every query and score the split.

    ``predictor`` replaces the model entirely (used for oracle/random checks).
    """
    cfg = cfg or TrainConfig(model=model.config if model else ModelConfig())
    preds: List[MomentPrediction] = []
    indices: List[Optional[np.ndarray]] = []
    feats: List[np.ndarray] = []
    if predictor is not None:
        preds = [predictor(s) for s in samples]
        indices = [None] * len(samples)
    else:
        if samples and samples[0].clip_features.shape[-1] != model.config.input_dim:
            raise ValueError(f"dataset feature dim {samples[0].clip_features.shape[-1]} does not "
                             f"match the model's input_dim {model.config.input_dim}")
        need_patches = model.config.placement == "image"
        with ad.no_grad():
            for i in range(0, len(samples), batch_size):
                for batch in make_batches(samples[i:i + batch_size], need_patches):
                    res = model.forward(batch.clips, batch.queries, batch.patches)
                    conf = res.heads.confidence
                    for b, s in enumerate(batch.samples):
                        preds.append(decode_moments(conf[b], res.heads.offsets.values[b],
                                                    s.clip_len, s.duration, cfg.nms_iou,
                                                    cfg.top_k, res.heads.saliency.values[b]))
                        indices.append(None if res.assignment is None
                                       else res.assignment.indices[b])
                        feats.append(res.z_t.values[b])
        # restore the input order if grouping reordered samples
        order = _group_order(samples, need_patches, batch_size)
        preds = [preds[j] for j in order]
        indices = [indices[j] for j in order]
        feats = [feats[j] for j in order]
    hist = None
    util = 0.0
    if model is not None and model.config.quantized and indices and indices[0] is not None:
        hist = index_histogram(np.concatenate([np.ravel(ix) for ix in indices]), model.config.K)
        util = utilization(hist)
    report = compute_report([p.spans for p in preds], [s.gt_windows for s in samples],
                            [p.saliency for p in preds], [s.saliency_labels for s in samples],
                            util)
    return EvalOutput(report, preds, indices, feats, hist)


def _group_order(samples, need_patches, batch_size):
    emitted = []
    for i in range(0, len(samples), batch_size):
        chunk = list(range(i, min(i + batch_size, len(samples))))
        groups: "OrderedDict[tuple, list]" = OrderedDict()
        for j in chunk:
            s = samples[j]
            key = (s.clip_features.shape, s.query_features.shape,
                   None if s.patch_features is None or not need_patches else s.patch_features.shape)
            groups.setdefault(key, []).append(j)
        for g in groups.values():
            emitted.extend(g)
    pos = {j: k for k, j in enumerate(emitted)}
    return [pos[j] for j in range(len(samples))]


# ---------------------------------------------------------------- snapshots


@dataclass
class CodebookSnapshot:
    epoch: int
    entries: np.ndarray
    projected: np.ndarray
    effective_ids: np.ndarray
    counts: np.ndarray
    utilization: float
    assignments: List[np.ndarray] = field(default_factory=list, repr=False)


def snapshot_codebook(model: GroundingModel, epoch: int, val_indices) -> CodebookSnapshot:
    cb = model.codebook
    with ad.no_grad():
        projected = cb.project().values.copy()
    flat = (np.concatenate([np.ravel(ix) for ix in val_indices]) if val_indices
            else np.zeros(0, dtype=np.intp))
    counts = index_histogram(flat, cb.K)
    return CodebookSnapshot(epoch, cb.entries.values.copy(), projected,
                            np.flatnonzero(counts), counts, utilization(counts),
                            [np.array(ix) for ix in val_indices])


def save_snapshots(path, snapshots: Sequence[CodebookSnapshot], chash: bytes = b"\0" * 32) -> None:
    """Store snapshots in the MQCK container, one block group per epoch."""
    blocks = []
    for s in snapshots:
        p = f"snap{s.epoch}"
        blocks += [(f"{p}/entries", s.entries), (f"{p}/projected", s.projected),
                   (f"{p}/counts", s.counts)]
        for i, ix in enumerate(s.assignments):
            blocks.append((f"{p}/assign{i}", np.ravel(ix)))
    Path(path).write_bytes(encode_blocks(chash, blocks))


def load_snapshots(path) -> List[CodebookSnapshot]:
    _, blocks = decode_blocks(Path(path).read_bytes())
    grouped: "OrderedDict[int, dict]" = OrderedDict()
    for name, mat in blocks.items():
        head, _, key = name.partition("/")
        grouped.setdefault(int(head[4:]), {})[key] = mat
    out = []
    for epoch, g in grouped.items():
        counts = g["counts"].ravel().astype(np.int64)
        assigns = [g[k].ravel().astype(np.intp) for k in sorted(
            (k for k in g if k.startswith("assign")), key=lambda k: int(k[6:]))]
        out.append(CodebookSnapshot(epoch, g["entries"], g["projected"], np.flatnonzero(counts),
                                    counts, utilization(counts), assigns))
    return out


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    log: List[dict]
    snapshots: List[CodebookSnapshot]
    model: GroundingModel
    val: Optional[EvalOutput] = None


def init_codebook(cfg: TrainConfig, train: Sequence[VideoSample], seed: int) -> np.ndarray:
    c = cfg.model
    feats = np.concatenate([s.clip_features for s in train], axis=0)
    if feats.shape[1] != c.d and cfg.codebook_init != "random":
        raise ValueError("prior initialization needs clip features of dimension d")
    if cfg.codebook_init == "kmeans":
        return kmeans_init(feats, c.K, cfg.kmeans_iters, seed)
    if cfg.codebook_init == "selection":
        return selection_init(feats, c.K, seed)
    return random_init(c.K, c.d, seed)


def trainable(model: GroundingModel, cfg: TrainConfig) -> "OrderedDict[str, ad.Tensor]":
    skip = set()
    if cfg.codebook_frozen:
        skip.update(CODEBOOK_PARAMS)
    if cfg.model.projection == "basic":
        skip.update(("codebook.projector_weight", "codebook.projector_bias"))
    return OrderedDict((k, p) for k, p in model.params.items() if k not in skip)


def _checkpoint(model, opt, epoch, cfg) -> Checkpoint:
    state = opt.state()
    return Checkpoint(model.state_dict(),
                      {"step": state["step"],
                       "m": OrderedDict((k, v.copy()) for k, v in state["m"].items()),
                       "v": OrderedDict((k, v.copy()) for k, v in state["v"].items())},
                      epoch, cfg, cfg.hash())


def _round(x: float) -> float:
    return float(np.float64(x))


def train(cfg: TrainConfig, train_set: Sequence[VideoSample], val_set: Sequence[VideoSample] = (),
          log_path=None, on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Minibatch Adam on the total loss; logs one JSON record per epoch.

    The best checkpoint (by validation map_avg, first wins ties) is returned
    alongside the final one. All randomness derives from ``cfg.seed``.
    """
    if not train_set:
        raise ValueError("training set is empty")
    ss = np.random.SeedSequence(cfg.seed)
    model_seed, cb_seed, shuffle_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    entries = init_codebook(cfg, train_set, cb_seed) if cfg.model.quantized else None
    model = GroundingModel(cfg.model, seed=model_seed, codebook_entries=entries)
    params = trainable(model, cfg)
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay,
               no_decay=CODEBOOK_PARAMS)
    rng = np.random.default_rng(shuffle_seed)
    snapshots: List[CodebookSnapshot] = []
    records: List[dict] = []
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    val_out = None
    if val_set and cfg.model.quantized:
        val_out = evaluate(model, val_set, cfg)
        snapshots.append(snapshot_codebook(model, 0, val_out.indices))
    best, best_score = None, -np.inf
    try:
        for epoch in range(1, cfg.epochs + 1):
            sums: Dict[str, float] = {}
            hist = np.zeros(cfg.model.K, dtype=np.int64)
            batches = _epoch_batches(len(train_set), cfg.batch_size, rng)
            for bi, idx in enumerate(batches):
                samples = [train_set[i] for i in idx]
                model.zero_grad()
                step = batch_loss(model, samples, cfg, where=f"epoch {epoch} batch {bi}")
                ad.backward(step.breakdown.total_tensor)
                opt.step()
                for k, v in step.breakdown.to_dict().items():
                    sums[k] = sums.get(k, 0.0) + v
                for ix in step.indices:
                    hist += index_histogram(ix, cfg.model.K)
            record = {"epoch": epoch,
                      "loss": {k: _round(v / len(batches)) for k, v in sums.items()},
                      "train_utilization": utilization(hist) if cfg.model.quantized else 0.0}
            if val_set:
                val_out = evaluate(model, val_set, cfg)
                record["val"] = val_out.report.to_dict()
                score = val_out.report.map_avg
                if cfg.model.quantized and epoch % cfg.snapshot_every == 0:
                    snapshots.append(snapshot_codebook(model, epoch, val_out.indices))
            else:
                score = -sums.get("total", 0.0)
            if score > best_score:
                best_score = score
                best = _checkpoint(model, opt, epoch, cfg)
            records.append(record)
            if fh:
                fh.write(json.dumps(record) + "\n")
                fh.flush()
            if on_epoch:
                on_epoch(record)
            log.debug("epoch %d %s", epoch, record["loss"])
    finally:
        if fh:
            fh.close()
    last = _checkpoint(model, opt, cfg.epochs, cfg)
    return TrainResult(best, last, records, snapshots, model, val_out)
