"""Single-stream transformer over caption tokens and person boxes.

Text tokens and detections are embedded separately, concatenated into one
sequence and passed through pre-norm self-attention blocks. Boxes carry no
position embedding, so the encoder is equivariant to box order.

Batches are padded; padded keys are masked out of attention so the hidden
states of real tokens and boxes do not depend on the padding.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import PAD_ID
from . import autodiff as ad
from .datamodel import BoundingBox, Caption, Detection, write_tensor, read_tensors

CHECKPOINT_MAGIC = b"WWCK"
KIND_PARAMETER = 3
SPATIAL_DIM = 7
_MASK_VALUE = -1e9


class InputSizeError(ValueError):
    """Caption or detection list exceeds the configured limits."""


class NumericError(ArithmeticError):
    """Non-finite values reached the encoder or the losses."""


@dataclass(frozen=True)
class ModelConfig:
    d_v: int
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int | None = None
    max_tokens: int = 60
    max_boxes: int = 100
    dropout_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.max_tokens < 1 or self.max_boxes < 1:
            raise ValueError("max_tokens and max_boxes must be positive")
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


Parameters = dict  # name -> np.ndarray, insertion-ordered


@dataclass
class HiddenStates:
    text: ad.Tensor   # (B, L, d_model)
    boxes: ad.Tensor  # (B, M, d_model)


@dataclass
class EncoderBatch:
    tokens: np.ndarray     # (B, L) int
    text_mask: np.ndarray  # (B, L) bool
    visual: np.ndarray     # (B, M, d_v)
    spatial: np.ndarray    # (B, M, 7)
    box_mask: np.ndarray   # (B, M) bool

    @property
    def size(self) -> int:
        return self.tokens.shape[0]


def spatial_feature(box: BoundingBox) -> np.ndarray:
    """``[x1, y1, x2, y2, w, h, w*h]`` in normalised image coordinates."""
    w, h = box.x2 - box.x1, box.y2 - box.y1
    return np.array([box.x1, box.y1, box.x2, box.y2, w, h, w * h])


def _parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = [
        ("tok_emb", (cfg.vocab_size, d), "embed"),
        ("pos_emb", (cfg.max_tokens, d), "embed"),
        ("mod_emb", (2, d), "embed"),
        ("text_ln.g", (d,), "one"),
        ("text_ln.b", (d,), "zero"),
        ("vis_proj.w", (cfg.d_v, d), "weight"),
        ("vis_proj.b", (d,), "zero"),
        ("spa_proj.w", (SPATIAL_DIM, d), "weight"),
        ("spa_proj.b", (d,), "zero"),
        ("box_ln.g", (d,), "one"),
        ("box_ln.b", (d,), "zero"),
    ]
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        shapes += [
            (p + "ln1.g", (d,), "one"), (p + "ln1.b", (d,), "zero"),
            (p + "qkv.w", (d, 3 * d), "weight"), (p + "qkv.b", (3 * d,), "zero"),
            (p + "out.w", (d, d), "weight"), (p + "out.b", (d,), "zero"),
            (p + "ln2.g", (d,), "one"), (p + "ln2.b", (d,), "zero"),
            (p + "ff1.w", (d, f), "weight"), (p + "ff1.b", (f,), "zero"),
            (p + "ff2.w", (f, d), "weight"), (p + "ff2.b", (d,), "zero"),
        ]
    shapes += [
        ("null_name", (d,), "vector"),
        ("inter_alpha", (1,), "alpha"),
        ("inter_beta", (1,), "zero"),
    ]
    return shapes


def init_parameters(cfg: ModelConfig) -> Parameters:
    """Seeded uniform initialisation with bound ``1/sqrt(fan_in)``."""
    rng = np.random.default_rng(cfg.seed)
    params: Parameters = {}
    for name, shape, kind in _parameter_shapes(cfg):
        if kind == "weight":
            bound = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif kind == "embed":
            params[name] = rng.uniform(-1.0, 1.0, size=shape)
        elif kind == "vector":
            bound = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif kind == "one":
            params[name] = np.ones(shape)
        elif kind == "alpha":
            params[name] = np.full(shape, 5.0)
        else:
            params[name] = np.zeros(shape)
    return params


def no_decay(name: str) -> bool:
    """Layer-norm parameters, biases and the inter-loss affine skip weight decay."""
    return (name.endswith(".b") or "_ln." in name or ".ln" in name
            or name.startswith("inter_"))


def as_leaves(params: Parameters, requires_grad: bool = True) -> dict[str, ad.Tensor]:
    return {k: ad.Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


# ---------------------------------------------------------------------------
# batching

def collate(captions: Sequence[Caption], detections: Sequence[Sequence[Detection]],
            cfg: ModelConfig) -> EncoderBatch:
    """Pad a list of (caption, detections) pairs into dense arrays."""
    for cap, dets in zip(captions, detections):
        if len(cap.tokens) > cfg.max_tokens:
            raise InputSizeError(f"caption of {len(cap.tokens)} tokens exceeds {cfg.max_tokens}")
        if len(dets) > cfg.max_boxes:
            raise InputSizeError(f"{len(dets)} detections exceed {cfg.max_boxes}")
    b = len(captions)
    length = max(len(c.tokens) for c in captions)
    boxes = max(1, max(len(d) for d in detections))
    tokens = np.full((b, length), PAD_ID, dtype=np.int64)
    text_mask = np.zeros((b, length), dtype=bool)
    visual = np.zeros((b, boxes, cfg.d_v))
    spatial = np.zeros((b, boxes, SPATIAL_DIM))
    box_mask = np.zeros((b, boxes), dtype=bool)
    for i, (cap, dets) in enumerate(zip(captions, detections)):
        tokens[i, :len(cap.tokens)] = cap.tokens
        text_mask[i, :len(cap.tokens)] = True
        for j, det in enumerate(dets):
            visual[i, j] = det.visual_feature
            spatial[i, j] = spatial_feature(det.box)
            box_mask[i, j] = True
    if not np.all(np.isfinite(visual)):
        raise NumericError("non-finite visual feature")
    return EncoderBatch(tokens, text_mask, visual, spatial, box_mask)


# ---------------------------------------------------------------------------
# forward

class _Dropout:
    """Dropout whose masks are a pure function of (seed, step, site index)."""

    def __init__(self, rate: float, seed: int, step: int, active: bool):
        self.rate = rate
        self.seed = seed
        self.step = step
        self.active = active and rate > 0
        self.site = 0

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        self.site += 1
        if not self.active:
            return x
        rng = np.random.default_rng([self.seed, self.step, self.site])
        keep = rng.random(x.shape) >= self.rate
        return ad.mul(x, keep / (1.0 - self.rate))


def embed_text_batch(p: dict[str, ad.Tensor], batch: EncoderBatch) -> ad.Tensor:
    length = batch.tokens.shape[1]
    x = ad.embedding(p["tok_emb"], batch.tokens)
    x = ad.add(x, ad.getitem(p["pos_emb"], slice(0, length)))
    x = ad.add(x, ad.getitem(p["mod_emb"], 0))
    return ad.layer_norm(x, p["text_ln.g"], p["text_ln.b"])


def embed_boxes_batch(p: dict[str, ad.Tensor], batch: EncoderBatch) -> ad.Tensor:
    x = ad.add(ad.linear(ad.Tensor(batch.visual), p["vis_proj.w"], p["vis_proj.b"]),
               ad.linear(ad.Tensor(batch.spatial), p["spa_proj.w"], p["spa_proj.b"]))
    x = ad.add(x, ad.getitem(p["mod_emb"], 1))
    return ad.layer_norm(x, p["box_ln.g"], p["box_ln.b"])


def _attention(p, prefix: str, h: ad.Tensor, bias: np.ndarray, cfg: ModelConfig) -> ad.Tensor:
    b, t, d = h.shape
    heads, dh = cfg.n_heads, d // cfg.n_heads
    qkv = ad.linear(h, p[prefix + "qkv.w"], p[prefix + "qkv.b"])
    qkv = ad.transpose(ad.reshape(qkv, (b, t, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = (ad.getitem(qkv, i) for i in range(3))  # each (B, H, T, dh)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    probs = ad.softmax(ad.add(scores, bias), axis=-1)
    ctx = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (b, t, d))
    return ad.linear(ctx, p[prefix + "out.w"], p[prefix + "out.b"])


def forward(p: dict[str, ad.Tensor], batch: EncoderBatch, cfg: ModelConfig,
            train_mode: bool = False, step: int = 0) -> HiddenStates:
    """Contextual hidden states for every token and box in ``batch``.

    ``p`` holds parameter tensors (see :func:`as_leaves`). Gradients are
    recorded when called inside an :class:`autodiff.Tape`. Dropout is only
    applied with ``train_mode`` and its masks depend on ``(seed, step)``.
    """
    drop = _Dropout(cfg.dropout_rate, cfg.seed, step, train_mode)
    length = batch.tokens.shape[1]
    x = ad.concat([drop(embed_text_batch(p, batch)), drop(embed_boxes_batch(p, batch))], axis=1)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("non-finite embedding")
    key_mask = np.concatenate([batch.text_mask, batch.box_mask], axis=1)
    bias = np.where(key_mask, 0.0, _MASK_VALUE)[:, None, None, :]
    for i in range(cfg.n_layers):
        pre = f"layer{i}."
        h = ad.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        x = ad.add(x, drop(_attention(p, pre, h, bias, cfg)))
        h = ad.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        f = ad.linear(ad.gelu(ad.linear(h, p[pre + "ff1.w"], p[pre + "ff1.b"])),
                      p[pre + "ff2.w"], p[pre + "ff2.b"])
        x = ad.add(x, drop(f))
    return HiddenStates(text=ad.getitem(x, (slice(None), slice(0, length))),
                        boxes=ad.getitem(x, (slice(None), slice(length, None))))


# single-example conveniences --------------------------------------------------

def _single(caption: Caption, detections: Sequence[Detection], cfg: ModelConfig) -> EncoderBatch:
    return collate([caption], [list(detections)], cfg)


def embed_text(params: Parameters, caption: Caption, cfg: ModelConfig) -> np.ndarray:
    if len(caption.tokens) > cfg.max_tokens:
        raise InputSizeError(f"caption of {len(caption.tokens)} tokens exceeds {cfg.max_tokens}")
    batch = _single(caption, [], cfg)
    return embed_text_batch(as_leaves(params, False), batch).data[0]


def embed_boxes(params: Parameters, detections: Sequence[Detection], cfg: ModelConfig) -> np.ndarray:
    if len(detections) > cfg.max_boxes:
        raise InputSizeError(f"{len(detections)} detections exceed {cfg.max_boxes}")
    batch = _single(Caption((PAD_ID,), False), detections, cfg)
    return embed_boxes_batch(as_leaves(params, False), batch).data[0, :len(detections)]


def encode(params: Parameters, caption: Caption, detections: Sequence[Detection],
           cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Inference-mode hidden states ``(text rows, box rows)`` for one example."""
    hidden = forward(as_leaves(params, False), _single(caption, detections, cfg), cfg)
    return hidden.text.data[0], hidden.boxes.data[0, :len(detections)]


# ---------------------------------------------------------------------------
# checkpoints

def parameters_digest(params: Parameters) -> str:
    h = hashlib.sha256()
    for name, arr in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def save_checkpoint(path, params: Parameters, cfg: ModelConfig, extra: dict | None = None) -> None:
    """``WWCK`` magic, u32-length JSON config block, then named WWF1 tensor records."""
    block = json.dumps({"model": asdict(cfg), **(extra or {})}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(block)))
    buf.write(block)
    buf.write(struct.pack("<I", len(params)))
    for ordinal, (name, arr) in enumerate(params.items()):
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        shaped = arr.reshape(1, -1) if arr.ndim == 1 else arr
        write_tensor(buf, ordinal, KIND_PARAMETER, shaped)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[Parameters, ModelConfig, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint (missing WWCK magic)")
    fh = io.BytesIO(raw[4:])
    (block_len,) = struct.unpack("<I", fh.read(4))
    meta = json.loads(fh.read(block_len))
    cfg = ModelConfig.from_dict(meta.pop("model"))
    (count,) = struct.unpack("<I", fh.read(4))
    shapes = {name: shape for name, shape, _ in _parameter_shapes(cfg)}
    params: Parameters = {}
    records = read_tensors(fh)
    for _ in range(count):
        (name_len,) = struct.unpack("<I", fh.read(4))
        name = fh.read(name_len).decode()
        _, kind, arr = next(records)
        if kind != KIND_PARAMETER:
            raise ValueError(f"unexpected tensor kind {kind} in checkpoint")
        params[name] = arr.astype(np.float64).reshape(shapes[name])
    return params, cfg, meta
