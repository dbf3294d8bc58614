"""Box-name similarity matrix and the three training losses.

All loss functions take a similarity tensor with a leading batch axis and
dense masks, so one call covers a whole padded batch. Plain arrays without
the batch axis are accepted too and are promoted to a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .datamodel import Example, ReferredPerson, ValidationError
from .encoder import EncoderBatch, ModelConfig, NumericError, collate, forward

TASK_1_1 = "1-1"
TASK_M_N = "m-n"


@dataclass(frozen=True)
class LossWeights:
    intra: float = 1.0
    inter: float = 1.0
    null: float = 1.0


@dataclass
class LossBreakdown:
    l_intra: float
    l_inter: float
    l_null: float
    total: float
    link_count: int
    pair_count: int
    null_count: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def pooling_matrix(referred: Sequence[ReferredPerson], length: int) -> np.ndarray:
    """(n, length) matrix whose rows average the tokens of each person's mentions."""
    pool = np.zeros((len(referred), length))
    for i, person in enumerate(referred):
        tokens = sorted({t for m in person.mentions for t in range(m.token_start, m.token_end)})
        if not tokens:
            raise ValidationError(f"referred person {person.identity_id} has no mention tokens")
        if tokens[-1] >= length:
            raise ValidationError(f"mention of {person.identity_id} beyond caption length {length}")
        pool[i, tokens] = 1.0 / len(tokens)
    return pool


def name_pooling(hidden_text, referred: Sequence[ReferredPerson]):
    """Average the hidden rows covered by each person's mentions.

    Works on a (L, d) array or on a (B, L, d) tensor paired with a
    (B, n, L) pooling matrix passed as ``referred``.
    """
    if isinstance(hidden_text, ad.Tensor):
        return ad.matmul(ad.Tensor(np.asarray(referred, dtype=np.float64)), hidden_text)
    text = np.asarray(hidden_text, dtype=np.float64)
    return pooling_matrix(referred, text.shape[0]) @ text


def _check_norms(x: np.ndarray, valid: np.ndarray | None, what: str) -> None:
    norms = np.linalg.norm(x, axis=-1)
    if valid is not None:
        norms = norms[valid]
    if np.any(norms == 0):
        raise NumericError(f"zero-norm {what} vector in similarity matrix")
    if not np.all(np.isfinite(norms)):
        raise NumericError(f"non-finite {what} vector in similarity matrix")


def similarity_matrix(pooled_names, box_hidden, include_null: bool = False, null_vector=None,
                      name_valid: np.ndarray | None = None,
                      box_valid: np.ndarray | None = None):
    """Cosine similarity between names (rows) and boxes (columns).

    With tensors of shape (B, n, d) and (B, m, d) the result is a (B, n, m)
    tensor; ``include_null`` appends the null name's similarities as a final
    row. With plain 2-D arrays a numpy matrix is returned.
    """
    as_array = not isinstance(pooled_names, ad.Tensor)
    names = pooled_names if not as_array else ad.Tensor(np.asarray(pooled_names, dtype=np.float64)[None])
    boxes = box_hidden if not as_array else ad.Tensor(np.asarray(box_hidden, dtype=np.float64)[None])
    if names.shape[-1] != boxes.shape[-1]:
        raise ValueError("name and box embeddings differ in width")
    _check_norms(names.data, name_valid, "name")
    _check_norms(boxes.data, box_valid, "box")
    nb = ad.normalize_rows(boxes)
    rows = names
    if include_null:
        null = null_vector if isinstance(null_vector, ad.Tensor) else ad.Tensor(np.asarray(null_vector, dtype=np.float64))
        _check_norms(null.data[None], None, "null")
        null_rows = ad.add(ad.Tensor(np.zeros((names.shape[0], 1, names.shape[-1]))), null)
        rows = ad.concat([names, null_rows], axis=1)
    s = ad.matmul(ad.normalize_rows(rows), ad.transpose(nb, (0, 2, 1)))
    return s.data[0] if as_array else s


def null_similarities(null_vector: ad.Tensor, box_hidden: ad.Tensor) -> ad.Tensor:
    """(B, m) cosine similarity between the null name and every box."""
    nb = ad.normalize_rows(box_hidden)
    nn = ad.normalize_rows(null_vector)
    return ad.reshape(ad.matmul(nb, ad.reshape(nn, (-1, 1))), nb.shape[:2])


def _promote(s, *masks):
    if isinstance(s, ad.Tensor):
        return (s,) + masks, False
    arr = np.asarray(s, dtype=np.float64)
    return (ad.Tensor(arr[None]),) + tuple(None if m is None else np.asarray(m)[None] for m in masks), True


def _link_mask(links: Sequence[tuple[int, int]], shape) -> np.ndarray:
    mask = np.zeros(shape)
    for p, d in links:
        mask[p, d] = 1.0
    return mask


def loss_intra(s, links, valid: np.ndarray | None = None, null_row=None) -> tuple:
    """Mean over links of ``-[log softmax_row + log softmax_col]``.

    ``links`` is either a list of (person, box) pairs (single example) or a
    (B, n, m) 0/1 mask. ``valid`` marks real (person, box) cells. With
    ``null_row`` (B, m) the null name joins the column softmax.
    Returns ``(loss, link_count)``; the loss is a tensor for tensor input.
    """
    s_shape = (s.data if isinstance(s, ad.Tensor) else np.asarray(s)).shape
    if not isinstance(links, np.ndarray):
        links = np.broadcast_to(_link_mask(links, s_shape[-2:]), s_shape)
    if valid is None:
        valid = np.ones(s_shape, dtype=bool)
    (s_t, links, valid), single = _promote(s, links, valid)
    count = int(links.sum())
    if count == 0:
        zero = ad.Tensor(np.asarray(0.0))
        return (0.0 if single else zero), 0
    row = ad.masked_log_softmax(s_t, valid, axis=2)
    if null_row is None:
        col = ad.masked_log_softmax(s_t, valid, axis=1)
    else:
        null_t = null_row if isinstance(null_row, ad.Tensor) else ad.Tensor(np.asarray(null_row, dtype=np.float64)[None])
        aug = ad.concat([s_t, ad.reshape(null_t, (s_t.shape[0], 1, s_t.shape[2]))], axis=1)
        aug_valid = np.concatenate([valid, valid.any(axis=1, keepdims=True)], axis=1)
        col = ad.getitem(ad.masked_log_softmax(aug, aug_valid, axis=1),
                         (slice(None), slice(0, s_t.shape[1])))
    picked = ad.mul(ad.add(row, col), links)
    loss = ad.scale(ad.sum_all(picked), -1.0 / count)
    return (float(loss.data) if single else loss), count


def bce_with_logits(z: ad.Tensor, target: np.ndarray, weight: np.ndarray) -> ad.Tensor:
    """Weighted sum of ``-[t log sigmoid(z) + (1-t) log(1 - sigmoid(z))]``."""
    pos = ad.mul(ad.softplus(ad.neg(z)), target * weight)
    neg = ad.mul(ad.softplus(z), (1.0 - target) * weight)
    return ad.sum_all(ad.add(pos, neg))


def loss_inter(s_single, label, alpha=5.0, beta=0.0):
    """Binary cross-entropy on ``sigmoid(alpha * s + beta)`` for one-name, one-box pairs.

    Tensor form: ``s_single`` (B, 1, 1), ``label`` (B,) of 0/1, ``alpha`` and
    ``beta`` parameter tensors; returns the batch mean. Scalar form takes a
    float or 1x1 matrix and a ``"positive"``/``"negative"`` label.
    """
    if isinstance(s_single, ad.Tensor):
        if s_single.shape[1:] != (1, 1):
            raise ValueError("loss_inter applies to examples with exactly one name and one box")
        b = s_single.shape[0]
        s = ad.reshape(s_single, (b,))
        z = ad.add(ad.mul(s, alpha), beta)
        return ad.scale(bce_with_logits(z, np.asarray(label, dtype=np.float64), np.ones(b)), 1.0 / b)
    arr = np.asarray(s_single, dtype=np.float64)
    if arr.size != 1:
        raise ValueError("loss_inter applies to examples with exactly one name and one box")
    if label not in ("positive", "negative", 1, 0, True, False):
        raise ValueError(f"unknown label {label!r}")
    target = 1.0 if label in ("positive", 1, True) else 0.0
    z = ad.Tensor(np.asarray([float(alpha) * float(arr.reshape(())) + float(beta)]))
    return float(bce_with_logits(z, np.asarray([target]), np.ones(1)).data)


def loss_null(s_null, linked=None, selected=None, *, target=None, weight=None):
    """Null-name classification loss, averaged over participating boxes.

    Selected unlinked boxes have target 1, linked boxes target 0, all other
    columns are ignored. Single-example form: ``s_null`` is a 1-D array and
    ``linked`` / ``selected`` are column index sets. Batched form: ``s_null``
    (B, m) tensor with dense ``target`` and ``weight`` arrays.
    Returns ``(loss, null_count)``.
    """
    if not isinstance(s_null, ad.Tensor):
        row = np.asarray(s_null, dtype=np.float64).reshape(-1)
        linked, selected = set(linked or ()), set(selected or ())
        if linked & selected:
            raise ValueError("a box cannot be both linked and selected as unlinked")
        target = np.zeros(row.shape)
        weight = np.zeros(row.shape)
        for j in selected:
            target[j], weight[j] = 1.0, 1.0
        for j in linked:
            weight[j] = 1.0
        count = int(weight.sum())
        if count == 0:
            return 0.0, 0
        return float(bce_with_logits(ad.Tensor(row), target, weight).data) / count, count
    count = int(np.asarray(weight).sum())
    if count == 0:
        return ad.Tensor(np.asarray(0.0)), 0
    return ad.scale(bce_with_logits(s_null, target, weight), 1.0 / count), count


# ---------------------------------------------------------------------------
# batched objective

@dataclass
class LossBatch:
    """Dense, padded inputs for one optimisation step of a single task."""
    task: str
    enc: EncoderBatch
    pool: np.ndarray          # (B, n, L) mention-averaging weights
    person_mask: np.ndarray   # (B, n)
    links: np.ndarray         # (B, n, m) 0/1
    null_target: np.ndarray   # (B, m)
    null_weight: np.ndarray   # (B, m)
    inter_label: np.ndarray   # (B,)

    @property
    def size(self) -> int:
        return self.enc.size


def build_loss_batch(task: str, examples: Sequence[Example], cfg: ModelConfig,
                     links: Sequence[Sequence[tuple[int, int]]] | None = None,
                     selected: Sequence[set[int]] | None = None,
                     labels: Sequence[int] | None = None) -> LossBatch:
    """Pad ``examples`` into a :class:`LossBatch`.

    ``links`` defaults to each example's ``gt_links``; ``selected`` lists the
    unlinked boxes used as null-name positives; ``labels`` gives the 1/0
    positive/negative flag of one-name, one-box pairs.
    """
    if links is None:
        links = [ex.gt_links for ex in examples]
    if selected is None:
        selected = [set() for _ in examples]
    enc = collate([ex.caption for ex in examples], [ex.detections for ex in examples], cfg)
    b, length = enc.tokens.shape
    m = enc.box_mask.shape[1]
    n = max(1, max(ex.n for ex in examples))
    pool = np.zeros((b, n, length))
    pool[:, :, 0] = 1.0  # padded persons read token 0 so their norm stays nonzero
    person_mask = np.zeros((b, n), dtype=bool)
    link_mask = np.zeros((b, n, m))
    null_target = np.zeros((b, m))
    null_weight = np.zeros((b, m))
    for i, ex in enumerate(examples):
        if ex.n:
            pool[i, :ex.n] = pooling_matrix(ex.referred, length)
        person_mask[i, :ex.n] = True
        for p, d in links[i]:
            link_mask[i, p, d] = 1.0
            null_weight[i, d] = 1.0
        for d in selected[i]:
            if link_mask[i, :, d].any():
                raise ValueError(f"{ex.example_id}: box {d} both linked and selected")
            null_target[i, d] = 1.0
            null_weight[i, d] = 1.0
    label_arr = np.ones(b) if labels is None else np.asarray(labels, dtype=np.float64)
    return LossBatch(task, enc, pool, person_mask, link_mask, null_target, null_weight, label_arr)


def batch_similarity(params: dict[str, ad.Tensor], batch: LossBatch, cfg: ModelConfig,
                     train_mode: bool = False, step: int = 0) -> tuple[ad.Tensor, ad.Tensor]:
    """(B, n, m) name-box similarities and (B, m) null-name similarities."""
    hidden = forward(params, batch.enc, cfg, train_mode=train_mode, step=step)
    names = name_pooling(hidden.text, batch.pool)
    s = similarity_matrix(names, hidden.boxes, name_valid=batch.person_mask,
                          box_valid=batch.enc.box_mask)
    s_null = null_similarities(params["null_name"], hidden.boxes)
    return s, s_null


def total_loss(params: dict[str, ad.Tensor], batch: LossBatch, cfg: ModelConfig,
               weights: LossWeights = LossWeights(), train_mode: bool = False, step: int = 0,
               null_in_softmax: bool = False) -> tuple[ad.Tensor, LossBreakdown]:
    """Weighted loss for one task batch.

    One-name, one-box batches train the cross-image pair loss only; all other
    batches train the within-image matching loss and the null-name loss.
    """
    s, s_null = batch_similarity(params, batch, cfg, train_mode, step)
    zero = ad.Tensor(np.asarray(0.0))
    l_intra = l_inter = l_null = zero
    links = pairs = nulls = 0
    if batch.task == TASK_1_1:
        l_inter = loss_inter(ad.getitem(s, (slice(None), slice(0, 1), slice(0, 1))),
                             batch.inter_label, params["inter_alpha"], params["inter_beta"])
        pairs = batch.size
    elif batch.task == TASK_M_N:
        valid = batch.person_mask[:, :, None] & batch.enc.box_mask[:, None, :]
        l_intra, links = loss_intra(s, batch.links, valid,
                                    null_row=s_null if null_in_softmax else None)
        l_null, nulls = loss_null(s_null, target=batch.null_target, weight=batch.null_weight)
    else:
        raise ValueError(f"unknown task {batch.task!r}")
    total = zero
    for w, term in ((weights.intra, l_intra), (weights.inter, l_inter), (weights.null, l_null)):
        if w != 0.0 and term is not zero:
            total = ad.add(total, ad.scale(term, w))
    breakdown = LossBreakdown(float(l_intra.data), float(l_inter.data), float(l_null.data),
                              float(total.data), links, pairs, nulls)
    if not np.isfinite(breakdown.total):
        raise NumericError(f"non-finite loss {breakdown}")
    return total, breakdown
