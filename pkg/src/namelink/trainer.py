"""Task-mixed training of the encoder.

Examples with exactly one name and one box form Task-1-1, trained with the
cross-image pair loss on positive and negative pairs. Everything else forms
Task-M-N, trained with the within-image matching loss and the null-name
loss. Batches of the two tasks are interleaved in a fixed ratio.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .datamodel import BoundingBox, ConfigurationError, Detection, Example
from .encoder import ModelConfig, Parameters, as_leaves, init_parameters, no_decay
from .evaluation import evaluate_accuracy, predict_model
from .gtmine import select_unlinked_boxes
from .objective import (TASK_1_1, TASK_M_N, LossBreakdown, LossWeights, build_loss_batch,
                        total_loss)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    weight_decay: float = 0.01
    dropout: float = 0.1
    batch_size: int = 32
    max_steps: int = 2000
    validate_every: int = 500
    task_ratio: tuple[int, int] = (1, 2)
    negative_prob: float = 0.5
    seed: int = 0
    loss_weights: LossWeights = LossWeights()
    augment_flip: bool = False
    augment_translate: bool = False
    null_in_softmax: bool = False
    warmup_steps: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.validate_every < 1:
            raise ValueError("learning_rate, batch_size and validate_every must be positive")
        if self.max_steps < 0 or self.weight_decay < 0:
            raise ValueError("max_steps and weight_decay must be non-negative")
        if len(self.task_ratio) != 2 or min(self.task_ratio) < 0 or sum(self.task_ratio) == 0:
            raise ValueError("task_ratio must be two non-negative integers, not both zero")
        if not 0.0 <= self.negative_prob <= 1.0:
            raise ValueError("negative_prob must be a probability")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        if "loss_weights" in data and isinstance(data["loss_weights"], dict):
            data["loss_weights"] = LossWeights(**data["loss_weights"])
        for key in ("task_ratio", "betas"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["task_ratio"] = list(self.task_ratio)
        out["betas"] = list(self.betas)
        return out

    def model_config(self, d_v: int, vocab_size: int) -> ModelConfig:
        opts = {"dropout_rate": self.dropout, "seed": self.seed, **self.model}
        return ModelConfig(d_v=d_v, vocab_size=vocab_size, **opts)


PRESETS = {
    # seconds-scale smoke runs
    "tiny": TrainConfig(learning_rate=2e-3, batch_size=8, max_steps=30, validate_every=10,
                        warmup_steps=5, model={"d_model": 16, "n_layers": 1, "n_heads": 2}),
    # desk-scale runs on synthetic corpora
    "desk": TrainConfig(learning_rate=2e-3, batch_size=32, max_steps=2000, validate_every=500,
                        warmup_steps=100),
    # settings reported for the full-size dataset
    "full": TrainConfig(learning_rate=5e-5, batch_size=1024, max_steps=50000,
                         validate_every=500, model={"d_model": 768, "n_layers": 12,
                                                    "n_heads": 12}),
}


@dataclass
class TrainItem:
    """An example plus the supervision derived for it."""
    example: Example
    links: list[tuple[int, int]]
    selected: set[int]

    @property
    def identity(self) -> str:
        return self.example.referred[0].identity_id if self.example.referred else ""


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: Parameters) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


# ---------------------------------------------------------------------------
# data preparation

def prepare_items(examples: Sequence[Example], mined_links: dict | None = None,
                  cfg: ModelConfig | None = None) -> list[TrainItem]:
    """Attach links and null-loss positives; drop examples outside size limits.

    ``mined_links`` maps example id to ``(links, selected)`` from the miner.
    Without it the corpus ``gt_links`` are used and unlinked boxes are
    selected here.
    """
    max_tokens = cfg.max_tokens if cfg else 60
    max_boxes = cfg.max_boxes if cfg else 100
    items = []
    for ex in examples:
        if not (1 <= ex.m <= max_boxes and ex.n >= 1 and len(ex.caption) <= max_tokens):
            continue
        if mined_links is not None and ex.example_id in mined_links:
            links, selected = mined_links[ex.example_id]
        else:
            links = list(ex.gt_links)
            selected = {lab.detection_index for lab in select_unlinked_boxes(ex, links)
                        if lab.selected}
        items.append(TrainItem(ex, list(map(tuple, links)), set(selected)))
    return items


def partition_tasks(items: Sequence) -> tuple[list, list]:
    """Split into (one name and one box, everything else)."""
    def is_single(x):
        ex = x.example if isinstance(x, TrainItem) else x
        return ex.n == 1 and ex.m == 1

    ones = [x for x in items if is_single(x)]
    rest = [x for x in items if not is_single(x)]
    return ones, rest


def sample_negatives(batch: Sequence[TrainItem], prob: float, rng: np.random.Generator,
                     pool: Sequence[TrainItem] | None = None, max_tries: int = 20
                     ) -> tuple[list[TrainItem], list[int], int]:
    """Turn each pair into a negative with probability ``prob``.

    A negative swaps in the detection of a pool example showing a different
    identity. Returns ``(items, labels, skipped)`` where ``skipped`` counts
    negatives that could not be formed for lack of another identity.
    """
    pool = list(batch) if pool is None else list(pool)
    out, labels, skipped = [], [], 0
    for item in batch:
        if rng.random() >= prob:
            out.append(item)
            labels.append(1)
            continue
        donor = None
        for _ in range(max_tries):
            cand = pool[int(rng.integers(len(pool)))]
            if cand.identity != item.identity:
                donor = cand
                break
        if donor is None:
            others = [c for c in pool if c.identity != item.identity]
            if others:
                donor = others[int(rng.integers(len(others)))]
        if donor is None:
            skipped += 1
            out.append(item)
            labels.append(1)
            continue
        ex = item.example
        swapped = Example(ex.example_id + "~neg", ex.caption, [donor.example.detections[0]],
                          ex.referred, [], ex.meta)
        out.append(TrainItem(swapped, [], set()))
        labels.append(0)
    if skipped:
        log.warning("skipped %d negatives: no other identity in pool", skipped)
    return out, labels, skipped


def task_schedule(ratio: tuple[int, int]) -> Iterator[str]:
    a, b = ratio
    while True:
        yield from [TASK_1_1] * a + [TASK_M_N] * b


def make_batches(partitions: tuple[Sequence, Sequence], config: TrainConfig,
                 rng: np.random.Generator) -> Iterator[tuple[str, list]]:
    """Endless stream of ``(task, items)`` following the task ratio."""
    ones, rest = partitions
    a, b = config.task_ratio
    if a and not ones:
        raise ConfigurationError("Task-1-1 partition is empty but its ratio is non-zero")
    if b and not rest:
        raise ConfigurationError("Task-M-N partition is empty but its ratio is non-zero")
    for task in task_schedule(config.task_ratio):
        source = ones if task == TASK_1_1 else rest
        idx = rng.integers(len(source), size=config.batch_size)
        yield task, [source[i] for i in idx]


def _flip_box(b: BoundingBox) -> BoundingBox:
    return BoundingBox(1.0 - b.x2, b.y1, 1.0 - b.x1, b.y2)


def _shift_box(b: BoundingBox, dx: float, dy: float) -> BoundingBox:
    clamp = lambda v: min(1.0, max(0.0, v))
    return BoundingBox(clamp(b.x1 + dx), clamp(b.y1 + dy), clamp(b.x2 + dx), clamp(b.y2 + dy))


def augment_spatial(example: Example, mode: str, rng: np.random.Generator | None = None) -> Example:
    """Horizontal flip or common translation of every box; features untouched."""
    if mode == "flip":
        move = _flip_box
    elif mode == "translate":
        if rng is None:
            raise ValueError("translation needs a random generator")
        boxes = [d.box for d in example.detections]
        if not boxes:
            return example
        lo_x, hi_x = -min(b.x1 for b in boxes), 1.0 - max(b.x2 for b in boxes)
        lo_y, hi_y = -min(b.y1 for b in boxes), 1.0 - max(b.y2 for b in boxes)
        dx, dy = rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)
        move = lambda b: _shift_box(b, dx, dy)
    else:
        raise ValueError(f"unknown augmentation {mode!r}")
    dets = [Detection(move(d.box), move(d.face_box), d.visual_feature, d.face_embedding,
                      d.face_crop) for d in example.detections]
    return Example(example.example_id, example.caption, dets, example.referred,
                   example.gt_links, example.meta)


# ---------------------------------------------------------------------------
# optimisation

def adamw_update(params: Parameters, grads: dict[str, np.ndarray], state: OptimizerState,
                 lr: float, config: TrainConfig) -> None:
    """In-place AdamW step with decoupled weight decay."""
    b1, b2 = config.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if not no_decay(name):
            p -= lr * config.weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + config.eps)


def learning_rate_at(step: int, config: TrainConfig) -> float:
    if config.warmup_steps and step <= config.warmup_steps:
        return config.learning_rate * step / config.warmup_steps
    return config.learning_rate


def compute_gradients(params: Parameters, batch, model_cfg: ModelConfig, config: TrainConfig,
                      step: int) -> tuple[dict[str, np.ndarray], LossBreakdown]:
    leaves = as_leaves(params)
    with ad.Tape() as tape:
        loss, breakdown = total_loss(leaves, batch, model_cfg, config.loss_weights,
                                     train_mode=True, step=step,
                                     null_in_softmax=config.null_in_softmax)
        tape.backward(loss)
    grads = {k: t.grad for k, t in leaves.items() if t.grad is not None}
    return grads, breakdown


def train_step(params: Parameters, opt_state: OptimizerState, batch, model_cfg: ModelConfig,
               config: TrainConfig) -> tuple[Parameters, OptimizerState, LossBreakdown]:
    """One AdamW update on ``batch`` (a :class:`objective.LossBatch`). Mutates in place."""
    step = opt_state.step + 1
    grads, breakdown = compute_gradients(params, batch, model_cfg, config, step)
    if not math.isfinite(breakdown.total) or any(not np.all(np.isfinite(g)) for g in grads.values()):
        raise TrainingError(f"non-finite loss or gradient at step {step}: {breakdown}")
    adamw_update(params, grads, opt_state, learning_rate_at(step, config), config)
    return params, opt_state, breakdown


@dataclass
class TrainResult:
    params: Parameters
    model_config: ModelConfig
    log: list[dict]
    best_step: int
    best_val_accuracy: float | None
    final_params: Parameters


def _augment(item: TrainItem, config: TrainConfig, rng: np.random.Generator) -> TrainItem:
    ex = item.example
    if config.augment_flip and rng.random() < 0.5:
        ex = augment_spatial(ex, "flip")
    if config.augment_translate and rng.random() < 0.5:
        ex = augment_spatial(ex, "translate", rng)
    return item if ex is item.example else TrainItem(ex, item.links, item.selected)


def build_task_batch(task: str, items: list[TrainItem], pool: Sequence[TrainItem],
                     config: TrainConfig, model_cfg: ModelConfig, rng: np.random.Generator):
    labels = None
    if config.augment_flip or config.augment_translate:
        items = [_augment(it, config, rng) for it in items]
    if task == TASK_1_1:
        items, labels, _ = sample_negatives(items, config.negative_prob, rng, pool)
    return build_loss_batch(task, [it.example for it in items], model_cfg,
                            links=[it.links for it in items],
                            selected=[it.selected for it in items], labels=labels)


def validation_accuracy(params: Parameters, model_cfg: ModelConfig,
                        examples: Sequence[Example]) -> float:
    preds = predict_model(params, model_cfg, examples, "argmax")
    return evaluate_accuracy(preds, examples).accuracy


def train_loop(train_items: Sequence[TrainItem], val_examples: Sequence[Example],
               config: TrainConfig, d_v: int, vocab_size: int,
               log_sink=None) -> TrainResult:
    """Train from scratch; keep the parameters with the best validation accuracy.

    One log record is emitted per validation, holding mean losses since the
    previous record (each loss averaged over the batches of its own task).
    """
    model_cfg = config.model_config(d_v, vocab_size)
    params = init_parameters(model_cfg)
    state = OptimizerState.zeros(params)
    rng = np.random.default_rng([config.seed, 7])
    items = [it for it in train_items
             if 1 <= it.example.m <= model_cfg.max_boxes
             and len(it.example.caption) <= model_cfg.max_tokens]
    ones, rest = partition_tasks(items)
    val = [ex for ex in val_examples
           if ex.m <= model_cfg.max_boxes and len(ex.caption) <= model_cfg.max_tokens]

    records: list[dict] = []
    best = (copy.deepcopy(params), 0, None)
    if config.max_steps == 0:
        return TrainResult(best[0], model_cfg, records, 0, None, params)
    stream = make_batches((ones, rest), config, rng)
    sums = {TASK_1_1: np.zeros(4), TASK_M_N: np.zeros(4)}
    counts = {TASK_1_1: 0, TASK_M_N: 0}
    for step in range(1, config.max_steps + 1):
        task, chosen = next(stream)
        batch = build_task_batch(task, chosen, ones, config, model_cfg, rng)
        _, _, br = train_step(params, state, batch, model_cfg, config)
        sums[task] += [br.l_intra, br.l_inter, br.l_null, br.total]
        counts[task] += 1
        if step % config.validate_every == 0:
            acc = validation_accuracy(params, model_cfg, val) if val else float("nan")
            mn = sums[TASK_M_N] / max(counts[TASK_M_N], 1)
            one = sums[TASK_1_1] / max(counts[TASK_1_1], 1)
            rec = {"step": step, "l_intra": mn[0], "l_inter": one[1], "l_null": mn[2],
                   "total_m_n": mn[3], "total_1_1": one[3], "val_accuracy": acc}
            records.append(rec)
            if log_sink is not None:
                log_sink.write(json.dumps(rec, sort_keys=True) + "\n")
                log_sink.flush()
            log.info("step %d  intra %.4f  inter %.4f  null %.4f  val %.4f",
                     step, mn[0], one[1], mn[2], acc)
            if not val or best[2] is None or acc > best[2]:
                best = (copy.deepcopy(params), step, acc)
            sums = {k: np.zeros(4) for k in sums}
            counts = {k: 0 for k in counts}
    if not records:
        best = (copy.deepcopy(params), config.max_steps, None)
    return TrainResult(best[0], model_cfg, records, best[1], best[2], params)
