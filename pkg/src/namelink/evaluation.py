"""Link prediction, heuristic baselines and accuracy reporting."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .datamodel import Example, interactive_subset
from .gtmine import min_weight_matching

METHOD_ARGMAX = "argmax"
METHOD_BIPARTITE = "bipartite"
BASELINES = ("random", "big-small", "l2r-all", "l2r-largest")


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class Prediction:
    example_id: str
    assignments: tuple[tuple[int, int], ...]
    method: str

    def as_dict(self) -> dict[int, int]:
        return dict(self.assignments)

    def is_injective(self) -> bool:
        dets = [d for _, d in self.assignments]
        persons = [p for p, _ in self.assignments]
        return len(set(dets)) == len(dets) and len(set(persons)) == len(persons)


@dataclass(frozen=True)
class ConfidenceInterval:
    p_hat: float
    n: int
    z: float
    lower: float
    upper: float

    @property
    def width(self) -> float:
        return self.upper - self.lower


def wilson_interval(correct: int, total: int, z: float = 1.96) -> ConfidenceInterval:
    """Wilson score interval for a binomial proportion."""
    if total < 1:
        raise ValueError("Wilson interval needs at least one trial")
    if not 0 <= correct <= total:
        raise ValueError(f"correct={correct} outside [0, {total}]")
    p = correct / total
    z2 = z * z
    denom = 1.0 + z2 / total
    center = (p + z2 / (2 * total)) / denom
    half = (z / denom) * math.sqrt(p * (1 - p) / total + z2 / (4 * total * total))
    # the bounds are exactly 0 and 1 at the extremes; avoid rounding residue
    lower = 0.0 if correct == 0 else max(0.0, center - half)
    upper = 1.0 if correct == total else min(1.0, center + half)
    return ConfidenceInterval(p, total, z, lower, upper)


# ---------------------------------------------------------------------------
# model-based predictions

def predict_argmax(s, example_id: str = "", n_persons: int | None = None) -> Prediction:
    """Each person takes its most similar box; ties go to the lowest index."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] < 1:
        raise ValueError("similarity matrix needs at least one column")
    rows = s.shape[0] if n_persons is None else n_persons
    return Prediction(example_id, tuple((i, int(np.argmax(s[i]))) for i in range(rows)),
                      METHOD_ARGMAX)


def predict_bipartite(s, example_id: str = "", n_persons: int | None = None) -> Prediction:
    """Injective assignment of maximum total similarity."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] < 1:
        raise ValueError("similarity matrix needs at least one column")
    rows = s.shape[0] if n_persons is None else n_persons
    pairs = min_weight_matching(-s[:rows])
    return Prediction(example_id, tuple(pairs), METHOD_BIPARTITE)


# ---------------------------------------------------------------------------
# heuristic baselines

def mention_order(example: Example) -> list[int]:
    """Person indices ordered by first mention in the caption."""
    return sorted(range(example.n), key=lambda i: (example.referred[i].first_token, i))


def _pair(example: Example, boxes: Sequence[int], method: str) -> Prediction:
    persons = mention_order(example)
    return Prediction(example.example_id, tuple(sorted(zip(persons, boxes))), method)


def baseline_random(example: Example, rng: np.random.Generator) -> Prediction:
    if example.m < 1:
        raise ValueError(f"{example.example_id}: no detections")
    k = min(example.n, example.m)
    persons = rng.permutation(example.n)[:k]
    boxes = rng.permutation(example.m)[:k]
    return Prediction(example.example_id,
                      tuple(sorted((int(p), int(b)) for p, b in zip(persons, boxes))), "random")


def baseline_big_small(example: Example) -> Prediction:
    if example.m < 1:
        raise ValueError(f"{example.example_id}: no detections")
    boxes = sorted(range(example.m), key=lambda j: (-example.detections[j].box.area, j))
    return _pair(example, boxes, "big-small")


def largest_cutoff(n: int, m: int, literal: bool = False) -> int:
    """How many of the largest detections the L->R (Largest) heuristic keeps."""
    return max(m, n) if literal else min(m, n)


def baseline_l2r(example: Example, mode: str = "all", literal_cutoff: bool = False) -> Prediction:
    if example.m < 1:
        raise ValueError(f"{example.example_id}: no detections")
    if mode not in ("all", "largest"):
        raise ValueError(f"unknown mode {mode!r}")
    dets = example.detections
    keep = list(range(example.m))
    if mode == "largest":
        d = largest_cutoff(example.n, example.m, literal_cutoff)
        keep = sorted(keep, key=lambda j: (-dets[j].box.area, j))[:d]
    boxes = sorted(keep, key=lambda j: (dets[j].box.x1, dets[j].box.y1, j))
    return _pair(example, boxes, f"l2r-{mode}")


def run_baseline(name: str, examples: Iterable[Example], seed: int = 0,
                 literal_cutoff: bool = False) -> list[Prediction]:
    rng = np.random.default_rng(seed)
    fns: dict[str, Callable[[Example], Prediction]] = {
        "random": lambda ex: baseline_random(ex, rng),
        "big-small": baseline_big_small,
        "l2r-all": lambda ex: baseline_l2r(ex, "all"),
        "l2r-largest": lambda ex: baseline_l2r(ex, "largest", literal_cutoff),
    }
    if name not in fns:
        raise ValueError(f"unknown baseline {name!r}; choose from {BASELINES}")
    return [fns[name](ex) for ex in examples]


# ---------------------------------------------------------------------------
# scoring

def _bin(k: int) -> str:
    return str(k) if k < 4 else "4+"


@dataclass
class Tally:
    correct: int = 0
    total: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else float("nan")

    def as_dict(self) -> dict:
        out = {"correct": self.correct, "total": self.total, "accuracy": self.accuracy}
        if self.total:
            ci = wilson_interval(self.correct, self.total)
            out["interval"] = [ci.lower, ci.upper]
        return out


@dataclass
class MetricsReport:
    method: str
    overall: Tally
    interval: ConfidenceInterval | None
    bins: dict[str, Tally] = field(default_factory=dict)
    subsets: dict[str, Tally] = field(default_factory=dict)
    example_count: int = 0

    @property
    def accuracy(self) -> float:
        return self.overall.accuracy

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "accuracy": self.overall.accuracy,
            "correct": self.overall.correct,
            "links": self.overall.total,
            "examples": self.example_count,
            "interval": None if self.interval is None else {
                "lower": self.interval.lower, "upper": self.interval.upper, "z": self.interval.z},
            "bins": {k: v.as_dict() for k, v in sorted(self.bins.items())},
            "subsets": {k: v.as_dict() for k, v in sorted(self.subsets.items())},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")


def evaluate_accuracy(predictions: Iterable[Prediction], examples: Sequence[Example],
                      method: str = "",
                      subsets: dict[str, Callable[[Example], bool]] | None = None) -> MetricsReport:
    """Per-link accuracy against ``gt_links``; unassigned people count as wrong.

    Bins are keyed ``"n=<names>,m=<boxes>"`` with counts of four or more
    pooled into ``4+``.
    """
    by_id = {p.example_id: p for p in predictions}
    interactive_ids = {ex.example_id for ex in interactive_subset(examples)}
    predicates = {"interactive": lambda ex: ex.example_id in interactive_ids}
    predicates.update(subsets or {})
    overall = Tally()
    bins: dict[str, Tally] = {}
    subset_tallies = {name: Tally() for name in predicates}
    for ex in examples:
        if ex.example_id not in by_id:
            raise EvaluationError(f"no prediction for example {ex.example_id}")
        assigned = by_id[ex.example_id].as_dict()
        hits = sum(1 for p, d in ex.gt_links if assigned.get(p) == d)
        links = len(ex.gt_links)
        tallies = [overall, bins.setdefault(f"n={_bin(ex.n)},m={_bin(ex.m)}", Tally())]
        tallies += [subset_tallies[name] for name, pred in predicates.items() if pred(ex)]
        for t in tallies:
            t.correct += hits
            t.total += links
    interval = wilson_interval(overall.correct, overall.total) if overall.total else None
    return MetricsReport(method, overall, interval, bins, subset_tallies, len(examples))


# ---------------------------------------------------------------------------
# model inference

def similarity_matrices(params, model_cfg, examples: Sequence[Example],
                        batch_size: int = 64) -> list[np.ndarray]:
    """Inference-mode (n, m) similarity matrix for every example."""
    from .encoder import as_leaves
    from .objective import TASK_M_N, batch_similarity, build_loss_batch

    leaves = as_leaves(params, requires_grad=False)
    out: list[np.ndarray | None] = [None] * len(examples)
    # group similar lengths to limit padding
    order = sorted(range(len(examples)),
                   key=lambda i: (len(examples[i].caption), examples[i].m, i))
    for lo in range(0, len(order), batch_size):
        chunk = order[lo:lo + batch_size]
        exs = [examples[i] for i in chunk]
        batch = build_loss_batch(TASK_M_N, exs, model_cfg, links=[[] for _ in exs])
        s, _ = batch_similarity(leaves, batch, model_cfg)
        for k, i in enumerate(chunk):
            out[i] = s.data[k, :examples[i].n, :examples[i].m].copy()
    return out


def predict_model(params, model_cfg, examples: Sequence[Example], inference: str = METHOD_ARGMAX,
                  batch_size: int = 64) -> list[Prediction]:
    if inference not in (METHOD_ARGMAX, METHOD_BIPARTITE):
        raise ValueError(f"unknown inference mode {inference!r}")
    predict = predict_argmax if inference == METHOD_ARGMAX else predict_bipartite
    preds = []
    for ex, s in zip(examples, similarity_matrices(params, model_cfg, examples, batch_size)):
        if ex.m == 0 or ex.n == 0:
            preds.append(Prediction(ex.example_id, (), inference))
        else:
            preds.append(predict(s, ex.example_id))
    return preds
