"""Estimate person-to-detection links from face embeddings.

Reference faces are matched to detected faces with a minimum-weight
bipartite matching over cosine distances; matches above a distance
threshold are dropped. Detections that are small and blurry relative to
the other faces in the image are labelled as unreferenced, which feeds the
null-name classification loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .datamodel import Example

DEFAULT_THRESHOLD = 0.46
DEFAULT_AREA_RATIO = 0.6
DEFAULT_BLUR_THRESHOLD = 50.0

LAPLACE_KERNEL = np.array([[0.0, 1.0, 0.0],
                           [1.0, -4.0, 1.0],
                           [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class LinkEstimate:
    links: tuple[tuple[int, int, float], ...]
    threshold: float

    def pairs(self) -> list[tuple[int, int]]:
        return [(p, d) for p, d, _ in self.links]


@dataclass(frozen=True)
class UnlinkedBoxLabel:
    detection_index: int
    insignificant: bool
    blurry: bool
    selected: bool


def face_cost_matrix(reference_embeddings, detection_embeddings) -> np.ndarray:
    """Cosine distance ``1 - <ref_i, det_j>`` between unit embeddings."""
    refs = np.asarray(reference_embeddings, dtype=np.float64)
    dets = np.asarray(detection_embeddings, dtype=np.float64)
    if refs.size == 0 or dets.size == 0:
        return np.zeros((len(refs), len(dets)))
    if refs.ndim != 2 or dets.ndim != 2 or refs.shape[1] != dets.shape[1]:
        raise ValueError(f"embedding dimension mismatch: {refs.shape} vs {dets.shape}")
    for name, arr in (("reference", refs), ("detection", dets)):
        norms = np.linalg.norm(arr, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError(f"{name} embeddings must have unit norm")
    return np.clip(1.0 - refs @ dets.T, 0.0, 2.0)


def _optimal_cost(cost: np.ndarray) -> float:
    if cost.shape[0] == 0 or cost.shape[1] == 0:
        return 0.0
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def min_weight_matching(cost) -> list[tuple[int, int]]:
    """Maximum-cardinality assignment of least total cost.

    Among optimal assignments the lexicographically smallest sorted pair list
    is returned, so the result does not depend on solver internals.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        return []
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    n_rows, n_cols = cost.shape
    best = _optimal_cost(cost)
    tol = 1e-9 * (1.0 + abs(best)) + 1e-12 * cost.size * (1.0 + np.abs(cost).max())

    # Fix rows in order, preferring the smallest feasible column and leaving a
    # row unmatched last; feasibility = forced choices still reach the optimum.
    pairs: list[tuple[int, int]] = []
    spent = 0.0
    free_cols = list(range(n_cols))
    for i in range(n_rows):
        later = list(range(i + 1, n_rows))
        need = min(n_rows, n_cols) - len(pairs)
        chosen = False
        for j in free_cols:
            rest_cols = [c for c in free_cols if c != j]
            if min(len(later), len(rest_cols)) < need - 1:
                continue
            sub = cost[np.ix_(later, rest_cols)]
            if abs(spent + cost[i, j] + _optimal_cost(sub) - best) <= tol:
                pairs.append((i, j))
                spent += cost[i, j]
                free_cols = rest_cols
                chosen = True
                break
        if not chosen and min(len(later), len(free_cols)) < need:
            raise RuntimeError("matching tie-break lost feasibility")
    return pairs


def estimate_links(reference_embeddings, detection_embeddings,
                   threshold: float = DEFAULT_THRESHOLD) -> LinkEstimate:
    cost = face_cost_matrix(reference_embeddings, detection_embeddings)
    links = tuple((i, j, float(cost[i, j])) for i, j in min_weight_matching(cost)
                  if cost[i, j] <= threshold)
    return LinkEstimate(links, threshold)


def estimate_example_links(references: dict[int, np.ndarray], example: Example,
                           threshold: float = DEFAULT_THRESHOLD) -> LinkEstimate:
    """Link the referred people that have a reference face to face-bearing detections.

    ``references`` maps person index to its reference embedding. Indices in
    the result refer to the example's own person and detection lists.
    """
    persons = sorted(references)
    det_idx = [j for j, d in enumerate(example.detections) if d.face_embedding is not None]
    if not persons or not det_idx:
        return LinkEstimate((), threshold)
    est = estimate_links([references[p] for p in persons],
                         [example.detections[j].face_embedding for j in det_idx], threshold)
    return LinkEstimate(tuple((persons[i], det_idx[j], c) for i, j, c in est.links), threshold)


def laplacian_variance(crop) -> float:
    """Population variance of the interior 4-neighbour Laplacian response."""
    img = np.asarray(crop, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 3 or img.shape[1] < 3:
        raise ValueError(f"crop must be at least 3x3, got shape {img.shape}")
    response = (img[:-2, 1:-1] + img[2:, 1:-1] + img[1:-1, :-2] + img[1:-1, 2:]
                - 4.0 * img[1:-1, 1:-1])
    return float(response.var())


def select_unlinked_boxes(example: Example, link_estimate: LinkEstimate | Sequence,
                          area_ratio: float = DEFAULT_AREA_RATIO,
                          blur_threshold: float = DEFAULT_BLUR_THRESHOLD) -> list[UnlinkedBoxLabel]:
    """Flag detections that are insignificant, blurry and not linked to a name.

    ``link_estimate`` may also be a plain sequence of ``(person, detection)``
    pairs such as ``Example.gt_links``.
    """
    if not example.detections:
        return []
    if isinstance(link_estimate, LinkEstimate):
        linked = {d for _, d, _ in link_estimate.links}
    else:
        linked = {d for _, d in link_estimate}
    areas = [d.face_box.area for d in example.detections]
    largest = max(areas)
    labels = []
    for j, det in enumerate(example.detections):
        insignificant = areas[j] < area_ratio * largest
        blurry = det.face_crop is not None and laplacian_variance(det.face_crop) < blur_threshold
        labels.append(UnlinkedBoxLabel(j, insignificant, blurry,
                                       insignificant and blurry and j not in linked))
    return labels
