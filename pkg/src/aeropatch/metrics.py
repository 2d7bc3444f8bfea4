"""Attack-efficacy metrics: AORR (digital), OSR and NDR (physical), PR/AP.

All functions are pure; none mutate their inputs. Scores come from the
one-to-one matching protocol in match_detections: attacked detections are
retrieved at a near-zero objectness threshold so suppressed objects still
yield a matchable score, and unmatched clean detections score 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .types import Box, Detection, TrackedScoreSeries

DEFAULT_MATCH_IOU = 0.5
DEFAULT_RETRIEVAL_THRESHOLD = 1e-3


def box_iou(a: Box, b: Box) -> float:
    """Intersection over union of two corner boxes."""
    ix0 = max(a[0], b[0])
    iy0 = max(a[1], b[1])
    ix1 = min(a[2], b[2])
    iy1 = min(a[3], b[3])
    iw = max(0.0, ix1 - ix0)
    ih = max(0.0, iy1 - iy0)
    inter = iw * ih
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


@dataclass(frozen=True)
class MatchedPair:
    """A clean detection paired with the objectness it retains under attack.

    attacked_score is 0 when no attacked detection overlapped sufficiently.
    """

    clean: Detection
    attacked_score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.attacked_score <= 1.0:
            raise ValueError(f"attacked score {self.attacked_score} out of range")


def match_detections(clean: Sequence[Detection],
                     attacked_raw: Sequence[Detection],
                     min_iou: float = DEFAULT_MATCH_IOU) -> list[MatchedPair]:
    """One-to-one matching between clean and attacked detections.

    Clean detections are processed in descending objectness order; each
    takes the not-yet-matched attacked box with the highest objectness
    among those with IoU >= min_iou. The assignment is injective. Pairs
    are returned in the input order of `clean`.
    """
    order = sorted(range(len(clean)), key=lambda i: (-clean[i].objectness, i))
    taken = [False] * len(attacked_raw)
    scores = [0.0] * len(clean)
    for ci in order:
        best_j = -1
        best_score = -1.0
        for j, att in enumerate(attacked_raw):
            if taken[j]:
                continue
            if box_iou(clean[ci].box, att.box) < min_iou:
                continue
            if att.objectness > best_score:
                best_score = att.objectness
                best_j = j
        if best_j >= 0:
            taken[best_j] = True
            scores[ci] = attacked_raw[best_j].objectness
    return [MatchedPair(c, s) for c, s in zip(clean, scores)]


def aorr(pairs_per_image: Sequence[Sequence[MatchedPair]],
         normalization: str = "total") -> float:
    """Average objectness reduction rate over matched pairs.

    Each pair contributes (s - s_attacked) / s. With normalization
    "total" the mean runs over all detections across images; with
    "per_image" it is the mean over images of per-image means. Bounded
    above by 1; negative when attacked scores exceed clean scores.
    """
    if normalization not in ("total", "per_image"):
        raise ValueError(f"unknown normalization {normalization!r}")
    total = sum(len(pairs) for pairs in pairs_per_image)
    if total == 0:
        raise ValueError("no detections to average over")

    if normalization == "total":
        acc = 0.0
        for pairs in pairs_per_image:
            for p in pairs:
                acc += (p.clean.objectness - p.attacked_score) / p.clean.objectness
        return acc / total

    image_means = []
    for pairs in pairs_per_image:
        if not pairs:
            continue
        acc = sum((p.clean.objectness - p.attacked_score) / p.clean.objectness
                  for p in pairs)
        image_means.append(acc / len(pairs))
    return sum(image_means) / len(image_means)


def osr(series: TrackedScoreSeries) -> float:
    """Objectness score ratio: mean patched score over mean clean score."""
    clean_mean = sum(series.clean_scores) / len(series.clean_scores)
    if clean_mean == 0.0:
        raise ValueError(f"series {series.object_id}: clean score mean is zero")
    patched_mean = sum(series.patched_scores) / len(series.patched_scores)
    return patched_mean / clean_mean


def ndr(series: TrackedScoreSeries, tau: float) -> float | None:
    """Normalised detection rate at threshold tau.

    Fraction of patched frames with score >= tau over the fraction of
    clean frames with score >= tau. Returns None (a flagged missing value)
    when no clean frame reaches tau.
    """
    clean_hits = sum(1 for s in series.clean_scores if s >= tau)
    if clean_hits == 0:
        return None
    patched_hits = sum(1 for s in series.patched_scores if s >= tau)
    patched_rate = patched_hits / len(series.patched_scores)
    clean_rate = clean_hits / len(series.clean_scores)
    return patched_rate / clean_rate


def default_tau_grid() -> list[float]:
    """0.05 ... 0.95 in steps of 0.05."""
    return [round(0.05 * k, 2) for k in range(1, 20)]


def ndr_curve(series: TrackedScoreSeries,
              tau_grid: Sequence[float] | None = None) -> list[tuple[float, float | None]]:
    """NDR evaluated over a threshold grid; undefined points carry None."""
    grid = default_tau_grid() if tau_grid is None else list(tau_grid)
    return [(tau, ndr(series, tau)) for tau in grid]


@dataclass
class PRCurve:
    """Single-class precision-recall curve with its average precision."""

    precision: list[float]
    recall: list[float]
    ap: float


def pr_ap(clean_annotations: dict[str, list[Detection]],
          attacked_detections: dict[str, list[Detection]],
          iou_threshold: float = 0.5) -> PRCurve:
    """Precision-recall and AP of detections against ground-truth boxes.

    Detections over all images are ranked by descending score; each is a
    true positive if it has IoU >= iou_threshold with a not-yet-matched
    ground-truth box in its image (greedily taking the highest-IoU one).
    AP is the area under the interpolated precision envelope, evaluated
    at 101 equally spaced recall points.
    """
    n_gt = sum(len(v) for v in clean_annotations.values())
    if n_gt == 0:
        raise ValueError("no ground-truth detections")

    ranked: list[tuple[float, str, Detection]] = []
    for image_id, dets in attacked_detections.items():
        for d in dets:
            ranked.append((d.objectness, image_id, d))
    ranked.sort(key=lambda t: -t[0])

    matched: dict[str, list[bool]] = {
        image_id: [False] * len(v) for image_id, v in clean_annotations.items()
    }
    tps: list[bool] = []
    for _, image_id, det in ranked:
        gts = clean_annotations.get(image_id, [])
        best_iou = 0.0
        best_k = -1
        for k, gt in enumerate(gts):
            if matched[image_id][k]:
                continue
            iou = box_iou(det.box, gt.box)
            if iou >= iou_threshold and iou > best_iou:
                best_iou = iou
                best_k = k
        if best_k >= 0:
            matched[image_id][best_k] = True
            tps.append(True)
        else:
            tps.append(False)

    precision: list[float] = []
    recall: list[float] = []
    tp = 0
    for i, is_tp in enumerate(tps):
        tp += int(is_tp)
        precision.append(tp / (i + 1))
        recall.append(tp / n_gt)

    ap = 0.0
    for k in range(101):
        r = k / 100.0
        envelope = max((p for p, rc in zip(precision, recall) if rc >= r), default=0.0)
        ap += envelope
    ap /= 101.0
    return PRCurve(precision, recall, ap)
