"""Retrieval and detection metrics, plus the filtering analysis: score
histograms, negative predictive value at fixed recall, and the compute-savings
model.

Average precision is exact (all-point, no interpolation): AP = sum over
true-positive ranks r of precision(r), divided by the number of ground-truth
positives. Ranked inputs are assumed already ordered by the retrieval
module's deterministic tie rule; scene rankings built here order by score
descending with ties broken by ascending scene_id.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation


def iou(a, b) -> float:
    """Intersection over union of two (x, y, w, h) boxes; 0 when disjoint."""
    ax, ay, aw, ah = (float(v) for v in a)
    bx, by, bw, bh = (float(v) for v in b)
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise ContractViolation("boxes must have positive extent")
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


@dataclass
class MetricReport:
    metrics: dict = field(default_factory=dict)
    per_query_ap: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"metrics": self.metrics, "per_query_ap": self.per_query_ap, "metadata": self.metadata},
            indent=2,
            sort_keys=True,
        )


def _ap_from_flags(flags, n_positives: int) -> float:
    """Exact all-point AP of a ranked 0/1 relevance list with a known positive
    count (unretrieved positives count as misses)."""
    if n_positives <= 0:
        raise ContractViolation("n_positives must be positive")
    tp = 0
    ap = 0.0
    for r, flag in enumerate(flags, start=1):
        if flag:
            tp += 1
            ap += tp / r
    return ap / n_positives


def detection_metrics(detections_by_scene: dict, gt_by_scene: dict, iou_thresh: float = 0.5):
    """(recall, AP) of detections against ground-truth boxes.

    Detections are (bbox, score) per scene; matching is greedy in descending
    score order (ties: scene_id, then bbox x), each ground-truth box matched
    at most once at IoU >= ``iou_thresh``.
    """
    n_gt = sum(len(v) for v in gt_by_scene.values())
    ranked = []
    for sid in sorted(detections_by_scene):
        for bbox, score in detections_by_scene[sid]:
            ranked.append((-float(score), sid, tuple(float(v) for v in bbox)))
    ranked.sort()
    matched: dict[int, list[bool]] = {sid: [False] * len(gt_by_scene.get(sid, ())) for sid in gt_by_scene}
    flags = []
    for neg_score, sid, bbox in ranked:
        best, best_iou = None, 0.0
        for g, gt_box in enumerate(gt_by_scene.get(sid, ())):
            if matched.get(sid, [])[g]:
                continue
            v = iou(bbox, gt_box)
            if v >= iou_thresh and v > best_iou:
                best, best_iou = g, v
        if best is not None:
            matched[sid][best] = True
            flags.append(1)
        else:
            flags.append(0)
    if n_gt == 0:
        return 0.0, 0.0
    recall = sum(flags) / n_gt
    ap = _ap_from_flags(flags, n_gt)
    return recall, ap


def _gt_boxes_of_identity(bundle, scene_id: int, person_id: int):
    return [a.bbox for a in bundle.anns_in_scene(scene_id) if a.is_known and a.person_id == person_id]


def person_retrieval_metrics(cases, bundle, iou_thresh: float = 0.5) -> MetricReport:
    """mAP and top-1 over ranked person-retrieval results.

    ``cases`` is a list of (task, RankedResult). An entry is a true positive
    iff its scene contains the query identity and its box overlaps that
    identity's ground-truth box at IoU >= ``iou_thresh``, each ground-truth
    box creditable once. The positive count is the identity's ground-truth
    occurrences over the *unfiltered* gallery, so filtered-away positives
    count as misses. Queries with no gallery positives are excluded and
    counted in the metadata.
    """
    aps, top1s = [], []
    skipped = 0
    for task, result in cases:
        gallery = sorted(set(task.gallery_scene_ids))
        n_pos = sum(len(_gt_boxes_of_identity(bundle, sid, task.query_person_id)) for sid in gallery)
        if n_pos == 0:
            skipped += 1
            continue
        credited: dict[int, list[bool]] = {}
        flags = []
        for entry in result.entries:
            gt_boxes = _gt_boxes_of_identity(bundle, entry.scene_id, task.query_person_id)
            used = credited.setdefault(entry.scene_id, [False] * len(gt_boxes))
            best, best_iou = None, 0.0
            for g, box in enumerate(gt_boxes):
                if used[g]:
                    continue
                v = iou(entry.bbox, box)
                if v >= iou_thresh and v > best_iou:
                    best, best_iou = g, v
            if best is not None:
                used[best] = True
                flags.append(1)
            else:
                flags.append(0)
        aps.append(_ap_from_flags(flags, n_pos))
        top1s.append(1.0 if flags and flags[0] else 0.0)
    report = MetricReport(
        metrics={
            "mAP": float(np.mean(aps)) if aps else 0.0,
            "top1": float(np.mean(top1s)) if top1s else 0.0,
        },
        per_query_ap=[float(a) for a in aps],
        metadata={"num_queries": len(aps), "skipped_queries": skipped},
    )
    return report


def gfn_scene_metrics(cases, bundle) -> MetricReport:
    """Scene-retrieval mAP and top-1 from per-scene scores.

    ``cases`` is a list of (task, {scene_id: score}). A gallery scene matches
    iff it contains the query identity. Scenes rank by score descending, ties
    by ascending scene_id.
    """
    aps, top1s = [], []
    skipped = 0
    for task, scores in cases:
        ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
        match_scenes = bundle.scenes_with_identity(task.query_person_id)
        flags = [1 if sid in match_scenes else 0 for sid, _ in ranked]
        n_pos = sum(flags)
        if n_pos == 0:
            skipped += 1
            continue
        aps.append(_ap_from_flags(flags, n_pos))
        top1s.append(1.0 if flags[0] else 0.0)
    return MetricReport(
        metrics={
            "mAP": float(np.mean(aps)) if aps else 0.0,
            "top1": float(np.mean(top1s)) if top1s else 0.0,
        },
        per_query_ap=[float(a) for a in aps],
        metadata={"num_queries": len(aps), "skipped_queries": skipped},
    )


def npv_at_recall(match_scores, nonmatch_scores, recall_target: float = 0.99):
    """(threshold, npv): the largest threshold keeping at least
    ``recall_target`` of match scores at or above it, and the fraction of
    nonmatch scores strictly below that threshold."""
    match = np.sort(np.asarray(match_scores, dtype=np.float64))
    nonmatch = np.asarray(nonmatch_scores, dtype=np.float64)
    if match.size == 0 or nonmatch.size == 0:
        raise ContractViolation("both score sets must be nonempty")
    if not 0 < recall_target <= 1:
        raise ContractViolation("recall_target must be in (0, 1]")
    keep = int(np.ceil(recall_target * match.size))
    threshold = float(match[match.size - keep])  # keep-th largest match score
    npv = float(np.mean(nonmatch < threshold))
    return threshold, npv


def compute_savings(negative_fraction: float, npv: float, detection_time_fraction: float) -> float:
    """Fraction of per-query compute avoided by filtering: the product of the
    negative-scene fraction, the fraction of negatives filtered, and the share
    of time spent on detection."""
    for name, v in (
        ("negative_fraction", negative_fraction),
        ("npv", npv),
        ("detection_time_fraction", detection_time_fraction),
    ):
        if not 0.0 <= v <= 1.0:
            raise ContractViolation(f"{name} must be in [0, 1]")
    return float(negative_fraction * npv * detection_time_fraction)


def score_histogram(match_scores, nonmatch_scores, bins: int):
    """Aligned histograms of match and nonmatch scores over a shared bin range.

    Returns rows (bin_lo, bin_hi, match_count, nonmatch_count); counts sum to
    the input sizes."""
    if bins < 1:
        raise ContractViolation("bins must be >= 1")
    match = np.asarray(match_scores, dtype=np.float64)
    nonmatch = np.asarray(nonmatch_scores, dtype=np.float64)
    both = np.concatenate([match, nonmatch])
    if both.size == 0:
        raise ContractViolation("no scores to histogram")
    lo, hi = float(both.min()), float(both.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    m_counts, _ = np.histogram(match, bins=edges)
    n_counts, _ = np.histogram(nonmatch, bins=edges)
    return [
        (float(edges[k]), float(edges[k + 1]), int(m_counts[k]), int(n_counts[k]))
        for k in range(bins)
    ]


def histogram_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["bin_lo", "bin_hi", "match_count", "nonmatch_count"])
    for row in rows:
        writer.writerow([repr(row[0]), repr(row[1]), row[2], row[3]])
    return buf.getvalue()


def camera_split_eval(tasks, bundle, mode: str, search_fn) -> MetricReport:
    """Person retrieval restricted to same-camera or cross-camera galleries.

    Each task's gallery is cut down to scenes whose cam_id equals (same_cam) /
    differs from (cross_cam) the query scene's cam_id; ``search_fn`` maps the
    restricted task to a RankedResult. Tasks whose restricted gallery is empty
    are excluded and counted.
    """
    if mode not in ("same_cam", "cross_cam"):
        raise ContractViolation("mode must be 'same_cam' or 'cross_cam'")
    cases = []
    empty = 0
    for task in tasks:
        qcam = bundle.scenes[task.query_scene_id].cam_id
        if mode == "same_cam":
            gallery = [s for s in task.gallery_scene_ids if bundle.scenes[s].cam_id == qcam]
        else:
            gallery = [s for s in task.gallery_scene_ids if bundle.scenes[s].cam_id != qcam]
        if not gallery:
            empty += 1
            continue
        restricted = task.with_gallery(gallery)
        cases.append((restricted, search_fn(restricted)))
    report = person_retrieval_metrics(cases, bundle)
    report.metadata["mode"] = mode
    report.metadata["empty_gallery_queries"] = empty
    return report
