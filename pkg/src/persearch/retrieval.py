"""Two-phase retrieval: score gallery scenes against the query, drop scenes
below the filter threshold, then rank detections from the surviving scenes by
detector- and scene-weighted embedding similarity.

Detections come from an abstract provider (mapping scene_id -> detections) so
the pipeline runs against file-backed stores or synthetic generators alike.
Providers record the scene ids they are asked for; the efficiency contract is
that filtered scenes are never requested.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import cosine_sim, logistic_weight
from .data import DataError, EmbeddingStore
from .errors import ContractViolation
from .objectives import GfnConfig, gfn_score


@dataclass(frozen=True)
class GalleryDetection:
    scene_id: int
    bbox: tuple[float, float, float, float]
    embedding: np.ndarray
    s_det: float

    def __post_init__(self):
        if not 0.0 <= self.s_det <= 1.0:
            raise ContractViolation(f"s_det must be in [0, 1], got {self.s_det}")


@dataclass(frozen=True)
class RetrievalTask:
    """One query (person crop + its scene) against an explicit gallery."""

    query_ann_id: int
    query_person_id: int
    query_scene_id: int
    gallery_scene_ids: tuple
    query_embedding: np.ndarray | None = None
    query_scene_embedding: np.ndarray | None = None

    def __post_init__(self):
        if len(self.gallery_scene_ids) == 0:
            raise ContractViolation("gallery must be nonempty")

    def with_gallery(self, gallery_scene_ids) -> "RetrievalTask":
        return RetrievalTask(
            query_ann_id=self.query_ann_id,
            query_person_id=self.query_person_id,
            query_scene_id=self.query_scene_id,
            gallery_scene_ids=tuple(gallery_scene_ids),
            query_embedding=self.query_embedding,
            query_scene_embedding=self.query_scene_embedding,
        )


@dataclass(frozen=True)
class ResultEntry:
    scene_id: int
    bbox: tuple
    s_reid: float
    s_det: float
    s_gfn: float
    s_final: float


@dataclass
class RankedResult:
    """Entries sorted by s_final descending (ties: scene_id, then bbox x)."""

    entries: list[ResultEntry]
    filtered_scene_ids: set = field(default_factory=set)


class StaticDetectionProvider:
    """Dict-backed provider; records every scene it is asked for."""

    def __init__(self, by_scene: dict):
        self._by_scene = by_scene
        self.calls: list[int] = []

    def __call__(self, scene_id: int) -> list[GalleryDetection]:
        self.calls.append(scene_id)
        return list(self._by_scene.get(scene_id, ()))


class JsonlDetectionProvider:
    """Reads detections from a JSON-lines file, one object per detection:
    {"scene_id", "bbox", "s_det", "embedding_id"}; embeddings resolve through
    an EmbeddingStore."""

    def __init__(self, path, store: EmbeddingStore):
        self.calls: list[int] = []
        self._by_scene: dict[int, list[GalleryDetection]] = {}
        path = Path(path)
        try:
            lines = path.read_text().splitlines()
        except OSError as e:
            raise DataError(f"cannot read detections {path}: {e}") from e
        for lineno, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                det = GalleryDetection(
                    scene_id=int(obj["scene_id"]),
                    bbox=tuple(float(v) for v in obj["bbox"]),
                    embedding=store.get(int(obj["embedding_id"])),
                    s_det=float(obj["s_det"]),
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
                raise DataError(f"bad detection at {path}:{lineno}: {e}") from e
            self._by_scene.setdefault(det.scene_id, []).append(det)

    def __call__(self, scene_id: int) -> list[GalleryDetection]:
        self.calls.append(scene_id)
        return list(self._by_scene.get(scene_id, ()))


def score_gallery_scenes(task: RetrievalTask, scene_store, cfg: GfnConfig, params=None) -> dict[int, float]:
    """Scene-compatibility score per unique gallery scene id."""
    scores = {}
    for sid in sorted(set(task.gallery_scene_ids)):
        if sid not in scene_store:
            raise DataError(f"no scene embedding for gallery scene {sid}")
        scores[sid] = gfn_score(
            task.query_embedding, task.query_scene_embedding, scene_store.get(sid), cfg, params
        )
    return scores


def filter_gallery(scores: dict[int, float], lambda_gfn: float) -> tuple[set, set]:
    """Exact partition into (kept, filtered); keep-on-equal."""
    kept = {sid for sid, s in scores.items() if s >= lambda_gfn}
    return kept, set(scores) - kept


def final_score(s_reid, s_det, s_gfn, alpha, orientation="increasing") -> float:
    """Detector- and scene-weighted similarity:
    s_reid * s_det * logistic(s_gfn / alpha)."""
    return float(s_reid * s_det * logistic_weight(s_gfn, alpha, orientation))


def two_phase_search(
    task: RetrievalTask,
    provider,
    scene_store,
    cfg: GfnConfig,
    params=None,
    use_gfn_filter: bool = True,
    use_gfn_weight: bool = True,
) -> RankedResult:
    """Score scenes, drop those below lambda_gfn (when filtering), pull
    detections only for kept scenes, and rank by the weighted final score.

    With both flags off the result is the plain s_reid * s_det ranking and is
    fully independent of the scene-scoring config.
    """
    gallery = sorted(set(task.gallery_scene_ids))
    if use_gfn_filter or use_gfn_weight:
        scores = score_gallery_scenes(task, scene_store, cfg, params)
    else:
        scores = {sid: 0.0 for sid in gallery}
    if use_gfn_filter:
        kept, filtered = filter_gallery(scores, cfg.lambda_gfn)
    else:
        kept, filtered = set(gallery), set()
    entries = []
    for sid in sorted(kept):
        for det in provider(sid):
            s_reid = cosine_sim(task.query_embedding, det.embedding)
            s_gfn = scores[sid]
            if use_gfn_weight:
                s_final = final_score(s_reid, det.s_det, s_gfn, cfg.alpha, cfg.orientation)
            else:
                s_final = float(s_reid * det.s_det)
            entries.append(
                ResultEntry(
                    scene_id=sid,
                    bbox=det.bbox,
                    s_reid=s_reid,
                    s_det=det.s_det,
                    s_gfn=s_gfn,
                    s_final=s_final,
                )
            )
    entries.sort(key=lambda e: (-e.s_final, e.scene_id, e.bbox[0]))
    return RankedResult(entries=entries, filtered_scene_ids=filtered)


def subsample_gallery(task: RetrievalTask, size: int, seed: int, positive_scene_ids) -> RetrievalTask:
    """Random gallery subset of ``size`` scenes that always retains every
    scene containing the query identity; deterministic per seed."""
    gallery = sorted(set(task.gallery_scene_ids))
    if not 1 <= size <= len(gallery):
        raise ContractViolation(f"size must be in [1, {len(gallery)}], got {size}")
    positives = sorted(set(positive_scene_ids) & set(gallery))
    rest = [s for s in gallery if s not in set(positives)]
    fill = max(0, size - len(positives))
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(rest, size=min(fill, len(rest)), replace=False).tolist()) if fill else []
    return task.with_gallery(sorted(positives + chosen))
