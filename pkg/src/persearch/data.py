"""Dataset ingestion, identity-graph splitting, retrieval-spec resolution, and
embedding persistence.

Datasets use a COCO-style JSON schema extended with person-search fields:
``images`` carry ``cam_id``, ``annotations`` carry ``person_id`` (nullable)
and ``is_known``. Loading validates hard invariants (resolvable references,
positive in-bounds boxes, is_known <-> person_id) and *reports* the known
upstream data errors (duplicate boxes, repeated person ids in one scene)
without fixing them, so downstream evaluation reproduces the established
behavior on uncorrected data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, CorruptPayloadError, DataError, SplitInfeasibleError
from .unionfind import UnionFind


@dataclass(frozen=True)
class SceneRecord:
    scene_id: int
    file_name: str
    width: int
    height: int
    cam_id: int


@dataclass(frozen=True)
class PersonAnnotation:
    ann_id: int
    scene_id: int
    bbox: tuple[float, float, float, float]  # (x, y, w, h), COCO convention
    person_id: int | None
    is_known: bool


@dataclass
class ValidationReport:
    """Known upstream data errors, enumerated but never fixed."""

    duplicate_boxes: list = field(default_factory=list)  # (scene_id, bbox, ann_ids)
    repeated_person_ids: list = field(default_factory=list)  # (scene_id, person_id, ann_ids)

    @property
    def issue_count(self) -> int:
        return len(self.duplicate_boxes) + len(self.repeated_person_ids)

    def to_dict(self) -> dict:
        return {
            "duplicate_boxes": [
                {"scene_id": s, "bbox": list(b), "ann_ids": list(a)}
                for s, b, a in self.duplicate_boxes
            ],
            "repeated_person_ids": [
                {"scene_id": s, "person_id": p, "ann_ids": list(a)}
                for s, p, a in self.repeated_person_ids
            ],
            "issue_count": self.issue_count,
        }


class DatasetBundle:
    """Immutable view of one partition: scenes plus person annotations."""

    def __init__(self, scenes, annotations, partition_name="unnamed"):
        self.partition_name = partition_name
        self.scenes: dict[int, SceneRecord] = {}
        for s in scenes:
            if s.scene_id in self.scenes:
                raise DataError(f"duplicate scene_id {s.scene_id}")
            if s.width <= 0 or s.height <= 0:
                raise DataError(f"scene {s.scene_id} has non-positive extent")
            self.scenes[s.scene_id] = s
        self.annotations: dict[int, PersonAnnotation] = {}
        self._by_scene: dict[int, list[int]] = {sid: [] for sid in self.scenes}
        self._scenes_with_pid: dict[int, set[int]] = {}
        for a in annotations:
            self._check_annotation(a)
            self.annotations[a.ann_id] = a
            self._by_scene[a.scene_id].append(a.ann_id)
            if a.is_known:
                self._scenes_with_pid.setdefault(a.person_id, set()).add(a.scene_id)

    def _check_annotation(self, a: PersonAnnotation):
        if a.ann_id in self.annotations:
            raise DataError(f"duplicate annotation id {a.ann_id}")
        if a.scene_id not in self.scenes:
            raise DataError(f"annotation {a.ann_id} references unknown scene {a.scene_id}")
        x, y, w, h = a.bbox
        if w <= 0 or h <= 0:
            raise DataError(f"annotation {a.ann_id} has non-positive box extent {a.bbox}")
        scene = self.scenes[a.scene_id]
        if x < 0 or y < 0 or x + w > scene.width or y + h > scene.height:
            raise DataError(
                f"annotation {a.ann_id} box {a.bbox} exceeds scene {a.scene_id} "
                f"extent {scene.width}x{scene.height}"
            )
        if a.is_known != (a.person_id is not None):
            raise DataError(
                f"annotation {a.ann_id}: is_known must hold exactly when person_id is present"
            )

    def scene_ids(self) -> list[int]:
        return sorted(self.scenes)

    def anns_in_scene(self, scene_id: int) -> list[PersonAnnotation]:
        return [self.annotations[i] for i in sorted(self._by_scene[scene_id])]

    def known_ids_in_scene(self, scene_id: int) -> set[int]:
        return {a.person_id for a in self.anns_in_scene(scene_id) if a.is_known}

    def scenes_with_identity(self, person_id: int) -> set[int]:
        return set(self._scenes_with_pid.get(person_id, ()))

    def known_annotations(self) -> list[PersonAnnotation]:
        return [self.annotations[i] for i in sorted(self.annotations) if self.annotations[i].is_known]

    def known_identities(self) -> list[int]:
        return sorted(self._scenes_with_pid)

    def validate(self) -> ValidationReport:
        """Enumerate the tolerated upstream errors (never mutates the data)."""
        report = ValidationReport()
        for sid in self.scene_ids():
            anns = self.anns_in_scene(sid)
            seen_box: dict[tuple, list[int]] = {}
            seen_pid: dict[int, list[int]] = {}
            for a in anns:
                seen_box.setdefault(tuple(a.bbox), []).append(a.ann_id)
                if a.is_known:
                    seen_pid.setdefault(a.person_id, []).append(a.ann_id)
            for box, ids in sorted(seen_box.items()):
                if len(ids) > 1:
                    report.duplicate_boxes.append((sid, box, tuple(ids)))
            for pid, ids in sorted(seen_pid.items()):
                if len(ids) > 1:
                    report.repeated_person_ids.append((sid, pid, tuple(ids)))
        return report


def load_dataset(path) -> tuple[DatasetBundle, ValidationReport]:
    """Load a COCO-style dataset JSON; returns the bundle and its error report."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as e:
        raise DataError(f"cannot read dataset {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"malformed JSON in {path}: {e}") from e
    for key in ("images", "annotations"):
        if key not in doc:
            raise DataError(f"dataset {path} missing top-level key '{key}'")
    scenes = []
    for im in doc["images"]:
        try:
            scenes.append(
                SceneRecord(
                    scene_id=int(im["id"]),
                    file_name=str(im.get("file_name", "")),
                    width=int(im["width"]),
                    height=int(im["height"]),
                    cam_id=int(im.get("cam_id", 0)),
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"bad image record {im!r}: {e}") from e
    anns = []
    for an in doc["annotations"]:
        try:
            pid = an.get("person_id")
            anns.append(
                PersonAnnotation(
                    ann_id=int(an["id"]),
                    scene_id=int(an["image_id"]),
                    bbox=tuple(float(v) for v in an["bbox"]),
                    person_id=None if pid is None else int(pid),
                    is_known=bool(an["is_known"]),
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"bad annotation record {an!r}: {e}") from e
    bundle = DatasetBundle(scenes, anns, partition_name=doc.get("partition", path.stem))
    return bundle, bundle.validate()


def save_dataset(bundle: DatasetBundle, path):
    doc = {
        "partition": bundle.partition_name,
        "images": [
            {
                "id": s.scene_id,
                "file_name": s.file_name,
                "width": s.width,
                "height": s.height,
                "cam_id": s.cam_id,
            }
            for s in (bundle.scenes[i] for i in bundle.scene_ids())
        ],
        "annotations": [
            {
                "id": a.ann_id,
                "image_id": a.scene_id,
                "bbox": list(a.bbox),
                "person_id": a.person_id,
                "is_known": a.is_known,
            }
            for a in (bundle.annotations[i] for i in sorted(bundle.annotations))
        ],
        "categories": [{"id": 1, "name": "person"}],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# Identity graph and train/val splitting


@dataclass
class IdentityGraph:
    """Undirected graph over scene ids; edges join scenes sharing a kept identity."""

    nodes: list[int]
    edges: set[tuple[int, int]]
    ignored_identities: list[int]

    def components(self) -> list[set[int]]:
        uf = UnionFind(self.nodes)
        for a, b in self.edges:
            uf.union(a, b)
        return sorted(uf.groups(), key=lambda c: (-len(c), min(c)))


def build_identity_graph(bundle: DatasetBundle, ignore_top_k: int = 0) -> IdentityGraph:
    """Connect scenes that share a known identity, ignoring the ``ignore_top_k``
    most frequent identities (frequency = number of distinct scenes containing
    the identity, ties broken by ascending person_id)."""
    if ignore_top_k < 0:
        raise ContractViolation("ignore_top_k must be nonnegative")
    freq = [(-len(bundle.scenes_with_identity(pid)), pid) for pid in bundle.known_identities()]
    freq.sort()
    ignored = [pid for _, pid in freq[:ignore_top_k]]
    ignored_set = set(ignored)
    edges = set()
    for _, pid in freq[ignore_top_k:]:
        if pid in ignored_set:
            continue
        scenes = sorted(bundle.scenes_with_identity(pid))
        for i in range(len(scenes)):
            for j in range(i + 1, len(scenes)):
                edges.add((scenes[i], scenes[j]))
    return IdentityGraph(nodes=bundle.scene_ids(), edges=edges, ignored_identities=ignored)


def split_components(
    graph: IdentityGraph, target_val_fraction: float, seed: int
) -> tuple[set[int], set[int]]:
    """Assign whole connected components to train/val.

    Greedy bin-fill over components in descending size order (ties by smallest
    scene id). A component may go to val only while val stays within
    target + 5% of all scenes, and must go to val once the remaining
    components could no longer reach target - 5%; when both sides stay
    feasible the choice is randomized by ``seed``.
    """
    if not 0 < target_val_fraction < 1:
        raise ContractViolation("target_val_fraction must be in (0, 1)")
    comps = graph.components()
    total = sum(len(c) for c in comps)
    if total == 0:
        return set(), set()
    lo = (target_val_fraction - 0.05) * total
    hi = (target_val_fraction + 0.05) * total
    rng = np.random.default_rng(seed)
    train: set[int] = set()
    val: set[int] = set()
    remaining = total
    for comp in comps:
        remaining -= len(comp)
        can_val = len(val) + len(comp) <= hi
        can_train = len(val) + remaining >= lo
        if can_val and can_train:
            to_val = bool(rng.integers(0, 2))
        elif can_val:
            to_val = True
        elif can_train:
            to_val = False
        else:
            raise SplitInfeasibleError(
                f"no assignment keeps val within {target_val_fraction:.0%} +/- 5% "
                f"(component of {len(comp)} scenes out of {total}); "
                "consider a larger ignore_top_k"
            )
        (val if to_val else train).update(comp)
    if not lo <= len(val) <= hi:
        raise SplitInfeasibleError(
            f"val ended at {len(val)}/{total} scenes, outside the +/- 5% band; "
            "consider a larger ignore_top_k"
        )
    return train, val


def restrict_bundle(bundle: DatasetBundle, scene_ids, partition_name: str) -> DatasetBundle:
    """New bundle containing only the given scenes and their annotations."""
    keep = set(scene_ids)
    scenes = [bundle.scenes[s] for s in sorted(keep)]
    anns = [a for a in (bundle.annotations[i] for i in sorted(bundle.annotations)) if a.scene_id in keep]
    return DatasetBundle(scenes, anns, partition_name=partition_name)


# ---------------------------------------------------------------------------
# Retrieval specs


@dataclass
class RetrievalSpec:
    """One of three partition formats: fully_specified galleries, queries_only
    (gallery = whole partition), or all (every known annotation queries the
    whole partition)."""

    format: str
    queries: list[dict]  # {"ann_id": int, "gallery_scene_ids": [int, ...]?}

    FORMATS = ("fully_specified", "queries_only", "all")


def load_retrieval_spec(path) -> RetrievalSpec:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as e:
        raise DataError(f"cannot read retrieval spec {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"malformed JSON in {path}: {e}") from e
    fmt = doc.get("format")
    if fmt not in RetrievalSpec.FORMATS:
        raise DataError(f"retrieval spec format must be one of {RetrievalSpec.FORMATS}, got {fmt!r}")
    queries = doc.get("queries", [])
    if fmt == "fully_specified":
        for q in queries:
            if not q.get("gallery_scene_ids"):
                raise DataError(f"fully_specified query {q.get('ann_id')} lists no gallery scenes")
    return RetrievalSpec(format=fmt, queries=queries)


def save_retrieval_spec(spec: RetrievalSpec, path):
    Path(path).write_text(json.dumps({"format": spec.format, "queries": spec.queries}, indent=2))


def resolve_retrieval_spec(
    spec: RetrievalSpec,
    bundle: DatasetBundle,
    exclude_query_scene: bool = True,
    person_store=None,
    scene_store=None,
):
    """Resolve a spec into explicit retrieval tasks (one per query, each with
    an explicit gallery scene list).

    fully_specified galleries are taken verbatim (duplicates preserved, no
    query-scene exclusion). queries_only/all use every partition scene, minus
    the query's own scene when ``exclude_query_scene`` is set. When embedding
    stores are given, query and query-scene embeddings are attached.
    """
    from .retrieval import RetrievalTask  # local import to avoid a cycle

    all_scenes = bundle.scene_ids()
    if spec.format == "all":
        query_entries = [{"ann_id": a.ann_id} for a in bundle.known_annotations()]
    else:
        query_entries = spec.queries

    tasks = []
    for q in query_entries:
        ann_id = q.get("ann_id")
        if ann_id not in bundle.annotations:
            raise DataError(f"query annotation {ann_id} not in bundle")
        ann = bundle.annotations[ann_id]
        if not ann.is_known:
            raise DataError(f"query annotation {ann_id} lacks a person_id")
        if spec.format == "fully_specified":
            gallery = list(q["gallery_scene_ids"])
            for sid in gallery:
                if sid not in bundle.scenes:
                    raise DataError(f"query {ann_id}: gallery scene {sid} not in bundle")
        else:
            gallery = [s for s in all_scenes if not (exclude_query_scene and s == ann.scene_id)]
        if not gallery:
            raise DataError(f"query {ann_id} resolved to an empty gallery")
        tasks.append(
            RetrievalTask(
                query_ann_id=ann_id,
                query_person_id=ann.person_id,
                query_scene_id=ann.scene_id,
                gallery_scene_ids=tuple(gallery),
                query_embedding=None if person_store is None else person_store.get(ann_id),
                query_scene_embedding=None if scene_store is None else scene_store.get(ann.scene_id),
            )
        )
    return tasks


# ---------------------------------------------------------------------------
# Embedding stores (raw little-endian f32 payload + JSON manifest)


class EmbeddingStore:
    """Ordered id -> row mapping over a count x dim float32 matrix."""

    def __init__(self, ids, matrix, kind):
        ids = [int(i) for i in ids]
        if len(set(ids)) != len(ids):
            raise DataError("embedding store ids must be unique")
        matrix = np.ascontiguousarray(np.asarray(matrix, dtype=np.float32))
        if matrix.ndim != 2:
            matrix = matrix.reshape(len(ids), -1) if len(ids) else matrix.reshape(0, 0)
        if matrix.shape[0] != len(ids):
            raise DataError(f"store has {len(ids)} ids but {matrix.shape[0]} rows")
        if not np.all(np.isfinite(matrix)):
            raise DataError("embedding store contains non-finite values")
        self.ids = ids
        self.matrix = matrix
        self.kind = kind
        self._row = {i: r for r, i in enumerate(ids)}

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    @property
    def count(self) -> int:
        return int(self.matrix.shape[0])

    def __contains__(self, key) -> bool:
        return int(key) in self._row

    def get(self, key) -> np.ndarray:
        """Row for ``key`` as float64 (total over the manifest ids)."""
        key = int(key)
        if key not in self._row:
            raise DataError(f"no {self.kind} embedding for id {key}")
        return np.asarray(self.matrix[self._row[key]], dtype=np.float64)


def save_embeddings(store: EmbeddingStore, manifest_path):
    manifest_path = Path(manifest_path)
    payload_name = manifest_path.stem + ".bin"
    manifest = {
        "dim": store.dim,
        "count": store.count,
        "dtype": "f32le",
        "kind": store.kind,
        "ids": store.ids,
        "payload": payload_name,
    }
    payload = store.matrix.astype("<f4").tobytes(order="C")
    (manifest_path.parent / payload_name).write_bytes(payload)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_embeddings(manifest_path) -> EmbeddingStore:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except OSError as e:
        raise DataError(f"cannot read manifest {manifest_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"malformed manifest JSON in {manifest_path}: {e}") from e
    for key in ("dim", "count", "dtype", "kind", "ids", "payload"):
        if key not in manifest:
            raise DataError(f"manifest {manifest_path} missing key '{key}'")
    if manifest["dtype"] != "f32le":
        raise DataError(f"unsupported dtype tag {manifest['dtype']!r}")
    dim, count = int(manifest["dim"]), int(manifest["count"])
    payload_path = manifest_path.parent / manifest["payload"]
    try:
        raw = payload_path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read payload {payload_path}: {e}") from e
    expected = count * dim * 4
    if len(raw) != expected:
        raise CorruptPayloadError(
            f"payload {payload_path} holds {len(raw)} bytes, manifest implies {expected}"
        )
    matrix = np.frombuffer(raw, dtype="<f4").reshape(count, dim).copy()
    return EmbeddingStore(ids=manifest["ids"], matrix=matrix, kind=manifest["kind"])
