"""Re-id objective: instance-matching loss over a prototype lookup table plus a
circular queue of unknown-person embeddings, and the candidate-scene sampling
strategies used to enlarge contrastive batches from an epoch lookup table.

Gradients flow only to batch embeddings, never into the tables.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DegenerateInputError
from .objectives import indicator_qs, indicator_ss

UNKNOWN = -1  # label value for embeddings without an identity


@dataclass
class OimTable:
    """Unit-norm prototype per known identity + FIFO queue of unknown embeddings."""

    identity_ids: tuple
    prototypes: np.ndarray  # (num_identities, dim), rows unit norm
    queue: deque  # unit-norm vectors, oldest first
    capacity: int = 5000
    momentum: float = 0.5
    scalar: float = 30.0  # inverse temperature on the logits
    index: dict = field(default_factory=dict)

    @classmethod
    def create(cls, identity_ids, dim, seed=0, capacity=5000, momentum=0.5, scalar=30.0):
        identity_ids = tuple(int(i) for i in identity_ids)
        if len(set(identity_ids)) != len(identity_ids):
            raise ContractViolation("identity ids must be unique")
        rng = np.random.default_rng(seed)
        protos = rng.normal(size=(len(identity_ids), dim))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        return cls(
            identity_ids=identity_ids,
            prototypes=protos,
            queue=deque(maxlen=capacity),
            capacity=capacity,
            momentum=momentum,
            scalar=scalar,
            index={pid: r for r, pid in enumerate(identity_ids)},
        )

    def queue_matrix(self) -> np.ndarray:
        if not self.queue:
            return np.zeros((0, self.prototypes.shape[1]))
        return np.stack(list(self.queue))


def _normalize_rows(E):
    norms = np.linalg.norm(E, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError(f"embedding {int(np.argmin(norms))} has zero norm")
    return E / norms[:, None], norms


def oim_loss(batch_embeddings, batch_labels, table: OimTable) -> tuple[float, np.ndarray]:
    """Cross-entropy of each labeled embedding against all prototypes plus the
    queue, at inverse temperature ``table.scalar``; mean over labeled rows.

    Embeddings are normalized internally and gradients are exact through that
    normalization. Unlabeled rows (label UNKNOWN) contribute no loss and are
    pushed onto the queue. Labels missing from the table are an error.
    """
    E = np.atleast_2d(np.asarray(batch_embeddings, dtype=np.float64))
    labels = list(batch_labels)
    if len(labels) != E.shape[0]:
        raise ContractViolation("one label per embedding required")
    Eh, norms = _normalize_rows(E)
    P = np.vstack([table.prototypes, table.queue_matrix()])
    dE = np.zeros_like(E)
    labeled = [(b, lab) for b, lab in enumerate(labels) if lab != UNKNOWN and lab is not None]
    total = 0.0
    for b, lab in labeled:
        if lab not in table.index:
            raise ContractViolation(f"label {lab} not in table")
        target = table.index[lab]
        logits = table.scalar * (P @ Eh[b])
        m = logits.max()
        z = np.exp(logits - m)
        lse = m + np.log(z.sum())
        total += lse - logits[target]
        dlogit = z / z.sum()
        dlogit[target] -= 1.0
        # s_k = p_k . e/|e|  =>  ds_k/de = (p_k - s_k * e_hat)/|e|
        sims = P @ Eh[b]
        g = table.scalar * dlogit
        dE[b] = (P.T @ g - (g @ sims) * Eh[b]) / norms[b]
    n = len(labeled)
    loss = total / n if n else 0.0
    if n:
        dE /= n
    for b, lab in enumerate(labels):
        if lab == UNKNOWN or lab is None:
            table.queue.append(Eh[b].copy())
    return float(loss), dE


def oim_update(table: OimTable, embedding, identity):
    """Momentum update of one identity prototype (no gradient):
    p <- normalize(momentum * p + (1 - momentum) * e)."""
    if identity not in table.index:
        raise ContractViolation(f"identity {identity} not in table")
    r = table.index[identity]
    e = np.asarray(embedding, dtype=np.float64)
    p = table.momentum * table.prototypes[r] + (1.0 - table.momentum) * e
    norm = np.linalg.norm(p)
    if norm == 0.0:
        raise DegenerateInputError("prototype update collapsed to zero")
    table.prototypes[r] = p / norm


def prototype_lookup(table: OimTable, identity) -> np.ndarray:
    """Current prototype for an identity, as a gradient-stopped copy."""
    if identity not in table.index:
        raise ContractViolation(f"identity {identity} not in table")
    return table.prototypes[table.index[identity]].copy()


def save_table(table: OimTable, prototypes_manifest, queue_manifest):
    """Checkpoint the table as two manifest + payload store pairs."""
    from .data import EmbeddingStore, save_embeddings

    dim = table.prototypes.shape[1]
    save_embeddings(
        EmbeddingStore(table.identity_ids, table.prototypes, kind="prototype"),
        prototypes_manifest,
    )
    queue = table.queue_matrix() if table.queue else np.zeros((0, dim))
    save_embeddings(
        EmbeddingStore(range(len(table.queue)), queue, kind="queue"),
        queue_manifest,
    )


def load_table(prototypes_manifest, queue_manifest, capacity=5000, momentum=0.5, scalar=30.0) -> OimTable:
    from .data import load_embeddings

    protos = load_embeddings(prototypes_manifest)
    queue_store = load_embeddings(queue_manifest)
    queue = deque(maxlen=capacity)
    for i in queue_store.ids:
        queue.append(queue_store.get(i))
    return OimTable(
        identity_ids=tuple(protos.ids),
        prototypes=np.asarray(protos.matrix, dtype=np.float64),
        queue=queue,
        capacity=capacity,
        momentum=momentum,
        scalar=scalar,
        index={pid: r for r, pid in enumerate(protos.ids)},
    )


# ---------------------------------------------------------------------------
# Epoch lookup table and candidate-scene sampling


@dataclass
class GfnLut:
    """Gradient-stopped snapshots of scene/person embeddings, refreshed fully
    once per epoch."""

    epoch: int
    scene: dict = field(default_factory=dict)  # scene_id -> vector
    person: dict = field(default_factory=dict)  # ann_id -> vector


@dataclass(frozen=True)
class SamplePlan:
    """PxNy sampling: x positive scenes and y hard-negative scenes per person."""

    positives: int = 1
    hard_negatives: int = 1
    use_lut: bool = True

    def __post_init__(self):
        if self.positives < 0 or self.hard_negatives < 0:
            raise ContractViolation("sample counts must be nonnegative")
        if self.use_lut and self.positives + self.hard_negatives < 1:
            raise ContractViolation("use_lut requires at least one sample per person")


def hard_negative_scenes(bundle, ann) -> list[int]:
    """Scenes sharing an identity with the query's scene but not containing the
    query identity."""
    ann = bundle.annotations[ann] if isinstance(ann, int) else ann
    out = []
    for sid in bundle.scene_ids():
        if sid == ann.scene_id:
            continue
        if indicator_ss(ann.scene_id, sid, bundle) == 1 and indicator_qs(ann, sid, bundle) == 0:
            out.append(sid)
    return out


def sample_for_batch(plan: SamplePlan, batch_ann_ids, bundle, lut: GfnLut, seed: int) -> dict[int, list[int]]:
    """Candidate scene ids per batch person.

    With the LUT: x positive scenes (containing the person's identity) and y
    hard negatives, sampled uniformly; fewer exist -> all are taken; chosen
    positives never double as negatives. Without the LUT only the batch's own
    scenes are returned.
    """
    rng = np.random.default_rng(seed)
    batch_scenes = sorted({bundle.annotations[a].scene_id for a in batch_ann_ids})
    out: dict[int, list[int]] = {}
    for ann_id in batch_ann_ids:
        ann = bundle.annotations[ann_id]
        if not plan.use_lut:
            out[ann_id] = list(batch_scenes)
            continue
        positive_pool = sorted(s for s in bundle.scenes_with_identity(ann.person_id) if s in lut.scene)
        take = min(plan.positives, len(positive_pool))
        chosen_pos = sorted(rng.choice(positive_pool, size=take, replace=False).tolist()) if take else []
        negative_pool = sorted(
            s for s in hard_negative_scenes(bundle, ann) if s in lut.scene and s not in chosen_pos
        )
        take = min(plan.hard_negatives, len(negative_pool))
        chosen_neg = sorted(rng.choice(negative_pool, size=take, replace=False).tolist()) if take else []
        for sid in chosen_neg:
            assert indicator_ss(ann.scene_id, sid, bundle) == 1
            assert indicator_qs(ann, sid, bundle) == 0
        out[ann_id] = chosen_pos + chosen_neg
    return out
