"""Synthetic-world training loop for desk-scale verification that the scene
objectives actually train.

The generative world gives every identity a unit prototype; person crops are
noisy copies of their prototype, scene features mix a random context vector
with the mean prototype of the scene's roster. The trainable state is a
single linear scene head (W, b) plus the fusion BN parameters — person
embeddings enter the losses as fixed features (or as gradient-stopped
prototypes), matching the discipline that the scene module is what the scene
objectives update. Optimization is plain gradient descent so the gradients
themselves stay the artifact under test.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import DatasetBundle, PersonAnnotation, SceneRecord
from .errors import ConfigError, ContractViolation, TrainingDivergenceError
from .evaluation import MetricReport, gfn_scene_metrics, person_retrieval_metrics
from .objectives import (
    FusionParams,
    GfnConfig,
    PairWorld,
    baseline_gfn_loss,
    combined_gfn_loss,
    query_scene_pairs,
    scene_only_gfn_loss,
    scene_scene_pairs,
)
from .oim import GfnLut, OimTable, SamplePlan, oim_loss, oim_update, prototype_lookup, sample_for_batch
from .retrieval import GalleryDetection, RetrievalTask, StaticDetectionProvider, two_phase_search


@dataclass
class SynthConfig:
    num_identities: int = 50
    num_scenes: int = 200
    persons_per_scene_range: tuple = (2, 3)
    dim: int = 32
    identity_noise_std: float = 0.1
    scene_context_std: float = 0.1
    cameras: int = 2
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.persons_per_scene_range
        if min(self.num_identities, self.num_scenes, self.cameras, lo, hi) < 1:
            raise ConfigError("all counts must be >= 1")
        if self.dim < 2:
            raise ConfigError("dim must be >= 2")
        if self.identity_noise_std < 0 or self.scene_context_std < 0:
            raise ConfigError("noise stds must be nonnegative")
        if lo > hi:
            raise ConfigError("persons_per_scene_range must be (lo, hi) with lo <= hi")
        if hi > self.num_identities:
            raise ConfigError(
                f"scenes cannot host {hi} distinct persons with only {self.num_identities} identities"
            )


@dataclass
class WorldFeatures:
    """Ground-truth raw features behind a synthetic bundle."""

    prototypes: np.ndarray  # (num_identities, dim), unit rows
    person: dict  # ann_id -> unit vector
    scene_raw: dict  # scene_id -> unit vector


def _normalize(v):
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ContractViolation("cannot normalize a zero vector")
    return v / n


def generate_world(cfg: SynthConfig) -> tuple[DatasetBundle, WorldFeatures]:
    """Seeded synthetic bundle plus the raw features the trainer consumes.

    Identity prototypes are unit vectors drawn in a random three-quarter-
    dimensional subspace; scene context vectors live in the orthogonal
    complement. Person
    content and scene appearance are thereby independent factors of the
    feature space, so a linear head can in principle recover the identity
    signal from context-dominated scene features — which is exactly what
    training has to demonstrate. Boxes are laid out on a fixed
    non-overlapping grid; cam_id is assigned round-robin over scenes.
    """
    rng = np.random.default_rng(cfg.seed)
    k = max(1, (3 * cfg.dim) // 4)
    basis, _ = np.linalg.qr(rng.normal(size=(cfg.dim, cfg.dim)))
    id_basis, ctx_basis = basis[:, :k], basis[:, k:]
    protos = rng.normal(size=(cfg.num_identities, k)) @ id_basis.T
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)

    lo, hi = cfg.persons_per_scene_range
    box_w, box_h, pitch = 32.0, 64.0, 40.0
    scene_w, scene_h = int(pitch * hi + 8), 80

    scenes, anns = [], []
    person_feat, scene_feat = {}, {}
    ann_id = 0
    for sid in range(cfg.num_scenes):
        scenes.append(
            SceneRecord(
                scene_id=sid,
                file_name=f"scene_{sid:05d}.png",
                width=scene_w,
                height=scene_h,
                cam_id=sid % cfg.cameras,
            )
        )
        roster_size = int(rng.integers(lo, hi + 1))
        roster = sorted(rng.choice(cfg.num_identities, size=roster_size, replace=False).tolist())
        for slot, pid in enumerate(roster):
            anns.append(
                PersonAnnotation(
                    ann_id=ann_id,
                    scene_id=sid,
                    bbox=(4.0 + pitch * slot, 8.0, box_w, box_h),
                    person_id=pid,
                    is_known=True,
                )
            )
            person_feat[ann_id] = _normalize(
                protos[pid] + rng.normal(scale=cfg.identity_noise_std, size=cfg.dim)
            )
            ann_id += 1
        context = ctx_basis @ rng.normal(scale=cfg.scene_context_std, size=ctx_basis.shape[1])
        scene_feat[sid] = _normalize(
            context + protos[roster].mean(axis=0) + rng.normal(scale=cfg.identity_noise_std, size=cfg.dim)
        )
    bundle = DatasetBundle(scenes, anns, partition_name="synthetic")
    return bundle, WorldFeatures(prototypes=protos, person=person_feat, scene_raw=scene_feat)


@dataclass
class TrainableParams:
    """Linear scene head (W, b) plus fusion BN parameters."""

    W: np.ndarray
    b: np.ndarray
    fusion: FusionParams
    learning_rate: float = 0.5
    epochs: int = 30

    @classmethod
    def initial(cls, dim: int, seed: int = 0, init_scale: float = 1.0, **kwargs) -> "TrainableParams":
        rng = np.random.default_rng(seed)
        W = init_scale * rng.normal(size=(dim, dim)) / np.sqrt(dim)
        b = _normalize(rng.normal(size=dim))
        return cls(W=W, b=b, fusion=FusionParams.create(dim, mode="train"), **kwargs)

    def project(self, raw) -> np.ndarray:
        """Scene embedding(s) for raw feature row(s)."""
        raw = np.asarray(raw, dtype=np.float64)
        return raw @ self.W.T + self.b

    def copy(self) -> "TrainableParams":
        return TrainableParams(
            W=self.W.copy(),
            b=self.b.copy(),
            fusion=self.fusion.copy(),
            learning_rate=self.learning_rate,
            epochs=self.epochs,
        )


@dataclass
class LossCurve:
    rows: list = field(default_factory=list)  # (epoch, mean_reid, mean_gfn, mean_total)

    def to_csv(self) -> str:
        lines = ["epoch,loss_reid,loss_gfn,loss_total"]
        for e, r, g, t in self.rows:
            lines.append(f"{e},{r!r},{g!r},{t!r}")
        return "\n".join(lines) + "\n"

    def mean_gfn(self, epoch: int) -> float:
        return self.rows[epoch][2]


def refresh_lut(bundle, feats: WorldFeatures, params: TrainableParams, epoch: int) -> GfnLut:
    """Full per-epoch refresh: scene entries are the current projection of
    every scene's raw feature; person entries are the crop features."""
    return GfnLut(
        epoch=epoch,
        scene={sid: params.project(feats.scene_raw[sid]) for sid in bundle.scene_ids()},
        person={aid: feats.person[aid].copy() for aid in sorted(feats.person)},
    )


def train_gfn(
    bundle,
    feats: WorldFeatures,
    params: TrainableParams,
    cfg: GfnConfig,
    plan: SamplePlan,
    table: OimTable,
    batch_size: int = 8,
    seed: int = 0,
    exclude_ann_ids=(),
    audit: bool = False,
    audit_tol: float = 1e-4,
) -> tuple[TrainableParams, LossCurve]:
    """Gradient-descent loop over L_reid + L_gfn with a full lookup-table
    refresh at every epoch start.

    Returns the trained parameters (updated in place) and the recorded loss
    curve. Non-finite losses raise TrainingDivergenceError with the step
    index. ``audit=True`` first checks the analytic parameter gradient
    against central finite differences on a small generated world.
    """
    if batch_size < 1:
        raise ContractViolation("batch_size must be >= 1")
    if audit:
        worst = audit_gradients(cfg, plan, seed=seed)
        if worst > audit_tol:
            raise TrainingDivergenceError(
                f"gradient audit failed: max relative error {worst:.3e} > {audit_tol:.0e}", step=-1
            )
    exclude = set(exclude_ann_ids)
    ann_ids = [a.ann_id for a in bundle.known_annotations() if a.ann_id not in exclude]
    if not ann_ids:
        raise ContractViolation("no annotations left to train on")
    curve = LossCurve()
    step = 0
    for epoch in range(params.epochs):
        rng = np.random.default_rng(seed)
        lut = refresh_lut(bundle, feats, params, epoch)
        order = [ann_ids[i] for i in rng.permutation(len(ann_ids))]
        reid_losses, gfn_losses = [], []
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            loss_reid, loss_gfn = _train_step(
                bundle, feats, params, cfg, plan, table, lut, batch, rng
            )
            total = loss_reid + loss_gfn
            if not np.isfinite(total):
                raise TrainingDivergenceError(f"non-finite loss at step {step}", step=step)
            reid_losses.append(loss_reid)
            gfn_losses.append(loss_gfn)
            step += 1
        mr = float(np.mean(reid_losses))
        mg = float(np.mean(gfn_losses))
        curve.rows.append((epoch, mr, mg, mr + mg))
    return params, curve


def _train_step(bundle, feats, params, cfg, plan, table, lut, batch, rng):
    """One mini-batch: OIM loss + prototype updates, then the scene objective
    and a plain gradient step on (W, b, gamma, delta)."""
    E = np.stack([feats.person[a] for a in batch])
    labels = [bundle.annotations[a].person_id for a in batch]
    loss_reid, _ = oim_loss(E, labels, table)
    for row, (a, lab) in enumerate(zip(batch, labels)):
        oim_update(table, E[row], lab)

    sampled = sample_for_batch(plan, batch, bundle, lut, seed=int(rng.integers(2**31)))
    batch_scenes = {bundle.annotations[a].scene_id for a in batch}
    scene_ids = sorted(batch_scenes | {sid for lst in sampled.values() for sid in lst})
    scene_index = {sid: k for k, sid in enumerate(scene_ids)}
    live = np.array([sid in batch_scenes for sid in scene_ids], dtype=bool)
    raw = np.stack([feats.scene_raw[sid] for sid in scene_ids])
    projected = params.project(raw)
    lut_rows = np.stack([lut.scene[sid] for sid in scene_ids])
    Y = np.where(live[:, None], projected, lut_rows)

    world = PairWorld(
        person_ids=tuple(bundle.annotations[a].person_id for a in batch),
        person_scene=tuple(scene_index[bundle.annotations[a].scene_id] for a in batch),
        rosters=tuple(frozenset(bundle.known_ids_in_scene(sid)) for sid in scene_ids),
        scene_keys=tuple(scene_ids),
    )

    if cfg.query_source == "prototype":
        X = np.stack([prototype_lookup(table, pid) for pid in world.person_ids])
        person_mask = np.zeros(len(batch), dtype=bool)
    else:
        X = E
        person_mask = np.ones(len(batch), dtype=bool)

    if cfg.objective == "baseline":
        pairs = query_scene_pairs(world)
        loss_gfn, grads = baseline_gfn_loss(
            X, Y, pairs, cfg.tau, reduction="mean",
            person_grad_mask=person_mask, scene_grad_mask=live,
        )
    elif cfg.objective == "combined":
        pairs = query_scene_pairs(world)
        loss_gfn, grads = combined_gfn_loss(
            X, Y, world.person_scene, pairs, params.fusion, cfg.tau, cfg.beta,
            reduction="mean", person_grad_mask=person_mask, scene_grad_mask=live,
        )
    else:
        pairs = scene_scene_pairs(world)
        keep = [(i, j) for i, j in pairs.positives if live[i]]
        pairs.candidates = {ij: pairs.candidates[ij] for ij in keep}
        pairs.positives = keep
        loss_gfn, grads = scene_only_gfn_loss(
            Y, pairs, cfg.tau, reduction="mean", scene_grad_mask=live
        )

    dY = grads.d_scenes
    lr = params.learning_rate
    if np.any(live):
        rows = np.where(live)[0]
        params.W -= lr * dY[rows].T @ raw[rows]
        params.b -= lr * dY[rows].sum(axis=0)
    if grads.d_gamma is not None:
        params.fusion.gamma -= lr * grads.d_gamma
        params.fusion.delta -= lr * grads.d_delta
    return float(loss_reid), float(loss_gfn)


def audit_gradients(cfg: GfnConfig, plan: SamplePlan, seed: int = 0, dim: int = 8, h: float = 1e-5) -> float:
    """Central finite-difference check of the full-loss parameter gradient
    (W, b, gamma, delta) on a small generated world; returns the worst
    relative error."""
    synth_cfg = SynthConfig(
        num_identities=4,
        num_scenes=6,
        persons_per_scene_range=(1, 2),
        dim=dim,
        identity_noise_std=0.2,
        scene_context_std=0.3,
        cameras=1,
        seed=seed,
    )
    bundle, feats = generate_world(synth_cfg)
    params = TrainableParams.initial(dim, seed=seed + 1, init_scale=1.0)
    table = OimTable.create(bundle.known_identities(), dim, seed=seed + 2, capacity=16)
    batch = [a.ann_id for a in bundle.known_annotations()]
    lut = refresh_lut(bundle, feats, params, epoch=0)
    sampled = sample_for_batch(plan, batch, bundle, lut, seed=seed + 3)

    batch_scenes = {bundle.annotations[a].scene_id for a in batch}
    scene_ids = sorted(batch_scenes | {sid for lst in sampled.values() for sid in lst})
    scene_index = {sid: k for k, sid in enumerate(scene_ids)}
    live = np.array([sid in batch_scenes for sid in scene_ids], dtype=bool)
    raw = np.stack([feats.scene_raw[sid] for sid in scene_ids])
    lut_rows = np.stack([lut.scene[sid] for sid in scene_ids])
    world = PairWorld(
        person_ids=tuple(bundle.annotations[a].person_id for a in batch),
        person_scene=tuple(scene_index[bundle.annotations[a].scene_id] for a in batch),
        rosters=tuple(frozenset(bundle.known_ids_in_scene(sid)) for sid in scene_ids),
        scene_keys=tuple(scene_ids),
    )
    E = np.stack([feats.person[a] for a in batch])
    if cfg.query_source == "prototype":
        X = np.stack([prototype_lookup(table, pid) for pid in world.person_ids])
    else:
        X = E

    def total_loss(W, b, gamma, delta):
        Y = np.where(live[:, None], raw @ W.T + b, lut_rows)
        fusion = FusionParams(
            gamma=gamma, delta=delta,
            running_mean=params.fusion.running_mean.copy(),
            running_var=params.fusion.running_var.copy(),
            momentum=params.fusion.momentum, mode="train", eps=params.fusion.eps,
        )
        reid, _ = oim_loss(E, list(world.person_ids), table)
        if cfg.objective == "baseline":
            pairs = query_scene_pairs(world)
            g, _ = baseline_gfn_loss(X, Y, pairs, cfg.tau, reduction="mean")
        elif cfg.objective == "combined":
            pairs = query_scene_pairs(world)
            g, _ = combined_gfn_loss(
                X, Y, world.person_scene, pairs, fusion, cfg.tau, cfg.beta, reduction="mean"
            )
        else:
            pairs = scene_scene_pairs(world)
            keep = [(i, j) for i, j in pairs.positives if live[i]]
            pairs.candidates = {ij: pairs.candidates[ij] for ij in keep}
            pairs.positives = keep
            g, _ = scene_only_gfn_loss(Y, pairs, cfg.tau, reduction="mean")
        return reid + g

    # analytic gradient at the current point
    Y = np.where(live[:, None], raw @ params.W.T + params.b, lut_rows)
    fusion = params.fusion.copy()
    if cfg.objective == "baseline":
        pairs = query_scene_pairs(world)
        _, grads = baseline_gfn_loss(X, Y, pairs, cfg.tau, reduction="mean", scene_grad_mask=live)
        dgamma = np.zeros(dim)
        ddelta = np.zeros(dim)
    elif cfg.objective == "combined":
        pairs = query_scene_pairs(world)
        _, grads = combined_gfn_loss(
            X, Y, world.person_scene, pairs, fusion, cfg.tau, cfg.beta,
            reduction="mean", scene_grad_mask=live,
        )
        dgamma, ddelta = grads.d_gamma, grads.d_delta
    else:
        pairs = scene_scene_pairs(world)
        keep = [(i, j) for i, j in pairs.positives if live[i]]
        pairs.candidates = {ij: pairs.candidates[ij] for ij in keep}
        pairs.positives = keep
        _, grads = scene_only_gfn_loss(Y, pairs, cfg.tau, reduction="mean", scene_grad_mask=live)
        dgamma = np.zeros(dim)
        ddelta = np.zeros(dim)
    rows = np.where(live)[0]
    dW = grads.d_scenes[rows].T @ raw[rows]
    db = grads.d_scenes[rows].sum(axis=0)

    worst = 0.0
    packs = [
        (params.W, dW),
        (params.b, db),
        (params.fusion.gamma, dgamma),
        (params.fusion.delta, ddelta),
    ]
    theta = [params.W.copy(), params.b.copy(), params.fusion.gamma.copy(), params.fusion.delta.copy()]
    for t, (target, analytic) in enumerate(packs):
        fd = np.zeros_like(target, dtype=np.float64)
        flat = theta[t].reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = total_loss(*theta)
            flat[k] = orig - h
            dn = total_loss(*theta)
            flat[k] = orig
            fd.reshape(-1)[k] = (up - dn) / (2 * h)
        scale = max(float(np.max(np.abs(fd))), 1e-8)
        worst = max(worst, float(np.max(np.abs(fd - analytic))) / scale)
    return worst


def evaluate_toy(
    bundle,
    feats: WorldFeatures,
    params: TrainableParams,
    cfg: GfnConfig,
    query_ann_ids=None,
    seed: int = 0,
    max_queries: int | None = None,
    use_gfn_filter: bool = False,
) -> dict:
    """Scene-retrieval and person-retrieval reports on held-out queries, with
    and without the learned score weighting (delta columns included).

    Galleries are all scenes except the query's own. Detections are the
    ground-truth boxes with their crop features at s_det = 1.
    """
    from .objectives import gfn_score  # local alias, keeps call sites short

    scene_emb = {sid: params.project(feats.scene_raw[sid]) for sid in bundle.scene_ids()}

    class _SceneStore:
        def __contains__(self, sid):
            return sid in scene_emb

        def get(self, sid):
            return scene_emb[sid]

    store = _SceneStore()
    detections = {
        sid: [
            GalleryDetection(
                scene_id=sid, bbox=a.bbox, embedding=feats.person[a.ann_id], s_det=1.0
            )
            for a in bundle.anns_in_scene(sid)
        ]
        for sid in bundle.scene_ids()
    }

    if query_ann_ids is None:
        query_ann_ids = [a.ann_id for a in bundle.known_annotations()]
    query_ann_ids = list(query_ann_ids)
    if max_queries is not None and len(query_ann_ids) > max_queries:
        rng = np.random.default_rng(seed)
        query_ann_ids = sorted(
            rng.choice(query_ann_ids, size=max_queries, replace=False).tolist()
        )

    all_scenes = bundle.scene_ids()
    infer = params.fusion.copy(mode="inference")
    tasks = []
    for aid in query_ann_ids:
        ann = bundle.annotations[aid]
        gallery = tuple(s for s in all_scenes if s != ann.scene_id)
        tasks.append(
            RetrievalTask(
                query_ann_id=aid,
                query_person_id=ann.person_id,
                query_scene_id=ann.scene_id,
                gallery_scene_ids=gallery,
                query_embedding=feats.person[aid],
                query_scene_embedding=scene_emb[ann.scene_id],
            )
        )

    scene_cases = []
    chance = []
    for task in tasks:
        scores = {
            sid: gfn_score(task.query_embedding, task.query_scene_embedding, scene_emb[sid], cfg, infer)
            for sid in task.gallery_scene_ids
        }
        scene_cases.append((task, scores))
        positives = bundle.scenes_with_identity(task.query_person_id) & set(task.gallery_scene_ids)
        chance.append(len(positives) / len(task.gallery_scene_ids))
    scene_report = gfn_scene_metrics(scene_cases, bundle)

    def run(weight: bool, flt: bool):
        cases = []
        for task in tasks:
            provider = StaticDetectionProvider(detections)
            result = two_phase_search(
                task, provider, store, cfg, infer, use_gfn_filter=flt, use_gfn_weight=weight
            )
            cases.append((task, result))
        return person_retrieval_metrics(cases, bundle)

    base = run(weight=False, flt=False)
    weighted = run(weight=True, flt=use_gfn_filter)
    delta = {
        "mAP": weighted.metrics["mAP"] - base.metrics["mAP"],
        "top1": weighted.metrics["top1"] - base.metrics["top1"],
    }
    return {
        "scene": scene_report,
        "reid_base": base,
        "reid_weighted": weighted,
        "delta": delta,
        "chance_top1": float(np.mean(chance)) if chance else 0.0,
        "num_queries": len(tasks),
    }


def pick_holdout_queries(bundle, fraction: float = 0.1, seed: int = 0, min_positive_scenes: int = 2):
    """Seeded sample of known annotations whose identity appears in at least
    ``min_positive_scenes`` scenes (so the query has matches beyond its own
    scene)."""
    eligible = [
        a.ann_id
        for a in bundle.known_annotations()
        if len(bundle.scenes_with_identity(a.person_id)) >= min_positive_scenes
    ]
    rng = np.random.default_rng(seed)
    k = max(1, int(round(fraction * len(eligible))))
    return sorted(rng.choice(eligible, size=min(k, len(eligible)), replace=False).tolist())
