"""Scene-scoring objectives: indicator functions, query-scene excitation fusion,
and the three contrastive losses (baseline, combined, scene-only) with exact
analytic gradients, plus inference-time scoring.

Conventions shared by the losses:

* a *person* entry is one crop: an identity label plus the index of the scene
  the crop came from;
* a *scene* entry is its embedding plus the set of known identities it
  contains (its roster);
* positive pairs and per-pair candidate sets come from a ``PairIndex`` built
  by the indicator functions below — for a positive (i, j) the candidate set
  holds j itself and every scene that is negative for anchor i, so no other
  positive ever leaks in as a softmax negative;
* ``reduction="sum"`` matches the written objectives; the trainer uses
  ``"mean"`` so the loss scale is batch-size free;
* boolean grad masks mark gradient-stopped inputs (lookup-table snapshots,
  prototype queries); masked inputs receive exactly zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .core import ORIENTATIONS, contrastive_pair_loss, cosine_sim, ensure_vector
from .errors import ContractViolation, DegenerateInputError

OBJECTIVES = ("baseline", "combined", "scene_only")
QUERY_SOURCES = ("batch", "prototype")


@dataclass
class GfnConfig:
    tau: float = 0.1  # training temperature
    beta: float = 0.2  # excitation temperature
    alpha: float = 0.2  # inference weighting temperature
    lambda_gfn: float = 0.0  # scene filter threshold
    objective: str = "combined"
    query_source: str = "batch"
    orientation: str = "increasing"

    def __post_init__(self):
        if self.tau <= 0 or self.beta <= 0 or self.alpha <= 0:
            raise ContractViolation("tau, beta, alpha must be positive")
        if self.objective not in OBJECTIVES:
            raise ContractViolation(f"objective must be one of {OBJECTIVES}")
        if self.query_source not in QUERY_SOURCES:
            raise ContractViolation(f"query_source must be one of {QUERY_SOURCES}")
        if self.orientation not in ORIENTATIONS:
            raise ContractViolation(f"orientation must be one of {ORIENTATIONS}")

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "beta": self.beta,
            "alpha": self.alpha,
            "lambda_gfn": self.lambda_gfn,
            "objective": self.objective,
            "query_source": self.query_source,
            "orientation": self.orientation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GfnConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# Indicators and pair indices


def indicator_qs(person_ann, scene_id, bundle) -> int:
    """1 iff a known annotation with the person's identity exists in the scene."""
    ann = bundle.annotations[person_ann] if isinstance(person_ann, int) else person_ann
    if not ann.is_known:
        raise ContractViolation(f"annotation {ann.ann_id} has no known person_id")
    return int(ann.person_id in bundle.known_ids_in_scene(scene_id))


def indicator_ss(scene_i, scene_j, bundle) -> int:
    """1 iff the two scenes share at least one known identity (symmetric)."""
    return int(bool(bundle.known_ids_in_scene(scene_i) & bundle.known_ids_in_scene(scene_j)))


@dataclass(frozen=True)
class PairWorld:
    """Abstract world the losses and graph analysis operate on."""

    person_ids: tuple  # identity label per person crop
    person_scene: tuple  # scene index each crop came from
    rosters: tuple  # frozenset of known identities per scene
    scene_keys: tuple = ()  # optional external scene ids, parallel to rosters

    def __post_init__(self):
        for i, (pid, s) in enumerate(zip(self.person_ids, self.person_scene)):
            if not 0 <= s < len(self.rosters):
                raise ContractViolation(f"person {i} references scene index {s} out of range")
            if pid not in self.rosters[s]:
                raise ContractViolation(f"person {i} (id {pid}) missing from its own scene roster")

    @property
    def num_persons(self) -> int:
        return len(self.person_ids)

    @property
    def num_scenes(self) -> int:
        return len(self.rosters)

    @classmethod
    def from_bundle(cls, bundle, ann_ids=None, scene_ids=None) -> "PairWorld":
        """One person entry per known annotation, one roster per scene."""
        scene_ids = list(scene_ids) if scene_ids is not None else bundle.scene_ids()
        index = {sid: k for k, sid in enumerate(scene_ids)}
        rosters = tuple(frozenset(bundle.known_ids_in_scene(sid)) for sid in scene_ids)
        anns = (
            [bundle.annotations[i] for i in ann_ids]
            if ann_ids is not None
            else bundle.known_annotations()
        )
        pids, own = [], []
        for a in anns:
            if not a.is_known:
                raise ContractViolation(f"annotation {a.ann_id} is not a known person")
            pids.append(a.person_id)
            own.append(index[a.scene_id])
        return cls(
            person_ids=tuple(pids),
            person_scene=tuple(own),
            rosters=rosters,
            scene_keys=tuple(scene_ids),
        )


@dataclass
class PairIndex:
    """Positive pairs plus each pair's candidate index set."""

    positives: list = field(default_factory=list)  # (anchor index, positive scene index)
    candidates: dict = field(default_factory=dict)  # (i, j) -> list of scene indices

    def validate(self, positive_of_anchor):
        """Candidate sets contain their own positive and no other positive."""
        for (i, j), cand in self.candidates.items():
            if j not in cand:
                raise ContractViolation(f"candidate set for {(i, j)} misses its positive")
            leaked = [k for k in cand if k != j and k in positive_of_anchor(i)]
            if leaked:
                raise ContractViolation(f"positives {leaked} leaked into candidates of {(i, j)}")


def query_scene_pairs(world: PairWorld) -> PairIndex:
    """Positive (i, j) iff person i's identity is in scene j; candidates are j
    plus every scene not containing that identity."""
    idx = PairIndex()
    for i, pid in enumerate(world.person_ids):
        positive_scenes = [j for j, r in enumerate(world.rosters) if pid in r]
        negative_scenes = [k for k, r in enumerate(world.rosters) if pid not in r]
        for j in positive_scenes:
            idx.positives.append((i, j))
            idx.candidates[(i, j)] = sorted([j] + negative_scenes)
    return idx


def scene_scene_pairs(world: PairWorld) -> PairIndex:
    """Positive (i, j), i != j, iff scenes i and j share an identity; candidates
    are j plus every scene sharing nothing with i (so scene i itself never
    appears in its own candidate set)."""
    idx = PairIndex()
    M = world.num_scenes
    for i in range(M):
        if not world.rosters[i]:
            continue
        negatives = [k for k in range(M) if not (world.rosters[i] & world.rosters[k])]
        for j in range(M):
            if j == i or not (world.rosters[i] & world.rosters[j]):
                continue
            idx.positives.append((i, j))
            idx.candidates[(i, j)] = sorted([j] + negatives)
    return idx


# ---------------------------------------------------------------------------
# Excitation fusion with batch normalization

BN_MODES = ("train", "inference", "bypass")


@dataclass
class FusionParams:
    """Per-feature affine + batch statistics for the fused-embedding BN."""

    gamma: np.ndarray
    delta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    mode: str = "train"
    eps: float = 1e-5

    @classmethod
    def create(cls, dim: int, mode: str = "train") -> "FusionParams":
        return cls(
            gamma=np.ones(dim),
            delta=np.zeros(dim),
            running_mean=np.zeros(dim),
            running_var=np.ones(dim),
            mode=mode,
        )

    def check(self, dim: int):
        if self.mode not in BN_MODES:
            raise ContractViolation(f"mode must be one of {BN_MODES}")
        for name in ("gamma", "delta", "running_mean", "running_var"):
            v = getattr(self, name)
            if np.asarray(v).shape != (dim,):
                raise ContractViolation(f"FusionParams.{name} must have length {dim}")
        if self.mode == "inference" and np.any(self.running_var <= 0):
            raise ContractViolation("running_var must be positive in inference mode")

    def copy(self, mode=None) -> "FusionParams":
        return FusionParams(
            gamma=self.gamma.copy(),
            delta=self.delta.copy(),
            running_mean=self.running_mean.copy(),
            running_var=self.running_var.copy(),
            momentum=self.momentum,
            mode=self.mode if mode is None else mode,
            eps=self.eps,
        )


class _FuseCache:
    __slots__ = ("S", "Y", "G", "Ghat", "istd", "mode", "gamma", "beta")


def _fuse_forward(X, Y, params: FusionParams, beta: float, update_running=True):
    """Fused rows BN(sigmoid(X/beta) * Y) plus the cache for backward.

    X, Y: (B, d). train mode standardizes with batch statistics (and updates
    running stats); inference standardizes with running stats; bypass skips
    normalization entirely.
    """
    if beta <= 0:
        raise ContractViolation("beta must be positive")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape != Y.shape:
        raise ContractViolation(f"fusion inputs disagree: {X.shape} vs {Y.shape}")
    params.check(X.shape[1])
    cache = _FuseCache()
    cache.mode = params.mode
    cache.beta = beta
    cache.S = expit(X / beta)
    cache.Y = Y
    G = cache.S * Y
    cache.G = G
    if params.mode == "bypass":
        cache.Ghat = None
        cache.istd = None
        cache.gamma = None
        return G, cache
    if params.mode == "train":
        mean = G.mean(axis=0)
        var = G.var(axis=0)
        if update_running:
            params.running_mean = (1 - params.momentum) * params.running_mean + params.momentum * mean
            params.running_var = (1 - params.momentum) * params.running_var + params.momentum * var
    else:
        mean = params.running_mean
        var = params.running_var
    cache.istd = 1.0 / np.sqrt(var + params.eps)
    cache.Ghat = (G - mean) * cache.istd
    cache.gamma = params.gamma
    return params.gamma * cache.Ghat + params.delta, cache


def _fuse_backward(cache: _FuseCache, dZ):
    """Gradients (dX, dY, dgamma, ddelta) for a forward fusion pass."""
    dZ = np.asarray(dZ, dtype=np.float64)
    if cache.mode == "bypass":
        dG = dZ
        dgamma = None
        ddelta = None
    else:
        dgamma = (dZ * cache.Ghat).sum(axis=0)
        ddelta = dZ.sum(axis=0)
        dGhat = dZ * cache.gamma
        if cache.mode == "train":
            B = dZ.shape[0]
            dG = (cache.istd / B) * (
                B * dGhat - dGhat.sum(axis=0) - cache.Ghat * (dGhat * cache.Ghat).sum(axis=0)
            )
        else:
            dG = dGhat * cache.istd
    dS = dG * cache.Y
    dY = dG * cache.S
    dX = dS * cache.S * (1.0 - cache.S) / cache.beta
    return dX, dY, dgamma, ddelta


def fuse(x, y, params: FusionParams, beta: float):
    """Sigmoid-gated elementwise excitation of a scene embedding by a person
    embedding, batch-normalized: BN(sigmoid(x/beta) * y).

    Accepts single vectors or (B, d) batches; returns the same shape. In
    train mode the batch dimension supplies the BN statistics and running
    stats are updated with the configured momentum; bypass mode returns the
    raw gated product.
    """
    x_arr = np.asarray(x, dtype=np.float64)
    single = x_arr.ndim == 1
    out, _ = _fuse_forward(x_arr, np.asarray(y, dtype=np.float64), params, beta)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Losses


@dataclass
class GfnGrads:
    d_persons: np.ndarray | None
    d_scenes: np.ndarray
    d_gamma: np.ndarray | None = None
    d_delta: np.ndarray | None = None


def _as_matrix(rows, name):
    M = np.stack([ensure_vector(r, f"{name}[{k}]") for k, r in enumerate(rows)])
    return M


def _resolve_mask(mask, n, name):
    if mask is None:
        return np.ones(n, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n,):
        raise ContractViolation(f"{name} must have length {n}")
    return mask


def _reduce(loss, grads, n_pairs, reduction):
    if reduction not in ("sum", "mean"):
        raise ContractViolation("reduction must be 'sum' or 'mean'")
    if reduction == "mean" and n_pairs > 0:
        loss /= n_pairs
        for g in grads:
            if g is not None:
                g /= n_pairs
    return loss


def baseline_gfn_loss(
    persons,
    scenes,
    pairs: PairIndex,
    tau: float,
    reduction: str = "sum",
    person_grad_mask=None,
    scene_grad_mask=None,
) -> tuple[float, GfnGrads]:
    """Direct person-vs-scene contrastive objective summed over positive pairs.

    Anchors are person embeddings, candidates are scene embeddings from the
    pair's candidate set. Masked entries (lookup-table scenes, prototype
    persons) get exactly zero gradient.
    """
    X = _as_matrix(persons, "persons")
    Y = _as_matrix(scenes, "scenes")
    pmask = _resolve_mask(person_grad_mask, X.shape[0], "person_grad_mask")
    smask = _resolve_mask(scene_grad_mask, Y.shape[0], "scene_grad_mask")
    dX = np.zeros_like(X)
    dY = np.zeros_like(Y)
    total = 0.0
    for i, j in pairs.positives:
        cand = pairs.candidates[(i, j)]
        if j not in cand:
            raise ContractViolation(f"positive scene {j} absent from candidates of pair {(i, j)}")
        res = contrastive_pair_loss(X[i], Y[cand], cand.index(j), tau)
        total += res.loss
        dX[i] += res.grad_anchor
        for k, g in zip(cand, res.grad_candidates):
            dY[k] += g
    dX[~pmask] = 0.0
    dY[~smask] = 0.0
    total = _reduce(total, [dX, dY], len(pairs.positives), reduction)
    return total, GfnGrads(d_persons=dX, d_scenes=dY)


def combined_gfn_loss(
    persons,
    scenes,
    own_scene,
    pairs: PairIndex,
    params: FusionParams,
    tau: float,
    beta: float,
    reduction: str = "sum",
    person_grad_mask=None,
    scene_grad_mask=None,
) -> tuple[float, GfnGrads]:
    """Contrastive objective over fused query-scene embeddings.

    For each positive (i, j) the anchor is fuse(x_i, y_own(i)) and the
    candidates are fuse(x_i, y_k) over the pair's candidate set; the fusion
    of a person with its own scene is a single shared node. BN statistics
    are taken over the unique fused vectors of this call. Gradients flow
    through both fusion inputs and the BN affine parameters.
    """
    X = _as_matrix(persons, "persons")
    Y = _as_matrix(scenes, "scenes")
    own_scene = list(own_scene)
    if len(own_scene) != X.shape[0]:
        raise ContractViolation("own_scene must map every person to a scene index")
    pmask = _resolve_mask(person_grad_mask, X.shape[0], "person_grad_mask")
    smask = _resolve_mask(scene_grad_mask, Y.shape[0], "scene_grad_mask")

    # Unique fusion nodes: anchors (i, own_i) plus all candidate fusions.
    row_of: dict[tuple[int, int], int] = {}
    fusions: list[tuple[int, int]] = []

    def row(i, k):
        key = (i, k)
        if key not in row_of:
            row_of[key] = len(fusions)
            fusions.append(key)
        return row_of[key]

    for i, j in pairs.positives:
        row(i, own_scene[i])
        for k in pairs.candidates[(i, j)]:
            row(i, k)
    if not fusions:
        d = X.shape[1]
        return 0.0, GfnGrads(np.zeros_like(X), np.zeros_like(Y), np.zeros(d), np.zeros(d))

    pi = np.array([i for i, _ in fusions])
    si = np.array([k for _, k in fusions])
    Z, cache = _fuse_forward(X[pi], Y[si], params, beta)

    znorms = np.linalg.norm(Z, axis=1)
    if np.any(znorms == 0.0):
        raise DegenerateInputError("fused embedding has zero norm")

    dZ = np.zeros_like(Z)
    total = 0.0
    for i, j in pairs.positives:
        anchor_row = row_of[(i, own_scene[i])]
        cand = pairs.candidates[(i, j)]
        cand_rows = [row_of[(i, k)] for k in cand]
        res = contrastive_pair_loss(Z[anchor_row], Z[cand_rows], cand.index(j), tau)
        total += res.loss
        dZ[anchor_row] += res.grad_anchor
        for r, g in zip(cand_rows, res.grad_candidates):
            dZ[r] += g

    dXr, dYr, dgamma, ddelta = _fuse_backward(cache, dZ)
    dX = np.zeros_like(X)
    dY = np.zeros_like(Y)
    np.add.at(dX, pi, dXr)
    np.add.at(dY, si, dYr)
    dX[~pmask] = 0.0
    dY[~smask] = 0.0
    if dgamma is None:
        dgamma = np.zeros(X.shape[1])
        ddelta = np.zeros(X.shape[1])
    total = _reduce(total, [dX, dY, dgamma, ddelta], len(pairs.positives), reduction)
    return total, GfnGrads(d_persons=dX, d_scenes=dY, d_gamma=dgamma, d_delta=ddelta)


def scene_only_gfn_loss(
    scenes,
    pairs: PairIndex,
    tau: float,
    reduction: str = "sum",
    scene_grad_mask=None,
) -> tuple[float, GfnGrads]:
    """Scene-vs-scene contrastive objective over shared-identity pairs.

    Self-pairs are excluded from the positives and a scene never appears in
    its own candidate set (it is positive with itself whenever it has a
    known person)."""
    Y = _as_matrix(scenes, "scenes")
    smask = _resolve_mask(scene_grad_mask, Y.shape[0], "scene_grad_mask")
    dY = np.zeros_like(Y)
    total = 0.0
    for i, j in pairs.positives:
        if i == j:
            raise ContractViolation("scene-scene positives must have i != j")
        cand = pairs.candidates[(i, j)]
        res = contrastive_pair_loss(Y[i], Y[cand], cand.index(j), tau)
        total += res.loss
        dY[i] += res.grad_anchor
        for k, g in zip(cand, res.grad_candidates):
            dY[k] += g
    dY[~smask] = 0.0
    total = _reduce(total, [dY], len(pairs.positives), reduction)
    return total, GfnGrads(d_persons=None, d_scenes=dY)


def gfn_score(query_person, query_scene, gallery_scene, cfg: GfnConfig, params: FusionParams | None = None) -> float:
    """Query-vs-gallery-scene compatibility score in [-1, 1].

    baseline: sim(x_q, y_g); combined: sim(fuse(x_q, y_q), fuse(x_q, y_g));
    scene_only: sim(y_q, y_g). The combined objective needs inference-mode
    (or bypass) fusion parameters; train mode would mutate running stats.
    """
    if cfg.objective == "baseline":
        return cosine_sim(query_person, gallery_scene)
    if cfg.objective == "scene_only":
        return cosine_sim(query_scene, gallery_scene)
    if params is None:
        raise ContractViolation("combined scoring requires FusionParams")
    if params.mode == "train":
        raise ContractViolation("combined scoring requires inference or bypass mode")
    w = fuse(np.asarray(query_person, dtype=np.float64), np.asarray(query_scene, dtype=np.float64), params, cfg.beta)
    z = fuse(np.asarray(query_person, dtype=np.float64), np.asarray(gallery_scene, dtype=np.float64), params, cfg.beta)
    return cosine_sim(w, z)
