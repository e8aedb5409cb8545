"""Numerically stable primitives shared by the objectives and the retrieval pipeline.

Everything here is a pure function of its inputs. Gradients are exact analytic
derivatives of the fixed computation graphs used downstream; there is no
general autodiff. All internal accumulation is float64 regardless of the dtype
the caller hands in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ContractViolation, DegenerateInputError

ORIENTATIONS = ("increasing", "decreasing")


def ensure_vector(v, name="vector") -> np.ndarray:
    """Coerce to a finite float64 1-D array; reject NaN/Inf and empty input."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ContractViolation(f"{name} must be a nonempty 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DegenerateInputError(f"{name} contains non-finite entries")
    return arr


def _unit(v: np.ndarray, name: str) -> tuple[np.ndarray, float]:
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise DegenerateInputError(f"{name} has zero norm")
    return v / norm, norm


def cosine_sim(u, v) -> float:
    """Cosine similarity u.v / (|u||v|), in [-1, 1]. Zero-norm input is an error,
    never a silent 0."""
    u = ensure_vector(u, "u")
    v = ensure_vector(v, "v")
    if u.shape != v.shape:
        raise ContractViolation(f"dim mismatch: {u.shape[0]} vs {v.shape[0]}")
    uh, _ = _unit(u, "u")
    vh, _ = _unit(v, "v")
    return float(np.clip(uh @ vh, -1.0, 1.0))


def logistic_weight(s, alpha: float, orientation: str = "increasing"):
    """Temperature-scaled logistic weight in (0, 1).

    increasing: 1 / (1 + exp(-s/alpha)); decreasing: exp(-s/alpha) / (1 + exp(-s/alpha)).
    The two orientations sum to 1 for equal inputs. Scalar in, scalar out;
    arrays broadcast elementwise.
    """
    if alpha <= 0:
        raise ContractViolation("alpha must be positive")
    if orientation not in ORIENTATIONS:
        raise ContractViolation(f"orientation must be one of {ORIENTATIONS}")
    t = np.asarray(s, dtype=np.float64) / alpha
    w = expit(t) if orientation == "increasing" else expit(-t)
    return float(w) if np.ndim(s) == 0 else w


@dataclass
class PairLossResult:
    """One-positive-vs-candidates cross-entropy loss and its gradients."""

    loss: float
    grad_anchor: np.ndarray
    grad_candidates: list[np.ndarray]
    sims: np.ndarray
    probs: np.ndarray


def contrastive_pair_loss(
    anchor,
    candidates,
    positive_index: int,
    tau: float,
    candidate_grad_mask=None,
) -> PairLossResult:
    """Cross-entropy of the positive candidate against all candidates under
    temperature-scaled cosine similarity.

    loss = -log( exp(sim(a, c_pos)/tau) / sum_k exp(sim(a, c_k)/tau) ),
    computed via max-subtracted logsumexp so small temperatures cannot
    overflow. Gradients are exact derivatives through the cosine
    normalization, for the anchor and every candidate; entries of
    ``candidate_grad_mask`` set to False mark gradient-stopped candidates
    (lookup-table snapshots) and receive zero gradient.
    """
    if tau <= 0:
        raise ContractViolation("tau must be positive")
    a = ensure_vector(anchor, "anchor")
    if len(candidates) == 0:
        raise ContractViolation("candidates must be nonempty")
    C = np.stack([ensure_vector(c, f"candidate {k}") for k, c in enumerate(candidates)])
    if C.shape[1] != a.shape[0]:
        raise ContractViolation(f"dim mismatch: anchor {a.shape[0]} vs candidates {C.shape[1]}")
    if not (0 <= positive_index < C.shape[0]):
        raise ContractViolation(f"positive_index {positive_index} out of range")
    if candidate_grad_mask is None:
        mask = np.ones(C.shape[0], dtype=bool)
    else:
        mask = np.asarray(candidate_grad_mask, dtype=bool)
        if mask.shape != (C.shape[0],):
            raise ContractViolation("candidate_grad_mask length must match candidates")

    ah, anorm = _unit(a, "anchor")
    cnorms = np.linalg.norm(C, axis=1)
    if np.any(cnorms == 0.0):
        raise DegenerateInputError(f"candidate {int(np.argmin(cnorms))} has zero norm")
    Ch = C / cnorms[:, None]

    sims = Ch @ ah
    logits = sims / tau
    m = logits.max()
    z = np.exp(logits - m)
    lse = m + np.log(z.sum())
    loss = float(lse - logits[positive_index])

    probs = z / z.sum()
    # dL/dsim_k = (p_k - [k = pos]) / tau
    g = probs.copy()
    g[positive_index] -= 1.0
    g /= tau

    # sim_k = ah . ch_k; d sim_k/da = (ch_k - sim_k*ah)/|a|, d sim_k/dc_k = (ah - sim_k*ch_k)/|c_k|
    grad_anchor = (Ch.T @ g - (g @ sims) * ah) / anorm
    grad_c = g[:, None] * (ah[None, :] - sims[:, None] * Ch) / cnorms[:, None]
    grad_c[~mask] = 0.0

    return PairLossResult(
        loss=loss,
        grad_anchor=grad_anchor,
        grad_candidates=list(grad_c),
        sims=sims,
        probs=probs,
    )
