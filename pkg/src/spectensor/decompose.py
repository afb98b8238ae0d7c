"""Four-stage recovery pipeline for noisy orthogonal 4-tensors.

Given T = sum_i a_i^{x4} + E with orthonormal a_i and a spectral-norm bound
``||E_{12,34}|| <= eps``, the pipeline recovers the components up to sign:

1. ``preprocess``        - PSD eigenvalue truncation of the square unfolding,
                           turning small spectral-norm error into small
                           Frobenius-norm error.
2. ``clip_rect``         - singular values of both tall rectangular
                           unfoldings capped at 1, taming the variance of
                           Gaussian contractions.
3. ``random_contraction``- Gaussian contraction of modes {1,2}; the top
                           singular vectors of the contracted d x d matrix
                           are component candidates.
4. ``postprocess``       - one power-iteration-like refinement against the
                           clean input tensor, with an acceptance check.

``full_decompose`` loops these stages, deduplicating, orthonormalizing and
subtracting accepted components from a working copy so the remaining ones
surface in later rounds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegeneracyError
from .tensor import (
    PLAN_SQUARE,
    PLAN_TALL_123_4,
    PLAN_TALL_124_3,
    MatrixView,
    Tensor4,
    canonical_sign,
    clip_singular,
    psd_truncate,
    reshape,
    spectral_norm,
    subspace_power_iter,
    sum_outer4,
    unreshape,
)


@dataclass(frozen=True)
class RecoveryParams:
    """All tolerances and trial counts the recovery loop depends on.

    eps              spectral-noise bound ||E_{12,34}||; also drives the
                     dedup/acceptance thresholds.
    dedup_corr       squared-correlation threshold for duplicate rejection;
                     defaults to 1 - eps.
    trials_per_round number of random contractions per round; defaults to
                     ceil(10 * n * log n) for the round's working rank n,
                     capped at ``trials_cap``.
    accept_margin    multiplier on the postprocess acceptance threshold.
    max_rounds       loop bound; defaults to ceil(100 * log n).
    rng_seed         seed for all randomness in the run.
    """

    eps: float
    dedup_corr: Optional[float] = None
    trials_per_round: Optional[int] = None
    trials_cap: int = 4000
    accept_margin: float = 1.0
    max_rounds: Optional[int] = None
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.eps < 1.0:
            raise ValueError(f"eps must be in [0, 1), got {self.eps}")
        if self.dedup_corr is not None and not 0.0 < self.dedup_corr < 1.0:
            raise ValueError("dedup_corr must be in (0, 1)")
        if self.trials_per_round is not None and self.trials_per_round < 1:
            raise ValueError("trials_per_round must be >= 1")

    def resolved_dedup(self) -> float:
        if self.dedup_corr is not None:
            return self.dedup_corr
        return min(1.0 - self.eps, 1.0 - 1e-9)

    def resolved_trials(self, working_n: int) -> int:
        if self.trials_per_round is not None:
            return self.trials_per_round
        n = max(working_n, 2)
        return min(int(math.ceil(10 * n * math.log(n))), self.trials_cap)

    def resolved_max_rounds(self, initial_n: int) -> int:
        if self.max_rounds is not None:
            return self.max_rounds
        return int(math.ceil(100 * math.log(max(initial_n, 2))))


@dataclass
class ComponentSet:
    """Recovered (or ground-truth) unit vectors, one per row, up to sign.

    ``scores`` holds the acceptance score <v^{x4}, T_clean> per vector when
    available.
    """

    vectors: np.ndarray
    scores: Optional[np.ndarray] = None

    def __post_init__(self):
        vecs = np.asarray(self.vectors, dtype=np.float64)
        if vecs.size == 0:
            vecs = vecs.reshape(0, vecs.shape[-1] if vecs.ndim == 2 else 0)
        else:
            vecs = np.atleast_2d(vecs)
        self.vectors = vecs
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def __iter__(self):
        return iter(self.vectors)

    @classmethod
    def empty(cls, dim: int) -> "ComponentSet":
        return cls(np.zeros((0, dim)))


@dataclass
class ContractionCandidate:
    """One random contraction: the Gaussian used and the top triplet of M_g."""

    g: np.ndarray
    u_left: np.ndarray
    u_right: np.ndarray
    sigma_top: float


@dataclass
class WorkingState:
    """Round state of the recovery loop.

    ``t_work`` always equals ``t_clean`` minus the fourth powers of the
    components known at their subtraction time.
    """

    t_clean: Tensor4
    t_work: Tensor4
    known: ComponentSet
    round_index: int = 0


@dataclass
class DecompositionReport:
    """Outcome of ``full_decompose``: components plus run accounting."""

    components: ComponentSet
    rounds: int = 0
    trials_used: int = 0
    warnings: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        scores = self.components.scores
        return {
            "components": [list(map(float, v)) for v in self.components.vectors],
            "scores": [] if scores is None else [float(s) for s in scores],
            "rounds": self.rounds,
            "trials_used": self.trials_used,
            "warnings": list(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)


def quartic_form(t_sq: MatrixView, v: np.ndarray) -> float:
    """<T, v^{x4}> = (v (x) v)^T T_{12,34} (v (x) v)."""
    w = np.outer(v, v).ravel()
    return float(w @ t_sq @ w)


def preprocess(t: Tensor4, eps: float, rng=None) -> MatrixView:
    """Spectral-to-Frobenius preprocessing: (T_{12,34} - eps*Id)_+.

    For T = sum a_i^{x4} + E with ||E|| <= eps the result is within
    2*eps*sqrt(2n) of the signal in Frobenius norm, with rank at most the
    number of eigenvalues above eps.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    return psd_truncate(reshape(t, PLAN_SQUARE), eps, rng=rng)


def clip_rect(t: Tensor4, rng=None) -> Tensor4:
    """Cap the singular values of both tall rectangular unfoldings at 1.

    The {124}{3} projection is performed second; it provably does not
    disturb the {123}{4} bound, so both unfoldings of the output have
    spectral norm at most 1 (+1e-8), and on instances with orthonormal
    signal S the Frobenius distance to S does not increase.
    """
    d = t.dim
    first = clip_singular(reshape(t, PLAN_TALL_123_4), 1.0, rng=rng)
    t1 = unreshape(first, PLAN_TALL_123_4, d)
    second = clip_singular(reshape(t1, PLAN_TALL_124_3), 1.0, rng=rng)
    return unreshape(second, PLAN_TALL_124_3, d)


def random_contraction(t: Tensor4, rng) -> ContractionCandidate:
    """Contract modes {1,2} of ``t`` against g ~ N(0, Id_{d^2}).

    Returns the top left and right singular vectors of the contracted
    matrix M_g = sum_j g_j T_j; on post-clip input one of them is highly
    correlated with some component with n^{-1-O(eta)} probability.
    """
    t_sq = reshape(t, PLAN_SQUARE)
    return _contract(t_sq, t.dim, rng)


def _contract(t_sq: MatrixView, d: int, rng) -> ContractionCandidate:
    g = rng.standard_normal(d * d)
    m_g = (g @ t_sq).reshape(d, d)
    dec = subspace_power_iter(m_g, 1, tol=1e-9, max_iters=2000, rng=rng)
    return ContractionCandidate(
        g=g,
        u_left=canonical_sign(dec.left[:, 0].copy()),
        u_right=canonical_sign(dec.right[:, 0].copy()),
        sigma_top=float(dec.values[0]),
    )


def postprocess(
    t_clean: Tensor4,
    u: np.ndarray,
    eps: float,
    accept_margin: float = 1.0,
    rng=None,
    _t_sq: Optional[MatrixView] = None,
) -> Optional[np.ndarray]:
    """Refine a candidate ``u`` against the clean tensor.

    Computes A = reshape(T_{12,34} (u (x) u)) and extracts its top singular
    vectors; a candidate v is returned iff its quartic form against T
    reaches ``(1-3*eps)^2 - eps`` (scaled by ``accept_margin``).  Absence of
    output is a normal outcome.  When <u, a_i>^2 >= 0.99 and ||E|| <= eps
    the returned vector satisfies <v, a_i>^2 >= 1 - 3*eps.
    """
    d = t_clean.dim
    t_sq = reshape(t_clean, PLAN_SQUARE) if _t_sq is None else _t_sq
    w = np.outer(u, u).ravel()
    a = (t_sq @ w).reshape(d, d)
    if not np.any(a):
        return None
    dec = subspace_power_iter(a, 1, tol=1e-9, max_iters=2000, rng=rng)
    threshold = accept_margin * ((1.0 - 3.0 * eps) ** 2 - eps)
    best = None
    best_form = -np.inf
    for v in (dec.left[:, 0], dec.right[:, 0]):
        form = quartic_form(t_sq, v)
        if form >= threshold and form > best_form:
            best = canonical_sign(v.copy())
            best_form = form
    return best


def orthonormalize(components: ComponentSet) -> ComponentSet:
    """Nearest orthonormal set to the given one (polar factor).

    With B the d x k matrix of components as columns and B = U S V^T, maps
    b_i to U S^{-1} U^T b_i, i.e. B to U V^T: the orthonormal set closest
    to B in Frobenius norm.  Fails for numerically rank-deficient input.
    """
    if len(components) == 0:
        return components
    if len(components) > components.dim:
        raise DegeneracyError(
            f"{len(components)} components cannot be orthonormal in "
            f"dimension {components.dim}"
        )
    b = components.vectors.T  # d x k, columns are the components
    u, s, vt = np.linalg.svd(b, full_matrices=False)
    if s[-1] < 1e-8:
        raise DegeneracyError(
            f"component matrix is rank deficient (sigma_min = {s[-1]:.3e})"
        )
    polar = u @ vt
    return ComponentSet(polar.T)


def subtract_components(state: WorkingState, found: ComponentSet) -> WorkingState:
    """Remove found components from the working tensor.

    Returns a new state with T_work reduced by sum b^{x4} and the known set
    extended.  When each found vector is (1-eps)-correlated with a distinct
    true component, the spectral error this introduces is at most
    4*sqrt(eps).
    """
    if len(found) == 0:
        return WorkingState(
            state.t_clean, state.t_work, state.known, state.round_index + 1
        )
    removed = sum_outer4(found.vectors)
    new_work = Tensor4(state.t_work.data - removed.data, copy=False)
    if len(state.known) == 0:
        merged = found.vectors.copy()
    else:
        merged = np.vstack([state.known.vectors, found.vectors])
    return WorkingState(
        state.t_clean, new_work, ComponentSet(merged), state.round_index + 1
    )


def near_orthonormal_check(components: ComponentSet) -> float:
    """Deviation of the component Gram matrix from the identity.

    Returns ||sum_i a_i a_i^T - Id_S|| restricted to the span, which equals
    the spectral norm of (Gram - Id).  Zero for an orthonormal set.
    """
    if len(components) == 0:
        return 0.0
    gram = components.vectors @ components.vectors.T
    dev = gram - np.eye(len(components))
    if not np.any(np.abs(dev) > 1e-15):
        return 0.0
    return spectral_norm(dev)


def _is_duplicate(v: np.ndarray, others: np.ndarray, dedup_corr: float) -> bool:
    if others.shape[0] == 0:
        return False
    return bool(np.any((others @ v) ** 2 >= dedup_corr))


def full_decompose(t: Tensor4, params: RecoveryParams) -> DecompositionReport:
    """Run the full recovery loop and return all components found.

    Each round preprocesses and clips the working tensor, harvests
    candidates from random contractions, refines them against the clean
    tensor, deduplicates, orthonormalizes the batch, filters by
    <T_clean, b^{x4}> >= (1-6*eps)^2 - eps, and subtracts what survived.
    Terminates after ``max_rounds``, or early when two consecutive rounds
    make no progress (with a warning in the report) or nothing is left
    above the noise floor.
    """
    if params.eps <= 0:
        raise ValueError("full_decompose requires eps > 0")
    d = t.dim
    rng = np.random.default_rng(params.rng_seed)
    t_clean = t.copy()
    t_sq_clean = reshape(t_clean, PLAN_SQUARE)
    state = WorkingState(t_clean, t_clean.copy(), ComponentSet.empty(d))
    dedup_corr = params.resolved_dedup()
    batch_filter = (1.0 - 6.0 * params.eps) ** 2 - params.eps

    warnings: list[str] = []
    rounds = 0
    trials_used = 0
    stalled_rounds = 0
    max_rounds = None

    while True:
        truncated = preprocess(state.t_work, params.eps, rng=rng)
        working_n = _psd_rank(truncated)
        if max_rounds is None:
            max_rounds = params.resolved_max_rounds(max(working_n, 1))
        if working_n == 0:
            break
        clipped = clip_rect(unreshape(truncated, PLAN_SQUARE, d), rng=rng)
        clipped_sq = reshape(clipped, PLAN_SQUARE)

        trials = params.resolved_trials(working_n)
        batch: list[np.ndarray] = []
        for _ in range(trials):
            if len(state.known) + len(batch) >= d:
                break
            cand = _contract(clipped_sq, d, rng)
            for u in (cand.u_left, cand.u_right):
                v = postprocess(
                    t_clean,
                    u,
                    params.eps,
                    accept_margin=params.accept_margin,
                    rng=rng,
                    _t_sq=t_sq_clean,
                )
                if v is None:
                    continue
                if _is_duplicate(v, state.known.vectors, dedup_corr):
                    continue
                if batch and _is_duplicate(v, np.array(batch), dedup_corr):
                    continue
                batch.append(v)
        trials_used += trials
        rounds += 1

        accepted = ComponentSet.empty(d)
        if batch:
            tilde = orthonormalize(ComponentSet(np.array(batch)))
            keep = [
                b
                for b in tilde.vectors
                if quartic_form(t_sq_clean, b) >= batch_filter
            ]
            # no more than d orthonormal vectors can exist
            capacity = d - len(state.known)
            if keep and capacity > 0:
                accepted = ComponentSet(np.array(keep[:capacity]))

        if len(accepted):
            state = subtract_components(state, accepted)
            stalled_rounds = 0
        else:
            state = WorkingState(
                state.t_clean, state.t_work, state.known, state.round_index + 1
            )
            stalled_rounds += 1

        if len(state.known) >= d:
            break
        if stalled_rounds >= 2:
            warnings.append(
                "no progress in two consecutive rounds; returning partial set"
            )
            break
        if rounds >= max_rounds:
            warnings.append(f"round limit {max_rounds} reached")
            break

    known = state.known
    if len(known) >= 2:
        known = orthonormalize(known)
    vectors = np.array([canonical_sign(v) for v in known.vectors]) if len(known) else known.vectors
    scores = np.array([quartic_form(t_sq_clean, v) for v in vectors])
    return DecompositionReport(
        components=ComponentSet(vectors, scores),
        rounds=rounds,
        trials_used=trials_used,
        warnings=warnings,
    )


def _psd_rank(m: MatrixView, tol: float = 1e-12) -> int:
    """Numerical rank of a PSD truncation output; doubles as the working n."""
    if float(np.trace(m)) <= tol:
        return 0
    lam = np.linalg.eigvalsh((m + m.T) / 2)
    return int(np.sum(lam > tol * max(1.0, lam[-1])))
