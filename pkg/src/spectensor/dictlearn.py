"""Orthonormal dictionary learning from 4th-moment tensors.

Samples y = A x with sparse coefficient vectors x feed a streaming
estimator of the 4th moment E[y^{x4}].  For admissible coefficient
distributions (unit 4th moments, pairwise 2-2 moments at most a tau
fraction of the kurtosis, vanishing non-square 4th moments) the moment
splits into the wanted signal sum_i a_i^{x4} plus three structured cross
terms.  ``clean_moment`` removes them with two PSD truncations separated
by the mode swap {1,2}{3,4} -> {1,3}{2,4}, which fixes the signal while
flattening the one problematic low-rank cross term; the cleaned tensor
then goes through the standard decomposition pipeline, and each recovered
column is refined once against the raw scaled moment.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .decompose import (
    ComponentSet,
    DecompositionReport,
    RecoveryParams,
    full_decompose,
    orthonormalize,
    postprocess,
    quartic_form,
)
from .errors import DegeneracyError
from .tensor import (
    PLAN_SIGMA,
    PLAN_SQUARE,
    MatrixView,
    Tensor4,
    canonical_sign,
    psd_truncate,
    reshape,
    spectral_norm,
    symmetrize,
    unreshape,
)

_SMP_MAGIC = b"SMP1"

# Upper limit on admissible pairwise correlation; the theory needs a small
# universal constant and past ~0.25 the cleaned signal drowns at desk scale.
TAU_MAX = 0.25


@dataclass(frozen=True)
class NiceDistSpec:
    """Sparse coefficient model: supports of density p, signed spikes.

    A coordinate in the support takes value +-p^{-1/4}, which makes
    E[x_i^4] = 1 exactly.  With independent supports E[x_i^2 x_j^2] = p,
    so ``tau`` defaults to p.  ``support_sampler(rng, n, size)`` may
    replace the independent Bernoulli supports with any correlated scheme
    satisfying Pr[j in S | i in S] <= tau.
    """

    n: int
    p: float
    tau: Optional[float] = None
    kurtosis_uniform: bool = True
    support_sampler: Optional[Callable] = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be positive")
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"p must be in (0, 1], got {self.p}")
        if self.tau is not None and not 0.0 <= self.tau < 1.0:
            raise ValueError("tau must be in [0, 1)")

    @property
    def magnitude(self) -> float:
        return self.p ** (-0.25)

    @property
    def pairwise_cap(self) -> float:
        return self.p if self.tau is None else self.tau


def sample_nice(spec: NiceDistSpec, rng, size: Optional[int] = None) -> np.ndarray:
    """Draw coefficient vectors: shape (n,) or (size, n)."""
    shape = (spec.n,) if size is None else (size, spec.n)
    if spec.support_sampler is not None:
        mask = np.asarray(spec.support_sampler(rng, spec.n, size), dtype=bool)
        if mask.shape != shape:
            raise ValueError(f"support sampler returned shape {mask.shape}")
    else:
        mask = rng.random(shape) < spec.p
    signs = rng.integers(0, 2, size=shape) * 2 - 1
    return mask * signs * spec.magnitude


@dataclass
class MomentEstimate:
    """Running mean of y^{x4}, exactly symmetrized over mode permutations.

    ``scale`` is the kurtosis normalizer (estimate of E[x_1^4] in the
    sample's units) once known; None until estimated.
    """

    tensor: Tensor4
    sample_count: int
    scale: Optional[float] = None

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")


class MomentAccumulator:
    """Mergeable streaming accumulator for the d^4 moment mean.

    Batch sums are combined pairwise (a binary-counter stack), so a run
    over 10^6 samples loses no more precision than a balanced tree sum.
    Partial accumulators over sample shards merge by pushing their stacks.
    """

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self._stack: list[tuple[int, int, np.ndarray]] = []

    @property
    def count(self) -> int:
        return sum(c for _, c, _ in self._stack)

    def update(self, batch: np.ndarray) -> None:
        batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
        if batch.shape[1] != self.dim:
            raise ValueError(
                f"sample dimension {batch.shape[1]} != accumulator dim {self.dim}"
            )
        if batch.shape[0] == 0:
            return
        z = (batch[:, :, None] * batch[:, None, :]).reshape(batch.shape[0], -1)
        self._push(0, batch.shape[0], z.T @ z)

    def merge(self, other: "MomentAccumulator") -> None:
        if other.dim != self.dim:
            raise ValueError("dimension mismatch in accumulator merge")
        for level, cnt, part in other._stack:
            self._push(level, cnt, part.copy())

    def _push(self, level: int, cnt: int, part: np.ndarray) -> None:
        while self._stack and self._stack[-1][0] == level:
            l0, c0, p0 = self._stack.pop()
            part = p0 + part
            cnt += c0
            level += 1
        self._stack.append((level, cnt, part))

    def finalize(self) -> MomentEstimate:
        if not self._stack:
            raise ValueError("no samples accumulated")
        total = self._stack[0][2].copy()
        for _, _, part in self._stack[1:]:
            total += part
        mean_sq = total / self.count
        t = unreshape(mean_sq, PLAN_SQUARE, self.dim)
        return MomentEstimate(symmetrize(t), self.count)


def empirical_moment4(samples, chunk: int = 8192) -> MomentEstimate:
    """Mean of y^{x4} over the samples, symmetrized.

    ``samples`` is an (m, d) array or an iterable of (b, d) batches; the
    pass is single-sweep with constant memory beyond the d^4 accumulator.
    """
    if isinstance(samples, np.ndarray):
        samples = np.atleast_2d(samples)
        acc = MomentAccumulator(samples.shape[1])
        for start in range(0, samples.shape[0], chunk):
            acc.update(samples[start : start + chunk])
    else:
        acc = None
        for batch in samples:
            batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
            if acc is None:
                acc = MomentAccumulator(batch.shape[1])
            acc.update(batch)
        if acc is None:
            raise ValueError("no samples provided")
    return acc.finalize()


def reshape_sigma(m: MatrixView) -> MatrixView:
    """The mode swap {1,2}{3,4} -> {1,3}{2,4} on a square d^2 x d^2 view.

    A pure entry permutation: Frobenius-preserving, involutive, fixes every
    a^{x4}, and maps (a_i^{x2})(a_j^{x2})^T to a_i a_i^T (x) a_j a_j^T.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got {m.shape}")
    d = math.isqrt(m.shape[0])
    if d * d != m.shape[0]:
        raise ValueError(f"side {m.shape[0]} is not a perfect square")
    return m.reshape(d, d, d, d).transpose(0, 2, 1, 3).reshape(m.shape)


def clean_moment(m, eps: float, rng=None) -> Tensor4:
    """Two-stage moment cleaning: truncate, swap modes, truncate again.

    ``eps`` should be 3*alpha where alpha bounds both the sampling error
    and the pairwise-to-kurtosis moment ratio; the inner truncation after
    the mode swap runs at eps/3 = alpha.  On admissible inputs the output
    is within 9*alpha*sqrt(n) of the kurtosis-weighted signal in Frobenius
    norm.
    """
    tensor = m.tensor if isinstance(m, MomentEstimate) else m
    d = tensor.dim
    t_sq = reshape(tensor, PLAN_SQUARE)
    first = psd_truncate(t_sq, eps, rng=rng)
    # Re-symmetrize between stages: exact truncation preserves the tensor
    # symmetries, but solver slack at the truncation boundary need not, and
    # projecting back onto the symmetric subspace only moves the tensor
    # closer to the (symmetric) signal.
    t1 = symmetrize(unreshape(first, PLAN_SQUARE, d))
    swapped = reshape_sigma(reshape(t1, PLAN_SQUARE))
    second = psd_truncate(swapped, eps / 3.0, rng=rng)
    return symmetrize(unreshape(second, PLAN_SIGMA, d))


def cross_term_norms(a, x2x2: np.ndarray, rng=None) -> tuple[float, float]:
    """Spectral norms of the two bounded cross-term matrices.

    For orthonormal components a_i and a pairwise moment table c_ij =
    E[x_i^2 x_j^2], computes || sum_{i != j} c_ij a_i a_i^T (x) a_j a_j^T ||
    and || sum_{i != j} c_ij a_j a_i^T (x) a_i a_j^T ||; both are at most
    max c_ij relative to the kurtosis.
    """
    vecs = a.vectors if isinstance(a, ComponentSet) else np.atleast_2d(a)
    n, d = vecs.shape
    c = np.asarray(x2x2, dtype=np.float64)
    if c.shape != (n, n):
        raise ValueError(f"pair-moment table must be {n}x{n}, got {c.shape}")
    if n == 1:
        return 0.0, 0.0
    term1 = np.zeros((d * d, d * d))
    term2 = np.zeros((d * d, d * d))
    outers = [np.outer(vecs[i], vecs[i]) for i in range(n)]
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            term1 += c[i, j] * np.kron(outers[i], outers[j])
            term2 += c[i, j] * np.kron(
                np.outer(vecs[j], vecs[i]), np.outer(vecs[i], vecs[j])
            )
    return spectral_norm(term1, rng=rng), spectral_norm(term2, rng=rng)


@dataclass
class WhiteningState:
    """Empirical covariance, its inverse square root, and conditioning."""

    cov: np.ndarray
    inv_sqrt: np.ndarray
    condition: float

    def identity_residual(self) -> float:
        d = self.cov.shape[0]
        return float(
            np.linalg.norm(self.inv_sqrt @ self.cov @ self.inv_sqrt - np.eye(d), 2)
        )


def whitening_from_cov(cov: np.ndarray) -> WhiteningState:
    """Inverse square root of a covariance matrix, with degeneracy check."""
    cov = np.asarray(cov, dtype=np.float64)
    cov = (cov + cov.T) / 2
    lam, u = np.linalg.eigh(cov)
    if lam[0] <= 1e-12 * max(lam[-1], 1e-300):
        raise DegeneracyError(
            f"covariance is rank deficient (smallest eigenvalue {lam[0]:.3e})"
        )
    inv_sqrt = (u / np.sqrt(lam)) @ u.T
    return WhiteningState(cov, inv_sqrt, float(lam[-1] / lam[0]))


def whiten(samples: np.ndarray) -> tuple[WhiteningState, np.ndarray]:
    """Whiten samples by the empirical covariance inverse square root.

    With y = A x and uniform E[x_i^2], the transformed dictionary has
    near-orthonormal columns once the covariance estimate is good.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    m, d = samples.shape
    if m < d:
        raise DegeneracyError(f"need at least d={d} samples to whiten, got {m}")
    state = whitening_from_cov(samples.T @ samples / m)
    return state, samples @ state.inv_sqrt


def dict_postprocess(m_scaled: Tensor4, u: np.ndarray, rng=None) -> np.ndarray:
    """Refine a candidate against the scaled raw moment tensor.

    Same mechanics as the pipeline postprocessing, run with error parameter
    1/2 (whose acceptance check is vacuous for a PSD moment); for uniform
    kurtosis and pairwise cap alpha the output satisfies
    <v, a_i>^2 >= 1 - 16*alpha whenever <u, a_i>^2 >= 0.99.
    """
    v = postprocess(m_scaled, u, eps=0.5, rng=rng)
    return u if v is None else v


@dataclass
class DictionaryReport:
    """Outcome of dictionary learning: columns plus run accounting."""

    components: ComponentSet
    kurtosis_scale: float
    decomposition: DecompositionReport
    warnings: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        scores = self.components.scores
        return {
            "components": [list(map(float, v)) for v in self.components.vectors],
            "scores": [] if scores is None else [float(s) for s in scores],
            "kurtosis_scale": float(self.kurtosis_scale),
            "rounds": self.decomposition.rounds,
            "trials_used": self.decomposition.trials_used,
            "warnings": list(self.warnings) + list(self.decomposition.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)


def kurtosis_scale_estimate(m_sq: MatrixView) -> float:
    """Robust signal-scale estimate from the moment unfolding spectrum.

    The true normalizer E[x_1^4] is not identifiable without the
    dictionary, so take the median of the eigenvalues within a factor 4 of
    the top one: the signal block sits there for pairwise caps up to
    roughly n*tau ~ 1.5, and the median shrugs off the single large
    cross-term spike.
    """
    lam = np.linalg.eigvalsh((m_sq + m_sq.T) / 2)
    top = lam[-1]
    if top <= 0:
        raise ValueError("moment unfolding has no positive spectrum")
    signal = lam[lam >= 0.25 * top]
    return float(np.median(signal))


def learn_dictionary_from_moment(
    moment: MomentEstimate,
    tau: float,
    params: Optional[RecoveryParams] = None,
    alpha: Optional[float] = None,
    scale: Optional[float] = None,
) -> DictionaryReport:
    """Dictionary recovery given a (possibly exact) 4th-moment estimate."""
    if not 0.0 <= tau < TAU_MAX:
        raise ValueError(
            f"tau must be in [0, {TAU_MAX}) for recovery to be possible, got {tau}"
        )
    warnings: list[str] = []
    d = moment.tensor.dim
    m_sq = reshape(moment.tensor, PLAN_SQUARE)
    s_hat = kurtosis_scale_estimate(m_sq) if scale is None else float(scale)
    if scale is None:
        warnings.append(f"kurtosis scale estimated from spectrum: {s_hat:.6g}")
    a = tau if alpha is None else float(alpha)

    scaled = Tensor4(moment.tensor.data / s_hat, copy=False)
    cleaned = clean_moment(scaled, 3.0 * max(a, 1e-12))

    if params is None:
        params = RecoveryParams(eps=min(max(3.0 * a, 1e-3), 0.25))
    report = full_decompose(cleaned, params)

    rng = np.random.default_rng(params.rng_seed + 1)
    refined: list[np.ndarray] = []
    dedup = params.resolved_dedup()
    for b in report.components.vectors:
        if len(refined) >= d:
            break
        v = canonical_sign(dict_postprocess(scaled, b, rng=rng))
        if refined and np.any((np.array(refined) @ v) ** 2 >= dedup):
            continue
        refined.append(v)

    if len(refined) >= 2:
        final = orthonormalize(ComponentSet(np.array(refined)))
        vectors = np.array([canonical_sign(v) for v in final.vectors])
    elif refined:
        vectors = np.array(refined)
    else:
        vectors = np.zeros((0, d))

    cleaned_sq = reshape(cleaned, PLAN_SQUARE)
    scores = np.array([quartic_form(cleaned_sq, v) for v in vectors])
    return DictionaryReport(
        components=ComponentSet(vectors, scores),
        kurtosis_scale=s_hat,
        decomposition=report,
        warnings=warnings,
    )


def learn_dictionary(
    samples: np.ndarray,
    tau: float,
    params: Optional[RecoveryParams] = None,
    whiten_first: bool = False,
    alpha: Optional[float] = None,
    scale: Optional[float] = None,
    sample_floor: Optional[int] = None,
    chunk: int = 8192,
) -> DictionaryReport:
    """End-to-end dictionary learning from samples y = A x.

    Pipeline: optional whitening, streaming 4th-moment estimation,
    kurtosis normalization, moment cleaning, tensor decomposition, and a
    final refinement of every output column against the raw scaled moment.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    m, d = samples.shape
    warnings: list[str] = []
    floor = 10 * d * d if sample_floor is None else sample_floor
    if m < floor:
        warnings.append(
            f"only {m} samples for dimension {d}; below the configured floor {floor}"
        )
    if whiten_first:
        state, samples = whiten(samples)
        warnings.append(f"whitened with covariance condition number {state.condition:.3g}")
    moment = empirical_moment4(samples, chunk=chunk)
    report = learn_dictionary_from_moment(
        moment, tau, params=params, alpha=alpha, scale=scale
    )
    report.warnings = warnings + report.warnings
    return report


def write_smp(path, samples: np.ndarray) -> None:
    """Write the ``.smp`` format: magic, u64 d, u64 m, m x d float64 rows."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    m, d = samples.shape
    with open(path, "wb") as fh:
        fh.write(_SMP_MAGIC)
        fh.write(struct.pack("<QQ", d, m))
        fh.write(samples.astype("<f8").tobytes(order="C"))


def read_smp(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _SMP_MAGIC:
            raise ValueError(f"not a .smp file (magic {magic!r})")
        d, m = struct.unpack("<QQ", fh.read(16))
        raw = fh.read()
    expected = d * m * 8
    if len(raw) != expected:
        raise ValueError(
            f"truncated .smp file: expected {expected} payload bytes, got {len(raw)}"
        )
    return np.frombuffer(raw, dtype="<f8").reshape(m, d).astype(np.float64)
