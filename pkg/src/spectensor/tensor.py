"""Order-4 tensors, mode reshapings, and spectral projection primitives.

A tensor lives in (R^d)^{x4} and is stored as a C-ordered float64 array of
shape (d, d, d, d): the canonical linear order runs the last index fastest.
Matrix views obtained from a reshape plan are plain 2-D float64 ndarrays;
the plan travels separately wherever the provenance matters.

The two projection primitives used throughout the decomposition pipeline are

``psd_truncate``
    (M - eps*Id)_+, i.e. shift all eigenvalues down by eps and zero out the
    negative part.  Equals the Frobenius-nearest PSD matrix of M - eps*Id.
``clip_singular``
    cap all singular values of M at a bound, keeping the singular vectors.

Both primitives, and ``spectral_norm``, run on block subspace power
iteration (``subspace_power_iter``) rather than a full dense decomposition:
only the spectrum above the truncation level is ever computed, and the
clipped result is represented as the original matrix minus the subtracted
SVD excess.  Dense LAPACK decompositions appear only in tests, as
independent oracles.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from .errors import ConvergenceError, PlanError, SymmetryError

# A matrix view of a tensor is just a 2-D float64 array.
MatrixView = np.ndarray

_T4_MAGIC = b"T4v1"

ALL_MODES = (1, 2, 3, 4)


@dataclass(frozen=True)
class ReshapePlan:
    """Ordered bipartition of the modes {1, 2, 3, 4} defining an unfolding.

    ``row_modes`` index the rows of the resulting matrix and ``col_modes``
    the columns; within each group the first listed mode is the most
    significant digit.  Order is significant: ((1,2),(3,4)) and
    ((2,1),(3,4)) are different unfoldings.
    """

    row_modes: tuple[int, ...]
    col_modes: tuple[int, ...]

    def __post_init__(self):
        rows = tuple(self.row_modes)
        cols = tuple(self.col_modes)
        object.__setattr__(self, "row_modes", rows)
        object.__setattr__(self, "col_modes", cols)
        if not rows or not cols:
            raise PlanError("both mode groups must be non-empty")
        combined = rows + cols
        if sorted(combined) != sorted(ALL_MODES):
            raise PlanError(
                f"modes {combined} do not form a bipartition of {ALL_MODES}"
            )

    @property
    def axes(self) -> tuple[int, ...]:
        """0-based axis permutation realizing this unfolding."""
        return tuple(m - 1 for m in self.row_modes + self.col_modes)

    def shape(self, dim: int) -> tuple[int, int]:
        return dim ** len(self.row_modes), dim ** len(self.col_modes)


# The unfoldings the pipeline uses by name.
PLAN_SQUARE = ReshapePlan((1, 2), (3, 4))
PLAN_SIGMA = ReshapePlan((1, 3), (2, 4))
PLAN_TALL_123_4 = ReshapePlan((1, 2, 3), (4,))
PLAN_TALL_124_3 = ReshapePlan((1, 2, 4), (3,))


class Tensor4:
    """Dense order-4 tensor over R^d with all entries finite."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray, copy: bool = True):
        arr = np.array(data, dtype=np.float64, copy=copy)
        if arr.ndim != 4 or len(set(arr.shape)) != 1:
            raise ValueError(f"expected shape (d, d, d, d), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor entries must be finite")
        self.data = arr

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @classmethod
    def zeros(cls, dim: int) -> "Tensor4":
        return cls(np.zeros((dim,) * 4), copy=False)

    def reshape(self, plan: ReshapePlan) -> MatrixView:
        return reshape(self, plan)

    def frobenius(self) -> float:
        return float(np.linalg.norm(self.data))

    def copy(self) -> "Tensor4":
        return Tensor4(self.data, copy=True)

    def save(self, path) -> None:
        write_t4(path, self)

    @classmethod
    def load(cls, path) -> "Tensor4":
        return read_t4(path)

    def __repr__(self):
        return f"Tensor4(dim={self.dim})"


def reshape(t: Tensor4, plan: ReshapePlan) -> MatrixView:
    """Unfold ``t`` into the d^|A|-by-d^|B| matrix given by ``plan``.

    The entry at row index formed from the row-mode digits and column index
    formed from the column-mode digits equals ``t[i, j, k, l]``; the map is
    a bijection on entries.  No data is copied when strides permit.
    """
    d = t.dim
    return t.data.transpose(plan.axes).reshape(plan.shape(d))


def unreshape(m: MatrixView, plan: ReshapePlan, dim: int) -> Tensor4:
    """Inverse of :func:`reshape`: rebuild the tensor from an unfolding."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != plan.shape(dim):
        raise PlanError(f"matrix shape {m.shape} does not match plan/dim {dim}")
    cube = m.reshape((dim,) * 4)
    inverse = np.argsort(plan.axes)
    return Tensor4(cube.transpose(tuple(inverse)))


def frobenius(x) -> float:
    """Frobenius norm of a Tensor4 or matrix view."""
    if isinstance(x, Tensor4):
        return x.frobenius()
    return float(np.linalg.norm(np.asarray(x)))


def symmetrize(t: Tensor4) -> Tensor4:
    """Average over all 24 mode permutations.

    Computed as the mean over each index orbit and scattered back, so every
    position in an orbit holds the identical float: the output is exactly
    invariant under all permutations, not just to roundoff.
    """
    d = t.dim
    idx = np.indices((d,) * 4).reshape(4, -1)
    keys = np.sort(idx, axis=0)
    flat = ((keys[0] * d + keys[1]) * d + keys[2]) * d + keys[3]
    sums = np.zeros(d**4)
    counts = np.zeros(d**4)
    np.add.at(sums, flat, t.data.ravel())
    np.add.at(counts, flat, 1.0)
    means = sums / np.maximum(counts, 1.0)
    return Tensor4(means[flat].reshape((d,) * 4), copy=False)


def outer4(v: np.ndarray) -> Tensor4:
    """Rank-1 tensor v (x) v (x) v (x) v."""
    v = np.asarray(v, dtype=np.float64)
    return Tensor4(np.einsum("i,j,k,l->ijkl", v, v, v, v), copy=False)


def sum_outer4(vectors: np.ndarray) -> Tensor4:
    """Sum of v (x) v (x) v (x) v over the rows of ``vectors``."""
    vs = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if vs.shape[0] == 0:
        raise ValueError("need at least one vector")
    return Tensor4(np.einsum("ni,nj,nk,nl->ijkl", vs, vs, vs, vs), copy=False)


def canonical_sign(v: np.ndarray) -> np.ndarray:
    """Flip ``v`` so its largest-magnitude entry is positive."""
    i = int(np.argmax(np.abs(v)))
    return -v if v[i] < 0 else v


@dataclass
class SpectralDecomp:
    """Top part of a spectrum: descending values and orthonormal vectors.

    ``left[:, i]`` and ``right[:, i]`` are the singular vectors for
    ``values[i]``; for symmetric input they agree up to sign.  ``residuals``
    holds the final ``||M v - s u||`` per triplet.
    """

    values: np.ndarray
    left: np.ndarray
    right: np.ndarray
    iterations: int = 0
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    converged: bool = True


def _orth(m: np.ndarray) -> np.ndarray:
    q, _ = np.linalg.qr(m)
    return q


# Triplets whose value sits within this band above a truncation floor carry
# weight (value - floor) of at most a tenth of the floor in the output; they
# are exempt from the residual requirement so near-continuous noise tails at
# the floor cannot stall the iteration.  A full block sidesteps the band
# entirely (its first Rayleigh-Ritz pass is exact), which keeps the small
# oracle-checked cases at machine precision.
def _floor_band(floor: float, scale: float) -> float:
    return 0.1 * floor + 1e-4 * scale


def _block_iterate(m, block, tol, max_iters, rng, floor=None, v0=None):
    """Two-sided block power iteration with Rayleigh-Ritz extraction.

    Returns a SpectralDecomp for the top ``block`` singular triplets of
    ``m``.  When ``floor`` is None every triplet must meet the residual
    threshold ``tol * sigma_1``; otherwise only triplets clearly above the
    floor band must.  ``v0`` warm-starts the right subspace.
    """
    rows, cols = m.shape
    start = rng.standard_normal((cols, block))
    if v0 is not None:
        take = min(v0.shape[1], block)
        start[:, :take] = v0[:, :take]
    v = _orth(start)
    best = None
    for it in range(1, max_iters + 1):
        u = _orth(m @ v)
        w = m.T @ u
        v = _orth(w)
        z = m @ v
        core = u.T @ z
        cu, s, cvt = np.linalg.svd(core)
        ur = u @ cu
        vr = v @ cvt.T
        # residuals without extra big multiplies: m @ vr = z @ cvt.T,
        # m.T @ ur = w @ cu
        r1 = z @ cvt.T - ur * s
        r2 = w @ cu - vr * s
        res = np.maximum(np.linalg.norm(r1, axis=0), np.linalg.norm(r2, axis=0))
        best = SpectralDecomp(s, ur, vr, it, res, converged=False)
        scale = s[0] if s[0] > 0 else 1.0
        need = res <= tol * scale
        if floor is not None:
            need = need | (s <= floor + _floor_band(floor, scale))
        if np.all(need):
            best.converged = True
            return best
    return best


def subspace_power_iter(
    m: MatrixView,
    k: int,
    tol: float = 1e-9,
    max_iters: int = 500,
    rng=None,
    oversample: int = 8,
) -> SpectralDecomp:
    """Top-k singular triplets of ``m`` by block subspace power iteration.

    Deterministic given ``rng``; the block is orthonormalized on every
    iteration and carries ``oversample`` extra vectors beyond ``k``.  Each
    returned triplet satisfies ``||M v - s u|| <= tol * s_1``, and vectors
    are signed so the largest-magnitude entry of the left vector is
    positive.  Raises :class:`ConvergenceError` (carrying the best iterate)
    if the residuals do not reach the threshold within ``max_iters``.
    """
    m = np.asarray(m, dtype=np.float64)
    rows, cols = m.shape
    kmax = min(rows, cols)
    if not 1 <= k <= kmax:
        raise ValueError(f"k={k} out of range for {m.shape} matrix")
    if rng is None:
        rng = np.random.default_rng(0)
    # a full block is exact after one Rayleigh-Ritz pass, so small problems
    # skip the iteration entirely
    block = kmax if kmax <= 32 else min(kmax, k + oversample)
    dec = _block_iterate(m, block, tol, max_iters, rng)
    converged = dec.converged or bool(np.all(dec.residuals[:k] <= tol * max(dec.values[0], 1e-300)))
    trimmed = SpectralDecomp(
        dec.values[:k].copy(),
        dec.left[:, :k].copy(),
        dec.right[:, :k].copy(),
        dec.iterations,
        dec.residuals[:k].copy(),
        converged,
    )
    for i in range(k):
        j = int(np.argmax(np.abs(trimmed.left[:, i])))
        if trimmed.left[j, i] < 0:
            trimmed.left[:, i] = -trimmed.left[:, i]
            trimmed.right[:, i] = -trimmed.right[:, i]
    if not converged:
        raise ConvergenceError(
            f"subspace power iteration did not converge in {max_iters} "
            f"iterations (worst residual {trimmed.residuals.max():.3e})",
            best=trimmed,
        )
    return trimmed


# Tight internal tolerance for the projection primitives: their contracts
# are checked against dense oracles at 1e-10.  Stages that cannot converge
# within the iteration budget escalate to a bigger block instead of
# spinning; a full block is exact in one pass.
_CAPTURE_TOL = 1e-13
_CAPTURE_ITERS = 250


def _deflated_norm_small(m, dec, kept, floor, rng):
    """Certify that nothing above the floor band remains beyond ``kept``.

    Ritz estimates approach singular values from below, so a probe that
    stays inside the band is evidence (not proof) of a complete capture;
    large misses are what matters and those surface quickly.
    """
    if np.any(kept):
        r = m - (dec.left[:, kept] * dec.values[kept]) @ dec.right[:, kept].T
    else:
        r = m
    kmax = min(r.shape)
    probe = _block_iterate(r, min(kmax, 6), 1e-2, 200, rng)
    slack = _floor_band(floor, dec.values[0]) + 1e-12 * max(dec.values[0], 1.0)
    return probe.values[0] <= floor + slack


def _capture_above(m, floor, rng):
    """Converged singular triplets covering every value above ``floor``.

    Grows the block until the smallest captured singular value dips into
    the floor band (or the block is full, where Rayleigh-Ritz is exact),
    then verifies the capture with a deflated norm probe.  Values inside
    the band may carry loose vectors; their output weight is negligible.
    When the spectrum above the floor is plainly not low-rank the growth
    jumps straight to the full block: one exact pass beats iterating on a
    near-continuous spectrum.
    """
    rows, cols = m.shape
    kmax = min(rows, cols)
    block = kmax if kmax <= 32 else min(kmax, 16)
    warm = None
    while True:
        dec = _block_iterate(
            m, block, _CAPTURE_TOL, _CAPTURE_ITERS, rng, floor=floor, v0=warm
        )
        full = block == kmax
        band = _floor_band(floor, dec.values[0] if dec.values[0] > 0 else 1.0)
        if dec.converged and (full or dec.values[-1] <= floor + band):
            kept = dec.values > floor
            if full or _deflated_norm_small(m, dec, kept, floor, rng):
                return dec
        if full:
            raise ConvergenceError(
                "spectral capture failed to converge on full block", best=dec
            )
        block = kmax if block >= kmax // 4 else min(2 * block, kmax)
        warm = dec.right


def _check_symmetric(m: np.ndarray) -> np.ndarray:
    """Validate symmetry to tolerance and return the symmetrized matrix.

    Empirical moment matrices are symmetric only up to sampling noise, so
    inputs within ``1e-8 * ||M||_F`` of symmetric are accepted and averaged.
    """
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise SymmetryError(f"expected a square matrix, got shape {m.shape}")
    scale = np.linalg.norm(m)
    asym = np.max(np.abs(m - m.T)) if m.size else 0.0
    # absolute floor so numerically-zero matrices with roundoff dust pass
    if asym > 1e-8 * scale + 1e-12:
        raise SymmetryError(
            f"matrix is not symmetric: max asymmetry {asym:.3e} "
            f"exceeds 1e-8 * ||M||_F = {1e-8 * scale:.3e}"
        )
    return (m + m.T) / 2.0


def psd_truncate(m: MatrixView, eps: float, rng=None) -> MatrixView:
    """(M - eps*Id)_+ : eigenvalues shifted down by eps, negatives zeroed.

    Input must be symmetric up to ``1e-8 * ||M||_F`` and is symmetrized
    before decomposition.  The result is PSD with rank at most the number
    of eigenvalues exceeding ``eps``, and equals the Frobenius-nearest PSD
    matrix of ``M - eps*Id``.
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    sym = _check_symmetric(np.asarray(m, dtype=np.float64))
    if rng is None:
        rng = np.random.default_rng(0)
    if not np.any(sym):
        return np.zeros_like(sym)
    # Capture the spectrum down to |lambda| <= eps, then separate signs by
    # an exact Rayleigh-Ritz eigensolve in the captured span.
    dec = _capture_above(sym, eps, rng)
    span = _orth(np.concatenate([dec.left, dec.right], axis=1))
    core = span.T @ sym @ span
    lam, y = np.linalg.eigh((core + core.T) / 2.0)
    keep = lam > eps
    if not np.any(keep):
        return np.zeros_like(sym)
    vecs = span @ y[:, keep]
    out = (vecs * (lam[keep] - eps)) @ vecs.T
    return (out + out.T) / 2.0


def clip_singular(m: MatrixView, bound: float, rng=None) -> MatrixView:
    """Cap the singular values of ``m`` at ``bound``.

    Values already at or below the bound are untouched; the output is the
    input minus the subtracted SVD excess over the bound, so its spectral
    norm is at most ``bound`` (to solver tolerance).
    """
    if bound <= 0:
        raise ValueError("bound must be positive")
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix entries must be finite")
    if not np.any(m):
        return m.copy()
    if rng is None:
        rng = np.random.default_rng(0)
    dec = _capture_above(m, bound, rng)
    excess = dec.values - bound
    over = excess > 0
    if not np.any(over):
        return m.copy()
    u = dec.left[:, over]
    v = dec.right[:, over]
    return m - (u * excess[over]) @ v.T


def spectral_norm(m: MatrixView, rng=None) -> float:
    """Largest singular value, via rank-1 subspace power iteration.

    A residual of 1e-8 puts the value itself well below 1e-9 error
    (Ritz values converge quadratically in the residual).
    """
    m = np.asarray(m, dtype=np.float64)
    if not np.any(m):
        return 0.0
    dec = subspace_power_iter(
        m, 1, tol=1e-8, max_iters=5000, rng=rng, oversample=12
    )
    return float(dec.values[0])


def write_t4(path, t: Tensor4) -> None:
    """Write the ``.t4`` binary format: magic, u64 d, d^4 little-endian f64."""
    with open(path, "wb") as fh:
        fh.write(_T4_MAGIC)
        fh.write(struct.pack("<Q", t.dim))
        fh.write(t.data.astype("<f8").tobytes(order="C"))


def read_t4(path) -> Tensor4:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _T4_MAGIC:
            raise ValueError(f"not a .t4 file (magic {magic!r})")
        (dim,) = struct.unpack("<Q", fh.read(8))
        raw = fh.read()
    expected = dim**4 * 8
    if len(raw) != expected:
        raise ValueError(
            f"truncated .t4 file: expected {expected} payload bytes, got {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f8").reshape((dim,) * 4)
    return Tensor4(data.astype(np.float64))


def write_mtx(path, m: MatrixView) -> None:
    """Dense MatrixMarket-style text dump of a matrix view, for debugging."""
    m = np.asarray(m, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix array real general\n")
        fh.write(f"{m.shape[0]} {m.shape[1]}\n")
        for j in range(m.shape[1]):
            for i in range(m.shape[0]):
                fh.write(f"{float(m[i, j])!r}\n")
