"""Synthetic instances, the classical Jennrich baseline, scoring, and the
experiment grid runner.

Instances follow the additive model T = sum_i a_i^{x4} + E with Haar-random
orthonormal components and a selectable noise shape, calibrated so the
square unfolding of E has an exact target spectral norm.  The baseline runs
random contractions on the raw tensor with no spectral projections; under
square-unfolding noise of constant norm its rectangular unfoldings blow up
by sqrt(d) and recovery degrades, which is the contrast the grid runner
records.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .decompose import ComponentSet, RecoveryParams, full_decompose, quartic_form
from .errors import ConfigError
from .tensor import (
    PLAN_SQUARE,
    Tensor4,
    canonical_sign,
    reshape,
    sum_outer4,
    symmetrize,
    unreshape,
)

NOISE_KINDS = (
    "none",
    "identity_scaled",
    "random_symmetric",
    "random_dense_tensor",
    "planted",
)


@dataclass(frozen=True)
class NoiseModel:
    """Noise shape and target spectral norm of the {12}{34} unfolding.

    For the ``planted`` kind ``eps`` is instead the cancellation fraction
    parameter: the first ceil(eps^2 * n) signal components are subtracted
    outright, so the calibration invariant does not apply to it.
    """

    kind: str
    eps: float = 0.0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; choose from {NOISE_KINDS}")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")


def haar_orthonormal(rng, d: int, n: int) -> np.ndarray:
    """n Haar-random orthonormal vectors in R^d, one per row."""
    if n > d:
        raise ValueError(f"cannot draw {n} orthonormal vectors in dimension {d}")
    q, r = np.linalg.qr(rng.standard_normal((d, n)))
    q = q * np.sign(np.diag(r))
    return q.T[:n].copy()


def _noise_tensor(rng, d: int, n: int, a: np.ndarray, noise: NoiseModel) -> Optional[Tensor4]:
    if noise.kind == "none" or noise.eps == 0.0:
        return None
    if noise.kind == "identity_scaled":
        return unreshape(noise.eps * np.eye(d * d), PLAN_SQUARE, d)
    if noise.kind == "random_symmetric":
        g = rng.standard_normal((d * d, d * d))
        sym = (g + g.T) / 2
        sym *= noise.eps / np.linalg.norm(sym, 2)
        return unreshape(sym, PLAN_SQUARE, d)
    if noise.kind == "random_dense_tensor":
        e = symmetrize(Tensor4(rng.standard_normal((d,) * 4)))
        scale = np.linalg.norm(reshape(e, PLAN_SQUARE), 2)
        return Tensor4(e.data * (noise.eps / scale), copy=False)
    # planted: cancel the first ceil(eps^2 n) components outright
    k = min(n, max(1, math.ceil(noise.eps**2 * n)))
    return Tensor4(-sum_outer4(a[:k]).data, copy=False)


def gen_instance(
    d: int, n: int, noise: NoiseModel, seed: int
) -> tuple[Tensor4, ComponentSet]:
    """Synthetic T = sum a_i^{x4} + E and its ground truth.

    The noise is scaled so the realized ||E_{12,34}|| equals ``noise.eps``
    to float accuracy (except for the planted kind, see NoiseModel).
    """
    if n > d:
        raise ValueError(f"n={n} components need dimension >= n, got d={d}")
    rng = np.random.default_rng(seed)
    a = haar_orthonormal(rng, d, n)
    t = sum_outer4(a)
    e = _noise_tensor(rng, d, n, a, noise)
    if e is not None:
        t = Tensor4(t.data + e.data, copy=False)
    return t, ComponentSet(a)


def jennrich_baseline(
    t: Tensor4, trials: int, rng, dedup_corr: float = 0.99
) -> ComponentSet:
    """Classical simultaneous-diagonalization baseline.

    Random contractions of the raw tensor (no preprocessing or clipping)
    followed by a dense eigendecomposition; eigenvectors with non-negligible
    eigenvalues are harvested under the same duplicate-rejection rule as the
    pipeline.  Exact for noise-free orthogonal tensors; drowned out once the
    rectangular-unfolding norm of the noise is large.
    """
    d = t.dim
    t_sq = reshape(t, PLAN_SQUARE)
    if not np.any(t_sq):
        return ComponentSet.empty(d)
    found: list[np.ndarray] = []
    for _ in range(trials):
        g = rng.standard_normal(d * d)
        m_g = (g @ t_sq).reshape(d, d)
        sym = (m_g + m_g.T) / 2
        lam, vecs = np.linalg.eigh(sym)
        cut = max(1e-12, 1e-6 * np.max(np.abs(lam)))
        for i in np.argsort(-np.abs(lam)):
            if abs(lam[i]) < cut:
                continue
            v = canonical_sign(vecs[:, i].copy())
            if found and np.any((np.array(found) @ v) ** 2 >= dedup_corr):
                continue
            found.append(v)
    if not found:
        return ComponentSet.empty(d)
    vectors = np.array(found)
    scores = np.array([quartic_form(t_sq, v) for v in vectors])
    return ComponentSet(vectors, scores)


@dataclass
class MatchReport:
    """Greedy sign-invariant matching of recovered components to truth."""

    assignment: list  # (recovered_index, truth_index, corr2) triples
    recovered_total: int
    truth_total: int
    min_corr2: float
    mean_corr2: float

    @property
    def matched(self) -> int:
        return len(self.assignment)

    def to_dict(self) -> dict:
        return {
            "assignment": [[int(i), int(j), float(c)] for i, j, c in self.assignment],
            "recovered_total": self.recovered_total,
            "truth_total": self.truth_total,
            "matched": self.matched,
            "min_corr2": self.min_corr2,
            "mean_corr2": self.mean_corr2,
        }


def score(recovered: ComponentSet, truth: ComponentSet) -> MatchReport:
    """Greedy maximum matching on squared correlations.

    Pairs are taken in decreasing corr^2 = <b, a>^2 order (ties broken by
    index order); the assignment is injective both ways.
    """
    if len(recovered) and recovered.dim != truth.dim:
        raise ValueError("dimension mismatch between recovered and truth")
    if len(recovered) == 0 or len(truth) == 0:
        return MatchReport([], len(recovered), len(truth), 0.0, 0.0)
    corr = (recovered.vectors @ truth.vectors.T) ** 2
    order = sorted(
        ((i, j) for i in range(len(recovered)) for j in range(len(truth))),
        key=lambda ij: (-corr[ij], ij[0], ij[1]),
    )
    used_r: set[int] = set()
    used_t: set[int] = set()
    pairs = []
    for i, j in order:
        if i in used_r or j in used_t:
            continue
        pairs.append((i, j, float(corr[i, j])))
        used_r.add(i)
        used_t.add(j)
        if len(pairs) == min(len(recovered), len(truth)):
            break
    vals = [c for _, _, c in pairs]
    return MatchReport(
        pairs, len(recovered), len(truth), float(min(vals)), float(np.mean(vals))
    )


CSV_COLUMNS = (
    "d",
    "n",
    "eps",
    "noise",
    "seed",
    "algo",
    "recovered",
    "min_corr2",
    "mean_corr2",
    "wall_ms",
)


@dataclass
class ExperimentConfig:
    d: list
    n: list
    eps: list
    noise: list
    seeds: list
    algos: list
    out_dir: Path
    trials_cap: int = 4000
    jennrich_trials: Optional[int] = None
    plots: bool = True
    cells: list = field(default_factory=list)

    def grid(self):
        for d, n, eps, noise, seed in product(
            self.d, self.n, self.eps, self.noise, self.seeds
        ):
            for algo in self.algos:
                yield d, n, eps, noise, seed, algo


def _parse_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        # tomllib reports "... (at line L, column C)" in the message
        raise ConfigError(f"malformed config {path}: {exc}") from exc

    grid = raw.get("grid")
    if grid is None:
        raise ConfigError(f"config {path} is missing the [grid] table")

    def as_list(key, cast):
        val = grid.get(key)
        if val is None:
            raise ConfigError(f"config {path}: [grid] is missing {key!r}")
        if not isinstance(val, list):
            val = [val]
        try:
            return [cast(v) for v in val]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config {path}: bad value for grid.{key}: {exc}") from exc

    algo = grid.get("algo", "both")
    if algo == "both":
        algos = ["pipeline", "jennrich"]
    elif algo in ("pipeline", "jennrich"):
        algos = [algo]
    else:
        raise ConfigError(
            f"config {path}: grid.algo must be 'pipeline', 'jennrich' or 'both'"
        )

    noise = as_list("noise", str)
    for kind in noise:
        if kind not in NOISE_KINDS:
            raise ConfigError(f"config {path}: unknown noise kind {kind!r}")

    run = raw.get("run", {})
    return ExperimentConfig(
        d=as_list("d", int),
        n=as_list("n", int),
        eps=as_list("eps", float) if "eps" in grid else [0.0],
        noise=noise,
        seeds=as_list("seeds", int),
        algos=algos,
        out_dir=Path(run.get("out_dir", "results")),
        trials_cap=int(run.get("trials_cap", 4000)),
        jennrich_trials=(
            int(run["jennrich_trials"]) if "jennrich_trials" in run else None
        ),
        plots=bool(run.get("plots", True)),
    )


def _cell_name(d, n, eps, noise, seed, algo) -> str:
    return f"d{d}_n{n}_eps{eps:g}_{noise}_seed{seed}_{algo}"


def _run_cell(d, n, eps, noise, seed, algo, cfg: ExperimentConfig) -> dict:
    t, truth = gen_instance(d, n, NoiseModel(noise, eps), seed)
    start = time.perf_counter()
    if algo == "pipeline":
        params = RecoveryParams(
            eps=max(eps, 1e-3), trials_cap=cfg.trials_cap, rng_seed=seed
        )
        report = full_decompose(t, params)
        recovered = report.components
        detail = report.to_json_dict()
    else:
        trials = cfg.jennrich_trials
        if trials is None:
            trials = min(int(math.ceil(10 * n * math.log(max(n, 2)))), cfg.trials_cap)
        # same duplicate-rejection rule as the pipeline: 1 - eps
        dedup = min(1.0 - max(eps, 1e-3), 1.0 - 1e-9)
        recovered = jennrich_baseline(
            t, trials, np.random.default_rng(seed), dedup_corr=dedup
        )
        detail = {
            "components": [list(map(float, v)) for v in recovered.vectors],
            "scores": [float(s) for s in (recovered.scores if recovered.scores is not None else [])],
            "trials_used": trials,
        }
    wall_ms = (time.perf_counter() - start) * 1000.0
    match = score(recovered, truth)
    row = {
        "d": d,
        "n": n,
        "eps": eps,
        "noise": noise,
        "seed": seed,
        "algo": algo,
        "recovered": match.matched,
        "min_corr2": match.min_corr2,
        "mean_corr2": match.mean_corr2,
        "wall_ms": wall_ms,
    }
    return {"row": row, "detail": detail, "match": match.to_dict()}


def worker_count() -> int:
    """Worker pool size, capped by the SPECTENSOR_THREADS environment variable."""
    cap = os.environ.get("SPECTENSOR_THREADS")
    workers = os.cpu_count() or 1
    if cap:
        workers = max(1, min(workers, int(cap)))
    return workers


def run_experiment(config_path, out_dir=None) -> dict:
    """Execute a TOML-configured grid and write JSON, CSV, and figures.

    Grid cells run as independent jobs on a bounded worker pool; outputs
    are written in grid order, so results are deterministic per seed
    (wall_ms excepted).  Returns the paths written.
    """
    cfg = _parse_config(config_path)
    if out_dir is not None:
        cfg.out_dir = Path(out_dir)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)

    cells = list(cfg.grid())
    results = []
    if cells:
        with ThreadPoolExecutor(max_workers=worker_count()) as pool:
            results = list(
                pool.map(lambda c: _run_cell(*c, cfg), cells)
            )

    csv_path = cfg.out_dir / "results.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for res in results:
            writer.writerow({k: _csv_cell(res["row"][k]) for k in CSV_COLUMNS})

    json_paths = []
    for cell, res in zip(cells, results):
        name = _cell_name(*cell)
        path = cfg.out_dir / f"{name}.json"
        payload = {"cell": res["row"], "match": res["match"], "result": res["detail"]}
        # wall time stays out of the JSON so reruns are byte-identical
        payload["cell"] = {k: v for k, v in res["row"].items() if k != "wall_ms"}
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
        json_paths.append(path)

    figure_paths = []
    if cfg.plots and results:
        from . import plotting

        figure_paths = plotting.render_experiment_figures(
            [r["row"] for r in results], cfg.out_dir
        )

    return {
        "csv": csv_path,
        "json": json_paths,
        "figures": figure_paths,
        "rows": [r["row"] for r in results],
    }


def _csv_cell(value):
    if isinstance(value, float):
        return repr(value)
    return value
