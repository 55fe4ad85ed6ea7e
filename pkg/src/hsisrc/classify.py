"""Residual-based classification rules and full-image orchestration.

A block of neighboring pixels is coded against the class-structured
dictionary under the configured prior; the center pixel takes the class
whose sub-dictionary leaves the minimum total reconstruction residual.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import (
    CoefficientMatrix,
    Coord,
    Dictionary,
    HsiCube,
    LabelMap,
    NeighborhoodBlock,
    PriorKind,
    PriorSpec,
    extract_window,
)
from .solvers import (
    SolverError,
    SolverParams,
    SolverReport,
    admm_solve,
    factor_context,
    fss_solve,
    sparsa_solve,
)

log = logging.getLogger(__name__)

SOLVERS = ("admm", "sparsa", "fss")
FSS_KINDS = frozenset({PriorKind.L1, PriorKind.LAPLACIAN})


@dataclass(frozen=True, eq=False)
class LaplacianGraph:
    """Pixel-similarity graph with its normalized symmetric Laplacian.

    L = I - D^(-1/2) W D^(-1/2); W is symmetric, nonnegative, zero-diagonal.
    """

    weights: np.ndarray
    degrees: np.ndarray
    laplacian: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError("weight matrix must be square")
        if np.any(w < 0):
            raise ValueError("similarities must be nonnegative")
        if np.max(np.abs(np.diag(w)), initial=0.0) > 0:
            raise ValueError("weight matrix must have a zero diagonal")
        if np.max(np.abs(w - w.T)) > 1e-10:
            raise ValueError("weight matrix must be symmetric")

    @classmethod
    def from_weights(cls, w: np.ndarray) -> "LaplacianGraph":
        w = np.asarray(w, dtype=np.float64)
        degrees = w.sum(axis=1)
        # isolated vertices keep a unit degree so L stays finite
        safe = np.where(degrees > 0, degrees, 1.0)
        inv_sqrt = 1.0 / np.sqrt(safe)
        lap = np.eye(w.shape[0]) - (inv_sqrt[:, None] * w) * inv_sqrt[None, :]
        lap = 0.5 * (lap + lap.T)
        return cls(w, degrees, lap)

    @cached_property
    def eig(self):
        """Eigendecomposition of L, cached for reuse across solver iterations."""
        return np.linalg.eigh(self.laplacian)

    @property
    def n_vertices(self) -> int:
        return self.weights.shape[0]


def build_similarity_weights(y, sigma: float) -> LaplacianGraph:
    """Gaussian-kernel similarities between block pixels.

    w_ij = exp(-||y_i - y_j||^2 / (2 sigma^2 m)) with m the median squared
    off-diagonal pairwise distance, making the kernel scale-adaptive.
    """
    ymat = y.spectra if isinstance(y, NeighborhoodBlock) else np.asarray(y, dtype=np.float64)
    t_cols = ymat.shape[1]
    if t_cols < 2:
        raise ValueError("similarity graph needs at least two pixels")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    sq = np.sum(ymat * ymat, axis=0)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (ymat.T @ ymat)
    d2 = np.maximum(d2, 0.0)
    np.fill_diagonal(d2, 0.0)
    off = d2[~np.eye(t_cols, dtype=bool)]
    scale = float(np.median(off))
    if scale <= 0:
        scale = 1.0  # all pixels coincide; any scale gives unit weights
    w = np.exp(-d2 / (2.0 * sigma * sigma * scale))
    np.fill_diagonal(w, 0.0)
    return LaplacianGraph.from_weights(w)


@dataclass(frozen=True)
class ClassifierConfig:
    """Prior, window size, solver choice, and the similarity kernel width."""

    prior: PriorSpec
    window: int = 9
    solver: str = "admm"
    weight_kernel_sigma: float = 1.0

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be an odd positive side length")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}")
        if self.solver == "fss" and self.prior.kind not in FSS_KINDS:
            raise ValueError(
                f"feature-sign search only supports priors "
                f"{sorted(k.value for k in FSS_KINDS)}, not {self.prior.kind.value}"
            )
        if self.weight_kernel_sigma <= 0:
            raise ValueError("weight_kernel_sigma must be positive")


def class_residuals(a: Dictionary, y, x) -> np.ndarray:
    """Per-class residuals ||Y - A delta_g(X)||_F^2 for g = 1..K."""
    ymat = y.spectra if isinstance(y, NeighborhoodBlock) else np.asarray(y, dtype=np.float64)
    if ymat.ndim == 1:
        ymat = ymat[:, None]
    xmat = x.values if isinstance(x, CoefficientMatrix) else np.asarray(x, dtype=np.float64)
    if xmat.ndim == 1:
        xmat = xmat[:, None]
    out = np.empty(a.n_classes)
    for g, sl in a.groups.blocks():
        resid = ymat - a.atoms[:, sl] @ xmat[sl]
        out[g - 1] = float(np.sum(resid * resid))
    return out


def _solve_fss_l1(a: Dictionary, ymat: np.ndarray, lam: float, params: SolverParams):
    """Column-separable Lasso via feature-sign search, one pixel at a time."""
    gram = factor_context(a, params.rho).gram
    cols = []
    total = SolverReport(converged=True)
    for t in range(ymat.shape[1]):
        xt, rep = fss_solve(a.atoms, ymat[:, t], lam, params=params, gram=gram)
        cols.append(xt)
        total.iterations += rep.iterations
        total.objective_trace.extend(rep.objective_trace)
        total.wall_time += rep.wall_time
        total.converged = total.converged and rep.converged
    return CoefficientMatrix(np.stack(cols, axis=1)), total


def classify_block(
    a: Dictionary,
    y: NeighborhoodBlock,
    config: ClassifierConfig,
    params: SolverParams | None = None,
):
    """Code one block and label its center pixel by minimum class residual.

    Ties break toward the smallest class id. A single-pixel block under the
    Laplacian prior falls back to the plain l1 prior (the graph is undefined)
    and the event is logged.
    """
    params = params or SolverParams()
    prior = config.prior
    graph = None
    if prior.kind is PriorKind.LAPLACIAN:
        if y.n_pixels >= 2:
            graph = build_similarity_weights(y, config.weight_kernel_sigma)
        else:
            log.info(
                "block at %s has a single pixel; Laplacian prior falls back to l1",
                y.center_coord,
            )
            prior = PriorSpec(PriorKind.L1, prior.lam)
    try:
        if config.solver == "admm":
            x, report = admm_solve(a, y, prior, params, graph=graph)
        elif config.solver == "sparsa":
            x, report = sparsa_solve(a, y, prior, params, graph=graph)
        else:  # fss
            if prior.kind is PriorKind.LAPLACIAN:
                gram = factor_context(a, params.rho).gram
                values, report = fss_solve(
                    a.atoms, y.spectra, prior.lam, graph=graph,
                    lam2=prior.lam2, params=params, gram=gram,
                )
                x = CoefficientMatrix(values)
            else:
                x, report = _solve_fss_l1(a, y.spectra, prior.lam, params)
    except SolverError as err:
        raise SolverError(f"{err} (window centered at {y.center_coord})") from err
    residuals = class_residuals(a, y, x)
    label = int(np.argmin(residuals)) + 1
    return label, residuals, report


def _center_coords(test_pixels) -> list[Coord]:
    coords = []
    for item in test_pixels:
        coord = item[0] if isinstance(item[0], tuple) else item
        coords.append((int(coord[0]), int(coord[1])))
    return coords


def classify_image(
    cube: HsiCube,
    a: Dictionary,
    config: ClassifierConfig,
    test_pixels,
    params: SolverParams | None = None,
    workers: int = 1,
) -> LabelMap:
    """Label every test pixel; untested pixels keep label 0.

    Windows are distributed over a thread pool sharing the read-only
    dictionary and factorization cache; results land at disjoint pixels, so
    the output is identical for any worker count. Pixels whose solve fails
    are labeled 0 and logged; the run aborts if more than 1% fail.
    """
    params = params or SolverParams()
    coords = _center_coords(test_pixels)
    labels = np.zeros((cube.height, cube.width), dtype=np.int32)
    if not coords:
        return LabelMap(labels)
    # warm the factorization cache before fanning out
    factor_context(a, params.rho)

    def work(coord: Coord):
        block = extract_window(cube, coord, config.window)
        label, _, _ = classify_block(a, block, config, params)
        return coord, label

    failures: list[tuple[Coord, str]] = []
    if workers <= 1:
        results = []
        for coord in coords:
            try:
                results.append(work(coord))
            except (SolverError, np.linalg.LinAlgError) as err:
                failures.append((coord, str(err)))
    else:
        results = []
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {coord: pool.submit(work, coord) for coord in coords}
            for coord, fut in futures.items():
                try:
                    results.append(fut.result())
                except (SolverError, np.linalg.LinAlgError) as err:
                    failures.append((coord, str(err)))
    for coord, message in failures:
        log.warning("pixel %s failed and stays unlabeled: %s", coord, message)
    if len(failures) > 0.01 * len(coords):
        raise RuntimeError(
            f"{len(failures)} of {len(coords)} pixels failed (more than 1%); aborting"
        )
    for (row, col), label in results:
        labels[row, col] = label
    return LabelMap(labels)
