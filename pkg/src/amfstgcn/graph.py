"""Traffic graph construction and spectral objects (Laplacians, Chebyshev stacks)."""
from __future__ import annotations

import csv
import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import engine as E
from .engine import Tensor

log = logging.getLogger(__name__)

EXACT_EIG_MAX_NODES = 1200


class GraphError(ValueError):
    pass


@dataclass
class TrafficGraph:
    adjacency: np.ndarray
    node_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise GraphError(f"adjacency must be square, got {a.shape}")
        if not np.array_equal(a, a.T):
            raise GraphError("adjacency must be symmetric")
        if np.any(np.diag(a) != 0):
            raise GraphError("adjacency must have a zero diagonal")
        self.adjacency = a
        if not self.node_ids:
            self.node_ids = [str(i) for i in range(a.shape[0])]
        if len(self.node_ids) != a.shape[0]:
            raise GraphError(f"{len(self.node_ids)} node ids for {a.shape[0]} nodes")

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    def edges(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.adjacency))
        return list(zip(i.tolist(), j.tolist()))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.adjacency.shape, dtype="<i8").tobytes())
        h.update(self.adjacency.astype("<f8").tobytes())
        return h.hexdigest()


def ring_graph(n: int) -> TrafficGraph:
    a = np.zeros((n, n))
    for i in range(n):
        a[i, (i + 1) % n] = a[(i + 1) % n, i] = 1.0
    return TrafficGraph(a)


def spearman_matrix(series: np.ndarray) -> np.ndarray:
    """Pairwise Spearman correlation of the columns of ``series`` (time x nodes).

    Ties take the average rank.  Constant columns get NaN rows/columns.
    """
    ranks = np.apply_along_axis(rankdata, 0, np.asarray(series, dtype=np.float64))
    rc = ranks - ranks.mean(axis=0)
    norms = np.sqrt((rc * rc).sum(axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = (rc.T @ rc) / np.outer(norms, norms)
    rho[:, norms == 0] = np.nan
    rho[norms == 0, :] = np.nan
    return rho


def build_adjacency_spearman(series: np.ndarray, threshold: float,
                             node_ids: list[str] | None = None) -> TrafficGraph:
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 2 or series.shape[0] < 3:
        raise GraphError("need a (time, nodes) array with at least 3 observations")
    if not 0 < threshold < 1:
        raise GraphError(f"threshold must lie in (0, 1), got {threshold}")
    rho = spearman_matrix(series)
    flat = np.where(np.isnan(np.diag(rho)))[0]
    if flat.size:
        warnings.warn(f"constant series at nodes {flat.tolist()}; they get no edges", stacklevel=2)
    a = np.where(np.nan_to_num(rho, nan=-np.inf) >= threshold, 1.0, 0.0)
    np.fill_diagonal(a, 0.0)
    # rho is symmetric up to rounding; enforce it exactly
    a = np.maximum(a, a.T)
    return TrafficGraph(a, node_ids or [])


def build_adjacency_distance(distances: np.ndarray, sigma: float, epsilon: float,
                             node_ids: list[str] | None = None) -> TrafficGraph:
    """Thresholded Gaussian kernel ``exp(-d^2 / sigma^2) >= epsilon``, binarised."""
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise GraphError(f"distance matrix must be square, got {d.shape}")
    if np.any(d < 0):
        raise GraphError("distances must be nonnegative")
    if not np.array_equal(d, d.T) or np.any(np.diag(d) != 0):
        raise GraphError("distance matrix must be symmetric with zero diagonal")
    if sigma <= 0:
        raise GraphError("sigma must be positive")
    w = np.exp(-(d ** 2) / sigma ** 2)
    a = (w >= epsilon).astype(np.float64)
    np.fill_diagonal(a, 0.0)
    return TrafficGraph(a, node_ids or [])


# ---------------------------------------------------------------- spectral

def normalized_laplacian(adj) -> Tensor:
    """``I - D^-1/2 A D^-1/2``; zero-degree nodes keep an identity row.

    Accepts a :class:`TrafficGraph`, an array or a (possibly tape-tracked) tensor.
    """
    if isinstance(adj, TrafficGraph):
        adj = adj.adjacency
    a = E.as_tensor(adj)
    n = a.shape[0]
    dinv = E.rsqrt_or_zero(E.esum(a, axis=1))
    norm_adj = E.einsum("i,ij,j->ij", dinv, a, dinv)
    return E.sub(np.eye(n), norm_adj)


def largest_eigenvalue(lap, tol: float = 1e-6, max_iter: int = 1000) -> float:
    m = lap.data if isinstance(lap, Tensor) else np.asarray(lap, dtype=np.float64)
    if m.shape[0] <= EXACT_EIG_MAX_NODES:
        return float(np.linalg.eigvalsh(m)[-1])
    return power_iteration(m, tol, max_iter)


def power_iteration(m: np.ndarray, tol: float = 1e-6, max_iter: int = 1000) -> float:
    rng = np.random.default_rng(0)
    v = rng.standard_normal(m.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = m @ v
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
        new = float(v @ m @ v)
        if abs(new - lam) <= tol * max(1.0, abs(new)):
            return new
        lam = new
    log.warning("power iteration did not converge in %d steps", max_iter)
    return lam


def scaled_laplacian(lap, lambda_max: float) -> Tensor:
    if lambda_max <= 0:
        raise GraphError(f"lambda_max must be positive, got {lambda_max}")
    lap = E.as_tensor(lap)
    return E.sub(E.scale(lap, 2.0 / lambda_max), np.eye(lap.shape[0]))


def chebyshev_stack(lt, k: int) -> Tensor:
    """``[T_0(L~), ..., T_{k-1}(L~)]`` as a (k, N, N) tensor."""
    if k < 1:
        raise GraphError(f"Chebyshev order must be >= 1, got {k}")
    lt = E.as_tensor(lt)
    terms = [E.as_tensor(np.eye(lt.shape[0]))]
    if k > 1:
        terms.append(lt)
    for _ in range(2, k):
        terms.append(E.sub(E.scale(E.matmul(lt, terms[-1]), 2.0), terms[-2]))
    return E.stack(terms, axis=0)


def apply_mask(w_mask, adj) -> Tensor:
    w_mask = E.as_tensor(w_mask)
    return E.mul(w_mask, E.as_tensor(adj))


def masked_stack(w_mask, adj, k: int) -> Tensor:
    """Chebyshev stack of the mask-weighted graph, with ``lambda_max`` fixed at 2."""
    return chebyshev_stack(scaled_laplacian(normalized_laplacian(apply_mask(w_mask, adj)), 2.0), k)


@dataclass
class SpectralStack:
    laplacian: np.ndarray
    lambda_max: float
    scaled: np.ndarray
    stack: np.ndarray

    @property
    def k(self) -> int:
        return self.stack.shape[0]

    @classmethod
    def from_graph(cls, g: TrafficGraph, k: int, lambda_max: float | None = None) -> "SpectralStack":
        lap = normalized_laplacian(g)
        lam = largest_eigenvalue(lap) if lambda_max is None else lambda_max
        if lam <= 0:
            # edgeless graph: L = I has spectrum {1}; avoid a zero scale
            lam = 2.0
        lt = scaled_laplacian(lap, lam)
        return cls(lap.data, lam, lt.data, chebyshev_stack(lt, k).data)


# ---------------------------------------------------------------- csv i/o

def read_adjacency_csv(path, node_ids: list[str] | None = None) -> TrafficGraph:
    """Read an edge list (header ``src,dst``) or a dense matrix CSV.

    Edge-list endpoints are matched against ``node_ids`` when given, else
    treated as integer indices.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise GraphError(f"{path}: empty adjacency file")
    header = [c.strip() for c in rows[0]]
    if header[:2] == ["src", "dst"]:
        edges = [(r[0].strip(), r[1].strip()) for r in rows[1:]]
        if node_ids is None:
            n = 1 + max([max(int(s), int(d)) for s, d in edges], default=-1)
            ids = [str(i) for i in range(n)]
        else:
            ids = list(node_ids)
        pos = {v: i for i, v in enumerate(ids)}
        a = np.zeros((len(ids), len(ids)))
        for s, d in edges:
            if s not in pos or d not in pos:
                raise GraphError(f"{path}: unknown node in edge ({s}, {d})")
            if s == d:
                raise GraphError(f"{path}: self loop at {s}")
            a[pos[s], pos[d]] = a[pos[d], pos[s]] = 1.0
        return TrafficGraph(a, ids)
    try:
        a = np.array([[float(c) for c in r] for r in rows])
    except ValueError as exc:
        raise GraphError(f"{path}: not an edge list and not a numeric matrix") from exc
    return TrafficGraph(a, list(node_ids) if node_ids is not None else [])


def write_edge_list(g: TrafficGraph, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src", "dst"])
        for i, j in g.edges():
            w.writerow([g.node_ids[i], g.node_ids[j]])
    tmp.replace(path)
