"""Shrinkage structure: defender groups and the offender similarity graph."""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

logger = logging.getLogger(__name__)


class CARPriorError(ValueError):
    """The conditional autoregressive prior is improper for this graph."""


# ---------------------------------------------------------------------------
# defender groups

def _kmeans_pp_init(X, k, rng):
    n = len(X)
    centers = [X[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(((X[:, None, :] - np.asarray(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(X[idx])
    return np.array(centers, dtype=float)


def lloyd_kmeans(X, k, seed=0, n_init=10, max_iter=300, tol=1e-10):
    """k-means with k-means++ seeding; best of ``n_init`` seeded runs.

    Returns ``(labels, centers, inertia_trace)`` where the trace belongs to
    the winning run and records the objective after each Lloyd iteration.
    """
    X = np.asarray(X, dtype=float)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centers = _kmeans_pp_init(X, k, rng)
        trace = []
        labels = None
        for _ in range(max_iter):
            d2 = ((X[:, None, :] - centers[None]) ** 2).sum(-1)
            labels = np.argmin(d2, axis=1)
            for c in range(k):
                members = X[labels == c]
                if len(members):
                    centers[c] = members.mean(axis=0)
            inertia = float(((X - centers[labels]) ** 2).sum())
            trace.append(inertia)
            if len(trace) > 1 and trace[-2] - trace[-1] <= tol * max(trace[-2], 1.0):
                break
        if best is None or trace[-1] < best[2][-1] - 1e-12:
            best = (labels, centers.copy(), trace)
    return best


@dataclass(frozen=True)
class DefenderGroups:
    time_in_basis: np.ndarray
    pc_scores: np.ndarray
    group_of: np.ndarray
    player_ids: Optional[np.ndarray] = None


class DefenderTypeClustering(ClusterMixin, BaseEstimator):
    """Cluster defenders by their time-in-basis profiles.

    The profile matrix is centered, projected on its top ``n_components``
    principal directions and clustered with k-means. Labels are relabeled
    so that cluster means are ordered by ascending first-component score.
    """

    def __init__(self, n_clusters=3, n_components=2, random_state=0, n_init=10):
        self.n_clusters = n_clusters
        self.n_components = n_components
        self.random_state = random_state
        self.n_init = n_init

    def fit(self, X, y=None):
        X = check_array(X)
        if len(X) < self.n_clusters:
            raise ValueError(f"need at least {self.n_clusters} defenders, got {len(X)}")
        self.mean_ = X.mean(axis=0)
        _, _, vt = np.linalg.svd(X - self.mean_, full_matrices=False)
        # fix the SVD sign ambiguity so scores are reproducible
        signs = np.sign(vt[:, np.argmax(np.abs(vt), axis=1)].diagonal())
        signs[signs == 0] = 1.0
        self.components_ = (vt * signs[:, None])[: self.n_components]
        scores = self.transform(X)
        labels, centers, trace = lloyd_kmeans(scores, self.n_clusters, seed=self.random_state,
                                              n_init=self.n_init)
        order = np.argsort(centers[:, 0], kind="stable")
        relabel = np.empty_like(order)
        relabel[order] = np.arange(self.n_clusters)
        self.labels_ = relabel[labels]
        self.cluster_centers_ = centers[order]
        self.inertia_trace_ = np.asarray(trace)
        self.pc_scores_ = scores
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X)
        return (X - self.mean_) @ self.components_.T

    def predict(self, X):
        scores = self.transform(X)
        d2 = ((scores[:, None, :] - self.cluster_centers_[None]) ** 2).sum(-1)
        return np.argmin(d2, axis=1)


def pca_kmeans_groups(matrix, k=3, seed=0, player_ids=None) -> DefenderGroups:
    model = DefenderTypeClustering(n_clusters=k, random_state=seed).fit(matrix)
    return DefenderGroups(np.asarray(matrix, dtype=float), model.pc_scores_, model.labels_,
                          None if player_ids is None else np.asarray(player_ids))


def defender_time_in_basis(posteriors, possessions, basis_of_tile, n_basis, geometry=None):
    """Average fraction of time each defender's man spends in each basis region.

    Parameters
    ----------
    posteriors : sequence of MatchupPosterior
        One per possession, aligned with ``possessions``.
    basis_of_tile : ndarray (V,)
        Region label of every tile (argmax over retained bases).

    Returns
    -------
    player_ids : ndarray (N,)
    fractions : ndarray (N, n_basis)
        Rows are time-weighted averages over all frames the defender was
        observed; defenders with no frames are left out.
    """
    from .court import DEFAULT_COURT

    geometry = geometry or DEFAULT_COURT
    totals, time = {}, {}
    for post, p in zip(posteriors, possessions):
        tiles = geometry.tile_index(np.asarray(p.offense))        # (T, 5)
        region = np.asarray(basis_of_tile)[tiles]                 # (T, 5)
        onehot = np.eye(n_basis)[region]                          # (T, 5, B)
        # E[t, j, k] weighted occupancy of guarded man's region
        occ = np.einsum("tjk,tkb->jb", post.E, onehot)
        for slot, pid in enumerate(p.defense_ids):
            totals[pid] = totals.get(pid, 0.0) + occ[slot]
            time[pid] = time.get(pid, 0.0) + len(p)
    ids = np.array(sorted(k for k in totals if time[k] > 0))
    frac = np.array([totals[i] / time[i] for i in ids]).reshape(len(ids), n_basis)
    return ids, frac


# ---------------------------------------------------------------------------
# offender graph and CAR prior

@dataclass(frozen=True)
class OffenderGraph:
    """Symmetric similarity graph with its conditional autoregressive prior.

    ``precision`` is ``D^-1 (I - zeta M)`` where ``M`` is the row-normalized
    adjacency and ``D = diag(scale / |N(k)|)``; its inverse is the joint
    prior covariance of one basis' offender effects.
    """

    adjacency: np.ndarray
    zeta: float = 0.9
    scale: float = 1.0
    player_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        A = np.asarray(self.adjacency, dtype=bool)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("adjacency must be square")
        if not np.array_equal(A, A.T):
            raise ValueError("adjacency must be symmetric")
        if np.any(np.diag(A)):
            raise ValueError("adjacency must have a zero diagonal")
        if len(A) and np.any(A.sum(axis=1) == 0):
            raise ValueError("every node needs at least one neighbor")
        object.__setattr__(self, "adjacency", A)

    @property
    def n_neighbors(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    @property
    def M(self) -> np.ndarray:
        return self.adjacency / self.n_neighbors[:, None]

    @property
    def D(self) -> np.ndarray:
        return np.diag(self.scale / self.n_neighbors)

    @property
    def precision(self) -> np.ndarray:
        n = self.n_neighbors
        return (np.diag(n.astype(float)) - self.zeta * self.adjacency) / self.scale

    @property
    def covariance(self) -> np.ndarray:
        return np.linalg.solve(np.eye(len(self.adjacency)) - self.zeta * self.M, self.D)

    def edge_list(self):
        i, j = np.nonzero(np.triu(self.adjacency))
        ids = self.player_ids if self.player_ids is not None else np.arange(len(self.adjacency))
        return [(int(ids[a]), int(ids[b])) for a, b in zip(i, j)]


def knn_union_adjacency(points, k=10, ids=None) -> np.ndarray:
    """Union-symmetrized k-nearest-neighbor adjacency under Euclidean distance.

    Distance ties are broken by player id (then by row order).
    """
    X = np.asarray(points, dtype=float)
    n = len(X)
    if n < k + 1:
        raise ValueError(f"need at least {k + 1} players for a {k}-NN graph, got {n}")
    tiebreak = np.arange(n) if ids is None else np.asarray(ids)
    d2 = ((X[:, None, :] - X[None]) ** 2).sum(-1)
    A = np.zeros((n, n), dtype=bool)
    for i in range(n):
        cand = np.delete(np.arange(n), i)
        order = np.lexsort((cand, tiebreak[cand], d2[i, cand]))
        A[i, cand[order[:k]]] = True
    return A | A.T


def build_offender_graph(W, k=10, zeta=0.9, scale=1.0, player_ids=None) -> OffenderGraph:
    """Offender similarity graph from NMF loadings (rows renormalized to sum 1)."""
    W = np.asarray(W, dtype=float)
    rows = W.sum(axis=1, keepdims=True)
    Wn = np.divide(W, rows, out=np.full_like(W, 1.0 / W.shape[1]), where=rows > 0)
    A = knn_union_adjacency(Wn, k=k, ids=player_ids)
    return OffenderGraph(A, zeta=zeta, scale=scale,
                         player_ids=None if player_ids is None else np.asarray(player_ids))


def car_precision_check(graph: OffenderGraph, tol=1e-10):
    """Verify the CAR prior is proper.

    Returns ``(min_eigenvalue, asymmetry)``; raises :class:`CARPriorError`
    when the precision is not symmetric to ``tol`` or not positive definite.
    """
    n = graph.n_neighbors.astype(float)
    Q = (np.diag(n) @ (np.eye(len(n)) - graph.zeta * graph.M)) / graph.scale
    asym = float(np.max(np.abs(Q - Q.T))) if len(Q) else 0.0
    if asym > tol:
        raise CARPriorError(f"CAR precision not symmetric (max asymmetry {asym:.3g})")
    min_eig = float(np.linalg.eigvalsh(0.5 * (Q + Q.T)).min()) if len(Q) else np.inf
    if not min_eig > tol:
        raise CARPriorError(f"CAR precision not positive definite (min eigenvalue {min_eig:.3g}); "
                            f"zeta={graph.zeta}")
    return min_eig, asym
