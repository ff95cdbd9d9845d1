"""PCA / 2-D projections, k-means++ clustering and clustering quality metrics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError

CLUSTER_FIELDS = ["encoder", "AdjRand", "MutInfo", "Silhouette", "daviesBouldin", "calinskiHarabasz"]
PROJECTION_METHODS = ("pca", "tsne", "umap")


def _rows(matrix) -> np.ndarray:
    x = getattr(matrix, "rows", matrix)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise DataError(f"expected a non-empty (N, D) matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("matrix contains non-finite values")
    return x


# ------------------------------------------------------------------ projections

@dataclass
class Projection:
    points: np.ndarray
    method: str = "pca"
    components: Optional[np.ndarray] = None      # (dims, D), orthonormal rows
    explained_variance: Optional[np.ndarray] = None
    explained_variance_ratio: Optional[np.ndarray] = None
    mean: Optional[np.ndarray] = None
    params: dict = field(default_factory=dict)


def pca_project(matrix, dims: int) -> Projection:
    x = _rows(matrix)
    n, d = x.shape
    if not 1 <= dims <= min(n, d):
        raise ConfigError(f"dims must be in [1, min(N, D)] = [1, {min(n, d)}], got {dims}")
    mean = x.mean(0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:dims]
    # sign convention: largest-magnitude loading positive
    flip = np.sign(comps[np.arange(dims), np.abs(comps).argmax(1)])
    comps = comps * np.where(flip == 0, 1.0, flip)[:, None]
    var = s ** 2 / max(n - 1, 1)
    total = var.sum()
    ratio = var[:dims] / total if total > 0 else np.zeros(dims)
    return Projection(xc @ comps.T, "pca", comps, var[:dims], ratio, mean, {"dims": dims})


def project2d(matrix, method: str = "pca", params: Optional[dict] = None, seed: int = 0) -> Projection:
    """2-D view of the rows. ``tsne`` uses scikit-learn; ``umap`` needs the optional umap-learn package."""
    x = _rows(matrix)
    params = dict(params or {})
    if method == "pca":
        dims = min(2, *x.shape)
        p = pca_project(x, dims)
        if dims < 2:
            p.points = np.hstack([p.points, np.zeros((len(x), 2 - dims))])
        return p
    if len(x) < 3:
        return Projection(np.zeros((len(x), 2)), method, params=params)
    if method == "tsne":
        from sklearn.manifold import TSNE
        params.setdefault("perplexity", float(min(30.0, len(x) - 1)))
        params.setdefault("init", "pca")
        pts = TSNE(n_components=2, random_state=seed, **params).fit_transform(x)
        return Projection(np.asarray(pts, dtype=np.float64), "tsne", params=params)
    if method == "umap":
        try:
            import umap  # optional plug-in
        except ImportError:
            raise ConfigError("projection method 'umap' is unavailable (pip install umap-learn); "
                              "use method='pca' instead") from None
        pts = umap.UMAP(n_components=2, random_state=seed, **params).fit_transform(x)
        return Projection(np.asarray(pts, dtype=np.float64), "umap", params=params)
    raise ConfigError(f"unknown projection {method!r}; valid: {', '.join(PROJECTION_METHODS)} (pca always available)")


# ------------------------------------------------------------------ k-means

@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    history: list   # inertia after every assignment step
    n_iter: int


def _sq_dists(x, c):
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1) if x.shape[1] <= 64 else np.maximum(
        (x ** 2).sum(1)[:, None] - 2 * x @ c.T + (c ** 2).sum(1)[None, :], 0.0)


def kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    idx = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[idx]).min(1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            i = int(rng.choice(n, p=d2 / total))
        else:  # fewer distinct points than k
            i = int(rng.choice(np.setdiff1d(np.arange(n), idx)))
        idx.append(i)
        d2 = np.minimum(d2, _sq_dists(x, x[[i]])[:, 0])
    return x[idx].copy()


def kmeans(matrix, k: int, seed: int = 0, max_iter: int = 300, standardize: bool = False) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeds; an emptied cluster moves to the worst-fit point."""
    x = _rows(matrix)
    n = len(x)
    if not 1 <= k <= n:
        raise DataError(f"k-means needs 1 <= k <= N, got k={k}, N={n}")
    if standardize:
        sd = x.std(0)
        x = (x - x.mean(0)) / np.where(sd > 0, sd, 1.0)
    rng = np.random.default_rng(seed)
    cent = kmeans_pp(x, k, rng)
    history, assign = [], None
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(x, cent)
        new = d2.argmin(1)
        history.append(float(d2[np.arange(n), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = assign == j
            if members.any():
                cent[j] = x[members].mean(0)
        for j in range(k):
            if not (assign == j).any():
                worst = int(((x - cent[assign]) ** 2).sum(1).argmax())
                cent[j] = x[worst]
                assign[worst] = j
    d2 = _sq_dists(x, cent)
    inertia = float(d2[np.arange(n), assign].sum())
    return KMeansResult(assign.astype(int), cent, inertia, history, it)


# ------------------------------------------------------------------ metrics

def _contingency(a, b):
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def _comb2(n):
    n = np.asarray(n, dtype=np.float64)
    return n * (n - 1) / 2


def adjusted_rand_index(labels_true, labels_pred) -> float:
    t = _contingency(np.asarray(labels_true), np.asarray(labels_pred))
    n = t.sum()
    index = _comb2(t).sum()
    a, b = _comb2(t.sum(1)).sum(), _comb2(t.sum(0)).sum()
    expected = a * b / _comb2(n) if n > 1 else 0.0
    top = (a + b) / 2
    if top == expected:
        return 1.0
    return float((index - expected) / (top - expected))


def mutual_information(labels_true, labels_pred) -> float:
    """Shannon mutual information in nats."""
    t = _contingency(np.asarray(labels_true), np.asarray(labels_pred)).astype(np.float64)
    n = t.sum()
    pi, pj = t.sum(1) / n, t.sum(0) / n
    nz = t > 0
    pij = t[nz] / n
    outer = np.outer(pi, pj)[nz]
    return float(max((pij * np.log(pij / outer)).sum(), 0.0))


def entropy(labels) -> float:
    _, counts = np.unique(np.asarray(labels), return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def normalized_mutual_information(labels_true, labels_pred) -> float:
    h = (entropy(labels_true) + entropy(labels_pred)) / 2
    return mutual_information(labels_true, labels_pred) / h if h > 0 else 1.0


def pairwise_distances(x: np.ndarray) -> np.ndarray:
    """Euclidean distances; exact differences for small D, Gram form for wide embeddings."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] <= 64:
        return np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))
    sq = (x ** 2).sum(1)
    d = np.sqrt(np.maximum(sq[:, None] - 2 * x @ x.T + sq[None, :], 0.0))
    np.fill_diagonal(d, 0.0)
    return d


def _check_labels(x, labels):
    labels = np.asarray(labels)
    if len(labels) != len(x):
        raise DataError(f"{len(labels)} labels for {len(x)} rows")
    uniq, inv = np.unique(labels, return_inverse=True)
    if not 2 <= len(uniq) <= len(x) - 1:
        raise DataError(f"need 2 <= clusters <= N-1, got {len(uniq)} clusters for N={len(x)}")
    return inv, len(uniq)


def silhouette_score(matrix, labels) -> float:
    x = _rows(matrix)
    inv, k = _check_labels(x, labels)
    d = pairwise_distances(x)
    sums = np.stack([d[:, inv == j].sum(1) for j in range(k)], 1)
    counts = np.bincount(inv, minlength=k).astype(np.float64)
    own = counts[inv] - 1
    a = np.where(own > 0, sums[np.arange(len(x)), inv] / np.maximum(own, 1), 0.0)
    means = sums / counts[None, :]
    means[np.arange(len(x)), inv] = np.inf
    b = means.min(1)
    denom = np.maximum(a, b)
    s = np.where((own > 0) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def davies_bouldin_score(matrix, labels) -> float:
    x = _rows(matrix)
    inv, k = _check_labels(x, labels)
    cents = np.stack([x[inv == j].mean(0) for j in range(k)])
    scatter = np.array([np.sqrt(((x[inv == j] - cents[j]) ** 2).sum(1)).mean() for j in range(k)])
    sep = np.sqrt(((cents[:, None, :] - cents[None, :, :]) ** 2).sum(-1))
    if np.allclose(scatter, 0) or np.allclose(sep, 0):
        return 0.0
    sep[sep == 0] = np.inf  # coincident centroids contribute nothing
    r = (scatter[:, None] + scatter[None, :]) / sep
    r[np.arange(k), np.arange(k)] = -np.inf
    return float(r.max(1).mean())


def calinski_harabasz_score(matrix, labels) -> float:
    x = _rows(matrix)
    inv, k = _check_labels(x, labels)
    n = len(x)
    mean = x.mean(0)
    between = within = 0.0
    for j in range(k):
        pts = x[inv == j]
        c = pts.mean(0)
        between += len(pts) * ((c - mean) ** 2).sum()
        within += ((pts - c) ** 2).sum()
    if within == 0:
        return 1.0
    return float(between * (n - k) / (within * (k - 1)))


@dataclass
class ClusterReport:
    encoder: str
    assignments: np.ndarray
    centroids: Optional[np.ndarray]
    adjusted_rand: float
    mutual_information: float
    silhouette: float
    davies_bouldin: float
    calinski_harabasz: float
    normalized_mutual_information: float = float("nan")
    undefined: tuple = ()   # internal indices that could not be computed

    def row(self):
        return [self.encoder, self.adjusted_rand, self.mutual_information, self.silhouette,
                self.davies_bouldin, self.calinski_harabasz]


def clustering_report(matrix, assignments, true_labels, encoder: str = "",
                      centroids: Optional[np.ndarray] = None) -> ClusterReport:
    """Five metrics: ARI and MI against ``true_labels``; silhouette, DB and CH on the partition itself."""
    x = _rows(matrix)
    assignments = np.asarray(assignments)
    true_labels = np.asarray(true_labels)
    if not len(assignments) == len(true_labels) == len(x):
        raise DataError("matrix, assignments and labels must have the same length")
    internal, undefined = {}, []
    for name, fn in (("silhouette", silhouette_score), ("davies_bouldin", davies_bouldin_score),
                     ("calinski_harabasz", calinski_harabasz_score)):
        n_clusters = len(np.unique(assignments))
        if 2 <= n_clusters <= len(x) - 1:
            internal[name] = fn(x, assignments)
        else:
            internal[name] = math.nan
            undefined.append(name)
    return ClusterReport(
        encoder, assignments, centroids,
        adjusted_rand=adjusted_rand_index(true_labels, assignments),
        mutual_information=mutual_information(true_labels, assignments),
        normalized_mutual_information=normalized_mutual_information(true_labels, assignments),
        undefined=tuple(undefined), **internal,
    )


def evaluate_embeddings(matrix, k: int = 6, seed: int = 0, encoder: str = "", standardize: bool = False,
                        labels=None) -> ClusterReport:
    """k-means on the rows, scored against the matrix's labels (or ``labels``)."""
    x = _rows(matrix)
    if labels is None:
        labels = matrix.label_array
    if standardize:
        sd = x.std(0)
        x = (x - x.mean(0)) / np.where(sd > 0, sd, 1.0)
    km = kmeans(x, k, seed)
    return clustering_report(x, km.assignments, labels, encoder, km.centroids)


def write_cluster_csv(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CLUSTER_FIELDS)
        for r in reports:
            enc, *vals = r.row()
            w.writerow([enc, *(repr(float(v)) for v in vals)])


def read_cluster_csv(path) -> list:
    with open(path, newline="") as fh:
        return [{k: (v if k == "encoder" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def scatter_png(path, projection: Projection, labels, title: str = ""):
    """Scatter plot with one colour per true label."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = np.asarray(labels)
    fig, ax = plt.subplots(figsize=(4, 4), dpi=100)
    for lab in np.unique(labels):
        pts = projection.points[labels == lab]
        ax.scatter(pts[:, 0], pts[:, 1], s=8, label=str(lab))
    ax.set_title(title or projection.method)
    ax.legend(fontsize=6, markerscale=1.5, title="id")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
