"""k-means over feature vectors and elbow-based selection of the expert count.

Lloyd iterations alternate nearest-center assignment with mean updates;
seeding is k-means++ (deterministic given the seed), empty clusters are
reseeded at the point currently farthest from its own center, and each k is
run with several restarts keeping the best SSE.

The expert count is the knee of the SSE-vs-k curve: after min-max
normalizing both axes, pick the k whose curve point lies farthest below the
chord joining the curve's endpoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import corpus as corpus_mod
from .errors import UsageError
from .linalg import SeededRng


@dataclass
class KMeansResult:
    k: int
    centers: np.ndarray          # (k, dim)
    assignments: np.ndarray      # (n,) int
    sse: float
    iterations: int
    sse_history: list[float]     # SSE after each assignment phase


@dataclass
class SseCurve:
    points: list[tuple[int, float]]   # (k, sse), k ascending

    def ks(self) -> list[int]:
        return [k for k, _ in self.points]

    def sses(self) -> list[float]:
        return [s for _, s in self.points]


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(n, k) squared euclidean distances."""
    diff = x[:, None, :] - centers[None, :, :]
    return (diff * diff).sum(axis=2)


def _kmeanspp_seed(x: np.ndarray, k: int, rng: SeededRng) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    first = int(rng.integers(1, n)[0])
    centers[0] = x[first]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining points coincide with a chosen center
            idx = int(rng.integers(1, n)[0])
        else:
            target = float(rng.uniform(1)[0]) * total
            idx = int(np.searchsorted(np.cumsum(d2), target, side="right"))
            idx = min(idx, n - 1)
        centers[j] = x[idx]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def _assign_with_repair(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Nearest-center assignment; empty clusters get reseeded at the worst-fit
    point (the one farthest from its own assigned center)."""
    k = centers.shape[0]
    while True:
        d2 = _sq_dists(x, centers)
        assign = d2.argmin(axis=1)
        counts = np.bincount(assign, minlength=k)
        empties = np.flatnonzero(counts == 0)
        if empties.size == 0:
            return assign
        point_d2 = d2[np.arange(x.shape[0]), assign]
        for j in empties:
            # only steal from clusters that keep at least one member
            eligible = counts[assign] > 1
            if not eligible.any():
                eligible = np.ones_like(eligible)
            cand = np.where(eligible, point_d2, -np.inf)
            worst = int(cand.argmax())
            centers[j] = x[worst]
            counts[assign[worst]] -= 1
            counts[j] += 1
            point_d2[worst] = 0.0
            assign[worst] = j


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int) -> tuple[np.ndarray, np.ndarray, float, int, list[float]]:
    centers = centers.copy()
    prev = None
    history: list[float] = []
    assign = None
    sse = np.inf
    for it in range(1, max_iter + 1):
        assign = _assign_with_repair(x, centers)
        sse = float(((x - centers[assign]) ** 2).sum())
        history.append(sse)
        if prev is not None and np.array_equal(assign, prev):
            return centers, assign, sse, it, history
        prev = assign
        for j in range(centers.shape[0]):
            members = x[assign == j]
            if members.shape[0] > 0:
                centers[j] = members.mean(axis=0)
    # ran out of iterations: refresh assignment so the nearest-center
    # condition holds against the final centers
    assign = _assign_with_repair(x, centers)
    sse = float(((x - centers[assign]) ** 2).sum())
    history.append(sse)
    return centers, assign, sse, max_iter, history


def _distinct_count(x: np.ndarray) -> int:
    return np.unique(x, axis=0).shape[0]


def kmeans(vectors: np.ndarray, k: int, seed: int, max_iter: int = 100,
           restarts: int = 8, warm_start: np.ndarray | None = None) -> KMeansResult:
    """Best-of-restarts Lloyd's algorithm with k-means++ seeding.

    `warm_start` optionally adds one extra restart from the given centers
    (used by sse_curve to keep the curve monotone).
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise UsageError(f"kmeans needs an (n, dim) matrix, got {x.shape}")
    if k < 1:
        raise UsageError(f"k must be >= 1, got {k}")
    if k > _distinct_count(x):
        raise UsageError(f"k={k} exceeds the number of distinct points "
                         f"({_distinct_count(x)})")
    rng = SeededRng(seed).derive("kmeans", k)
    seedings = [_kmeanspp_seed(x, k, rng.derive("restart", r)) for r in range(restarts)]
    if warm_start is not None:
        seedings.append(np.asarray(warm_start, dtype=np.float64))
    best = None
    for centers0 in seedings:
        centers, assign, sse, iters, history = _lloyd(x, centers0, max_iter)
        if best is None or sse < best.sse - 1e-12:
            best = KMeansResult(k=k, centers=centers, assignments=assign,
                                sse=sse, iterations=iters, sse_history=history)
    return best


def _worst_fit_center(x: np.ndarray, result: KMeansResult) -> np.ndarray:
    d2 = ((x - result.centers[result.assignments]) ** 2).sum(axis=1)
    return x[int(d2.argmax())]


def sse_curve(vectors: np.ndarray, k_max: int, seed: int, max_iter: int = 100,
              restarts: int = 8) -> SseCurve:
    """SSE of the best clustering for each k = 1..k_max.

    Each k >= 2 also tries a warm start built from the previous k's solution
    plus one center at its worst-fit point, which guarantees the curve never
    increases.
    """
    curve, _ = _sse_curve_with_results(vectors, k_max, seed, max_iter, restarts)
    return curve


def _sse_curve_with_results(vectors: np.ndarray, k_max: int, seed: int,
                            max_iter: int = 100, restarts: int = 8):
    x = np.asarray(vectors, dtype=np.float64)
    distinct = _distinct_count(x)
    if k_max < 2:
        raise UsageError(f"k_max must be >= 2, got {k_max}")
    if k_max > distinct:
        raise UsageError(f"k_max={k_max} exceeds distinct point count ({distinct})")
    points = []
    results = []
    prev = None
    for k in range(1, k_max + 1):
        warm = None
        if prev is not None:
            warm = np.vstack([prev.centers, _worst_fit_center(x, prev)])
        res = kmeans(x, k, seed, max_iter=max_iter, restarts=restarts, warm_start=warm)
        points.append((k, res.sse))
        results.append(res)
        prev = res
    return SseCurve(points=points), results


def elbow_select(curve: SseCurve) -> int:
    """Knee of the curve: max vertical gap to the endpoint chord after
    min-max normalizing both axes. Ties and degenerate (flat or linear)
    curves resolve toward the smallest k."""
    if len(curve.points) < 3:
        raise UsageError(f"elbow needs >= 3 curve points, got {len(curve.points)}")
    ks = np.asarray(curve.ks(), dtype=np.float64)
    sses = np.asarray(curve.sses(), dtype=np.float64)
    k_range = ks[-1] - ks[0]
    s_range = sses[0] - sses[-1]
    if s_range <= 0.0:
        return int(ks[0])
    xn = (ks - ks[0]) / k_range
    yn = (sses - sses[-1]) / s_range
    chord = 1.0 - xn  # normalized chord from (0, 1) to (1, 0)
    gaps = chord - yn
    best = int(ks[0])
    best_gap = 0.0
    for i in range(len(gaps)):
        if gaps[i] > best_gap + 1e-12:
            best_gap = gaps[i]
            best = int(ks[i])
    if best_gap <= 1e-9:  # numerically linear curve: no knee
        return int(ks[0])
    return best


@dataclass
class CorpusInit:
    n_components: int
    assignments: dict[str, int]       # doc id -> cluster
    curve: SseCurve | None            # None when the count was overridden


def init_hydra_from_corpus(docs, k_max: int, seed: int,
                           override: int | None = None) -> CorpusInit:
    """Pick the expert count for a corpus (elbow of the tf-idf SSE curve,
    unless a developer-specified override is given). Assignments are
    diagnostic only; routing is learned during training."""
    if not docs:
        raise UsageError("corpus is empty")
    model = corpus_mod.tfidf_fit(docs)
    x = corpus_mod.tfidf_matrix(model, docs)
    distinct = _distinct_count(x)
    if override is not None:
        if override < 1:
            raise UsageError(f"override must be >= 1, got {override}")
        n = override
        res = kmeans(x, min(n, distinct), seed)
        return CorpusInit(n_components=n,
                          assignments={d.id: int(a) for d, a in zip(docs, res.assignments)},
                          curve=None)
    if distinct < 3:
        # too few distinct feature vectors for a meaningful curve
        n = 1
        res = kmeans(x, 1, seed)
        return CorpusInit(n_components=n,
                          assignments={d.id: int(a) for d, a in zip(docs, res.assignments)},
                          curve=None)
    k_hi = min(k_max, distinct)
    curve, results = _sse_curve_with_results(x, k_hi, seed)
    n = elbow_select(curve)
    res = results[n - 1]
    return CorpusInit(n_components=n,
                      assignments={d.id: int(a) for d, a in zip(docs, res.assignments)},
                      curve=curve)
