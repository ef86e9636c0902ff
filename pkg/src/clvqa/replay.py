"""Replay memory curation: TF-IDF question features, k-means, proportional quotas."""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .autodiff import ContractError
from .taskstream import Sample


class TfidfVectorizer(TransformerMixin, BaseEstimator):
    """TF-IDF over pre-tokenized documents.

    ``tf`` is the raw count divided by document length, ``idf`` the smoothed
    ``ln((1 + N) / (1 + df)) + 1``, and rows are L2-normalized. Terms unseen
    during ``fit`` are ignored by ``transform``.
    """

    def fit(self, X, y=None):
        docs = [list(d) for d in X]
        if not docs:
            raise ContractError("cannot fit TF-IDF on an empty corpus")
        df: Counter = Counter()
        for d in docs:
            df.update(set(d))
        terms = sorted(df)
        self.vocabulary_ = {t: i for i, t in enumerate(terms)}
        self.n_docs_ = len(docs)
        counts = np.array([df[t] for t in terms], dtype=np.float64)
        self.idf_ = np.log((1.0 + self.n_docs_) / (1.0 + counts)) + 1.0
        return self

    def transform(self, X):
        check_is_fitted(self, "idf_")
        docs = [list(d) for d in X]
        out = np.zeros((len(docs), len(self.vocabulary_)))
        for i, d in enumerate(docs):
            if not d:
                continue
            for term, k in Counter(d).items():
                col = self.vocabulary_.get(term)
                if col is not None:
                    out[i, col] = k / len(d)
        out *= self.idf_
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        np.divide(out, norms, out=out, where=norms > 0)
        return out


def tfidf_fit_transform(questions) -> tuple[TfidfVectorizer, np.ndarray]:
    model = TfidfVectorizer()
    return model, model.fit_transform(questions)


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=-1)


class KMeans(ClusterMixin, BaseEstimator):
    """Lloyd's k-means with k-means++ seeding.

    Empty clusters are repaired by moving the point farthest from its
    centroid in the largest cluster. ``inertia_history_`` records the inertia
    after every iteration.
    """

    def __init__(self, n_clusters: int = 5, random_state: int = 0, max_iter: int = 100):
        self.n_clusters = n_clusters
        self.random_state = random_state
        self.max_iter = max_iter

    def _init_centers(self, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n = X.shape[0]
        centers = [X[int(rng.integers(n))]]
        d2 = _sq_dists(X, np.array(centers))[:, 0]
        for _ in range(1, self.n_clusters):
            total = d2.sum()
            p = d2 / total if total > 0 else np.full(n, 1.0 / n)
            idx = int(rng.choice(n, p=p))
            centers.append(X[idx])
            d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
        return np.array(centers)

    def _repair_empty(self, X: np.ndarray, labels: np.ndarray, centers: np.ndarray) -> None:
        k = self.n_clusters
        while True:
            sizes = np.bincount(labels, minlength=k)
            empty = np.flatnonzero(sizes == 0)
            if empty.size == 0:
                return
            largest = int(np.argmax(sizes))
            members = np.flatnonzero(labels == largest)
            d = ((X[members] - centers[largest]) ** 2).sum(axis=1)
            moved = int(members[int(np.argmax(d))])
            labels[moved] = empty[0]
            centers[empty[0]] = X[moved]

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        n = X.shape[0]
        if not 1 <= self.n_clusters <= n:
            raise ContractError(f"need 1 <= k <= N, got k={self.n_clusters}, N={n}")
        rng = np.random.default_rng(self.random_state)
        centers = self._init_centers(X, rng)
        labels = None
        history = []
        n_iter = 0
        for n_iter in range(1, self.max_iter + 1):
            new_labels = np.argmin(_sq_dists(X, centers), axis=1)
            if labels is not None and np.array_equal(new_labels, labels):
                break
            labels = new_labels
            self._repair_empty(X, labels, centers)
            for c in range(self.n_clusters):
                centers[c] = X[labels == c].mean(axis=0)
            history.append(float(((X - centers[labels]) ** 2).sum()))
        self.labels_ = labels
        self.cluster_centers_ = centers
        self.inertia_ = float(((X - centers[labels]) ** 2).sum())
        self.inertia_history_ = history
        self.n_iter_ = n_iter
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        return np.argmin(_sq_dists(X, self.cluster_centers_), axis=1)


def kmeans(matrix, k: int, seed: int, max_iter: int = 100) -> KMeans:
    return KMeans(n_clusters=k, random_state=seed, max_iter=max_iter).fit(matrix)


def per_cluster_quota(cluster_sizes, S_n: int, cap: bool = True) -> list[int]:
    """``floor(size_c / total * S_n)`` per cluster, capped at the cluster size unless ``cap`` is off."""
    sizes = [int(s) for s in cluster_sizes]
    if not sizes:
        raise ContractError("no clusters")
    if any(s <= 0 for s in sizes) or S_n < 0:
        raise ContractError("cluster sizes must be positive and S_n non-negative")
    total = sum(sizes)
    # integer arithmetic keeps the floor exact
    return [min(s * S_n // total, s) if cap else s * S_n // total for s in sizes]


def largest_remainder(cluster_sizes, target: int) -> list[int]:
    """Proportional integer split of ``target`` (<= sum of sizes) that sums exactly to it."""
    sizes = [int(s) for s in cluster_sizes]
    total = sum(sizes)
    if target >= total:
        return sizes
    base = [s * target // total for s in sizes]
    rema = [(s * target % total, -i) for i, s in enumerate(sizes)]
    short = target - sum(base)
    for _, neg_i in sorted(rema, reverse=True)[:short]:
        base[-neg_i] += 1
    return base


def curate_task_memory(dataset: list[Sample], S_task: int, k: int = 5, seed: int = 0) -> list[tuple[Sample, int]]:
    """Cluster questions and draw each cluster's quota uniformly without replacement."""
    if S_task > len(dataset):
        raise ContractError(f"cannot select {S_task} samples from {len(dataset)}")
    if S_task <= 0:
        return []
    _, X = tfidf_fit_transform([s.question for s in dataset])
    km = kmeans(X, min(k, len(dataset)), seed)
    members = defaultdict(list)
    for i, c in enumerate(km.labels_):
        members[int(c)].append(i)
    clusters = sorted(members)
    quotas = per_cluster_quota([len(members[c]) for c in clusters], S_task)
    rng = np.random.default_rng(seed)
    picked: list[tuple[Sample, int]] = []
    for c, q in zip(clusters, quotas):
        chosen = np.sort(rng.choice(members[c], size=q, replace=False)) if q else []
        picked.extend((dataset[int(i)], c) for i in chosen)
    return picked


@dataclass(frozen=True)
class MemoryEntry:
    sample: Sample
    task: str
    cluster: int


@dataclass
class MemoryBuffer:
    capacity: int
    entries: list[MemoryEntry] = field(default_factory=list)
    shares: dict[str, int] = field(default_factory=dict)
    log: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def counts_by_task(self) -> dict[str, int]:
        return dict(Counter(e.task for e in self.entries))

    def counts_by_cluster(self, task: str) -> dict[int, int]:
        return dict(Counter(e.cluster for e in self.entries if e.task == task))

    def check(self) -> None:
        if len(self.entries) > self.capacity:
            raise AssertionError(f"buffer holds {len(self.entries)} > capacity {self.capacity}")
        ids = [e.sample.id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise AssertionError("duplicate sample ids in buffer")
        for task, count in self.counts_by_task().items():
            if count > self.shares.get(task, 0):
                raise AssertionError(f"task {task} holds {count} > share {self.shares.get(task)}")

    def samples(self) -> list[Sample]:
        return [e.sample for e in self.entries]

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for e in self.entries:
                s = e.sample
                fh.write("\t".join((e.task, str(e.cluster), " ".join(s.scene), " ".join(s.question),
                                    " ".join(s.answer))) + "\n")

    @classmethod
    def read(cls, path: str | Path, capacity: int) -> "MemoryBuffer":
        buf = cls(capacity=capacity)
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 5:
                    raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields")
                task, cluster, scene, question, answer = parts
                sample = Sample(f"{task}-memory-{lineno:05d}", task, tuple(scene.split()),
                                tuple(question.split()), tuple(answer.split()))
                buf.entries.append(MemoryEntry(sample, task, int(cluster)))
        counts = buf.counts_by_task()
        buf.shares = {t: max(capacity // max(len(counts), 1), c) for t, c in counts.items()}
        return buf


def populate_memory(capacity: int, task: str, entries: list[tuple[Sample, int]]) -> MemoryBuffer:
    buf = MemoryBuffer(capacity=capacity, shares={task: capacity})
    buf.entries = [MemoryEntry(s, task, c) for s, c in entries[:capacity]]
    buf.check()
    return buf


def refresh_memory(buffer: MemoryBuffer, task: str, new_entries: list[tuple[Sample, int]], n: int,
                   seed: int = 0) -> MemoryBuffer:
    """Rebalance to equal shares ``floor(S / n)`` and add the new task's entries.

    Earlier tasks are thinned cluster-proportionally (largest remainder),
    choosing survivors uniformly at random inside each cluster.
    """
    if n < 2:
        raise ContractError("refresh applies from the second task on")
    share = buffer.capacity // n
    rng = np.random.default_rng(seed)
    out = MemoryBuffer(capacity=buffer.capacity, log=list(buffer.log))
    for old_task in dict.fromkeys(e.task for e in buffer.entries):
        out.shares[old_task] = share
        by_cluster: dict[int, list[MemoryEntry]] = defaultdict(list)
        for e in buffer.entries:
            if e.task == old_task:
                by_cluster[e.cluster].append(e)
        clusters = sorted(by_cluster)
        keep = largest_remainder([len(by_cluster[c]) for c in clusters], share)
        for c, q in zip(clusters, keep):
            members = by_cluster[c]
            idx = np.sort(rng.choice(len(members), size=q, replace=False)) if q else []
            out.entries.extend(members[int(i)] for i in idx)
    out.shares[task] = share
    if len(new_entries) < share:
        out.log.append(f"task {task}: {len(new_entries)} new entries for a share of {share}")
    out.entries.extend(MemoryEntry(s, task, c) for s, c in new_entries[:share])
    out.check()
    return out
