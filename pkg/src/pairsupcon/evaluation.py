"""Embedding-quality harness.

Clustering accuracy runs seeded k-means (k-means++ initialization, Lloyd
iterations to an assignment fixpoint) and scores the result against the
true classes through an optimal one-to-one cluster/class assignment.
Scored-pair similarity uses tie-aware Spearman correlation of cosine
similarities against the gold scores.  Probes train multinomial logistic
regression on frozen embeddings, either few-shot (16 per class, 5 sampled
training sets) or on a fixed train/test split.

All evaluations are pure functions of their inputs and seeds; reports are
reproducible bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from .data import LabeledText, ScoredPair
from .encoder import ModelParams, Vocabulary, encode_corpus


@dataclass
class EvalReport:
    """One metric with its per-run values and protocol parameters."""

    metric: str
    values: list[float]
    mean: float
    std: float
    params: dict = field(default_factory=dict)

    @classmethod
    def from_values(cls, metric: str, values, **params) -> "EvalReport":
        values = [float(v) for v in values]
        return cls(metric=metric, values=values,
                   mean=float(np.mean(values)), std=float(np.std(values)),
                   params=params)

    def to_json(self) -> str:
        return json.dumps({"metric": self.metric, "values": self.values,
                           "mean": self.mean, "std": self.std,
                           "params": self.params}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        data = json.loads(text)
        return cls(metric=data["metric"], values=list(data["values"]),
                   mean=data["mean"], std=data["std"], params=data["params"])


def _kmeanspp_init(x: np.ndarray, k: int, rng) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centers[c] = x[idx]
        d2 = np.minimum(d2, ((x - centers[c]) ** 2).sum(axis=1))
    return centers


def kmeans(x: np.ndarray, clusters: int, seed, max_iter: int = 300,
           return_history: bool = False):
    """Seeded k-means assignment (k-means++ init, Lloyd to a fixpoint).

    Iterates until the assignment stops changing or `max_iter` passes.  An
    empty cluster is re-seeded to the point farthest from its current
    center.  Inertia is asserted non-increasing across iterations.  With
    return_history=True also returns the per-iteration inertia list.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite entries")
    n = x.shape[0]
    if not 1 <= clusters <= n:
        raise ValueError(f"cluster count {clusters} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp_init(x, clusters, rng)
    assign = None
    history: list[float] = []
    for _ in range(max_iter):
        d2 = cdist(x, centers, "sqeuclidean")
        new_assign = d2.argmin(axis=1)
        counts = np.bincount(new_assign, minlength=clusters)
        for c in np.flatnonzero(counts == 0):
            own = d2[np.arange(n), new_assign]
            # only steal points whose cluster keeps at least one member
            own[counts[new_assign] <= 1] = -np.inf
            far = int(own.argmax())
            counts[new_assign[far]] -= 1
            new_assign[far] = c
            counts[c] += 1
            centers[c] = x[far]
        inertia = float(((x - centers[new_assign]) ** 2).sum())
        assert not history or inertia <= history[-1] + 1e-9 * max(1.0, history[-1]), \
            f"inertia increased: {history[-1]} -> {inertia}"
        history.append(inertia)
        if assign is not None and np.array_equal(assign, new_assign):
            break
        assign = new_assign
        for c in range(clusters):
            centers[c] = x[assign == c].mean(axis=0)
    if return_history:
        return assign, history
    return assign


def hungarian_accuracy(pred, true) -> float:
    """Clustering accuracy under the best one-to-one cluster/class matching."""
    pred = np.asarray(pred).ravel()
    true = np.asarray(true).ravel()
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise ValueError("empty label vectors")
    _, pi = np.unique(pred, return_inverse=True)
    _, ti = np.unique(true, return_inverse=True)
    side = max(pi.max(), ti.max()) + 1
    table = np.zeros((side, side))
    np.add.at(table, (pi, ti), 1.0)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum() / pred.size)


def clustering_eval(x: np.ndarray, labels, clusters: int, n_runs: int = 10,
                    base_seed: int = 0) -> EvalReport:
    """Mean/std clustering accuracy over independently seeded k-means runs."""
    labels = np.asarray(labels).ravel()
    values = [hungarian_accuracy(kmeans(x, clusters, base_seed + run), labels)
              for run in range(n_runs)]
    return EvalReport.from_values("clustering_accuracy", values,
                                  k=clusters, n_runs=n_runs, base_seed=base_seed)


def spearman(x, y) -> float:
    """Tie-aware rank correlation: Pearson correlation of average ranks."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ValueError("need at least 2 observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("undefined correlation for a constant input")
    rx = rankdata(x, method="average")
    ry = rankdata(y, method="average")
    return float(np.corrcoef(rx, ry)[0, 1])


def sts_eval(params: ModelParams, vocab: Vocabulary,
             scored: list[ScoredPair]) -> EvalReport:
    """Spearman correlation of representation cosines against gold scores.

    Similarity is computed on the mean-pooled representations u (the
    projection head serves the contrastive loss only), over the full
    concatenated pair set.
    """
    if len(scored) < 2:
        raise ValueError("need at least 2 scored pairs")
    left = encode_corpus([p.sentence1 for p in scored], vocab, params)
    right = encode_corpus([p.sentence2 for p in scored], vocab, params)
    norms_l = np.linalg.norm(left, axis=1)
    norms_r = np.linalg.norm(right, axis=1)
    if np.any(norms_l == 0) or np.any(norms_r == 0):
        raise ValueError("zero-norm sentence representation")
    cosines = np.sum(left * right, axis=1) / (norms_l * norms_r)
    rho = spearman(cosines, [p.score for p in scored])
    return EvalReport.from_values("sts_spearman", [rho], pairs=len(scored))


def _softmax_fit(x: np.ndarray, y: np.ndarray, n_classes: int,
                 reg: float = 1.0, iters: int = 500) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch gradient descent for multinomial logistic regression.

    Objective: mean cross-entropy + reg * ||W||^2 / (2n); the intercept is
    unpenalized.  The step size is 1 over a Lipschitz bound of the gradient,
    so the descent never diverges.
    """
    n, d = x.shape
    w = np.zeros((d, n_classes))
    b = np.zeros((1, n_classes))
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    sigma = np.linalg.norm(x, 2) if x.size else 0.0
    lipschitz = 0.5 * sigma ** 2 / n + (reg + 1.0) / n
    lr = 1.0 / lipschitz
    for _ in range(iters):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        ex = np.exp(logits)
        probs = ex / ex.sum(axis=1, keepdims=True)
        delta = (probs - onehot) / n
        w -= lr * (x.T @ delta + (reg / n) * w)
        b -= lr * delta.sum(axis=0, keepdims=True)
    return w, b


def _probe_accuracy(w, b, x, y) -> float:
    pred = (x @ w + b).argmax(axis=1)
    return float(np.mean(pred == y))


def logistic_probe(train_x, train_y, test_x, test_y) -> float:
    """Test accuracy of a logistic-regression probe on frozen embeddings."""
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_y = np.asarray(train_y).ravel()
    test_y = np.asarray(test_y).ravel()
    n_classes = int(max(train_y.max(), test_y.max())) + 1
    w, b = _softmax_fit(train_x, train_y, n_classes)
    return _probe_accuracy(w, b, test_x, test_y)


def fewshot_probe(embeddings, labels, shots: int = 16, sets: int = 5,
                  seed: int = 0) -> EvalReport:
    """Few-shot probe: sample `shots` per class, test on the remainder.

    Each of the `sets` training sets is sampled with its own derived seed;
    the report carries per-set accuracies plus their mean/std.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels).ravel()
    classes = np.unique(y)
    for c in classes:
        count = int(np.sum(y == c))
        if count < shots + 1:
            raise ValueError(f"class {c} has only {count} examples, "
                             f"needs at least {shots + 1}")
    values = []
    for t in range(sets):
        rng = np.random.default_rng(np.random.SeedSequence([seed, t]))
        train_idx = []
        for c in classes:
            members = np.flatnonzero(y == c)
            train_idx.extend(members[rng.permutation(members.size)[:shots]])
        train_idx = np.sort(np.asarray(train_idx))
        test_mask = np.ones(y.size, dtype=bool)
        test_mask[train_idx] = False
        w, b = _softmax_fit(x[train_idx], y[train_idx], int(classes.max()) + 1)
        values.append(_probe_accuracy(w, b, x[test_mask], y[test_mask]))
    return EvalReport.from_values("fewshot_accuracy", values,
                                  shots=shots, sets=sets, seed=seed)


def embed_labeled(records: list[LabeledText], vocab: Vocabulary,
                  params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Mean-pooled representations and class ids for a labeled corpus."""
    x = encode_corpus([r.text for r in records], vocab, params)
    y = np.array([r.class_id for r in records])
    return x, y
