"""Joint contrastive objective over premise/hypothesis pair batches.

A batch holds M pairs laid out as 2M sentences (premise of pair j at row
2j, hypothesis at 2j+1) with labels +1 (entailment) or -1 (contradiction).
Entailment pairs drive a bidirectional instance-discrimination loss: each
member must pick out its partner among the other 2M-1 sentences by cosine
similarity at temperature tau.  Negatives can be reweighted by importance
weights alpha that emphasize sentences currently close to the anchor.
All M pairs additionally feed a binary entailment/contradiction
classification term, and the two terms combine as

    total = classification + beta * instance_discrimination.

Every per-anchor loss is evaluated in the equivalent triplet-style form
log(1 + sum_j exp((alpha_j * s_ij - s_ii') / tau)), which the fused
log1p-sum-exp node keeps stable for any weight magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Value
from .encoder import ModelForward


@dataclass
class BatchLabels:
    """Pair labels for one batch: y[j] = +1 entailment, -1 contradiction."""

    y: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64).ravel()
        if self.y.size == 0:
            raise ValueError("batch has no pairs")
        bad = np.setdiff1d(np.unique(self.y), [-1, 1])
        if bad.size:
            raise ValueError(f"labels must be +1 or -1, got {bad.tolist()}")

    @property
    def m(self) -> int:
        return self.y.size

    @property
    def p_m(self) -> int:
        return int(np.sum(self.y == 1))


@dataclass
class LossBreakdown:
    """Total loss plus its two reported components.

    `total` is the differentiable graph node; the component fields are its
    plain float parts, satisfying total = classification + beta * instance
    to 1e-12.  `per_anchor` holds the instance-discrimination value of every
    one of the 2M anchors (rows of non-positive pairs are computed but
    excluded from the batch term).  `no_positives` flags a batch whose
    instance term was forced to zero for lack of entailment pairs.
    """

    total: Value
    classification_term: float
    instance_disc_term: float
    per_anchor: np.ndarray
    tau: float
    beta: float
    no_positives: bool = False


def interleaved_pairs(m: int) -> tuple[tuple[int, int], ...]:
    return tuple((2 * j, 2 * j + 1) for j in range(m))


def _check_tau(tau: float) -> float:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return float(tau)


def _check_anchor(n: int, i: int, i_prime: int) -> None:
    if n < 2:
        raise ValueError("batch must hold at least one pair")
    if not (0 <= i < n and 0 <= i_prime < n):
        raise ValueError(f"anchor indices ({i}, {i_prime}) out of range [0, {n})")
    if i == i_prime:
        raise ValueError("anchor and partner must differ")


def _onehot_row(n: int, i: int) -> np.ndarray:
    row = np.zeros((1, n))
    row[0, i] = 1.0
    return row


def _negative_selector(n: int, i: int, i_prime: int) -> np.ndarray:
    """Constant n x (n-2) matrix picking every column except i and i'."""
    keep = [j for j in range(n) if j != i and j != i_prime]
    sel = np.zeros((n, len(keep)))
    for col, j in enumerate(keep):
        sel[j, col] = 1.0
    return sel


def _anchor_sims(sims: Value, i: int, i_prime: int) -> tuple[Value, Value]:
    """(similarities to the 2M-2 negatives as 1x(2M-2), s(z_i, z_i') as 1x1)."""
    g = sims.graph
    n = sims.shape[0]
    row = g.leaf(_onehot_row(n, i)) @ sims
    s_pos = row @ g.leaf(_onehot_row(n, i_prime).T)
    negs = row @ g.leaf(_negative_selector(n, i, i_prime))
    return negs, s_pos


def instance_disc_anchor(z: Value, i: int, i_prime: int, tau: float) -> Value:
    """Loss of discriminating partner i' from all other sentences, anchor i.

    Equals -log [ exp(s_ii'/tau) / sum_{j != i} exp(s_ij/tau) ], evaluated
    as log(1 + sum over negatives of exp((s_ij - s_ii')/tau)).  With a
    single pair in the batch there are no negatives and the loss is 0.
    """
    tau = _check_tau(tau)
    _check_anchor(z.shape[0], i, i_prime)
    sims = dc.cosine_similarity_matrix(z)
    negs, s_pos = _anchor_sims(sims, i, i_prime)
    return dc.log1p_sum_exp((negs - s_pos).scale(1.0 / tau))


def importance_weights(z: Value, i: int, i_prime: int, tau: float,
                       allow_grad: bool = False) -> Value:
    """Relative importance of each negative for anchor i, as a 1x(2M-2) row.

    alpha_j = exp(s_ij/tau) / mean_k exp(s_ik/tau) over the 2M-2 negatives,
    so the weights average to one.  By default the result is wrapped in
    stop-gradient: the weights act as sampling importances, not a learned
    quantity; pass allow_grad=True to let gradients flow for study.
    """
    tau = _check_tau(tau)
    n = z.shape[0]
    _check_anchor(n, i, i_prime)
    if n < 4:
        raise ValueError("importance weights need at least two pairs in the batch")
    sims = dc.cosine_similarity_matrix(z)
    negs, _ = _anchor_sims(sims, i, i_prime)
    alpha = _weights_from_negatives(negs, tau)
    return alpha if allow_grad else dc.stop_gradient(alpha)


def _weights_from_negatives(negs: Value, tau: float) -> Value:
    # max-subtraction cancels in the ratio, so it changes neither the value
    # nor the derivative of the weights
    shift = float(negs.data.max())
    scaled = (negs - shift).scale(1.0 / tau).exp()
    inv_mean = scaled.mean().log().scale(-1.0).exp()
    return scaled * inv_mean


def weighted_instance_disc_anchor(z: Value, i: int, i_prime: int, tau: float,
                                  alpha_grad: bool = False) -> Value:
    """Per-anchor loss with importance-weighted negative similarities.

    log(1 + sum_j exp((alpha_j * s_ij - s_ii') / tau)); reduces to the plain
    anchor loss when every alpha_j is 1 (equidistant negatives).
    """
    tau = _check_tau(tau)
    n = z.shape[0]
    _check_anchor(n, i, i_prime)
    if n < 4:
        raise ValueError("weighted anchor loss needs at least two pairs in the batch")
    sims = dc.cosine_similarity_matrix(z)
    negs, s_pos = _anchor_sims(sims, i, i_prime)
    alpha = _weights_from_negatives(negs, tau)
    if not alpha_grad:
        alpha = dc.stop_gradient(alpha)
    return dc.log1p_sum_exp((alpha * negs - s_pos).scale(1.0 / tau))


def _alpha_matrix(sim_data: np.ndarray, mask: np.ndarray, tau: float) -> np.ndarray:
    """Importance weights for every anchor at once (masked entries are 0)."""
    n = sim_data.shape[0]
    if n < 4:
        return np.zeros_like(sim_data)
    masked = np.where(mask, sim_data, -np.inf)
    shift = masked.max(axis=1, keepdims=True)
    ex = np.where(mask, np.exp((sim_data - shift) / tau), 0.0)
    denom = ex.sum(axis=1, keepdims=True) / (n - 2)
    return ex / denom


def _alpha_matrix_value(sims: Value, mask: np.ndarray, tau: float) -> Value:
    """Graph-node version of :func:`_alpha_matrix` for gradient-flow studies."""
    g = sims.graph
    n = sims.shape[0]
    masked = np.where(mask, sims.data, -np.inf)
    shift = g.leaf(masked.max(axis=1, keepdims=True) @ np.ones((1, n)))
    ex = (sims - shift).scale(1.0 / tau).exp() * g.leaf(mask.astype(float))
    row_sums = ex @ g.leaf(np.ones((n, 1)))
    inv_mean = (row_sums.scale(1.0 / (n - 2))).log().scale(-1.0).exp()
    return ex * (inv_mean @ g.leaf(np.ones((1, n))))


def _anchor_loss_column(sims: Value, pairs, tau: float, weighted: bool,
                        alpha_grad: bool) -> Value:
    """Per-anchor losses for all 2M anchors as a 2M x 1 column."""
    g = sims.graph
    n = sims.shape[0]
    partner = np.empty(n, dtype=int)
    for i, j in pairs:
        partner[i], partner[j] = j, i
    mask = np.ones((n, n), dtype=bool)
    rows = np.arange(n)
    mask[rows, rows] = False
    mask[rows, partner] = False

    pair_pick = np.zeros((n, n))
    pair_pick[rows, partner] = 1.0
    pos_col = (sims * g.leaf(pair_pick)) @ g.leaf(np.ones((n, 1)))
    pos_full = pos_col @ g.leaf(np.ones((1, n)))

    if weighted and n >= 4:
        if alpha_grad:
            alpha = _alpha_matrix_value(sims, mask, tau)
        else:
            alpha = g.leaf(_alpha_matrix(sims.data, mask, tau))
        exponents = (alpha * sims - pos_full).scale(1.0 / tau)
    else:
        exponents = (sims - pos_full).scale(1.0 / tau)
    return dc.log1p_sum_exp(exponents, mask=mask)


def _positive_pair_term(sims: Value, labels: BatchLabels, pairs, tau: float,
                        weighted: bool, alpha_grad: bool) -> tuple[Value, np.ndarray]:
    """Mean over positive pairs of both directed anchor losses."""
    column = _anchor_loss_column(sims, pairs, tau, weighted, alpha_grad)
    n = sims.shape[0]
    weights = np.zeros((1, n))
    for (i, j), y in zip(pairs, labels.y):
        if y == 1:
            weights[0, i] = weights[0, j] = 1.0 / labels.p_m
    total = sims.graph.leaf(weights) @ column
    return total, column.data[:, 0].copy()


def _validate_batch(z: Value, labels: BatchLabels, pairs):
    n = z.shape[0]
    if n != 2 * labels.m:
        raise ValueError(f"{labels.m} labels need {2 * labels.m} rows, got {n}")
    if pairs is None:
        pairs = interleaved_pairs(labels.m)
    if len(pairs) != labels.m:
        raise ValueError(f"index map covers {len(pairs)} pairs for {labels.m} labels")
    return pairs


def instance_disc_batch(z: Value, labels: BatchLabels, tau: float,
                        pairs=None) -> Value:
    """Batch instance-discrimination loss, averaged over positive pairs.

    Every positive pair contributes both directed anchor losses; the sum is
    divided by the number of positive pairs.  Contradiction pairs appear
    only inside the denominators, as negatives.
    """
    tau = _check_tau(tau)
    pairs = _validate_batch(z, labels, pairs)
    if labels.p_m == 0:
        raise ValueError("no positive pairs in batch")
    sims = dc.cosine_similarity_matrix(z)
    total, _ = _positive_pair_term(sims, labels, pairs, tau, weighted=False,
                                   alpha_grad=False)
    return total


def weighted_instance_disc_batch(z: Value, labels: BatchLabels, tau: float,
                                 pairs=None, hard_negatives: bool = True,
                                 alpha_grad: bool = False) -> Value:
    """Batch loss over importance-weighted anchors (uniform if disabled)."""
    tau = _check_tau(tau)
    pairs = _validate_batch(z, labels, pairs)
    if labels.p_m == 0:
        raise ValueError("no positive pairs in batch")
    sims = dc.cosine_similarity_matrix(z)
    total, _ = _positive_pair_term(sims, labels, pairs, tau,
                                   weighted=hard_negatives, alpha_grad=alpha_grad)
    return total


def pair_classification(u: Value, labels: BatchLabels, model: ModelForward) -> Value:
    """Mean cross-entropy of the pair classifier over all M pairs.

    Class 1 is entailment (y = +1), class 0 contradiction (y = -1).
    """
    if u.shape[0] != 2 * labels.m:
        raise ValueError(f"{labels.m} labels need {2 * labels.m} rows, got {u.shape[0]}")
    logits = model.classify_pairs(u)
    targets = (labels.y + 1) // 2
    return dc.softmax_cross_entropy(logits, targets)


def pairsupcon_batch(u: Value, z: Value | None, labels: BatchLabels,
                     model: ModelForward, tau: float, beta: float,
                     hard_negatives: bool = True, alpha_grad: bool = False,
                     include_classification: bool = True) -> LossBreakdown:
    """Assemble the joint objective for one batch.

    total = classification + beta * instance term, where the instance term
    averages the weighted anchor losses over positive pairs.  A batch with
    beta > 0 but no positive pairs gets a zero instance term and the
    `no_positives` flag instead of an error.  `z` may be None when beta = 0.
    """
    tau = _check_tau(tau)
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    graph = u.graph
    if z is not None and z.graph is not graph:
        raise ValueError("u and z must come from the same forward pass")

    if include_classification:
        cls_term = pair_classification(u, labels, model)
    else:
        cls_term = graph.leaf(0.0)

    no_positives = False
    per_anchor = np.zeros(2 * labels.m)
    if beta > 0:
        if labels.p_m == 0:
            no_positives = True
            id_term = graph.leaf(0.0)
        else:
            if z is None:
                raise ValueError("projected embeddings required when beta > 0")
            pairs = _validate_batch(z, labels, None)
            sims = dc.cosine_similarity_matrix(z)
            id_term, per_anchor = _positive_pair_term(
                sims, labels, pairs, tau, weighted=hard_negatives,
                alpha_grad=alpha_grad)
    else:
        id_term = graph.leaf(0.0)

    total = cls_term + id_term.scale(beta)
    return LossBreakdown(
        total=total,
        classification_term=cls_term.item(),
        instance_disc_term=id_term.item(),
        per_anchor=per_anchor,
        tau=tau,
        beta=float(beta),
        no_positives=no_positives,
    )
