"""Joint training loop: Adam with per-group learning rates and checkpoints.

The parameter groups mirror the usual backbone/head split: the embedding
table trains at `backbone_lr` while both heads train at `head_lr`.  The
loop is strictly deterministic -- a fixed config, seed and dataset produce
a bit-identical parameter trajectory and loss trace.

Checkpoints are versioned little-endian binaries: magic, version, a
length-prefixed JSON blob (train config + vocabulary), then each named
parameter matrix as raw row-major float64.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diffcore as dc
from . import losses
from .data import SentencePair, make_batches
from .diffcore import GradCheckReport, grad_check
from .encoder import (ModelForward, ModelParams, PROJECTION_DIM, Vocabulary,
                      init_params, tokenize)

OBJECTIVES = ("pairsupcon", "classification", "instance")

# published training profile vs. the small-scale default
PROFILES = {
    "desk": {"batch_size": 128, "head_lr": 1e-3, "backbone_lr": 1e-4, "epochs": 3},
    "paper": {"batch_size": 1024, "head_lr": 5e-4, "backbone_lr": 5e-6, "epochs": 3},
}


@dataclass
class TrainConfig:
    tau: float = 0.05
    beta: float = 1.0
    batch_size: int = 128
    epochs: int = 3
    head_lr: float = 1e-3
    backbone_lr: float = 1e-4
    seed: int = 0
    dim: int = 64
    proj_dim: int = PROJECTION_DIM
    activation: str = "relu"
    objective: str = "pairsupcon"
    hard_negatives: bool = True
    alpha_grad: bool = False

    def validate(self) -> None:
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if self.head_lr <= 0 or self.backbone_lr < 0:
            raise ValueError("learning rates must be positive (backbone may be 0)")
        if self.batch_size < 2:
            raise ValueError(f"batch size must be at least 2, got {self.batch_size}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    def with_profile(self, profile: str) -> "TrainConfig":
        if profile not in PROFILES:
            raise ValueError(f"unknown profile {profile!r}")
        return replace(self, **PROFILES[profile])


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls(m={n: np.zeros_like(a) for n, a in params.named()},
                   v={n: np.zeros_like(a) for n, a in params.named()})


def parameter_group(name: str) -> str:
    return "backbone" if name == "embedding" else "heads"


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState,
              learning_rates: dict[str, float]) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update, applied in place per parameter group.

    `learning_rates` maps group names ("heads", "backbone") to step sizes.
    """
    state.step += 1
    t = state.step
    corr1 = 1.0 - state.beta1 ** t
    corr2 = 1.0 - state.beta2 ** t
    for name, arr in params.named():
        grad = grads[name]
        if grad.shape != arr.shape:
            raise ValueError(f"{name}: gradient shape {grad.shape} != {arr.shape}")
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        lr = learning_rates[parameter_group(name)]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * grad
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * grad ** 2
        m_hat = state.m[name] / corr1
        v_hat = state.v[name] / corr2
        arr -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


@dataclass
class TraceRow:
    step: int
    epoch: int
    total: float
    classification: float
    instance: float


@dataclass
class TrainResult:
    params: ModelParams
    vocab: Vocabulary
    config: TrainConfig
    trace: list[TraceRow] = field(default_factory=list)


def batch_loss(params: ModelParams, batch_tokens, labels: losses.BatchLabels,
               config: TrainConfig, leaf_overrides=None, graph=None):
    """Forward pass for one batch under the configured objective.

    Returns (breakdown, forward) so callers can run backward on the same
    graph and read gradients off the parameter leaves.
    """
    fw = ModelForward(params, graph=graph, leaf_overrides=leaf_overrides)
    u = fw.encode(batch_tokens)
    needs_projection = config.objective != "classification" and config.beta > 0
    z = fw.project(u) if needs_projection else None
    if config.objective == "classification":
        breakdown = losses.pairsupcon_batch(u, None, labels, fw, config.tau, 0.0)
    elif config.objective == "instance":
        breakdown = losses.pairsupcon_batch(
            u, z, labels, fw, config.tau, config.beta,
            hard_negatives=config.hard_negatives, alpha_grad=config.alpha_grad,
            include_classification=False)
    else:
        breakdown = losses.pairsupcon_batch(
            u, z, labels, fw, config.tau, config.beta,
            hard_negatives=config.hard_negatives, alpha_grad=config.alpha_grad)
    return breakdown, fw


def train(config: TrainConfig, pairs: list[SentencePair],
          params_init: ModelParams | None = None) -> TrainResult:
    """Optimize the joint objective over the pair corpus.

    Epoch e shuffles with seed (config.seed, e); every batch appends one
    trace row holding the pre-update loss breakdown.
    """
    config.validate()
    vocab = Vocabulary.build([s for p in pairs for s in (p.premise, p.hypothesis)])
    if params_init is not None:
        params = params_init.copy()
        if params.vocab_size != vocab.size:
            raise ValueError(f"initial parameters cover {params.vocab_size} tokens, "
                             f"corpus vocabulary has {vocab.size}")
    else:
        params = init_params(vocab.size, config.dim, config.seed,
                             proj_dim=config.proj_dim, activation=config.activation)
    state = AdamState.zeros_like(params)
    rates = {"heads": config.head_lr, "backbone": config.backbone_lr}
    trace: list[TraceRow] = []
    token_cache: dict[str, list[int]] = {}
    step = 0
    for epoch in range(config.epochs):
        epoch_seed = np.random.SeedSequence([config.seed, epoch])
        for batch in make_batches(pairs, config.batch_size, epoch_seed):
            tokens = []
            for sent in batch.sentences:
                if sent not in token_cache:
                    token_cache[sent] = tokenize(sent, vocab)
                tokens.append(token_cache[sent])
            labels = losses.BatchLabels(batch.labels)
            breakdown, fw = batch_loss(params, tokens, labels, config)
            total = breakdown.total.item()
            if not np.isfinite(total):
                raise FloatingPointError(
                    f"non-finite loss at step {step} (epoch {epoch}, "
                    f"{labels.m} pairs, {labels.p_m} positive)")
            dc.backward(fw.graph, breakdown.total)
            grads = {name: leaf.grad for name, leaf in fw.leaves.items()}
            params, state = adam_step(params, grads, state, rates)
            trace.append(TraceRow(step, epoch, total,
                                  breakdown.classification_term,
                                  breakdown.instance_disc_term))
            step += 1
    return TrainResult(params=params, vocab=vocab, config=config, trace=trace)


# --- gradient suite ---------------------------------------------------------

@dataclass
class GradSuiteTrial:
    trial: int
    m: int
    dim: int
    tau: float
    per_parameter: dict[str, GradCheckReport]

    @property
    def max_rel_err(self) -> float:
        return max(r.max_rel_err for r in self.per_parameter.values())


def _random_trial_batch(rng, m, vocab_size):
    tokens = [[int(rng.integers(2, vocab_size)) for _ in range(int(rng.integers(1, 6)))]
              for _ in range(2 * m)]
    y = rng.choice([-1, 1], size=m)
    y[int(rng.integers(m))] = 1  # at least one positive pair
    return tokens, losses.BatchLabels(y)


def loss_gradient_suite(trials: int = 20, seed: int = 0,
                        taus=(0.05, 0.5, 1.0), vocab_size: int = 6,
                        epsilon: float = 1e-5) -> list[GradSuiteTrial]:
    """Finite-difference check of the full joint loss, parameter by parameter.

    Each trial draws a random small configuration (M <= 4, d <= 8), builds
    the complete objective, and compares the analytic gradient of every
    parameter matrix against central differences.  Weight gradients are
    allowed to flow through the importance weights here: finite differences
    measure the true derivative of the loss value, and stopping the weights
    is a training-time choice checked separately.
    """
    results = []
    for t in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence([seed, t]))
        m = int(rng.integers(2, 5))
        dim = int(rng.integers(2, 9))
        tau = float(taus[t % len(taus)])
        tokens, labels = _random_trial_batch(rng, m, vocab_size)
        params = init_params(vocab_size, dim, np.random.SeedSequence([seed, t, 1]))
        config = TrainConfig(tau=tau, beta=1.0, dim=dim, alpha_grad=True)

        reports = {}
        for name, base in params.named():
            def fn(x, _name=name):
                fw_params = params.replace(_name, x.data)
                breakdown, _ = batch_loss(fw_params, tokens, labels, config,
                                          leaf_overrides={_name: x}, graph=x.graph)
                return breakdown.total

            reports[name] = grad_check(fn, base, epsilon)
        results.append(GradSuiteTrial(t, m, dim, tau, reports))
    return results


# --- checkpoint io ----------------------------------------------------------

_MAGIC = b"PSUPCKPT"
_VERSION = 1


def save_checkpoint(params: ModelParams, config: TrainConfig, vocab: Vocabulary,
                    path) -> None:
    """Versioned binary checkpoint; loading restores every bit."""
    meta = {
        "config": config.to_dict(),
        "activation": params.activation,
        "vocab": vocab.id_to_token[2:],
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _VERSION))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    named = params.named()
    buf.write(struct.pack("<I", len(named)))
    for name, arr in named:
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, count: int) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise ValueError("corrupt checkpoint: truncated file")
    return data


def load_checkpoint(path) -> tuple[ModelParams, TrainConfig, Vocabulary]:
    with open(path, "rb") as fh:
        if _read_exact(fh, len(_MAGIC)) != _MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        version = struct.unpack("<I", _read_exact(fh, 4))[0]
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        meta = json.loads(_read_exact(fh, struct.unpack("<I", _read_exact(fh, 4))[0]))
        count = struct.unpack("<I", _read_exact(fh, 4))[0]
        arrays = {}
        for _ in range(count):
            name_len = struct.unpack("<I", _read_exact(fh, 4))[0]
            name = _read_exact(fh, name_len).decode("utf-8")
            rows, cols = struct.unpack("<II", _read_exact(fh, 8))
            payload = _read_exact(fh, rows * cols * 8)
            arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()
        if fh.read(1):
            raise ValueError("corrupt checkpoint: trailing data")
    config = TrainConfig.from_dict(meta["config"])
    vocab = Vocabulary.from_tokens(meta["vocab"])
    try:
        params = ModelParams(activation=meta["activation"], **arrays)
        params.validate()
    except (TypeError, ValueError) as exc:
        raise ValueError(f"corrupt checkpoint: {exc}") from None
    if params.vocab_size != vocab.size:
        raise ValueError("corrupt checkpoint: embedding rows do not match vocabulary")
    return params, config, vocab
