"""Loss, exact BPTT gradients, Adam, gradient checking, and the train/eval loops.

The backward pass unrolls the k message-passing steps recorded in a
ForwardTrace and accumulates analytic gradients for every parameter,
including the message-path terms that flow through the per-cue edge matrices
into every neighbor's previous state. Correctness is anchored by
``grad_check``, which compares against central finite differences.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import cap_cues
from .errors import NumericalError, ShapeError
from .model import (
    DEFAULT_HIDDEN_SIZE,
    DEFAULT_K_STEPS,
    ForwardTrace,
    GraphSample,
    ModelParams,
    forward,
)

DEFAULT_LEARNING_RATE = 1e-4
DEFAULT_EPOCHS = 20
LR_GRID = (0.00001, 0.0001, 0.001, 0.01)

LOG_CLAMP = 1e-300


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; defaults are the shipped configuration."""

    learning_rate: float = DEFAULT_LEARNING_RATE
    epochs: int = DEFAULT_EPOCHS
    k_steps: int = DEFAULT_K_STEPS
    hidden_size: int = DEFAULT_HIDDEN_SIZE
    batch_size: int = 1
    seed: int = 0
    clip_norm: float | None = None
    lr_grid: tuple[float, ...] = LR_GRID

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.k_steps < 0:
            raise ValueError(f"k_steps must be >= 0, got {self.k_steps}")


@dataclass
class Gradients:
    """Gradient arrays shape-matched to ModelParams, in the same field order."""

    proj_w: list[np.ndarray]
    proj_b: list[np.ndarray]
    edge_w: list[np.ndarray]
    gru_wz: np.ndarray
    gru_wr: np.ndarray
    gru_wh: np.ndarray
    gru_uz: np.ndarray
    gru_ur: np.ndarray
    gru_uh: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "Gradients":
        return cls(
            proj_w=[np.zeros_like(w) for w in params.proj_w],
            proj_b=[np.zeros_like(b) for b in params.proj_b],
            edge_w=[np.zeros_like(w) for w in params.edge_w],
            gru_wz=np.zeros_like(params.gru_wz),
            gru_wr=np.zeros_like(params.gru_wr),
            gru_wh=np.zeros_like(params.gru_wh),
            gru_uz=np.zeros_like(params.gru_uz),
            gru_ur=np.zeros_like(params.gru_ur),
            gru_uh=np.zeros_like(params.gru_uh),
            out_w=np.zeros_like(params.out_w),
            out_b=np.zeros_like(params.out_b),
        )

    def named_arrays(self, params: ModelParams) -> list[tuple[str, np.ndarray]]:
        items: list[tuple[str, np.ndarray]] = []
        for i, spec in enumerate(params.cue_specs):
            items.append((f"proj_w[{spec.name}]", self.proj_w[i]))
            items.append((f"proj_b[{spec.name}]", self.proj_b[i]))
        for i, spec in enumerate(params.cue_specs):
            items.append((f"edge_w[{spec.name}]", self.edge_w[i]))
        items.extend(
            [
                ("gru_wz", self.gru_wz),
                ("gru_wr", self.gru_wr),
                ("gru_wh", self.gru_wh),
                ("gru_uz", self.gru_uz),
                ("gru_ur", self.gru_ur),
                ("gru_uh", self.gru_uh),
                ("out_w", self.out_w),
                ("out_b", self.out_b),
            ]
        )
        return items

    def add_(self, other: "Gradients") -> None:
        for i in range(len(self.proj_w)):
            self.proj_w[i] += other.proj_w[i]
            self.proj_b[i] += other.proj_b[i]
            self.edge_w[i] += other.edge_w[i]
        self.gru_wz += other.gru_wz
        self.gru_wr += other.gru_wr
        self.gru_wh += other.gru_wh
        self.gru_uz += other.gru_uz
        self.gru_ur += other.gru_ur
        self.gru_uh += other.gru_uh
        self.out_w += other.out_w
        self.out_b += other.out_b

    def scale_(self, factor: float) -> None:
        for i in range(len(self.proj_w)):
            self.proj_w[i] *= factor
            self.proj_b[i] *= factor
            self.edge_w[i] *= factor
        self.gru_wz *= factor
        self.gru_wr *= factor
        self.gru_wh *= factor
        self.gru_uz *= factor
        self.gru_ur *= factor
        self.gru_uh *= factor
        self.out_w *= factor
        self.out_b *= factor

    def global_norm(self, params: ModelParams) -> float:
        total = 0.0
        for _, g in self.named_arrays(params):
            total += float(np.sum(g * g))
        return float(np.sqrt(total))


def loss(probs: np.ndarray, label: int) -> float:
    """Node-averaged cross entropy: -(1/N) * sum_n log p_n[label].

    True-class probabilities of exactly zero are clamped to 1e-300 before the
    log (with a RuntimeWarning) so the loss stays finite.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ShapeError(f"loss needs a non-empty (N, C) array, got shape {probs.shape}")
    if not 0 <= label < probs.shape[1]:
        raise ValueError(f"label {label} outside [0, {probs.shape[1]})")
    p = probs[:, label]
    if np.any(p < LOG_CLAMP):
        warnings.warn(
            "true-class probability below 1e-300 clamped before log",
            RuntimeWarning,
            stacklevel=2,
        )
        p = np.maximum(p, LOG_CLAMP)
    return float(-np.mean(np.log(p)))


def backward(trace: ForwardTrace, sample: GraphSample, params: ModelParams) -> Gradients:
    """Exact analytic gradient of the node-averaged cross entropy.

    ``trace`` must come from ``forward(sample, params, keep_trace=True)``.
    Message-path gradients for cue q use the identity
    dE_q = D (x) S_q - sum_{p in q} dm_p (x) h_p with D = sum_n dm_n, the
    transpose of the O(N) aggregation trick used in the forward pass.
    """
    if trace is None or trace.probs is None:
        raise ValueError("backward requires a trace from forward(keep_trace=True)")
    grads = Gradients.zeros_like(params)
    n = trace.probs.shape[0]
    k_steps = params.k_steps
    if len(trace.messages) != k_steps or len(trace.hidden) != k_steps + 1:
        raise ShapeError(
            f"trace has {len(trace.messages)} steps, model expects {k_steps}"
        )

    # Cue row ranges in canonical order (same layout at every step).
    cue_slices: list[slice] = []
    row = 0
    for feats in sample.features_per_cue:
        cue_slices.append(slice(row, row + feats.shape[0]))
        row += feats.shape[0]

    # Softmax + cross entropy: dL/do = (p - onehot(y)) / N.
    d_logits = trace.probs.copy()
    d_logits[:, sample.label] -= 1.0
    d_logits /= n
    h_last = trace.hidden[k_steps]
    grads.out_w += d_logits.T @ h_last
    grads.out_b += d_logits.sum(axis=0)
    d_h = d_logits @ params.out_w  # (N, L_h)

    for k in range(k_steps - 1, -1, -1):
        m = trace.messages[k]
        z = trace.z_gates[k]
        r = trace.r_gates[k]
        h_cand = trace.h_cand[k]
        h_prev = trace.hidden[k]

        # h' = (1 - z) * h_prev + z * h_cand
        d_z = d_h * (h_cand - h_prev)
        d_cand = d_h * z
        d_h_prev = d_h * (1.0 - z)

        # h_cand = tanh(Wh m + Uh (r * h_prev))
        d_pre_cand = d_cand * (1.0 - h_cand * h_cand)
        gated = r * h_prev
        grads.gru_wh += d_pre_cand.T @ m
        grads.gru_uh += d_pre_cand.T @ gated
        d_m = d_pre_cand @ params.gru_wh
        d_gated = d_pre_cand @ params.gru_uh
        d_r = d_gated * h_prev
        d_h_prev += d_gated * r

        # r = sigmoid(Wr m + Ur h_prev)
        d_pre_r = d_r * r * (1.0 - r)
        grads.gru_wr += d_pre_r.T @ m
        grads.gru_ur += d_pre_r.T @ h_prev
        d_m += d_pre_r @ params.gru_wr
        d_h_prev += d_pre_r @ params.gru_ur

        # z = sigmoid(Wz m + Uz h_prev)
        d_pre_z = d_z * z * (1.0 - z)
        grads.gru_wz += d_pre_z.T @ m
        grads.gru_uz += d_pre_z.T @ h_prev
        d_m += d_pre_z @ params.gru_wz
        d_h_prev += d_pre_z @ params.gru_uz

        # Message path: m_n = sum_{p != n} E_{cue(p)} h_p.
        if n > 1:
            d_m_total = d_m.sum(axis=0)
            for q, sl in enumerate(cue_slices):
                if sl.stop == sl.start:
                    continue
                d_m_q = d_m[sl]
                h_q = h_prev[sl]
                grads.edge_w[q] += np.outer(d_m_total, h_q.sum(axis=0)) - d_m_q.T @ h_q
                d_h_prev[sl] += (d_m_total - d_m_q) @ params.edge_w[q]
        d_h = d_h_prev

    # Projection: h0 = relu(W_i x + b_i).
    d_act = d_h * (trace.hidden[0] > 0)
    for i, sl in enumerate(cue_slices):
        if sl.stop == sl.start:
            continue
        grads.proj_w[i] += d_act[sl].T @ sample.features_per_cue[i]
        grads.proj_b[i] += d_act[sl].sum(axis=0)
    return grads


@dataclass
class AdamState:
    """Adaptive-moment optimizer state, shape-matched to the parameters."""

    learning_rate: float = DEFAULT_LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: ModelParams, learning_rate: float = DEFAULT_LEARNING_RATE,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        arrays = [a for _, a in params.named_arrays()]
        return cls(
            learning_rate=learning_rate,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            step_count=0,
            m=[np.zeros_like(a) for a in arrays],
            v=[np.zeros_like(a) for a in arrays],
        )


def adam_step(params: ModelParams, grads: Gradients, state: AdamState) -> tuple[ModelParams, AdamState]:
    """One bias-corrected adaptive-moment update, in place.

    Aborts without touching parameters or state if any gradient entry is
    non-finite.
    """
    named = grads.named_arrays(params)
    for name, g in named:
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name}")
    grad_arrays = [a for _, a in named]
    param_arrays = [a for _, a in params.named_arrays()]
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for p, g, m, v in zip(param_arrays, grad_arrays, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
    return params, state


@dataclass
class GradCheckReport:
    """Per-parameter-group maxima of |analytic - numeric| / max(|a|, |n|, 1e-3)."""

    per_group: dict[str, float]
    max_relative_error: float
    worst_group: str


def fd_gradients(params: ModelParams, sample: GraphSample, epsilon: float = 1e-5) -> Gradients:
    """Central-difference gradients, (L(t+e) - L(t-e)) / 2e per entry.

    Runs two forward passes per parameter entry; intended for toy models.
    """

    def loss_at() -> float:
        res = forward(sample, params, keep_trace=False)
        return loss(res.probs, sample.label)

    grads = Gradients.zeros_like(params)
    grad_arrays = dict(grads.named_arrays(params))
    for name, arr in params.named_arrays():
        out = grad_arrays[name]
        flat = arr.reshape(-1)
        flat_out = out.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + epsilon
            plus = loss_at()
            flat[idx] = orig - epsilon
            minus = loss_at()
            flat[idx] = orig
            flat_out[idx] = (plus - minus) / (2.0 * epsilon)
    return grads


def compare_gradients(
    analytic: Gradients, numeric: Gradients, params: ModelParams
) -> GradCheckReport:
    """Relative error per entry with a 1e-3 denominator floor.

    The floor keeps finite-difference roundoff (absolute noise around 1e-11
    at epsilon = 1e-5) from dominating entries whose true gradient is zero.
    """
    per_group: dict[str, float] = {}
    numeric_arrays = dict(numeric.named_arrays(params))
    for name, a in analytic.named_arrays(params):
        f = numeric_arrays[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-3)
        rel = np.abs(a - f) / denom
        per_group[name] = float(rel.max()) if rel.size else 0.0
    worst = max(per_group, key=per_group.get)
    return GradCheckReport(per_group, per_group[worst], worst)


def grad_check(
    params: ModelParams, sample: GraphSample, epsilon: float = 1e-5
) -> GradCheckReport:
    """Compare analytic BPTT gradients against central finite differences."""
    res = forward(sample, params, keep_trace=True)
    analytic = backward(res.trace, sample, params)
    numeric = fd_gradients(params, sample, epsilon)
    return compare_gradients(analytic, numeric, params)


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """Generator for one training epoch, derived only from (seed, epoch).

    Keyed derivation (rather than one long stream) lets an interrupted run
    resume at epoch e+1 with exactly the shuffle and cue subsampling the
    uninterrupted run would have used.
    """
    return np.random.default_rng(np.random.SeedSequence([seed, epoch]))


def train_epoch(
    samples: list[GraphSample],
    params: ModelParams,
    state: AdamState,
    config: TrainConfig,
    rng: np.random.Generator,
) -> float:
    """One pass over the training set in seeded-shuffled order; returns mean loss.

    Cue capping is re-applied per sample with this epoch's rng, so the random
    subsets differ between epochs. Gradients are averaged within a batch.
    """
    if not samples:
        raise ValueError("train_epoch needs a non-empty dataset")
    order = rng.permutation(len(samples))
    losses: list[float] = []
    for start in range(0, len(order), config.batch_size):
        batch = order[start : start + config.batch_size]
        batch_grads = Gradients.zeros_like(params)
        for idx in batch:
            sample = cap_cues(samples[idx], params.cue_specs, "train", rng)
            result = forward(sample, params, keep_trace=True)
            losses.append(loss(result.probs, sample.label))
            batch_grads.add_(backward(result.trace, sample, params))
        if len(batch) > 1:
            batch_grads.scale_(1.0 / len(batch))
        if config.clip_norm is not None:
            norm = batch_grads.global_norm(params)
            if norm > config.clip_norm:
                batch_grads.scale_(config.clip_norm / norm)
        adam_step(params, batch_grads, state)
    return float(np.mean(losses))


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # (C, C) counts, rows = true class, cols = predicted
    n_samples: int


def evaluate(
    samples: list[GraphSample], params: ModelParams, threads: int = 1
) -> EvalResult:
    """Deterministic accuracy over a dataset (eval-mode cue capping).

    With ``threads > 1`` the per-sample forwards run in a thread pool;
    results are reduced in dataset order, so the outcome is identical to the
    sequential run.
    """
    if not samples:
        raise ValueError("evaluate needs a non-empty dataset")
    n_classes = params.n_classes

    def predict(sample: GraphSample) -> int:
        capped = cap_cues(sample, params.cue_specs, "eval")
        return forward(capped, params).predicted_class

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            predictions = list(pool.map(predict, samples))
    else:
        predictions = [predict(s) for s in samples]

    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    correct = 0
    for sample, pred in zip(samples, predictions):
        confusion[sample.label, pred] += 1
        correct += int(pred == sample.label)
    return EvalResult(correct / len(samples), confusion, len(samples))
