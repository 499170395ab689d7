"""Model structure and forward pass.

Each classified item carries a variable number of feature vectors grouped by
cue type (faces, objects, whole image, ...). Every feature vector becomes a
node of a complete graph; nodes exchange messages weighted by the sender's
cue type and update their hidden states with a shared GRU for a fixed number
of steps. A shared linear readout plus softmax yields per-node class
probabilities, and the item-level prediction is a majority vote over nodes.

Node order is canonical throughout: ascending cue id, insertion order within
a cue. Per-cue state sums are accumulated in value-sorted coordinate order,
which makes the whole forward pass bit-exact under any permutation of the
feature vectors within a cue.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ShapeError
from .linalg import relu, sigmoid, softmax_stable

DEFAULT_HIDDEN_SIZE = 128
DEFAULT_K_STEPS = 4


@dataclass(frozen=True)
class CueSpec:
    """Declares one cue type: its feature dimensionality and node-count caps."""

    cue_id: int
    name: str
    feature_dim: int
    cap_train: int = 16
    cap_eval: int = 48

    def __post_init__(self):
        if self.feature_dim < 1:
            raise ValueError(f"cue '{self.name}': feature_dim must be >= 1")
        if self.cap_train < 1 or self.cap_eval < 1:
            raise ValueError(f"cue '{self.name}': caps must be >= 1")


@dataclass
class GraphSample:
    """One item's worth of data: per-cue feature vectors plus a class label.

    ``features_per_cue[i]`` is a (N_i, L_i) float64 array; N_i may be 0 for
    any individual cue, but the total node count must be at least 1.
    """

    sample_id: str
    label: int
    features_per_cue: list[np.ndarray]

    @property
    def node_count(self) -> int:
        return sum(f.shape[0] for f in self.features_per_cue)

    def validate(self, specs: tuple[CueSpec, ...], n_classes: int) -> None:
        from .errors import DataError

        if len(self.features_per_cue) != len(specs):
            raise DataError(
                f"expected features for {len(specs)} cues, got {len(self.features_per_cue)}",
                sample_id=self.sample_id,
            )
        for spec, feats in zip(specs, self.features_per_cue):
            if feats.ndim != 2 or feats.shape[1] != spec.feature_dim:
                raise DataError(
                    f"feature dim mismatch: expected {spec.feature_dim}, "
                    f"got shape {feats.shape}",
                    sample_id=self.sample_id,
                    cue=spec.name,
                )
        if not 0 <= self.label < n_classes:
            raise DataError(
                f"label {self.label} outside [0, {n_classes})", sample_id=self.sample_id
            )
        if self.node_count < 1:
            raise DataError("sample has zero nodes", sample_id=self.sample_id)


@dataclass
class ModelParams:
    """All trainable parameters plus the hyperparameters that fix their shapes.

    Weight sharing follows the model: one projection (W, b) and one edge
    matrix per cue type, a single GRU parameter set shared by every node,
    and a single readout shared by every node. The parameter count is
    therefore independent of graph size.
    """

    cue_specs: tuple[CueSpec, ...]
    hidden_size: int
    n_classes: int
    k_steps: int
    proj_w: list[np.ndarray]  # per cue, (L_h, L_i)
    proj_b: list[np.ndarray]  # per cue, (L_h,)
    edge_w: list[np.ndarray]  # per cue, (L_h, L_h)
    gru_wz: np.ndarray  # (L_h, L_h)
    gru_wr: np.ndarray
    gru_wh: np.ndarray
    gru_uz: np.ndarray
    gru_ur: np.ndarray
    gru_uh: np.ndarray
    out_w: np.ndarray  # (C, L_h)
    out_b: np.ndarray  # (C,)

    @property
    def n_cues(self) -> int:
        return len(self.cue_specs)

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """All parameter arrays in the canonical (checkpoint) field order."""
        items: list[tuple[str, np.ndarray]] = []
        for i, spec in enumerate(self.cue_specs):
            items.append((f"proj_w[{spec.name}]", self.proj_w[i]))
            items.append((f"proj_b[{spec.name}]", self.proj_b[i]))
        for i, spec in enumerate(self.cue_specs):
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

    def copy(self) -> "ModelParams":
        return ModelParams(
            cue_specs=self.cue_specs,
            hidden_size=self.hidden_size,
            n_classes=self.n_classes,
            k_steps=self.k_steps,
            proj_w=[w.copy() for w in self.proj_w],
            proj_b=[b.copy() for b in self.proj_b],
            edge_w=[w.copy() for w in self.edge_w],
            gru_wz=self.gru_wz.copy(),
            gru_wr=self.gru_wr.copy(),
            gru_wh=self.gru_wh.copy(),
            gru_uz=self.gru_uz.copy(),
            gru_ur=self.gru_ur.copy(),
            gru_uh=self.gru_uh.copy(),
            out_w=self.out_w.copy(),
            out_b=self.out_b.copy(),
        )


@dataclass
class NodeStates:
    """Hidden states for every node of one sample, in canonical node order.

    ``cue_slices[i]`` is the row range of cue i's nodes inside ``states``;
    cues are contiguous because of the canonical ordering.
    """

    node_index: list[tuple[int, int]]  # (cue_id, within-cue position)
    states: np.ndarray  # (N, L_h)
    cue_slices: list[slice]

    @property
    def node_count(self) -> int:
        return self.states.shape[0]

    def with_states(self, states: np.ndarray) -> "NodeStates":
        return NodeStates(self.node_index, states, self.cue_slices)


@dataclass
class ForwardTrace:
    """Every intermediate of a forward pass, retained for backpropagation.

    ``hidden[k]`` are the states after k message-passing steps (``hidden[0]``
    is the projection output); the per-step lists have length ``k_steps``.
    """

    hidden: list[np.ndarray]
    messages: list[np.ndarray] = field(default_factory=list)
    z_gates: list[np.ndarray] = field(default_factory=list)
    r_gates: list[np.ndarray] = field(default_factory=list)
    h_cand: list[np.ndarray] = field(default_factory=list)
    logits: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None


@dataclass
class VoteResult:
    predicted_class: int
    node_votes: np.ndarray  # (N,) int
    mean_probs: np.ndarray  # (C,) diagnostic only; never overrides the tally


@dataclass
class ForwardResult:
    vote: VoteResult
    probs: np.ndarray  # (N, C)
    trace: Optional[ForwardTrace] = None

    @property
    def predicted_class(self) -> int:
        return self.vote.predicted_class


def init_params(
    specs: tuple[CueSpec, ...] | list[CueSpec],
    hidden_size: int = DEFAULT_HIDDEN_SIZE,
    n_classes: int = 3,
    seed: int = 0,
    k_steps: int = DEFAULT_K_STEPS,
) -> ModelParams:
    """Create parameters with uniform Glorot weights and zero biases.

    Every weight matrix is filled from U(-s, s) with s = sqrt(6/(fan_in +
    fan_out)); the draw order is the canonical field order, so the result is
    fully determined by ``seed``.
    """
    specs = tuple(specs)
    if not specs:
        raise ValueError("at least one CueSpec is required")
    if hidden_size < 1:
        raise ValueError(f"hidden_size must be >= 1, got {hidden_size}")
    if n_classes < 2:
        raise ValueError(f"n_classes must be >= 2, got {n_classes}")
    if k_steps < 0:
        raise ValueError(f"k_steps must be >= 0, got {k_steps}")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError(f"cue names must be unique, got {names}")

    rng = np.random.default_rng(seed)

    def glorot(rows: int, cols: int) -> np.ndarray:
        s = math.sqrt(6.0 / (rows + cols))
        return rng.uniform(-s, s, size=(rows, cols))

    proj_w = [glorot(hidden_size, s.feature_dim) for s in specs]
    proj_b = [np.zeros(hidden_size) for _ in specs]
    edge_w = [glorot(hidden_size, hidden_size) for _ in specs]
    gru = [glorot(hidden_size, hidden_size) for _ in range(6)]
    out_w = glorot(n_classes, hidden_size)
    out_b = np.zeros(n_classes)
    return ModelParams(
        cue_specs=specs,
        hidden_size=hidden_size,
        n_classes=n_classes,
        k_steps=k_steps,
        proj_w=proj_w,
        proj_b=proj_b,
        edge_w=edge_w,
        gru_wz=gru[0],
        gru_wr=gru[1],
        gru_wh=gru[2],
        gru_uz=gru[3],
        gru_ur=gru[4],
        gru_uh=gru[5],
        out_w=out_w,
        out_b=out_b,
    )


def project_features(sample: GraphSample, params: ModelParams) -> NodeStates:
    """Map every feature vector to its initial hidden state.

    h0 = relu(W_i x + b_i) per node, with the cue's own projection; output
    rows follow the canonical node order.
    """
    sample.validate(params.cue_specs, params.n_classes)
    n = sample.node_count
    states = np.empty((n, params.hidden_size))
    node_index: list[tuple[int, int]] = []
    cue_slices: list[slice] = []
    row = 0
    for i, feats in enumerate(sample.features_per_cue):
        n_i = feats.shape[0]
        cue_slices.append(slice(row, row + n_i))
        if n_i:
            states[row : row + n_i] = relu(
                feats @ params.proj_w[i].T + params.proj_b[i]
            )
            node_index.extend((i, j) for j in range(n_i))
            row += n_i
    return NodeStates(node_index, states, cue_slices)


def _cue_state_sum(block: np.ndarray) -> np.ndarray:
    # Summing each coordinate in sorted value order makes the result a
    # function of the multiset of states only, independent of node order.
    return np.sum(np.sort(block, axis=0), axis=0)


def aggregate_messages(states: NodeStates, params: ModelParams) -> np.ndarray:
    """Sum of cue-weighted neighbor states for every node, shape (N, L_h).

    The graph is complete, so node n's message is
    sum_{p != n} E_{cue(p)} @ h_p. Computed in O(N) matrix products as
    ``total - E_{cue(n)} @ h_n`` with ``total = sum_q E_q @ S_q`` evaluated
    once per graph, where S_q is cue q's state sum.
    """
    h = states.states
    n = h.shape[0]
    if h.shape[1] != params.hidden_size:
        raise ShapeError(
            f"states have width {h.shape[1]}, model hidden size is {params.hidden_size}"
        )
    if n == 1:
        # A single node has no neighbors; the empty sum is exactly zero.
        return np.zeros_like(h)
    total = np.zeros(params.hidden_size)
    for q, sl in enumerate(states.cue_slices):
        if sl.stop > sl.start:
            total = total + params.edge_w[q] @ _cue_state_sum(h[sl])
    messages = np.empty_like(h)
    for q, sl in enumerate(states.cue_slices):
        if sl.stop > sl.start:
            messages[sl] = total - h[sl] @ params.edge_w[q].T
    return messages


def gru_step(
    states: NodeStates, messages: np.ndarray, params: ModelParams
) -> tuple[NodeStates, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """One shared-parameter GRU update applied independently to every node.

        z = sigmoid(Wz m + Uz h)
        r = sigmoid(Wr m + Ur h)
        h~ = tanh(Wh m + Uh (r * h))
        h' = (1 - z) * h + z * h~

    The gates carry no bias terms. Returns the new states plus (z, r, h~)
    for the trace.
    """
    h = states.states
    if messages.shape != h.shape:
        raise ShapeError(f"messages shape {messages.shape} != states shape {h.shape}")
    z = sigmoid(messages @ params.gru_wz.T + h @ params.gru_uz.T)
    r = sigmoid(messages @ params.gru_wr.T + h @ params.gru_ur.T)
    h_cand = np.tanh(messages @ params.gru_wh.T + (r * h) @ params.gru_uh.T)
    h_new = (1.0 - z) * h + z * h_cand
    return states.with_states(h_new), (z, r, h_cand)


def readout(states: NodeStates, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Shared linear map plus softmax: per-node (logits, probabilities)."""
    h = states.states
    if h.shape[1] != params.hidden_size:
        raise ShapeError(
            f"states have width {h.shape[1]}, model hidden size is {params.hidden_size}"
        )
    logits = h @ params.out_w.T + params.out_b
    return logits, softmax_stable(logits)


def vote(probs: np.ndarray) -> VoteResult:
    """Majority vote over per-node argmax classes.

    Ties in the tally are broken by the larger summed probability over the
    tied classes (summed with exact rounding so the result is independent of
    node order), then by the lowest class index.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ShapeError(f"vote needs a non-empty (N, C) array, got shape {probs.shape}")
    n, n_classes = probs.shape
    votes = np.argmax(probs, axis=1)
    counts = np.bincount(votes, minlength=n_classes)
    tied = np.flatnonzero(counts == counts.max())
    if len(tied) > 1:
        sums = {c: math.fsum(probs[:, c]) for c in tied}
        best = max(sums.values())
        tied = [c for c in tied if sums[c] == best]
    winner = int(tied[0])
    mean_probs = np.array([math.fsum(probs[:, c]) for c in range(n_classes)]) / n
    return VoteResult(winner, votes, mean_probs)


def forward(
    sample: GraphSample, params: ModelParams, keep_trace: bool = False
) -> ForwardResult:
    """Full pipeline: projection, k message-passing steps, readout, vote."""
    states = project_features(sample, params)
    trace = ForwardTrace(hidden=[states.states]) if keep_trace else None
    for _ in range(params.k_steps):
        messages = aggregate_messages(states, params)
        states, (z, r, h_cand) = gru_step(states, messages, params)
        if trace is not None:
            trace.messages.append(messages)
            trace.z_gates.append(z)
            trace.r_gates.append(r)
            trace.h_cand.append(h_cand)
            trace.hidden.append(states.states)
    logits, probs = readout(states, params)
    if trace is not None:
        trace.logits = logits
        trace.probs = probs
    return ForwardResult(vote=vote(probs), probs=probs, trace=trace)
