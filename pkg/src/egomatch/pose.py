"""Position-aware cross-attention network for egocentric pose estimation.

The ego stream queries the teammate stream through a stack of multi-head
cross-attention layers (teammate keys/values recomputed per layer from its
fixed input), each followed by a two-layer MLP, a residual add of the ego
stream and layer norm. A gated self-attention pooling collapses the ego
stream into one graph embedding, and a small MLP head regresses the
teammate's position (3) and orientation quaternion (4, normalized).

Rotation discrepancies use the sign-invariant chordal form
2 * e2 * (4 - e2) with e2 the squared quaternion chord; it is zero exactly
for equal-up-to-sign quaternions and at most 8.
"""

from dataclasses import dataclass

import numpy as np

from . import quat
from .autodiff import (Tensor, concat_heads, dropout_mask, layer_norm,
                       matmul, mlp_forward, mul, slice_rows, softmax_rows,
                       sum_rows, transpose, tsum)
from .encoder import glorot
from .errors import CapacityError, DegenerateInputError, ShapeError


@dataclass
class RelativePose:
    position: np.ndarray      # (3,), meters, ego frame
    orientation: np.ndarray   # (4,), unit quaternion, w-x-y-z

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.orientation = np.asarray(self.orientation, dtype=np.float64)
        if self.position.shape != (3,) or self.orientation.shape != (4,):
            raise ShapeError("pose needs a 3-vector position and 4-vector quaternion")

    def canonical(self) -> "RelativePose":
        return RelativePose(self.position.copy(),
                            quat.canonicalize(quat.normalize(self.orientation)))

    def to_json(self, overlap: bool = True) -> dict:
        q = quat.canonicalize(self.orientation)
        return {"p": [float(v) for v in self.position],
                "q": [float(v) for v in q],
                "overlap": bool(overlap)}


@dataclass
class PoseLossBreakdown:
    position: float   # squared meters
    rotation: float   # chordal surrogate, unitless
    total: float


@dataclass
class CrossLayerParams:
    wq: list
    wk: list
    wv: list
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    ln_gain: Tensor
    ln_bias: Tensor


@dataclass
class GateParams:
    wq: list
    wk: list
    wv: list
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


@dataclass
class PoseParams:
    u_table: Tensor          # (n_max, d) learned position-order embeddings
    cross_layers: list       # of CrossLayerParams
    gate: GateParams
    head_w1: Tensor
    head_b1: Tensor
    head_w2: Tensor
    head_b2: Tensor
    d: int
    heads: int
    n_max: int

    def named_tensors(self, prefix: str = "pose"):
        yield f"{prefix}.u", self.u_table
        for li, lay in enumerate(self.cross_layers):
            for m in range(self.heads):
                yield f"{prefix}.x{li}.h{m}.wq", lay.wq[m]
                yield f"{prefix}.x{li}.h{m}.wk", lay.wk[m]
                yield f"{prefix}.x{li}.h{m}.wv", lay.wv[m]
            yield f"{prefix}.x{li}.mlp_w1", lay.mlp_w1
            yield f"{prefix}.x{li}.mlp_b1", lay.mlp_b1
            yield f"{prefix}.x{li}.mlp_w2", lay.mlp_w2
            yield f"{prefix}.x{li}.mlp_b2", lay.mlp_b2
            yield f"{prefix}.x{li}.ln_gain", lay.ln_gain
            yield f"{prefix}.x{li}.ln_bias", lay.ln_bias
        for m in range(self.heads):
            yield f"{prefix}.gate.h{m}.wq", self.gate.wq[m]
            yield f"{prefix}.gate.h{m}.wk", self.gate.wk[m]
            yield f"{prefix}.gate.h{m}.wv", self.gate.wv[m]
        yield f"{prefix}.gate.mlp_w1", self.gate.mlp_w1
        yield f"{prefix}.gate.mlp_b1", self.gate.mlp_b1
        yield f"{prefix}.gate.mlp_w2", self.gate.mlp_w2
        yield f"{prefix}.gate.mlp_b2", self.gate.mlp_b2
        yield f"{prefix}.head_w1", self.head_w1
        yield f"{prefix}.head_b1", self.head_b1
        yield f"{prefix}.head_w2", self.head_w2
        yield f"{prefix}.head_b2", self.head_b2

    def tensors(self):
        return [t for _, t in self.named_tensors()]


def init_pose_params(rng: np.random.Generator, d: int, heads: int,
                     layers: int, n_max: int, gate_hidden: int = 64,
                     head_hidden: int = 128) -> PoseParams:
    if d % heads != 0:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    def t(arr):
        return Tensor(arr, requires_grad=True)
    cross = []
    for _ in range(layers):
        cross.append(CrossLayerParams(
            wq=[t(glorot(rng, d, dh)) for _ in range(heads)],
            wk=[t(glorot(rng, d, dh)) for _ in range(heads)],
            wv=[t(glorot(rng, d, dh)) for _ in range(heads)],
            mlp_w1=t(glorot(rng, d, d)), mlp_b1=t(np.zeros(d)),
            mlp_w2=t(glorot(rng, d, d)), mlp_b2=t(np.zeros(d)),
            ln_gain=t(np.ones(d)), ln_bias=t(np.zeros(d)),
        ))
    gate = GateParams(
        wq=[t(glorot(rng, d, dh)) for _ in range(heads)],
        wk=[t(glorot(rng, d, dh)) for _ in range(heads)],
        wv=[t(glorot(rng, d, dh)) for _ in range(heads)],
        mlp_w1=t(glorot(rng, d, gate_hidden)), mlp_b1=t(np.zeros(gate_hidden)),
        mlp_w2=t(glorot(rng, gate_hidden, 1)), mlp_b2=t(np.zeros(1)),
    )
    return PoseParams(
        u_table=t(glorot(rng, n_max, d)),
        cross_layers=cross, gate=gate,
        head_w1=t(glorot(rng, d, head_hidden)), head_b1=t(np.zeros(head_hidden)),
        head_w2=t(glorot(rng, head_hidden, 7)), head_b2=t(np.zeros(7)),
        d=d, heads=heads, n_max=n_max)


def positional_encode(h: Tensor, u_table: Tensor) -> Tensor:
    """Add the first n rows of the learned position table to the embeddings."""
    n = h.data.shape[0]
    n_max = u_table.data.shape[0]
    if n > n_max:
        raise CapacityError(f"{n} nodes exceed the position table capacity {n_max}")
    return h + slice_rows(u_table, n)


def _multihead(x_q: Tensor, x_kv: Tensor, wq, wk, wv, heads: int) -> Tensor:
    dh = wq[0].data.shape[1]
    scale = 1.0 / np.sqrt(dh)
    outs = []
    for m in range(heads):
        q = matmul(x_q, wq[m])
        k = matmul(x_kv, wk[m])
        v = matmul(x_kv, wv[m])
        att = softmax_rows(mul(matmul(q, transpose(k)), scale))
        outs.append(matmul(att, v))
    return concat_heads(outs)


def cross_attend(h_ego: Tensor, h_mate: Tensor, params: PoseParams, *,
                 training: bool = False, dropout: float = 0.0,
                 rng=None) -> Tensor:
    """Ego stream refined by attention over the fixed teammate stream."""
    if h_mate.data.shape[0] == 0:
        raise DegenerateInputError("cross attention needs a nonempty teammate graph")
    if h_ego.data.shape[0] == 0:
        raise DegenerateInputError("cross attention needs a nonempty ego graph")
    if h_ego.data.shape[1] != h_mate.data.shape[1]:
        raise ShapeError(
            f"stream widths differ: {h_ego.data.shape} vs {h_mate.data.shape}")
    x = h_ego
    for lay in params.cross_layers:
        cat = _multihead(x, h_mate, lay.wq, lay.wk, lay.wv, params.heads)
        mid = mlp_forward(cat, [(lay.mlp_w1, lay.mlp_b1),
                                (lay.mlp_w2, lay.mlp_b2)])
        if training and dropout > 0.0:
            mid = dropout_mask(mid, dropout, rng, training)
        x = layer_norm(x + mid, lay.ln_gain, lay.ln_bias)
    return x


def gate_pool(h_out: Tensor, params: PoseParams):
    """Convex pooling of node embeddings with learned gate scores.

    Returns (pooled (1, d), gates (1, n)); gates are nonnegative and sum
    to 1, so the pooled vector is a convex combination of the rows.
    """
    if h_out.data.shape[0] == 0:
        raise DegenerateInputError("cannot pool an empty embedding matrix")
    g = params.gate
    weighted = _multihead(h_out, h_out, g.wq, g.wk, g.wv, params.heads)
    logits = mlp_forward(weighted, [(g.mlp_w1, g.mlp_b1),
                                    (g.mlp_w2, g.mlp_b2)])     # (n, 1)
    gates = softmax_rows(transpose(logits))                    # (1, n)
    return matmul(gates, h_out), gates


def pose_head(h_pooled: Tensor, params: PoseParams):
    """Regress (position (1, 3), unit quaternion (1, 4)) from the pooled embedding."""
    out = mlp_forward(h_pooled, [(params.head_w1, params.head_b1),
                                 (params.head_w2, params.head_b2)])   # (1, 7)
    p = matmul(out, Tensor(np.eye(7)[:, :3]))
    q_raw = matmul(out, Tensor(np.eye(7)[:, 3:]))
    norm_sq = sum_rows(mul(q_raw, q_raw))
    if float(norm_sq.data) < 1e-24:
        return p, Tensor(np.array([[1.0, 0.0, 0.0, 0.0]]))
    from .autodiff import sqrt as tsqrt
    return p, q_raw / tsqrt(norm_sq)


def estimate_pose(h_ego: Tensor, h_mate: Tensor, params: PoseParams, *,
                  training: bool = False, dropout: float = 0.0, rng=None):
    """Full low-level pass; returns (position, quaternion) tensors (1, 3)/(1, 4)."""
    he = positional_encode(h_ego, params.u_table)
    hm = positional_encode(h_mate, params.u_table)
    x = cross_attend(he, hm, params, training=training, dropout=dropout, rng=rng)
    pooled, _ = gate_pool(x, params)
    return pose_head(pooled, params)


def predict_pose(h_ego: Tensor, h_mate: Tensor, params: PoseParams) -> RelativePose:
    p, q = estimate_pose(h_ego, h_mate, params)
    return RelativePose(p.data.ravel(), q.data.ravel()).canonical()


def chordal_rotation_terms(e2: float) -> float:
    return 2.0 * e2 * (4.0 - e2)


def low_loss_tensors(p_hat: Tensor, q_hat: Tensor, truth: RelativePose):
    """Training loss pieces as tensors: (position, rotation, total)."""
    dp = p_hat - Tensor(truth.position.reshape(1, 3))
    l_pos = tsum(mul(dp, dp))
    dq = q_hat - Tensor(truth.orientation.reshape(1, 4))
    e2 = tsum(mul(dq, dq))
    l_rot = mul(mul(e2, 2.0), 4.0 - e2)
    return l_pos, l_rot, l_pos + l_rot


def low_loss(predicted: RelativePose, truth: RelativePose) -> PoseLossBreakdown:
    """Chordal-squared pose loss between a predicted and true pose."""
    l_pos = float(np.sum((predicted.position - truth.position) ** 2))
    e2 = float(np.sum((predicted.orientation - truth.orientation) ** 2))
    l_rot = chordal_rotation_terms(e2)
    return PoseLossBreakdown(position=l_pos, rotation=l_rot,
                             total=l_pos + l_rot)


def rotation_error_metric(predicted, truth) -> float:
    """Rotation discrepancy in chordal surrogate units (0 for q and -q alike)."""
    pq = np.asarray(predicted, dtype=np.float64)
    tq = np.asarray(truth, dtype=np.float64)
    e2 = float(np.sum((pq - tq) ** 2))
    return chordal_rotation_terms(e2)
