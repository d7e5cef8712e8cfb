"""Edge-distance-aware multi-head graph attention encoder.

Each layer projects node states to per-head queries/keys/values, biases the
attention logit of pair (i, j) by a learned projection of the edge distance
A[i, j], softmaxes over the Delaunay neighborhood plus a self loop, then
concatenates heads, adds a projected residual of the layer input and layer
norms. A learned input projection lifts raw node features (width d_f) to the
working width d before the first layer.

Logits scale by 1/sqrt(d_head). Every node attends to itself with distance
0, so single-node graphs and isolated nodes stay well defined.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import (Tensor, concat_heads, dropout_mask, layer_norm,
                       masked_softmax_rows, matmul, mul)
from .errors import ShapeError


@dataclass
class AttentionLayerParams:
    wq: list        # per head, (d, d_head)
    wk: list        # per head, (d, d_head)
    wv: list        # per head, (d, d_head)
    we: list        # per head, (1, d_head): distance -> key-space bias
    wh: Tensor      # (d, d) residual projection
    ln_gain: Tensor
    ln_bias: Tensor


@dataclass
class EncoderParams:
    w_in: Tensor    # (d_in, d) input width adapter
    layers: list    # of AttentionLayerParams
    d: int
    heads: int

    def named_tensors(self, prefix: str = "enc"):
        yield f"{prefix}.w_in", self.w_in
        for li, lay in enumerate(self.layers):
            for m in range(self.heads):
                yield f"{prefix}.l{li}.h{m}.wq", lay.wq[m]
                yield f"{prefix}.l{li}.h{m}.wk", lay.wk[m]
                yield f"{prefix}.l{li}.h{m}.wv", lay.wv[m]
                yield f"{prefix}.l{li}.h{m}.we", lay.we[m]
            yield f"{prefix}.l{li}.wh", lay.wh
            yield f"{prefix}.l{li}.ln_gain", lay.ln_gain
            yield f"{prefix}.l{li}.ln_bias", lay.ln_bias

    def tensors(self):
        return [t for _, t in self.named_tensors()]


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def init_encoder_params(rng: np.random.Generator, d_in: int, d: int,
                        heads: int, layers: int) -> EncoderParams:
    if d % heads != 0:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    def t(arr):
        return Tensor(arr, requires_grad=True)
    lays = []
    for _ in range(layers):
        lays.append(AttentionLayerParams(
            wq=[t(glorot(rng, d, dh)) for _ in range(heads)],
            wk=[t(glorot(rng, d, dh)) for _ in range(heads)],
            wv=[t(glorot(rng, d, dh)) for _ in range(heads)],
            we=[t(glorot(rng, 1, dh, shape=(1, dh))) for _ in range(heads)],
            wh=t(glorot(rng, d, d)),
            ln_gain=t(np.ones(d)),
            ln_bias=t(np.zeros(d)),
        ))
    return EncoderParams(w_in=t(glorot(rng, d_in, d)), layers=lays, d=d, heads=heads)


def project_qkv(h: Tensor, layer: AttentionLayerParams, head: int):
    """Per-head query/key/value projections of the layer input."""
    return (matmul(h, layer.wq[head]),
            matmul(h, layer.wk[head]),
            matmul(h, layer.wv[head]))


def edge_attention(q: Tensor, k: Tensor, we: Tensor, adjacency: np.ndarray,
                   mask: np.ndarray) -> Tensor:
    """Attention coefficients with the distance term folded into the logits.

    logit[i, j] = q_i . (k_j + we * A[i, j]) / sqrt(d_head), softmaxed over
    each row's unmasked entries. Since we * A[i, j] is rank one in j, the
    edge term reduces to (q @ we^T)[i] * A[i, j].
    """
    dh = q.data.shape[1]
    plain = matmul(q, k.T)
    edge_coef = matmul(q, we.T)              # (n, 1)
    logits = mul(plain + mul(edge_coef, Tensor(adjacency)),
                 1.0 / np.sqrt(dh))
    return masked_softmax_rows(logits, mask)


def encode_arrays(feats: Tensor, adjacency: np.ndarray, mask: np.ndarray,
                  params: EncoderParams, *, training: bool = False,
                  dropout: float = 0.0, rng=None) -> Tensor:
    """Run the encoder on an explicit feature matrix and adjacency."""
    n = feats.data.shape[0]
    if n == 0:
        return Tensor(np.zeros((0, params.d)))
    if feats.data.shape[1] != params.w_in.data.shape[0]:
        raise ShapeError(
            f"feature width {feats.data.shape[1]} != encoder input width "
            f"{params.w_in.data.shape[0]}")
    h = matmul(feats, params.w_in)
    for lay in params.layers:
        heads = []
        for m in range(params.heads):
            q, k, v = project_qkv(h, lay, m)
            alpha = edge_attention(q, k, lay.we[m], adjacency, mask)
            heads.append(matmul(alpha, v))
        cat = concat_heads(heads)
        if training and dropout > 0.0:
            cat = dropout_mask(cat, dropout, rng, training)
        h = layer_norm(matmul(h, lay.wh) + cat, lay.ln_gain, lay.ln_bias)
    return h


def encode(graph, params: EncoderParams, *, training: bool = False,
           dropout: float = 0.0, rng=None) -> Tensor:
    """Node embeddings (n, d) of a scene graph, canonical node order."""
    return encode_arrays(Tensor(graph.features), graph.adjacency,
                         graph.neighbor_mask(), params,
                         training=training, dropout=dropout, rng=rng)
