"""Correspondence identification between two scene graphs.

Pipeline: cosine similarity of encoder embeddings -> consensus difference
matrix from a shared random-coloring encoder -> threshold into a binary
candidate matrix -> maximum-score one-to-one assignment -> overlap decision.

The consensus check feeds a fixed random matrix J through the consensus
encoder on graph A and the S-mapped colorings through the same encoder on
graph B; for truly matching graphs the two agree row for row and the
difference matrix vanishes. The per-pair difference is the contraction of
the source-side consensus embeddings against that disagreement, which keeps
the vanishing property exact while giving one value per candidate pair.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import Tensor, as_tensor, matmul, max_abs, mul, sigmoid, sqrt, sum_rows, tmean, transpose
from .encoder import EncoderParams, encode_arrays
from .errors import ShapeError

FORBIDDEN_COST = 1e9


@dataclass
class ConsensusConfig:
    r: int = 16           # columns of the random coloring matrix J
    tau: float = 0.65     # acceptance threshold on S + D
    seed: int = 7         # seed for J
    n_max: int = 64       # J is drawn once at this many rows and sliced

    def draw_colorings(self) -> np.ndarray:
        """The fixed random matrix J, i.i.d. uniform [-1, 1], (n_max, r)."""
        if self.r < 1:
            raise ShapeError(f"consensus r must be >= 1, got {self.r}")
        rng = np.random.default_rng(self.seed)
        return rng.uniform(-1.0, 1.0, size=(self.n_max, self.r))


@dataclass
class CorrespondenceResult:
    similarity: np.ndarray   # S, (n, m)
    difference: np.ndarray   # D after range rescale, (n, m)
    refined: np.ndarray      # binary S-hat, (n, m)
    assignment: np.ndarray   # binary Y, (n, m)
    overlap: bool

    def to_json(self) -> dict:
        return {
            "similarity": self.similarity.tolist(),
            "difference": self.difference.tolist(),
            "refined": self.refined.astype(int).tolist(),
            "assignment": self.assignment.astype(int).tolist(),
            "overlap": bool(self.overlap),
        }


def row_normalize(h: Tensor) -> Tensor:
    """Rows scaled to unit length (an epsilon keeps zero rows at zero)."""
    sq = sum_rows(mul(h, h))
    return h / sqrt(sq + 1e-24)


def similarity(h_a, h_b) -> Tensor:
    """Cosine similarity matrix between two embedding sets, entries in [-1, 1]."""
    h_a, h_b = as_tensor(h_a), as_tensor(h_b)
    if h_a.data.shape[1] != h_b.data.shape[1]:
        raise ShapeError(
            f"embedding widths differ: {h_a.data.shape} vs {h_b.data.shape}")
    return matmul(row_normalize(h_a), transpose(row_normalize(h_b)))


def consensus_difference(s: Tensor, graph_a, graph_b,
                         params: EncoderParams, config: ConsensusConfig,
                         colorings: np.ndarray | None = None) -> Tensor:
    """Difference matrix D, zero exactly when S is a true match of identical graphs."""
    n, m = s.data.shape
    j = colorings if colorings is not None else config.draw_colorings()
    j_n = Tensor(j[:n])
    o_src = encode_arrays(j_n, graph_a.adjacency, graph_a.neighbor_mask(), params)
    mapped = matmul(transpose(s), j_n)
    o_dst = encode_arrays(mapped, graph_b.adjacency, graph_b.neighbor_mask(), params)
    disagreement = matmul(transpose(s), o_src) - o_dst        # (m, width)
    return matmul(o_src, transpose(disagreement))             # (n, m)


def rescale_difference(d: Tensor) -> Tensor:
    """Clamp D into a threshold-comparable range: scale by 1/(1+max|D|) when max|D| > 1."""
    peak = max_abs(d)
    if float(peak.data) <= 1.0:
        return d
    return mul(d, 1.0 / (1.0 + peak))


def combined_scores(s: Tensor, d: Tensor) -> Tensor:
    return s + rescale_difference(d)


def refine_threshold(s, d, tau: float) -> np.ndarray:
    """Binary candidate matrix: 1 where S + rescaled D >= tau."""
    s, d = as_tensor(s), as_tensor(d)
    if s.data.shape != d.data.shape:
        raise ShapeError(f"S shape {s.data.shape} != D shape {d.data.shape}")
    scores = combined_scores(s, d).data
    return (scores >= tau).astype(np.int8)


def assign(s_hat: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Maximum-score one-to-one assignment restricted to candidate pairs.

    Rows and columns may stay unmatched; candidates never lose to forbidden
    pairs because forbidden cells cost more than any score while the padding
    block costs nothing.
    """
    s_hat = np.asarray(s_hat)
    scores = np.asarray(scores, dtype=np.float64)
    if s_hat.shape != scores.shape:
        raise ShapeError(f"shapes differ: {s_hat.shape} vs {scores.shape}")
    n, m = s_hat.shape
    y = np.zeros((n, m), dtype=np.int8)
    if n == 0 or m == 0 or not s_hat.any():
        return y
    size = n + m
    cost = np.zeros((size, size))
    cost[:n, :m] = np.where(s_hat != 0, -scores, FORBIDDEN_COST)
    row_to_col = kernels.lsap_min(cost)
    for i in range(n):
        j = int(row_to_col[i])
        if j < m and s_hat[i, j] != 0:
            y[i, j] = 1
    return y


def detect_overlap(y: np.ndarray) -> bool:
    """Two views overlap when at least one correspondence was assigned."""
    return bool(np.asarray(y).sum() >= 1)


def high_loss(s: Tensor, d: Tensor, tau: float, y_star: np.ndarray,
              beta: float = 10.0) -> Tensor:
    """Differentiable matching loss: squared error between a steep logistic
    relaxation of the threshold indicator and the ground-truth matrix."""
    if s.data.shape != np.asarray(y_star).shape:
        raise ShapeError(
            f"S shape {s.data.shape} != ground truth shape {np.asarray(y_star).shape}")
    soft = sigmoid(mul(combined_scores(s, d) - tau, beta))
    err = soft - Tensor(np.asarray(y_star, dtype=np.float64))
    return tmean(mul(err, err))


def indicator_loss(s: np.ndarray, d: np.ndarray, tau: float,
                   y_star: np.ndarray) -> float:
    """Evaluation-only signed mean of (S-hat - Y*); not differentiable."""
    s_hat = refine_threshold(as_tensor(s), as_tensor(d), tau)
    diff = s_hat.astype(np.float64) - np.asarray(y_star, dtype=np.float64)
    return float(diff.mean()) if diff.size else 0.0


def match_graphs(graph_a, graph_b, enc_params: EncoderParams,
                 cons_params: EncoderParams, config: ConsensusConfig,
                 colorings: np.ndarray | None = None,
                 use_consensus: bool = True,
                 embeddings: tuple | None = None) -> CorrespondenceResult:
    """Full inference-time correspondence identification for one pair.

    ``embeddings`` may carry precomputed (h_ego, h_mate) tensors to avoid
    re-running the encoder.
    """
    from .encoder import encode
    n, m = graph_a.n, graph_b.n
    if n == 0 or m == 0:
        empty = np.zeros((n, m))
        return CorrespondenceResult(similarity=empty, difference=empty.copy(),
                                    refined=empty.astype(np.int8),
                                    assignment=empty.astype(np.int8),
                                    overlap=False)
    if embeddings is not None:
        h_a, h_b = embeddings
    else:
        h_a = encode(graph_a, enc_params)
        h_b = encode(graph_b, enc_params)
    s = similarity(h_a, h_b)
    if use_consensus:
        d = consensus_difference(s, graph_a, graph_b, cons_params, config,
                                 colorings)
    else:
        d = Tensor(np.zeros((n, m)))
    d_scaled = rescale_difference(d)
    scores = s.data + d_scaled.data
    s_hat = (scores >= config.tau).astype(np.int8)
    y = assign(s_hat, scores)
    return CorrespondenceResult(similarity=s.data, difference=d_scaled.data,
                                refined=s_hat, assignment=y,
                                overlap=detect_overlap(y))
