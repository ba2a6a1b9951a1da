"""Bag pooling: plain averaging, gated attention, and self-attention.

The weighted sum shared by every pooling path accumulates terms in a
canonical order (sorted by grid provenance), so pooling is bit-stable
under any permutation of the bag, and the uniform-attention case is
bit-identical to plain averaging.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class GridEmbedding:
    """A rows x cols grid of m-dimensional patch embeddings."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError("grid values must be rows x cols x m")
        if min(self.values.shape) < 1:
            raise ValueError("grid dimensions must all be positive")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid contains nonfinite entries")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]


@dataclass
class EmbeddingBag:
    """K embeddings with their (row, col) grid positions retained."""

    embeddings: np.ndarray
    provenance: list[tuple[int, int]] | None = None

    def __post_init__(self):
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise ValueError("bag must be a nonempty K x m array")
        if self.provenance is not None and len(self.provenance) != len(self.embeddings):
            raise ValueError("provenance length must match bag size")

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class AttentionParams:
    """Gated-attention weights: logit l_k = w . (tanh(V h_k) * sigm(U h_k))."""

    v: np.ndarray
    u: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.v = np.ascontiguousarray(self.v, dtype=np.float64)
        self.u = np.ascontiguousarray(self.u, dtype=np.float64)
        self.w = np.ascontiguousarray(self.w, dtype=np.float64)
        if self.v.ndim != 2 or self.u.shape != self.v.shape:
            raise ValueError("V and U must be equal-shape n x m matrices")
        if self.w.shape != (self.v.shape[0],):
            raise ValueError("w must be an n-vector")

    @property
    def hidden(self) -> int:
        return self.v.shape[0]


@dataclass
class AttentionScores:
    values: np.ndarray
    provenance: list[tuple[int, int]] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)


@dataclass
class SaParams:
    """Single-head self-attention pooling parameters with a class token."""

    cls_token: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray

    def __post_init__(self):
        m = self.cls_token.shape[0]
        for name, mat in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv)):
            if mat.shape != (m, m):
                raise ValueError(f"{name} must be {m} x {m}")


def init_attention_params(m: int, n: int = 512, seed: int = 0) -> AttentionParams:
    """Random gate matrices, zero logit vector (starts as plain averaging)."""
    rng = np.random.default_rng(seed)
    limit = np.sqrt(6.0 / (n + m))
    return AttentionParams(
        v=rng.uniform(-limit, limit, size=(n, m)),
        u=rng.uniform(-limit, limit, size=(n, m)),
        w=np.zeros(n),
    )


def init_sa_params(m: int, seed: int = 0) -> SaParams:
    rng = np.random.default_rng(seed)
    limit = np.sqrt(6.0 / (2 * m))
    return SaParams(
        cls_token=rng.uniform(-limit, limit, size=m),
        wq=rng.uniform(-limit, limit, size=(m, m)),
        wk=rng.uniform(-limit, limit, size=(m, m)),
        wv=rng.uniform(-limit, limit, size=(m, m)),
    )


def grid_to_bag(grid: GridEmbedding) -> EmbeddingBag:
    """Row-major flattening with (row, col) provenance."""
    provenance = [(r, c) for r in range(grid.rows) for c in range(grid.cols)]
    return EmbeddingBag(grid.values.reshape(-1, grid.dim).copy(), provenance)


def bag_to_grid(bag: EmbeddingBag, rows: int, cols: int) -> GridEmbedding:
    if bag.provenance is None:
        raise DataError("bag has no grid provenance")
    if len(bag) != rows * cols:
        raise ValueError(f"bag size {len(bag)} != {rows}x{cols}")
    values = np.zeros((rows, cols, bag.dim))
    for (r, c), h in zip(bag.provenance, bag.embeddings):
        values[r, c] = h
    return GridEmbedding(values)


def _canonical_order(bag: EmbeddingBag) -> np.ndarray:
    """Indices sorting the bag by provenance; identity when untracked."""
    if bag.provenance is None:
        return np.arange(len(bag))
    rows = np.array([p[0] for p in bag.provenance])
    cols = np.array([p[1] for p in bag.provenance])
    return np.lexsort((cols, rows))


def _weighted_sum(bag: EmbeddingBag, weights: np.ndarray) -> np.ndarray:
    order = _canonical_order(bag)
    return weights[order] @ bag.embeddings[order]


def gap(bag: EmbeddingBag) -> np.ndarray:
    """Unweighted average of the bag in canonical summation order."""
    k = len(bag)
    return _weighted_sum(bag, np.full(k, 1.0 / k))


def _mip_internals(bag: EmbeddingBag, params: AttentionParams):
    h = bag.embeddings
    if h.shape[1] != params.v.shape[1]:
        raise ValueError(
            f"bag dim {h.shape[1]} does not match attention dim {params.v.shape[1]}"
        )
    gate_t = np.tanh(h @ params.v.T)
    gate_s = 1.0 / (1.0 + np.exp(-(h @ params.u.T)))
    gated = gate_t * gate_s
    logits = gated @ params.w
    shifted = np.exp(logits - logits.max())
    order = _canonical_order(bag)
    denom = float(np.sum(shifted[order]))
    scores = shifted / denom
    return gate_t, gate_s, gated, logits, scores


def mip_forward(
    bag: EmbeddingBag, params: AttentionParams
) -> tuple[np.ndarray, AttentionScores]:
    """Gated-attention pooling: z = sum_k a_k h_k with softmax scores a."""
    _, _, _, _, scores = _mip_internals(bag, params)
    z = _weighted_sum(bag, scores)
    return z, AttentionScores(scores, provenance=bag.provenance)


def mip_backward(
    bag: EmbeddingBag, params: AttentionParams, upstream_grad_z: np.ndarray
) -> dict[str, np.ndarray]:
    """Exact gradients of mip_forward's z wrt V, U, w, and the bag."""
    upstream_grad_z = np.asarray(upstream_grad_z, dtype=np.float64)
    if upstream_grad_z.shape != (bag.dim,):
        raise ValueError(f"upstream grad must be an m-vector, got {upstream_grad_z.shape}")
    h = bag.embeddings
    gate_t, gate_s, gated, _, scores = _mip_internals(bag, params)

    grad_scores = h @ upstream_grad_z
    grad_logits = scores * (grad_scores - float(scores @ grad_scores))
    grad_w = gated.T @ grad_logits
    # gradient into the gate product, per element: dl_k/dG_k = w
    grad_gated = grad_logits[:, np.newaxis] * params.w[np.newaxis, :]
    pre_v = grad_gated * gate_s * (1.0 - gate_t**2)
    pre_u = grad_gated * gate_t * gate_s * (1.0 - gate_s)
    grad_v = pre_v.T @ h
    grad_u = pre_u.T @ h
    grad_bag = (
        scores[:, np.newaxis] * upstream_grad_z[np.newaxis, :]
        + pre_v @ params.v
        + pre_u @ params.u
    )
    return {"v": grad_v, "u": grad_u, "w": grad_w, "bag": grad_bag}


def _sa_internals(bag: EmbeddingBag, params: SaParams):
    tokens = np.vstack([params.cls_token, bag.embeddings])
    m = tokens.shape[1]
    q = tokens @ params.wq
    k = tokens @ params.wk
    v = tokens @ params.wv
    scale = 1.0 / np.sqrt(m)
    logits = (q @ k.T) * scale
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    attn = shifted / shifted.sum(axis=1, keepdims=True)
    pooled = tokens + attn @ v  # residual connection
    return tokens, q, k, v, attn, scale, pooled


def sa_pool(bag: EmbeddingBag, params: SaParams) -> np.ndarray:
    """Classification-token output of one self-attention layer over the bag."""
    if bag.dim != params.cls_token.shape[0]:
        raise ValueError(
            f"bag dim {bag.dim} does not match token dim {params.cls_token.shape[0]}"
        )
    return _sa_internals(bag, params)[-1][0]


def sa_attention(bag: EmbeddingBag, params: SaParams) -> np.ndarray:
    """Full (K+1) x (K+1) attention matrix, rows summing to one."""
    return _sa_internals(bag, params)[4]


def sa_backward(
    bag: EmbeddingBag, params: SaParams, upstream_grad_z: np.ndarray
) -> dict[str, np.ndarray]:
    """Exact gradients of sa_pool wrt the class token, projections, and bag."""
    upstream_grad_z = np.asarray(upstream_grad_z, dtype=np.float64)
    if upstream_grad_z.shape != (bag.dim,):
        raise ValueError(f"upstream grad must be an m-vector, got {upstream_grad_z.shape}")
    tokens, q, k, v, attn, scale, _ = _sa_internals(bag, params)
    t = tokens.shape[0]

    grad_out = np.zeros_like(tokens)
    grad_out[0] = upstream_grad_z
    grad_tokens = grad_out.copy()  # residual path
    grad_attn = grad_out @ v.T
    grad_v_rows = attn.T @ grad_out
    # softmax rows
    grad_logits = attn * (grad_attn - np.sum(attn * grad_attn, axis=1, keepdims=True))
    grad_q = (grad_logits @ k) * scale
    grad_k = (grad_logits.T @ q) * scale
    grad_wq = tokens.T @ grad_q
    grad_wk = tokens.T @ grad_k
    grad_wv = tokens.T @ grad_v_rows
    grad_tokens += grad_q @ params.wq.T + grad_k @ params.wk.T + grad_v_rows @ params.wv.T
    assert grad_tokens.shape == (t, bag.dim)
    return {
        "cls_token": grad_tokens[0],
        "wq": grad_wq,
        "wk": grad_wk,
        "wv": grad_wv,
        "bag": grad_tokens[1:],
    }


def attention_heatmap(scores: AttentionScores, rows: int, cols: int) -> np.ndarray:
    """Scores arranged on the patch grid; co-located patches average."""
    if scores.provenance is None:
        raise DataError("attention scores carry no grid provenance")
    if len(scores.provenance) != scores.values.shape[0]:
        raise DataError("provenance and score lengths differ")
    total = np.zeros((rows, cols))
    count = np.zeros((rows, cols), dtype=np.int64)
    for (r, c), value in zip(scores.provenance, scores.values):
        if not (0 <= r < rows and 0 <= c < cols):
            raise DataError(f"provenance ({r}, {c}) outside a {rows}x{cols} grid")
        total[r, c] += value
        count[r, c] += 1
    out = np.zeros((rows, cols))
    covered = count > 0
    out[covered] = total[covered] / count[covered]
    return out


def heatmap_to_tsv(heatmap: np.ndarray) -> str:
    """Tab-separated numeric grid, one heatmap row per line."""
    lines = []
    for row in np.asarray(heatmap, dtype=np.float64):
        lines.append("\t".join(format(v, ".17g") for v in row))
    return "\n".join(lines) + "\n"


def render_pgm(heatmap: np.ndarray) -> bytes:
    """Binary 8-bit portable graymap, normalized so the peak maps to 255."""
    heatmap = np.asarray(heatmap, dtype=np.float64)
    peak = heatmap.max()
    if peak > 0:
        levels = np.floor(heatmap / peak * 255.0 + 0.5).astype(np.uint8)
    else:
        levels = np.zeros(heatmap.shape, dtype=np.uint8)
    buf = io.BytesIO()
    buf.write(f"P5\n{heatmap.shape[1]} {heatmap.shape[0]}\n255\n".encode("ascii"))
    buf.write(levels.tobytes(order="C"))
    return buf.getvalue()
