"""Speech-weighted window pooling of context embeddings.

Compresses a C x d matrix of context-token embeddings down to ceil(C/n) x d
by cross-attending from speech frames to context tokens:

1. project speech and context through learned d x d weights and split the
   result into per-head slices,
2. softmax the scaled per-frame attention scores over context tokens,
3. average the scores over all speech frames, giving one weight per head
   per context token,
4. group context tokens into consecutive windows of size n (the last window
   may be shorter), re-softmax the weights inside each window, and emit the
   weighted sum of each window's embeddings.

Each pooled vector is a convex combination of its window's rows, so every
coordinate stays inside the window's per-coordinate [min, max] envelope.

``head_mode`` selects how the per-head weights are applied: ``"slice"``
weights each head's d/H slice of hidden coordinates with that head's own
scores, while ``"average"`` first averages scores over heads and applies the
single resulting weight vector to all coordinates.

``pool_vjp`` supplies the exact reverse-mode gradients through the whole
chain, for training loops that treat this operator as a layer.

The context matrix passed in here is the keyword span only; instruction
text is never pooled, so windows can never straddle the boundary between
instructions and context (the prompt renderer's marker tokens exist to
locate that span).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .kernel import as_matrix

HEAD_MODES = ("slice", "average")


@dataclass(frozen=True)
class PoolingConfig:
    hidden_size: int
    num_heads: int = 1
    window_size: int = 2
    head_mode: str = "slice"

    def __post_init__(self):
        if self.hidden_size < 1 or self.num_heads < 1 or self.window_size < 1:
            raise ValueError(
                f"hidden_size, num_heads, window_size must be >= 1, got "
                f"{self.hidden_size}, {self.num_heads}, {self.window_size}"
            )
        if self.hidden_size % self.num_heads != 0:
            raise ValueError(
                f"hidden_size {self.hidden_size} is not divisible by "
                f"num_heads {self.num_heads}"
            )
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads


@dataclass(frozen=True)
class ProjectionParams:
    """Learned d x d query/key projection weights."""

    query_weight: np.ndarray
    key_weight: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "query_weight", as_matrix(self.query_weight, "query_weight"))
        object.__setattr__(self, "key_weight", as_matrix(self.key_weight, "key_weight"))
        for name, w in (("query_weight", self.query_weight), ("key_weight", self.key_weight)):
            if w.shape[0] != w.shape[1]:
                raise ShapeError(f"{name} must be square, got {w.shape[0]}x{w.shape[1]}")
        if self.query_weight.shape != self.key_weight.shape:
            raise ShapeError(
                f"query_weight {self.query_weight.shape} and key_weight "
                f"{self.key_weight.shape} disagree"
            )


@dataclass(frozen=True)
class PooledContext:
    """Pooling output: one row per window plus the weights that built it.

    ``window_weights[j]`` has one row per weight vector actually applied to
    window j (num_heads rows in slice mode, a single row in average mode);
    every row is nonnegative and sums to 1.
    """

    pooled: np.ndarray
    window_weights: list[np.ndarray] = field(repr=False)
    windows: list[tuple[int, int]]
    head_mode: str = "slice"


@dataclass(frozen=True)
class PoolingGradients:
    grad_context: np.ndarray
    grad_speech: np.ndarray
    grad_query_weight: np.ndarray
    grad_key_weight: np.ndarray


def context_windows(num_tokens: int, window_size: int) -> list[tuple[int, int]]:
    """Consecutive [start, stop) index ranges covering all context tokens.

    All windows have ``window_size`` members except a ragged final window of
    ``num_tokens mod window_size`` when the sizes do not divide evenly.
    """
    return [
        (start, min(start + window_size, num_tokens))
        for start in range(0, num_tokens, window_size)
    ]


def _check_inputs(speech, context, params: ProjectionParams, config: PoolingConfig):
    speech = as_matrix(speech, "speech embeddings")
    context = as_matrix(context, "context embeddings")
    if speech.shape[0] < 1 or context.shape[0] < 1:
        raise ShapeError(
            f"need at least one speech frame and one context token, got "
            f"{speech.shape[0]} frames and {context.shape[0]} tokens"
        )
    d = config.hidden_size
    if speech.shape[1] != d:
        raise ShapeError(f"speech embeddings are {speech.shape[1]}-wide, config expects {d}")
    if context.shape[1] != d:
        raise ShapeError(f"context embeddings are {context.shape[1]}-wide, config expects {d}")
    if params.query_weight.shape[0] != d:
        raise ShapeError(
            f"projection weights are {params.query_weight.shape[0]}x"
            f"{params.query_weight.shape[1]}, config expects {d}x{d}"
        )
    return speech, context


def project_heads(speech, context, params: ProjectionParams, config: PoolingConfig):
    """Project speech/context embeddings and split them into head slices.

    Returns queries of shape (H, T, d/H) and keys of shape (H, C, d/H);
    head h holds columns [h*d/H, (h+1)*d/H) of the full projection.
    """
    speech, context = _check_inputs(speech, context, params, config)
    q_full = speech @ params.query_weight
    k_full = context @ params.key_weight
    dh = config.head_dim
    queries = np.stack([q_full[:, h * dh : (h + 1) * dh] for h in range(config.num_heads)])
    keys = np.stack([k_full[:, h * dh : (h + 1) * dh] for h in range(config.num_heads)])
    return queries, keys


def attention_scores(queries: np.ndarray, keys: np.ndarray, config: PoolingConfig) -> np.ndarray:
    """Per-head, per-frame attention over context tokens, shape (H, T, C).

    Scores are query-key dot products scaled by 1/sqrt(d/H) and softmaxed
    over the context axis, so each (head, frame) row is a probability
    distribution.
    """
    if queries.shape[2] != config.head_dim or keys.shape[2] != config.head_dim:
        raise ShapeError(
            f"head width mismatch: queries {queries.shape}, keys {keys.shape}, "
            f"config head_dim {config.head_dim}"
        )
    raw = np.einsum("htd,hcd->htc", queries, keys) / math.sqrt(config.head_dim)
    shifted = raw - raw.max(axis=2, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=2, keepdims=True)


def time_aggregate(scores: np.ndarray) -> np.ndarray:
    """Mean attention over speech frames: (H, T, C) -> (H, C).

    A mean of probability rows, so each head's output still sums to 1.
    """
    if scores.ndim != 3:
        raise ShapeError(f"attention scores must be 3-D, got shape {scores.shape}")
    return scores.mean(axis=1)


def _window_weight_rows(weights: np.ndarray, start: int, stop: int) -> np.ndarray:
    """Softmax of each weight row restricted to one window."""
    seg = weights[:, start:stop]
    shifted = seg - seg.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def window_pool(context, weights: np.ndarray, config: PoolingConfig) -> PooledContext:
    """Compress context rows window-by-window using per-token weights.

    ``weights`` is the (H, C) output of :func:`time_aggregate`. Within each
    window the weights are re-softmaxed over the window's actual members, so
    every pooled row is a convex combination of that window's embeddings.
    """
    context = as_matrix(context, "context embeddings")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2 or weights.shape[0] != config.num_heads:
        raise ShapeError(
            f"weights must be {config.num_heads}xC, got shape {weights.shape}"
        )
    num_tokens = context.shape[0]
    if weights.shape[1] != num_tokens:
        raise ShapeError(
            f"weights cover {weights.shape[1]} tokens but context has {num_tokens} rows"
        )
    if config.head_mode == "average":
        weights = weights.mean(axis=0, keepdims=True)

    windows = context_windows(num_tokens, config.window_size)
    dh = config.head_dim
    pooled = np.empty((len(windows), config.hidden_size), dtype=np.float64)
    per_window = []
    for j, (start, stop) in enumerate(windows):
        w = _window_weight_rows(weights, start, stop)
        per_window.append(w)
        if config.head_mode == "average":
            pooled[j] = w[0] @ context[start:stop]
        else:
            # coordinate k is weighted by the head owning slice k // (d/H)
            w_coords = np.repeat(w, dh, axis=0)
            pooled[j] = (w_coords * context[start:stop].T).sum(axis=1)
    return PooledContext(pooled=pooled, window_weights=per_window, windows=windows,
                         head_mode=config.head_mode)


def pool_forward(speech, context, params: ProjectionParams, config: PoolingConfig) -> PooledContext:
    """Full pooling chain: project, attend, frame-average, window-pool."""
    queries, keys = project_heads(speech, context, params, config)
    scores = attention_scores(queries, keys, config)
    weights = time_aggregate(scores)
    return window_pool(context, weights, config)


def pool_vjp(speech, context, params: ProjectionParams, config: PoolingConfig,
             upstream: np.ndarray) -> PoolingGradients:
    """Gradients of <upstream, pool_forward(...)> w.r.t. all four inputs.

    ``upstream`` must match the pooled output shape (ceil(C/n), d). The
    backward pass mirrors the forward chain: window-softmax, frame mean,
    attention softmax, scaled dot product, and the two projections. Context
    embeddings receive two contributions, one through the pooled sum and one
    through the keys.
    """
    speech, context = _check_inputs(speech, context, params, config)
    upstream = np.asarray(upstream, dtype=np.float64)

    num_frames = speech.shape[0]
    num_tokens = context.shape[0]
    d, heads, dh = config.hidden_size, config.num_heads, config.head_dim
    windows = context_windows(num_tokens, config.window_size)
    if upstream.shape != (len(windows), d):
        raise ShapeError(
            f"upstream gradient has shape {upstream.shape}, pooled output is "
            f"{(len(windows), d)}"
        )

    queries, keys = project_heads(speech, context, params, config)
    scores = attention_scores(queries, keys, config)
    alpha = time_aggregate(scores)
    averaged = config.head_mode == "average"
    eff_weights = alpha.mean(axis=0, keepdims=True) if averaged else alpha

    grad_context = np.zeros_like(context)
    grad_eff = np.zeros_like(eff_weights)
    for j, (start, stop) in enumerate(windows):
        w = _window_weight_rows(eff_weights, start, stop)
        seg = context[start:stop]
        up = upstream[j]
        if averaged:
            grad_context[start:stop] += np.outer(w[0], up)
            grad_w = seg @ up
            grad_eff[0, start:stop] += w[0] * (grad_w - grad_w @ w[0])
        else:
            w_coords = np.repeat(w, dh, axis=0)  # (d, window_len)
            grad_context[start:stop] += (up[:, None] * w_coords).T
            for h in range(heads):
                sl = slice(h * dh, (h + 1) * dh)
                grad_w = seg[:, sl] @ up[sl]
                grad_eff[h, start:stop] += w[h] * (grad_w - grad_w @ w[h])

    grad_alpha = np.broadcast_to(grad_eff / heads, alpha.shape) if averaged else grad_eff

    # frame mean, then row softmax of the scaled scores
    grad_scores = np.broadcast_to(grad_alpha[:, None, :] / num_frames,
                                  (heads, num_frames, num_tokens))
    grad_raw = scores * (grad_scores - (grad_scores * scores).sum(axis=2, keepdims=True))
    grad_raw = grad_raw / math.sqrt(dh)

    grad_queries = np.einsum("htc,hcd->htd", grad_raw, keys)
    grad_keys = np.einsum("htc,htd->hcd", grad_raw, queries)
    grad_q_full = np.concatenate([grad_queries[h] for h in range(heads)], axis=1)
    grad_k_full = np.concatenate([grad_keys[h] for h in range(heads)], axis=1)

    grad_query_weight = speech.T @ grad_q_full
    grad_key_weight = context.T @ grad_k_full
    grad_speech = grad_q_full @ params.query_weight.T
    grad_context += grad_k_full @ params.key_weight.T

    return PoolingGradients(
        grad_context=grad_context,
        grad_speech=grad_speech,
        grad_query_weight=grad_query_weight,
        grad_key_weight=grad_key_weight,
    )
