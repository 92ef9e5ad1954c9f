"""Token policy: a windowed MLP with exact analytic gradients.

The network conditions on the last WINDOW tokens of the running prefix
(each embedded separately) plus one mean-pooled embedding of the whole
conversation context, which is what lets it see the task and feedback
after they slide out of the window. One tanh hidden layer feeds a softmax
over the vocabulary. Everything is float64 and small enough that
log-probabilities and gradients are computed exactly rather than through
an autograd library.

Parameter vector layout (row-major, in this order): embedding table
(vocab x dim), input weights ((WINDOW*dim + dim) x hidden), hidden bias,
output weights (hidden x vocab), output bias.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .chartlang import EOT, VOCAB, Vocabulary

EMBED_DIM = 16
WINDOW = 16
HIDDEN = 32
MAX_CONTEXT = 512
MAX_TURN_TOKENS = 128
INIT_SCALE = 0.1
FORMAT_VERSION = 1


def _param_sizes(vocab_size: int, dim: int, window: int, hidden: int):
    in_dim = window * dim + dim
    sizes = (vocab_size * dim, in_dim * hidden, hidden, hidden * vocab_size,
             vocab_size)
    return sizes, in_dim


@dataclass
class PolicyParams:
    """Flat parameter vector plus named views. Treat as immutable; the
    optimizer returns fresh instances."""

    flat: np.ndarray
    vocab_size: int = len(VOCAB)
    dim: int = EMBED_DIM
    window: int = WINDOW
    hidden: int = HIDDEN
    vocab_hash: str = VOCAB.content_hash
    init_seed: int = 0

    def __post_init__(self):
        sizes, in_dim = _param_sizes(self.vocab_size, self.dim, self.window,
                                     self.hidden)
        if self.flat.shape != (sum(sizes),):
            raise ValueError(
                f"expected {sum(sizes)} parameters, got {self.flat.shape}")
        self.in_dim = in_dim
        offsets = np.cumsum((0,) + sizes)
        self.emb = self.flat[offsets[0]:offsets[1]].reshape(self.vocab_size, self.dim)
        self.w1 = self.flat[offsets[1]:offsets[2]].reshape(in_dim, self.hidden)
        self.b1 = self.flat[offsets[2]:offsets[3]]
        self.w2 = self.flat[offsets[3]:offsets[4]].reshape(self.hidden, self.vocab_size)
        self.b2 = self.flat[offsets[4]:offsets[5]]


def init_params(seed: int, vocab: Vocabulary = VOCAB) -> PolicyParams:
    """Uniform(-0.1, 0.1) initialization from a fixed generator."""
    sizes, _ = _param_sizes(len(vocab), EMBED_DIM, WINDOW, HIDDEN)
    rng = np.random.default_rng(seed)
    flat = rng.uniform(-INIT_SCALE, INIT_SCALE, size=sum(sizes))
    return PolicyParams(flat, vocab_size=len(vocab),
                        vocab_hash=vocab.content_hash, init_seed=seed)


def zero_params(vocab: Vocabulary = VOCAB) -> PolicyParams:
    sizes, _ = _param_sizes(len(vocab), EMBED_DIM, WINDOW, HIDDEN)
    return PolicyParams(np.zeros(sum(sizes)), vocab_size=len(vocab),
                        vocab_hash=vocab.content_hash)


def grad_buffer(params: PolicyParams) -> np.ndarray:
    """Zeroed accumulator congruent with params.flat. By convention the
    buffer holds +dJ/dtheta (an ascent direction)."""
    return np.zeros_like(params.flat)


def encode(tokens: Sequence[str], vocab: Vocabulary = VOCAB) -> np.ndarray:
    return np.array([vocab.id(t) for t in tokens], dtype=np.int64)


def _check_context(context: Sequence[str]) -> None:
    if not context:
        raise ValueError("context must not be empty")
    if len(context) > MAX_CONTEXT:
        raise ValueError(f"context length {len(context)} exceeds {MAX_CONTEXT}")


def _features(params: PolicyParams, ctx_ids: np.ndarray,
              out_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-position network input for scoring a whole output sequence.

    Position t sees the last WINDOW tokens of context + output[:t]
    (zero-embedded left padding) and the context mean embedding. Returns
    (X, window_ids) where window_ids uses -1 for padding.
    """
    K = params.window
    arr = np.concatenate([np.full(K, -1, dtype=np.int64), ctx_ids, out_ids[:-1]])
    wins = sliding_window_view(arr, K)
    window_ids = wins[len(ctx_ids):len(ctx_ids) + len(out_ids)]
    padded = np.vstack([np.zeros((1, params.dim)), params.emb])
    window_emb = padded[window_ids + 1].reshape(len(out_ids), K * params.dim)
    mean_ctx = params.emb[ctx_ids].mean(axis=0)
    X = np.concatenate(
        [window_emb, np.broadcast_to(mean_ctx, (len(out_ids), params.dim))],
        axis=1)
    return X, window_ids


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def logprob(params: PolicyParams, context: Sequence[str],
            output: Sequence[str]) -> tuple[np.ndarray, float]:
    """Exact per-token log-probabilities of output given context and
    their sum. Unknown tokens raise."""
    _check_context(context)
    if not output:
        raise ValueError("output must not be empty")
    ctx_ids = encode(context)
    out_ids = encode(output)
    X, _ = _features(params, ctx_ids, out_ids)
    H = np.tanh(X @ params.w1 + params.b1)
    logits = H @ params.w2 + params.b2
    logp = _log_softmax(logits)
    per_token = logp[np.arange(len(out_ids)), out_ids]
    return per_token, float(per_token.sum())


def grad_logprob(params: PolicyParams, context: Sequence[str],
                 output: Sequence[str], coefficient: float,
                 buffer: np.ndarray) -> float:
    """Accumulate coefficient * d(sum log pi)/dtheta into buffer and
    return the (unscaled) summed log-probability. Exact backprop through
    the softmax, hidden layer, and both embedding uses (window slots and
    context mean pooling)."""
    _check_context(context)
    if not output:
        raise ValueError("output must not be empty")
    ctx_ids = encode(context)
    out_ids = encode(output)
    T = len(out_ids)
    K = params.window
    d = params.dim

    X, window_ids = _features(params, ctx_ids, out_ids)
    Z1 = X @ params.w1 + params.b1
    H = np.tanh(Z1)
    logits = H @ params.w2 + params.b2
    logp = _log_softmax(logits)
    total = float(logp[np.arange(T), out_ids].sum())

    probs = np.exp(logp)
    dlogits = -probs * coefficient
    dlogits[np.arange(T), out_ids] += coefficient

    views = PolicyParams(buffer, params.vocab_size, params.dim, params.window,
                         params.hidden, params.vocab_hash, params.init_seed)
    views.b2 += dlogits.sum(axis=0)
    views.w2 += H.T @ dlogits
    dH = dlogits @ params.w2.T
    dZ1 = dH * (1.0 - H * H)
    views.b1 += dZ1.sum(axis=0)
    views.w1 += X.T @ dZ1
    dX = dZ1 @ params.w1.T

    d_window = dX[:, :K * d].reshape(T, K, d)
    valid = window_ids >= 0
    np.add.at(views.emb, window_ids[valid], d_window[valid])
    d_mean = dX[:, K * d:].sum(axis=0) / len(ctx_ids)
    np.add.at(views.emb, ctx_ids, np.broadcast_to(d_mean, (len(ctx_ids), d)))
    return total


def sample(params: PolicyParams, context: Sequence[str],
           temperature: float = 1.0, max_len: int = MAX_TURN_TOKENS,
           rng: Optional[np.random.Generator] = None) -> list[str]:
    return sample_batch(params, [context], temperature, max_len,
                        None if rng is None else [rng])[0]


def sample_batch(params: PolicyParams, contexts: Sequence[Sequence[str]],
                 temperature: float = 1.0, max_len: int = MAX_TURN_TOKENS,
                 rngs: Optional[Sequence[np.random.Generator]] = None
                 ) -> list[list[str]]:
    """Autoregressive sampling for a batch of contexts.

    Temperature 0 is greedy argmax with lowest-id tie-breaking and uses
    no randomness; otherwise each sequence consumes uniforms from its own
    generator via inverse-CDF sampling, so results do not depend on how
    sequences are grouped into batches. Generation stops per sequence at
    the end-of-turn token or after max_len tokens.
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if temperature > 0 and (rngs is None or len(rngs) != len(contexts)):
        raise ValueError("tempered sampling needs one rng per context")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")

    B = len(contexts)
    K = params.window
    d = params.dim
    eot_id = VOCAB.id(EOT)
    padded = np.vstack([np.zeros((1, d)), params.emb])

    mean_ctx = np.empty((B, d))
    win = np.full((B, K), -1, dtype=np.int64)
    for m, context in enumerate(contexts):
        _check_context(context)
        ids = encode(context)
        mean_ctx[m] = params.emb[ids].mean(axis=0)
        tail = ids[-K:]
        win[m, K - len(tail):] = tail

    out_ids: list[list[int]] = [[] for _ in range(B)]
    active = list(range(B))
    for _ in range(max_len):
        rows = np.array(active)
        window_emb = padded[win[rows] + 1].reshape(len(rows), K * d)
        X = np.concatenate([window_emb, mean_ctx[rows]], axis=1)
        H = np.tanh(X @ params.w1 + params.b1)
        logits = H @ params.w2 + params.b2

        if temperature == 0:
            chosen = np.argmax(logits, axis=1)
        else:
            scaled = logits / temperature
            scaled -= scaled.max(axis=1, keepdims=True)
            probs = np.exp(scaled)
            probs /= probs.sum(axis=1, keepdims=True)
            chosen = np.empty(len(rows), dtype=np.int64)
            for k, m in enumerate(active):
                cdf = np.cumsum(probs[k])
                u = rngs[m].random()
                chosen[k] = min(int(np.searchsorted(cdf, u, side="right")),
                                params.vocab_size - 1)

        still = []
        for k, m in enumerate(active):
            tok = int(chosen[k])
            out_ids[m].append(tok)
            win[m, :-1] = win[m, 1:]
            win[m, -1] = tok
            if tok != eot_id and len(out_ids[m]) < max_len:
                still.append(m)
        active = still
        if not active:
            break

    return [[VOCAB.token(t) for t in seq] for seq in out_ids]


def save_params(params: PolicyParams, path: str | Path) -> None:
    """Checkpoint: one JSON header line, then the flat parameter vector
    as hex floats (lossless), eight per line."""
    header = {
        "format_version": FORMAT_VERSION,
        "vocab_size": params.vocab_size,
        "dim": params.dim,
        "window": params.window,
        "hidden": params.hidden,
        "vocab_hash": params.vocab_hash,
        "seed": params.init_seed,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        values = [float(v).hex() for v in params.flat]
        for i in range(0, len(values), 8):
            fh.write(" ".join(values[i:i + 8]) + "\n")


def load_params(path: str | Path, vocab: Vocabulary = VOCAB) -> PolicyParams:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version in {path}")
        if header["vocab_hash"] != vocab.content_hash:
            raise ValueError(
                f"{path}: checkpoint vocabulary {header['vocab_hash']} does "
                f"not match current vocabulary {vocab.content_hash}")
        values = []
        for line in fh:
            values.extend(float.fromhex(part) for part in line.split())
    flat = np.array(values)
    return PolicyParams(flat, vocab_size=header["vocab_size"],
                        dim=header["dim"], window=header["window"],
                        hidden=header["hidden"],
                        vocab_hash=header["vocab_hash"],
                        init_seed=header["seed"])
