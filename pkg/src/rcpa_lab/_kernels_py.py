"""Pure numpy implementations of the token-level kernels.

These mirror ``_kernels.pyx`` one for one and are used whenever the compiled
extension is unavailable (or ``RCPA_LAB_BACKEND=python`` is set).
"""

from __future__ import annotations

import numpy as np


def _log_softmax_rows(rows: np.ndarray) -> np.ndarray:
    shifted = rows - rows.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def sample_batch(logits, order, start_ctx, uniforms, eos):
    n_ctx, vocab = logits.shape
    base = vocab + 1
    n_seq, max_len = uniforms.shape
    tokens = np.full((n_seq, max_len), -1, dtype=np.int64)
    logps = np.zeros((n_seq, max_len), dtype=np.float64)
    ctxs = np.full((n_seq, max_len), -1, dtype=np.int64)
    lengths = np.zeros(n_seq, dtype=np.int64)

    ctx = np.asarray(start_ctx, dtype=np.int64).copy()
    alive = np.ones(n_seq, dtype=bool)
    for t in range(max_len):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        rows = logits[ctx[idx]]
        shifted = rows - rows.max(axis=1, keepdims=True)
        ex = np.exp(shifted)
        cum = np.cumsum(ex, axis=1)
        total = cum[:, -1]
        target = uniforms[idx, t] * total
        tok = (cum <= target[:, None]).sum(axis=1)
        np.minimum(tok, vocab - 1, out=tok)
        lp = shifted[np.arange(idx.size), tok] - np.log(total)
        tokens[idx, t] = tok
        logps[idx, t] = lp
        ctxs[idx, t] = ctx[idx]
        lengths[idx] = t + 1
        ctx[idx] = (ctx[idx] * base + tok) % n_ctx
        alive[idx[tok == eos]] = False
    return tokens, logps, ctxs, lengths


def token_logps(logits, ctx, tok):
    ctx = np.asarray(ctx, dtype=np.int64)
    tok = np.asarray(tok, dtype=np.int64)
    if ctx.size == 0:
        return np.zeros(0)
    lsm = _log_softmax_rows(logits[ctx])
    return lsm[np.arange(ctx.size), tok]


def surrogate_accumulate(logits, ctx, tok, behavior_logp, ref_logp, adv_coef, kl_coef, eps, grad_out):
    """Clipped surrogate minus per-token KL estimate; adds the gradient into ``grad_out``.

    ``adv_coef`` carries the advantage already multiplied by every positive
    normaliser (group weight, 1/G, 1/suffix length, 1/n_groups), likewise
    ``kl_coef`` carries gamma times the normalisers.
    """
    ctx = np.asarray(ctx, dtype=np.int64)
    tok = np.asarray(tok, dtype=np.int64)
    n = ctx.size
    if n == 0:
        return 0.0
    lsm = _log_softmax_rows(logits[ctx])
    ar = np.arange(n)
    lp = lsm[ar, tok]
    rho = np.exp(lp - behavior_logp)
    clipped = np.clip(rho, 1.0 - eps, 1.0 + eps)
    unclipped_term = rho * adv_coef
    clipped_term = clipped * adv_coef
    unclipped_active = unclipped_term <= clipped_term
    term = np.where(unclipped_active, unclipped_term, clipped_term)
    u = np.exp(ref_logp - lp)
    kl = u - np.log(u) - 1.0
    coef = np.where(unclipped_active, unclipped_term, 0.0) - kl_coef * (1.0 - u)

    local = -np.exp(lsm) * coef[:, None]
    local[ar, tok] += coef
    np.add.at(grad_out, ctx, local)
    # sequential sum keeps the result order-identical to the compiled loop
    value = 0.0
    for v in (term - kl_coef * kl).tolist():
        value += v
    return value
