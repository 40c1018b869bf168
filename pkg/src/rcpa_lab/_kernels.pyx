# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled token-level kernels: autoregressive sampling and the clipped surrogate."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


cdef inline double _row_logz(const double[:, ::1] logits, Py_ssize_t row, Py_ssize_t vocab) noexcept nogil:
    cdef Py_ssize_t j
    cdef double m = logits[row, 0]
    cdef double s = 0.0
    for j in range(1, vocab):
        if logits[row, j] > m:
            m = logits[row, j]
    for j in range(vocab):
        s += exp(logits[row, j] - m)
    return m + log(s)


def sample_batch(const double[:, ::1] logits, Py_ssize_t order, start_ctx, const double[:, ::1] uniforms, Py_ssize_t eos):
    cdef Py_ssize_t n_ctx = logits.shape[0]
    cdef Py_ssize_t vocab = logits.shape[1]
    cdef Py_ssize_t base = vocab + 1
    cdef Py_ssize_t n_seq = uniforms.shape[0]
    cdef Py_ssize_t max_len = uniforms.shape[1]

    tokens_arr = np.full((n_seq, max_len), -1, dtype=np.int64)
    logps_arr = np.zeros((n_seq, max_len), dtype=np.float64)
    ctxs_arr = np.full((n_seq, max_len), -1, dtype=np.int64)
    lengths_arr = np.zeros(n_seq, dtype=np.int64)
    cdef cnp.int64_t[:, ::1] tokens = tokens_arr
    cdef double[:, ::1] logps = logps_arr
    cdef cnp.int64_t[:, ::1] ctxs = ctxs_arr
    cdef cnp.int64_t[::1] lengths = lengths_arr
    cdef cnp.int64_t[::1] starts = np.ascontiguousarray(start_ctx, dtype=np.int64)

    cdef Py_ssize_t i, t, j, tok
    cdef cnp.int64_t ctx
    cdef double m, total, target, cum
    with nogil:
        for i in range(n_seq):
            ctx = starts[i]
            for t in range(max_len):
                m = logits[ctx, 0]
                for j in range(1, vocab):
                    if logits[ctx, j] > m:
                        m = logits[ctx, j]
                total = 0.0
                for j in range(vocab):
                    total += exp(logits[ctx, j] - m)
                target = uniforms[i, t] * total
                cum = 0.0
                tok = vocab - 1
                for j in range(vocab):
                    cum += exp(logits[ctx, j] - m)
                    if cum > target:
                        tok = j
                        break
                tokens[i, t] = tok
                logps[i, t] = logits[ctx, tok] - m - log(total)
                ctxs[i, t] = ctx
                lengths[i] = t + 1
                ctx = (ctx * base + tok) % n_ctx
                if tok == eos:
                    break
    return tokens_arr, logps_arr, ctxs_arr, lengths_arr


def token_logps(const double[:, ::1] logits, ctx, tok):
    cdef cnp.int64_t[::1] c = np.ascontiguousarray(ctx, dtype=np.int64)
    cdef cnp.int64_t[::1] k = np.ascontiguousarray(tok, dtype=np.int64)
    cdef Py_ssize_t n = c.shape[0]
    cdef Py_ssize_t vocab = logits.shape[1]
    out_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = logits[c[i], k[i]] - _row_logz(logits, c[i], vocab)
    return out_arr


def surrogate_accumulate(const double[:, ::1] logits, ctx, tok, behavior_logp, ref_logp,
                         adv_coef, kl_coef, double eps, double[:, ::1] grad_out):
    cdef cnp.int64_t[::1] c = np.ascontiguousarray(ctx, dtype=np.int64)
    cdef cnp.int64_t[::1] k = np.ascontiguousarray(tok, dtype=np.int64)
    cdef const double[::1] blp = np.ascontiguousarray(behavior_logp, dtype=np.float64)
    cdef const double[::1] rlp = np.ascontiguousarray(ref_logp, dtype=np.float64)
    cdef const double[::1] adv = np.ascontiguousarray(adv_coef, dtype=np.float64)
    cdef const double[::1] klc = np.ascontiguousarray(kl_coef, dtype=np.float64)
    cdef Py_ssize_t n = c.shape[0]
    cdef Py_ssize_t vocab = logits.shape[1]
    cdef Py_ssize_t i, j, row
    cdef double logz, lp, rho, clipped, ut, ct, term, u, kl, coef, value = 0.0
    with nogil:
        for i in range(n):
            row = c[i]
            logz = _row_logz(logits, row, vocab)
            lp = logits[row, k[i]] - logz
            rho = exp(lp - blp[i])
            clipped = rho
            if clipped < 1.0 - eps:
                clipped = 1.0 - eps
            elif clipped > 1.0 + eps:
                clipped = 1.0 + eps
            ut = rho * adv[i]
            ct = clipped * adv[i]
            if ut <= ct:
                term = ut
                coef = ut
            else:
                term = ct
                coef = 0.0
            u = exp(rlp[i] - lp)
            kl = u - log(u) - 1.0
            coef = coef - klc[i] * (1.0 - u)
            value += term - klc[i] * kl
            for j in range(vocab):
                grad_out[row, j] -= exp(logits[row, j] - logz) * coef
            grad_out[row, k[i]] += coef
    return value
