# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled E-step over a quadrature grid.

Only correct (+1) and missing (-1) cells are stored, person-major in CSR
form. A person's log-likelihood at each node is then the all-incorrect
baseline plus one table row per stored cell, and the observed-count table
is the total posterior mass minus the mass of missing cells. For typical
data this touches about half the cells the dense formulation does.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


class SparseBlock:
    __slots__ = ("ptr", "idx", "val", "n_persons", "n_items")

    def __init__(self, ptr, idx, val, n_persons, n_items):
        self.ptr = ptr
        self.idx = idx
        self.val = val
        self.n_persons = n_persons
        self.n_items = n_items


def prepare(cells):
    """Pack an int8 response block (-1 = missing) into CSR event arrays."""
    cells = np.ascontiguousarray(cells, dtype=np.int8)
    events = cells != 0
    ptr = np.zeros(cells.shape[0] + 1, dtype=np.int64)
    np.cumsum(events.sum(axis=1), out=ptr[1:])
    rows, cols = np.nonzero(events)
    return SparseBlock(ptr, cols.astype(np.int32), cells[rows, cols].copy(),
                       cells.shape[0], cells.shape[1])


cdef inline void _person_loglik(const cnp.int64_t* ptr, const cnp.int32_t* idx,
                                const cnp.int8_t* val, const double* dlog,
                                const double* log1mp, const double* start,
                                Py_ssize_t i, double* work, Py_ssize_t nq) noexcept nogil:
    cdef Py_ssize_t q, t
    cdef const double* row
    for q in range(nq):
        work[q] = start[q]
    for t in range(ptr[i], ptr[i + 1]):
        if val[t] > 0:
            row = dlog + idx[t] * nq
            for q in range(nq):
                work[q] += row[q]
        else:
            row = log1mp + idx[t] * nq
            for q in range(nq):
                work[q] -= row[q]


cdef inline double _normalize(double* work, Py_ssize_t nq) noexcept nogil:
    """Turn log-weights into posterior probabilities; return the log normalizer."""
    cdef Py_ssize_t q
    cdef double m = work[0]
    cdef double s = 0.0, inv
    for q in range(1, nq):
        if work[q] > m:
            m = work[q]
    for q in range(nq):
        work[q] = exp(work[q] - m)
        s += work[q]
    inv = 1.0 / s
    for q in range(nq):
        work[q] *= inv
    return m + log(s)


def _tables(double[:, ::1] logp, double[:, ::1] log1mp, double[::1] logw):
    """Per-item log-odds table and the all-incorrect starting row (prior included)."""
    dlog = np.subtract(logp, log1mp)
    start = np.asarray(logw) + np.asarray(log1mp).sum(axis=0)
    return np.ascontiguousarray(dlog), np.ascontiguousarray(start)


def estep(block, double[:, ::1] logp, double[:, ::1] log1mp, double[::1] logw):
    """Return ``(loglik, r, n, nq)`` expected-count tables for one group."""
    cdef Py_ssize_t n_items = block.n_items
    cdef Py_ssize_t n_persons = block.n_persons
    cdef Py_ssize_t nq = logw.shape[0]
    dlog_arr, start_arr = _tables(logp, log1mp, logw)
    cdef double[:, ::1] dlog_v = dlog_arr
    cdef double[::1] start_v = start_arr
    cdef const cnp.int64_t[::1] ptr_v = block.ptr
    cdef const cnp.int32_t[::1] idx_v = block.idx
    cdef const cnp.int8_t[::1] val_v = block.val
    r_arr = np.zeros((n_items, nq))
    miss_arr = np.zeros((n_items, nq))
    nq_arr = np.zeros(nq)
    work_arr = np.empty(nq)
    cdef double[:, ::1] r_v = r_arr
    cdef double[:, ::1] miss_v = miss_arr
    cdef double[::1] tot_v = nq_arr
    cdef double[::1] work_v = work_arr
    cdef const cnp.int64_t* ptr = &ptr_v[0]
    cdef const cnp.int32_t* idx = &idx_v[0] if idx_v.shape[0] else NULL
    cdef const cnp.int8_t* val = &val_v[0] if val_v.shape[0] else NULL
    cdef double* r = &r_v[0, 0]
    cdef double* miss = &miss_v[0, 0]
    cdef double* tot = &tot_v[0]
    cdef double* work = &work_v[0]
    cdef const double* dl = &dlog_v[0, 0]
    cdef const double* l1p = &log1mp[0, 0]
    cdef const double* st = &start_v[0]
    cdef double total = 0.0, comp = 0.0, y, tmp, li
    cdef double* acc
    cdef Py_ssize_t i, t, q
    with nogil:
        for i in range(n_persons):
            _person_loglik(ptr, idx, val, dl, l1p, st, i, work, nq)
            li = _normalize(work, nq)
            # Kahan summation keeps the total independent of block size
            y = li - comp
            tmp = total + y
            comp = (tmp - total) - y
            total = tmp
            for q in range(nq):
                tot[q] += work[q]
            for t in range(ptr[i], ptr[i + 1]):
                acc = (r if val[t] > 0 else miss) + idx[t] * nq
                for q in range(nq):
                    acc[q] += work[q]
    n_arr = nq_arr[None, :] - miss_arr
    return total, r_arr, n_arr, nq_arr


def posterior(block, double[:, ::1] logp, double[:, ::1] log1mp, double[::1] logw):
    """Return per-person log-likelihoods and posterior weights over the grid."""
    cdef Py_ssize_t n_persons = block.n_persons
    cdef Py_ssize_t nq = logw.shape[0]
    dlog_arr, start_arr = _tables(logp, log1mp, logw)
    cdef double[:, ::1] dlog_v = dlog_arr
    cdef double[::1] start_v = start_arr
    cdef const cnp.int64_t[::1] ptr_v = block.ptr
    cdef const cnp.int32_t[::1] idx_v = block.idx
    cdef const cnp.int8_t[::1] val_v = block.val
    ll_arr = np.empty(n_persons)
    post_arr = np.empty((n_persons, nq))
    cdef double[::1] ll = ll_arr
    cdef double[:, ::1] post_v = post_arr
    cdef const cnp.int64_t* ptr = &ptr_v[0]
    cdef const cnp.int32_t* idx = &idx_v[0] if idx_v.shape[0] else NULL
    cdef const cnp.int8_t* val = &val_v[0] if val_v.shape[0] else NULL
    cdef double* post = &post_v[0, 0] if n_persons else NULL
    cdef Py_ssize_t i
    with nogil:
        for i in range(n_persons):
            _person_loglik(ptr, idx, val, &dlog_v[0, 0], &log1mp[0, 0], &start_v[0],
                           i, post + i * nq, nq)
            ll[i] = _normalize(post + i * nq, nq)
    return ll_arr, post_arr
