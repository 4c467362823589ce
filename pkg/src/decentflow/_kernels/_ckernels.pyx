# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the exact oracle and k-means assignment."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

cnp.import_array()


def log_weights(double[::1] x, double[:, ::1] points, double[::1] log_q, double alpha, double t):
    cdef Py_ssize_t n = points.shape[0], d = points.shape[1], i, j
    cdef double inv = 1.0 / (2.0 * t * t), diff, acc, m = -INFINITY, total = 0.0
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] s = out
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(d):
                diff = x[j] - alpha * points[i, j]
                acc += diff * diff
            s[i] = log_q[i] - acc * inv
            if s[i] > m:
                m = s[i]
        for i in range(n):
            total += exp(s[i] - m)
        total = m + log(total)
        for i in range(n):
            s[i] -= total
    return out


def posterior_mean_batch(double[:, ::1] xs, double[:, ::1] points, double[::1] log_q, double alpha, double t):
    cdef Py_ssize_t b = xs.shape[0], n = points.shape[0], d = points.shape[1], q, i, j
    cdef double inv = 1.0 / (2.0 * t * t), diff, acc, m, total, w
    out = np.zeros((b, d), dtype=np.float64)
    cdef double[:, ::1] mean = out
    scratch = np.empty(n, dtype=np.float64)
    cdef double[::1] s = scratch
    with nogil:
        for q in range(b):
            m = -INFINITY
            for i in range(n):
                acc = 0.0
                for j in range(d):
                    diff = xs[q, j] - alpha * points[i, j]
                    acc += diff * diff
                s[i] = log_q[i] - acc * inv
                if s[i] > m:
                    m = s[i]
            total = 0.0
            for i in range(n):
                w = exp(s[i] - m)
                s[i] = w
                total += w
            for i in range(n):
                w = s[i] / total
                if w != 0.0:
                    for j in range(d):
                        mean[q, j] += w * points[i, j]
    return out


def nearest_centroid(double[:, ::1] xs, double[:, ::1] centroids):
    cdef Py_ssize_t n = xs.shape[0], k = centroids.shape[0], d = xs.shape[1], i, c, j
    cdef double best, acc, diff
    cdef Py_ssize_t arg
    labels_arr = np.empty(n, dtype=np.int64)
    dist_arr = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] labels = labels_arr
    cdef double[::1] dist = dist_arr
    with nogil:
        for i in range(n):
            best = INFINITY
            arg = 0
            for c in range(k):
                acc = 0.0
                for j in range(d):
                    diff = xs[i, j] - centroids[c, j]
                    acc += diff * diff
                if acc < best:
                    best = acc
                    arg = c
            labels[i] = arg
            dist[i] = best
    return labels_arr, dist_arr
