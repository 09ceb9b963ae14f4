# cython: language_level=3
"""Compiled GEMM kernels.

The tiled kernel walks the output in outer (cache) tiles and, inside each,
in inner (register-level) micro tiles. The loop nest lives in ``_walk`` and
is shared by the compute kernels and by the visit-counting instrument, so the
counting build exercises exactly the traversal used for real work.
"""
import numpy as np

from libc.stdlib cimport free, malloc
from libc.string cimport memcpy

ctypedef void (*outer_fn)(void* ctx, Py_ssize_t p0, Py_ssize_t p1,
                          Py_ssize_t j0, Py_ssize_t j1) noexcept nogil
ctypedef void (*micro_fn)(void* ctx, Py_ssize_t i0, Py_ssize_t i1,
                          Py_ssize_t p0, Py_ssize_t p1,
                          Py_ssize_t j0, Py_ssize_t j1) noexcept nogil


cdef inline Py_ssize_t _min(Py_ssize_t x, Py_ssize_t y) noexcept nogil:
    return x if x < y else y


cdef void _walk(Py_ssize_t m, Py_ssize_t k, Py_ssize_t n,
                Py_ssize_t om, Py_ssize_t on, Py_ssize_t ok,
                Py_ssize_t im, Py_ssize_t inn, Py_ssize_t ik,
                outer_fn on_outer, micro_fn on_micro, void* ctx) noexcept nogil:
    # Edge tiles are clamped, never padded.
    cdef Py_ssize_t j0, j1, p0, p1, i0, i1, ii, ii1, jj, jj1, pp, pp1
    j0 = 0
    while j0 < n:
        j1 = _min(j0 + on, n)
        p0 = 0
        while p0 < k:
            p1 = _min(p0 + ok, k)
            on_outer(ctx, p0, p1, j0, j1)
            i0 = 0
            while i0 < m:
                i1 = _min(i0 + om, m)
                ii = i0
                while ii < i1:
                    ii1 = _min(ii + im, i1)
                    jj = j0
                    while jj < j1:
                        jj1 = _min(jj + inn, j1)
                        pp = p0
                        while pp < p1:
                            pp1 = _min(pp + ik, p1)
                            on_micro(ctx, ii, ii1, pp, pp1, jj, jj1)
                            pp = pp1
                        jj = jj1
                    ii = ii1
                i0 = i1
            p0 = p1
        j0 = j1


cdef struct FloatCtx:
    const float* a
    const float* b
    float* c
    float* pack
    Py_ssize_t lda, ldb, ldc, ldp, pj0, pp0


cdef struct DoubleCtx:
    const double* a
    const double* b
    double* c
    double* pack
    Py_ssize_t lda, ldb, ldc, ldp, pj0, pp0


cdef struct CountCtx:
    int* counts
    Py_ssize_t k, n


cdef void _pack_f(void* vctx, Py_ssize_t p0, Py_ssize_t p1,
                  Py_ssize_t j0, Py_ssize_t j1) noexcept nogil:
    cdef FloatCtx* ctx = <FloatCtx*>vctx
    cdef Py_ssize_t p, w = j1 - j0
    ctx.ldp = w
    ctx.pj0 = j0
    ctx.pp0 = p0
    for p in range(p0, p1):
        memcpy(ctx.pack + (p - p0) * w, ctx.b + p * ctx.ldb + j0, w * sizeof(float))


cdef void _micro_f(void* vctx, Py_ssize_t i0, Py_ssize_t i1,
                   Py_ssize_t p0, Py_ssize_t p1,
                   Py_ssize_t j0, Py_ssize_t j1) noexcept nogil:
    cdef FloatCtx* ctx = <FloatCtx*>vctx
    cdef Py_ssize_t i, p, j
    cdef float av
    cdef float* crow
    cdef const float* arow
    cdef const float* brow
    for i in range(i0, i1):
        crow = ctx.c + i * ctx.ldc
        arow = ctx.a + i * ctx.lda
        for p in range(p0, p1):
            av = arow[p]
            brow = ctx.pack + (p - ctx.pp0) * ctx.ldp - ctx.pj0
            for j in range(j0, j1):
                crow[j] += av * brow[j]


cdef void _pack_d(void* vctx, Py_ssize_t p0, Py_ssize_t p1,
                  Py_ssize_t j0, Py_ssize_t j1) noexcept nogil:
    cdef DoubleCtx* ctx = <DoubleCtx*>vctx
    cdef Py_ssize_t p, w = j1 - j0
    ctx.ldp = w
    ctx.pj0 = j0
    ctx.pp0 = p0
    for p in range(p0, p1):
        memcpy(ctx.pack + (p - p0) * w, ctx.b + p * ctx.ldb + j0, w * sizeof(double))


cdef void _micro_d(void* vctx, Py_ssize_t i0, Py_ssize_t i1,
                   Py_ssize_t p0, Py_ssize_t p1,
                   Py_ssize_t j0, Py_ssize_t j1) noexcept nogil:
    cdef DoubleCtx* ctx = <DoubleCtx*>vctx
    cdef Py_ssize_t i, p, j
    cdef double av
    cdef double* crow
    cdef const double* arow
    cdef const double* brow
    for i in range(i0, i1):
        crow = ctx.c + i * ctx.ldc
        arow = ctx.a + i * ctx.lda
        for p in range(p0, p1):
            av = arow[p]
            brow = ctx.pack + (p - ctx.pp0) * ctx.ldp - ctx.pj0
            for j in range(j0, j1):
                crow[j] += av * brow[j]


cdef void _no_pack(void* vctx, Py_ssize_t p0, Py_ssize_t p1,
                   Py_ssize_t j0, Py_ssize_t j1) noexcept nogil:
    pass


cdef void _micro_count(void* vctx, Py_ssize_t i0, Py_ssize_t i1,
                       Py_ssize_t p0, Py_ssize_t p1,
                       Py_ssize_t j0, Py_ssize_t j1) noexcept nogil:
    cdef CountCtx* ctx = <CountCtx*>vctx
    cdef Py_ssize_t i, p, j
    for i in range(i0, i1):
        for p in range(p0, p1):
            for j in range(j0, j1):
                ctx.counts[(i * ctx.k + p) * ctx.n + j] += 1


def tiled_gemm_f32(const float[:, ::1] a, const float[:, ::1] b, float[:, ::1] c,
                   int om, int on, int ok, int im, int inn, int ik):
    """Accumulate ``a @ b`` into ``c`` (which the caller zeroes)."""
    cdef FloatCtx ctx
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    ctx.a = &a[0, 0]
    ctx.b = &b[0, 0]
    ctx.c = &c[0, 0]
    ctx.lda = k
    ctx.ldb = n
    ctx.ldc = c.shape[1]
    ctx.pack = <float*>malloc(ok * on * sizeof(float))
    if ctx.pack == NULL:
        raise MemoryError()
    with nogil:
        _walk(m, k, n, om, on, ok, im, inn, ik, _pack_f, _micro_f, &ctx)
    free(ctx.pack)


def tiled_gemm_f64(const double[:, ::1] a, const double[:, ::1] b, double[:, ::1] c,
                   int om, int on, int ok, int im, int inn, int ik):
    cdef DoubleCtx ctx
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    ctx.a = &a[0, 0]
    ctx.b = &b[0, 0]
    ctx.c = &c[0, 0]
    ctx.lda = k
    ctx.ldb = n
    ctx.ldc = c.shape[1]
    ctx.pack = <double*>malloc(ok * on * sizeof(double))
    if ctx.pack == NULL:
        raise MemoryError()
    with nogil:
        _walk(m, k, n, om, on, ok, im, inn, ik, _pack_d, _micro_d, &ctx)
    free(ctx.pack)


def visit_counts(Py_ssize_t m, Py_ssize_t k, Py_ssize_t n,
                 int om, int on, int ok, int im, int inn, int ik):
    """Count how often the tiled loop nest touches each (i, p, j) triple."""
    counts = np.zeros((m, k, n), dtype=np.int32)
    cdef int[:, :, ::1] view = counts
    cdef CountCtx ctx
    ctx.counts = &view[0, 0, 0]
    ctx.k = k
    ctx.n = n
    with nogil:
        _walk(m, k, n, om, on, ok, im, inn, ik, _no_pack, _micro_count, &ctx)
    return counts


ctypedef fused real:
    float
    double


def gemm_reference(const real[:, ::1] a, const real[:, ::1] b):
    """Naive i-j-p triple loop, 64-bit accumulation, float64 result."""
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i, j, p
    cdef double s
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] c = out
    with nogil:
        for i in range(m):
            for j in range(n):
                s = 0.0
                for p in range(k):
                    s = s + <double>a[i, p] * <double>b[p, j]
                c[i, j] = s
    return out
