"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``.

Same function names and argument order, so ``_backend`` can swap one for the
other. The tiled kernel keeps the identical loop nest; only the micro tile
body is a numpy block product instead of a scalar loop.
"""
import numpy as np


def _walk(m, k, n, om, on, ok, im, inn, ik):
    for j0 in range(0, n, on):
        j1 = min(j0 + on, n)
        for p0 in range(0, k, ok):
            p1 = min(p0 + ok, k)
            yield "outer", p0, p1, j0, j1
            for i0 in range(0, m, om):
                i1 = min(i0 + om, m)
                for ii in range(i0, i1, im):
                    ii1 = min(ii + im, i1)
                    for jj in range(j0, j1, inn):
                        jj1 = min(jj + inn, j1)
                        for pp in range(p0, p1, ik):
                            yield "micro", ii, ii1, pp, min(pp + ik, p1), jj, jj1


def _tiled(a, b, c, om, on, ok, im, inn, ik):
    m, k = a.shape
    n = b.shape[1]
    packed = None
    pp0 = pj0 = 0
    for ev in _walk(m, k, n, om, on, ok, im, inn, ik):
        if ev[0] == "outer":
            _, pp0, p1, pj0, j1 = ev
            packed = np.ascontiguousarray(b[pp0:p1, pj0:j1])
            continue
        _, i0, i1, p0, p1, j0, j1 = ev
        c[i0:i1, j0:j1] += a[i0:i1, p0:p1] @ packed[p0 - pp0:p1 - pp0, j0 - pj0:j1 - pj0]


def tiled_gemm_f32(a, b, c, om, on, ok, im, inn, ik):
    _tiled(a, b, c, om, on, ok, im, inn, ik)


def tiled_gemm_f64(a, b, c, om, on, ok, im, inn, ik):
    _tiled(a, b, c, om, on, ok, im, inn, ik)


def visit_counts(m, k, n, om, on, ok, im, inn, ik):
    counts = np.zeros((m, k, n), dtype=np.int32)
    for ev in _walk(m, k, n, om, on, ok, im, inn, ik):
        if ev[0] == "micro":
            _, i0, i1, p0, p1, j0, j1 = ev
            counts[i0:i1, p0:p1, j0:j1] += 1
    return counts


def gemm_reference(a, b):
    # Sequential sum over p in float64; the i and j loops are vectorized.
    a64 = np.asarray(a, dtype=np.float64)
    b64 = np.asarray(b, dtype=np.float64)
    out = np.zeros((a64.shape[0], b64.shape[1]), dtype=np.float64)
    for p in range(a64.shape[1]):
        out += np.multiply.outer(a64[:, p], b64[p, :])
    return out
