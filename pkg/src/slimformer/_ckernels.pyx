# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: u8 activation quantization, packed int8 GEMM with a
fused bias/ReLU epilogue, and a fused multi-head attention block.

Must stay bit-compatible with slimformer._pykernels for the quantized paths;
build with -ffp-contract=off so the epilogue is not contracted into FMAs.
"""
import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange, parallel
from libc.math cimport floor, fabs, copysign
from libc.stdlib cimport malloc, free
from libc.string cimport memset
from libc.stdint cimport int8_t, int16_t, uint8_t, int32_t, int64_t

cnp.import_array()



def quantize_u8(float[:, ::1] x, double scale, int zero_point):
    cdef Py_ssize_t m = x.shape[0], k = x.shape[1], i, j
    out = np.empty((m, k), dtype=np.uint8)
    cdef uint8_t[:, ::1] q = out
    cdef double t, r
    with nogil:
        for i in range(m):
            for j in range(k):
                t = <double>x[i, j] / scale
                r = copysign(floor(fabs(t) + 0.5), t) + zero_point
                if r < 0:
                    r = 0
                elif r > 255:
                    r = 255
                q[i, j] = <uint8_t>r
    return out


cdef extern from *:
    """
    #include <stdint.h>
    #include <stddef.h>
    #include <string.h>
    #if defined(__AVX2__)
    #include <immintrin.h>
    #endif

    /* Register tile: SF_MR rows x SF_NR columns of (a - zp) @ w added to an
       int64 output block.  Integer arithmetic throughout; int32 partial sums
       cover at most SF_KSPAN terms of magnitude <= 255 * 127. */
    #define SF_MR 6
    #define SF_NR 16
    #define SF_KSPAN 32768

    #if defined(__AVX2__)
    #define SF_ROWS(X) X(0) X(1) X(2) X(3) X(4) X(5)

    static inline __m256i sf_pair(const int16_t *ar) {
        /* (a[k] - zp, a[k+1] - zp) broadcast to every int32 lane */
        int32_t v;
        memcpy(&v, ar, sizeof v);
        return _mm256_set1_epi32(v);
    }

    static inline void sf_flush(__m256i lo, __m256i hi, int64_t *o) {
        /* unpack{lo,hi}_epi16 work per 128-bit lane, so lo holds columns
           0-3 and 8-11, hi holds 4-7 and 12-15 */
        int32_t l[8], h[8];
        _mm256_storeu_si256((__m256i *)l, lo);
        _mm256_storeu_si256((__m256i *)h, hi);
        for (int t = 0; t < 4; ++t) {
            o[t] += l[t];
            o[8 + t] += l[4 + t];
            o[4 + t] += h[t];
            o[12 + t] += h[4 + t];
        }
    }

    static inline void sf_tile(const int16_t *ap, ptrdiff_t lda, const int8_t *wp,
                               ptrdiff_t ldw, ptrdiff_t kmax, int64_t *out, ptrdiff_t ldo)
    {
        /* ap holds a - zp widened to int16; the row stride must leave one
           readable element past kmax (its weight partner is zero). */
        for (ptrdiff_t k0 = 0; k0 < kmax; k0 += SF_KSPAN) {
            ptrdiff_t kend = kmax - k0 < SF_KSPAN ? kmax : k0 + SF_KSPAN;
    #define SF_DECL(r) __m256i lo##r = _mm256_setzero_si256(), hi##r = _mm256_setzero_si256();
            SF_ROWS(SF_DECL)
            for (ptrdiff_t kk = k0; kk < kend; kk += 2) {
                int has_next = kk + 1 < kend;
                __m256i w0 = _mm256_cvtepi8_epi16(_mm_loadu_si128((const __m128i *)(wp + kk * ldw)));
                __m256i w1 = has_next
                    ? _mm256_cvtepi8_epi16(_mm_loadu_si128((const __m128i *)(wp + (kk + 1) * ldw)))
                    : _mm256_setzero_si256();
                __m256i wl = _mm256_unpacklo_epi16(w0, w1);
                __m256i wh = _mm256_unpackhi_epi16(w0, w1);
    #define SF_STEP(r) { __m256i av = sf_pair(ap + (r) * lda + kk); \
                lo##r = _mm256_add_epi32(lo##r, _mm256_madd_epi16(av, wl)); \
                hi##r = _mm256_add_epi32(hi##r, _mm256_madd_epi16(av, wh)); }
                SF_ROWS(SF_STEP)
            }
    #define SF_OUT(r) sf_flush(lo##r, hi##r, out + (r) * ldo);
            SF_ROWS(SF_OUT)
        }
    }
    #else
    static inline void sf_tile(const int16_t *ap, ptrdiff_t lda, const int8_t *wp,
                               ptrdiff_t ldw, ptrdiff_t kmax, int64_t *out, ptrdiff_t ldo)
    {
        for (int r = 0; r < SF_MR; ++r) {
            int64_t acc[SF_NR] = {0};
            for (ptrdiff_t kk = 0; kk < kmax; ++kk) {
                int av = ap[r * lda + kk];
                for (int t = 0; t < SF_NR; ++t)
                    acc[t] += av * wp[kk * ldw + t];
            }
            for (int t = 0; t < SF_NR; ++t)
                out[r * ldo + t] += acc[t];
        }
    }
    #endif
    """
    enum:
        SF_MR
        SF_NR
    void sf_tile(const int16_t *ap, Py_ssize_t lda, const int8_t *wp, Py_ssize_t ldw,
                 Py_ssize_t kmax, int64_t *out, Py_ssize_t ldo) noexcept nogil


cdef inline void _rows_generic(
    const uint8_t *ap,
    Py_ssize_t lda,
    Py_ssize_t rows,
    int zp,
    const int8_t *wp,
    Py_ssize_t ldw,
    Py_ssize_t kmax,
    Py_ssize_t width,
    int32_t *acc32,
    int64_t *out,
    Py_ssize_t ldo,
) noexcept nogil:
    # Short row blocks and narrow column remainders.  |av * w| <= 255 * 127
    # fits in 16 bits; widen only for the sum (vectorizes over columns).
    cdef Py_ssize_t r, kk, t
    cdef int16_t avr
    cdef const int8_t *prow
    for r in range(rows):
        for t in range(width):
            acc32[t] = 0
        for kk in range(kmax):
            avr = <int16_t>(<int>ap[r * lda + kk] - zp)
            if avr == 0:
                continue
            prow = wp + kk * ldw
            for t in range(width):
                acc32[t] = acc32[t] + <int16_t>(avr * <int16_t>prow[t])
        for t in range(width):
            out[r * ldo + t] += acc32[t]


def gemm_i8_packed(
    uint8_t[:, ::1] a,
    int zero_point,
    double a_scale,
    int8_t[::1] payload,
    Py_ssize_t k,
    Py_ssize_t n,
    Py_ssize_t kc,
    Py_ssize_t nc,
    float[::1] col_scales,
    bias,
    bint relu,
    int nthreads=1,
):
    cdef Py_ssize_t m = a.shape[0]
    cdef Py_ssize_t kb_count = (k + kc - 1) // kc
    cdef Py_ssize_t nb_count = (n + nc - 1) // nc
    out = np.empty((m, n), dtype=np.float32)
    if m == 0 or n == 0:
        return out
    if kc > 65536:
        raise ValueError("kc above 65536 would overflow the int32 panel sums")
    cdef float[:, ::1] c = out
    cdef float[::1] bias_v
    cdef bint has_bias = bias is not None
    if has_bias:
        bias_v = bias
    else:
        bias_v = np.zeros(1, dtype=np.float32)
    if nthreads < 1:
        nthreads = 1

    cdef Py_ssize_t rb_count = (m + SF_MR - 1) // SF_MR
    cdef Py_ssize_t rb, i0, rows, r, jb, kb, j, jt, kmax, jmax, k0, j0
    cdef int64_t *acc64
    cdef int32_t *acc32
    cdef int16_t *a16
    cdef Py_ssize_t lda16 = k + 1
    cdef const uint8_t *ablk
    cdef const int8_t *panel
    cdef double s, y
    cdef float val
    cdef const uint8_t *abase = &a[0, 0]

    with nogil, parallel(num_threads=nthreads):
        acc64 = <int64_t *> malloc(SF_MR * nc * sizeof(int64_t))
        acc32 = <int32_t *> malloc(nc * sizeof(int32_t))
        a16 = <int16_t *> malloc(SF_MR * lda16 * sizeof(int16_t))
        for rb in prange(rb_count, schedule="static"):
            i0 = rb * SF_MR
            rows = m - i0
            if rows > SF_MR:
                rows = SF_MR
            ablk = abase + i0 * k
            if rows == SF_MR:
                for r in range(SF_MR):
                    for j in range(k):
                        a16[r * lda16 + j] = <int16_t>(<int>ablk[r * k + j] - zero_point)
                    a16[r * lda16 + k] = 0
            for jb in range(nb_count):
                j0 = jb * nc
                memset(acc64, 0, SF_MR * nc * sizeof(int64_t))
                for kb in range(kb_count):
                    k0 = kb * kc
                    kmax = k - k0
                    if kmax > kc:
                        kmax = kc
                    panel = &payload[(kb * nb_count + jb) * kc * nc]
                    if rows == SF_MR:
                        jt = 0
                        while jt + SF_NR <= nc:
                            sf_tile(a16 + k0, lda16, panel + jt, nc, kmax, acc64 + jt, nc)
                            jt = jt + SF_NR
                        if jt < nc:
                            _rows_generic(ablk + k0, k, rows, zero_point, panel + jt, nc, kmax, nc - jt,
                                          acc32, acc64 + jt, nc)
                    else:
                        _rows_generic(ablk + k0, k, rows, zero_point, panel, nc, kmax, nc, acc32, acc64, nc)
                jmax = n - j0
                if jmax > nc:
                    jmax = nc
                for r in range(rows):
                    for j in range(jmax):
                        s = a_scale * <double>col_scales[j0 + j]
                        y = <double>acc64[r * nc + j] * s
                        if has_bias:
                            y = y + <double>bias_v[j0 + j]
                        val = <float>y
                        if relu and val < 0:
                            val = 0
                        c[i0 + r, j0 + j] = val
        free(acc64)
        free(acc32)
        free(a16)
    return out


def _unit_stride(x):
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2 or x.strides[1] != sizeof(float) or x.strides[0] % sizeof(float):
        x = np.ascontiguousarray(x)
    return x


cdef extern from *:
    """
    #include <math.h>
    #include <stdint.h>
    #include <string.h>
    #include <stddef.h>

    typedef float sf_v8 __attribute__((vector_size(32)));

    static inline sf_v8 sf_load8(const float *p) { sf_v8 v; memcpy(&v, p, sizeof v); return v; }
    static inline void sf_store8(float *p, sf_v8 v) { memcpy(p, &v, sizeof v); }

    typedef int32_t sf_i8 __attribute__((vector_size(32)));

    /* exp on eight lanes: x = n ln2 + r with |r| <= ln2 / 2, a degree-6
       polynomial for e^r, and 2^n assembled in the exponent bits.  Inputs
       below ln(FLT_MIN) give exactly 0 (as for masked keys), which also
       keeps denormals out of the weighted sum. */
    static inline sf_v8 sf_exp8(sf_v8 x) {
        const sf_v8 hi = {88.3762626647949f, 88.3762626647949f, 88.3762626647949f, 88.3762626647949f,
                          88.3762626647949f, 88.3762626647949f, 88.3762626647949f, 88.3762626647949f};
        const float lo = -87.33654475f;
        sf_i8 keep = (sf_i8)(x >= lo);
        for (int i = 0; i < 8; ++i) {
            if (x[i] > hi[i]) x[i] = hi[i];
            if (x[i] < lo) x[i] = lo;
        }
        sf_v8 t = x * 1.44269504088896341f + 0.5f;
        sf_i8 n = __builtin_convertvector(t, sf_i8);
        sf_v8 nf = __builtin_convertvector(n, sf_v8);
        n += (sf_i8)(nf > t);        /* truncation -> floor (mask is -1) */
        nf = __builtin_convertvector(n, sf_v8);
        sf_v8 r = x - nf * 0.693359375f + nf * 2.12194440e-4f;
        sf_v8 p = r * 1.9875691500E-4f + 1.3981999507E-3f;
        p = p * r + 8.3334519073E-3f;
        p = p * r + 4.1665795894E-2f;
        p = p * r + 1.6666665459E-1f;
        p = p * r + 5.0000001201E-1f;
        p = p * r * r + r + 1.0f;
        sf_i8 bits = ((n + 127) << 23) & keep;
        sf_v8 scale;
        memcpy(&scale, &bits, sizeof scale);
        return p * scale;
    }

    /* One attention head of one sequence.  Query rows are processed four at
       a time so each K^T / V row loaded feeds four accumulators.
       kt: d * sp scratch, pr: 4 * sp scratch, sp = s rounded up to 8. */
    static void sf_attend_head(const float *q, ptrdiff_t qs, const float *k, ptrdiff_t ks,
                               const float *v, ptrdiff_t vs, const float *mask, ptrdiff_t s,
                               ptrdiff_t d, float scale, float mult, float *out, ptrdiff_t os,
                               float *kt, float *pr, ptrdiff_t sp)
    {
        for (ptrdiff_t t = 0; t < d; ++t) {
            for (ptrdiff_t j = 0; j < s; ++j) kt[t * sp + j] = k[j * ks + t];
            for (ptrdiff_t j = s; j < sp; ++j) kt[t * sp + j] = 0.0f;
        }
        ptrdiff_t d8 = d - d % 8;
        for (ptrdiff_t i0 = 0; i0 < s; i0 += 4) {
            ptrdiff_t rows = s - i0 < 4 ? s - i0 : 4;
            const float *qr[4];
            for (int r = 0; r < 4; ++r) qr[r] = q + (i0 + (r < rows ? r : 0)) * qs;
            for (ptrdiff_t jc = 0; jc < sp; jc += 8) {
                sf_v8 c0 = {0}, c1 = {0}, c2 = {0}, c3 = {0};
                for (ptrdiff_t t = 0; t < d; ++t) {
                    sf_v8 kv = sf_load8(kt + t * sp + jc);
                    c0 += (qr[0][t] * scale) * kv;
                    c1 += (qr[1][t] * scale) * kv;
                    c2 += (qr[2][t] * scale) * kv;
                    c3 += (qr[3][t] * scale) * kv;
                }
                sf_store8(pr + jc, c0);
                sf_store8(pr + sp + jc, c1);
                sf_store8(pr + 2 * sp + jc, c2);
                sf_store8(pr + 3 * sp + jc, c3);
            }
            float inv[4];
            for (ptrdiff_t r = 0; r < rows; ++r) {
                float *row = pr + r * sp, mx = -3.0e38f, tot = 0.0f;
                for (ptrdiff_t j = 0; j < s; ++j) {
                    row[j] += mask[j];
                    if (row[j] > mx) mx = row[j];
                }
                sf_v8 vt = {0};
                ptrdiff_t j = 0;
                for (; j + 8 <= s; j += 8) {
                    sf_v8 e = sf_exp8(sf_load8(row + j) - mx);
                    sf_store8(row + j, e);
                    vt += e;
                }
                for (; j < s; ++j) {
                    row[j] = expf(row[j] - mx);
                    tot += row[j];
                }
                for (int l = 0; l < 8; ++l) tot += vt[l];
                inv[r] = mult / tot;
            }
            for (ptrdiff_t r = rows; r < 4; ++r) inv[r] = 0.0f;
            for (ptrdiff_t tc = 0; tc < d8; tc += 8) {
                sf_v8 c0 = {0}, c1 = {0}, c2 = {0}, c3 = {0};
                for (ptrdiff_t j = 0; j < s; ++j) {
                    sf_v8 vv = sf_load8(v + j * vs + tc);
                    c0 += pr[j] * vv;
                    c1 += pr[sp + j] * vv;
                    c2 += pr[2 * sp + j] * vv;
                    c3 += pr[3 * sp + j] * vv;
                }
                sf_v8 acc[4] = {c0, c1, c2, c3};
                for (ptrdiff_t r = 0; r < rows; ++r)
                    sf_store8(out + (i0 + r) * os + tc, acc[r] * inv[r]);
            }
            for (ptrdiff_t r = 0; r < rows; ++r)
                for (ptrdiff_t t = d8; t < d; ++t) {
                    float acc = 0.0f;
                    for (ptrdiff_t j = 0; j < s; ++j) acc += pr[r * sp + j] * v[j * vs + t];
                    out[(i0 + r) * os + t] = acc * inv[r];
                }
        }
    }
    """
    void sf_attend_head(const float *q, Py_ssize_t qs, const float *k, Py_ssize_t ks,
                        const float *v, Py_ssize_t vs, const float *mask, Py_ssize_t s,
                        Py_ssize_t d, float scale, float mult, float *out, Py_ssize_t os,
                        float *kt, float *pr, Py_ssize_t sp) noexcept nogil


def fused_attention(
    q_in,
    k_in,
    v_in,
    float[:, ::1] mask_add,
    head_mask,
    Py_ssize_t b,
    Py_ssize_t s,
    Py_ssize_t a,
    Py_ssize_t d,
    double scale,
    int nthreads=1,
):
    """One task per (sequence, head): scores, softmax and the weighted sum of
    values, with the head multiplier applied to the output.

    q, k, v may be column slices of a wider matrix as long as rows are unit
    stride.
    """
    cdef float[:, :] qv = _unit_stride(q_in)
    cdef float[:, :] kv = _unit_stride(k_in)
    cdef float[:, :] vv = _unit_stride(v_in)
    out = np.empty((b * s, a * d), dtype=np.float32)
    cdef float[:, ::1] ctx = out
    cdef float[::1] hm
    cdef bint has_mask = head_mask is not None
    if has_mask:
        hm = np.ascontiguousarray(head_mask, dtype=np.float32)
    else:
        hm = np.ones(1, dtype=np.float32)
    if nthreads < 1:
        nthreads = 1
    if b * s == 0 or a * d == 0:
        return out

    cdef float *qp = &qv[0, 0]
    cdef float *kp = &kv[0, 0]
    cdef float *vp = &vv[0, 0]
    cdef float *op = &ctx[0, 0]
    cdef Py_ssize_t qs = qv.strides[0] // sizeof(float)
    cdef Py_ssize_t ks = kv.strides[0] // sizeof(float)
    cdef Py_ssize_t vs = vv.strides[0] // sizeof(float)
    cdef Py_ssize_t os = a * d
    cdef Py_ssize_t sp = (s + 7) // 8 * 8
    cdef float fscale = <float>scale
    cdef Py_ssize_t task, bi, h, col0, row0
    cdef float *kt
    cdef float *pr
    cdef float mult

    with nogil, parallel(num_threads=nthreads):
        kt = <float *> malloc(d * sp * sizeof(float))
        pr = <float *> malloc(4 * sp * sizeof(float))
        for task in prange(b * a, schedule="static"):
            bi = task // a
            h = task % a
            col0 = h * d
            row0 = bi * s
            mult = hm[h] if has_mask else 1.0
            sf_attend_head(qp + row0 * qs + col0, qs, kp + row0 * ks + col0, ks, vp + row0 * vs + col0, vs,
                           &mask_add[bi, 0], s, d, fscale, mult, op + row0 * os + col0, os, kt, pr, sp)
        free(kt)
        free(pr)
    return out
