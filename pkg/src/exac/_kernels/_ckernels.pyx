# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled kernels; byte-for-byte equivalent to _pykernels.

glibc snprintf/strtod and CPython's float formatter are both correctly
rounded, so %.6f rendering and parsing agree across the two backends.
"""

from cpython.bytes cimport PyBytes_AS_STRING, PyBytes_FromStringAndSize, PyBytes_GET_SIZE
from cpython.mem cimport PyMem_Free, PyMem_Malloc
from libc.stdio cimport snprintf
from libc.stdlib cimport strtod
from libc.string cimport memcpy

from exac.errors import ChunkConflictError

BACKEND = "compiled"


def split_chunks(bytes data, Py_ssize_t size):
    if size < 1:
        raise ValueError("chunk size must be >= 1")
    cdef Py_ssize_t n = PyBytes_GET_SIZE(data)
    cdef const char *src = PyBytes_AS_STRING(data)
    cdef list out = []
    cdef Py_ssize_t i = 0
    cdef Py_ssize_t take
    while i < n:
        take = size if n - i >= size else n - i
        out.append(PyBytes_FromStringAndSize(src + i, take))
        i += take
    return out


def merge_pairs(dict chunks, list pairs):
    cdef Py_ssize_t added = 0
    cdef object seq, data, prev
    for seq, data in pairs:
        prev = chunks.get(seq)
        if prev is None:
            chunks[seq] = data
            added += PyBytes_GET_SIZE(<bytes>data)
        elif prev != data:
            raise ChunkConflictError(seq)
    return added


def join_chunks(dict chunks, Py_ssize_t count):
    cdef Py_ssize_t total = 0
    cdef Py_ssize_t i
    cdef object piece
    cdef list pieces = [None] * count
    for i in range(count):
        piece = chunks[i]
        pieces[i] = piece
        total += PyBytes_GET_SIZE(<bytes>piece)
    cdef bytes out = PyBytes_FromStringAndSize(NULL, total)
    cdef char *dst = PyBytes_AS_STRING(out)
    cdef Py_ssize_t off = 0
    cdef Py_ssize_t m
    for i in range(count):
        piece = pieces[i]
        m = PyBytes_GET_SIZE(<bytes>piece)
        memcpy(dst + off, PyBytes_AS_STRING(<bytes>piece), m)
        off += m
    return out


def missing_seqs(dict chunks, Py_ssize_t count):
    cdef list out = []
    cdef Py_ssize_t i
    for i in range(count):
        if i not in chunks:
            out.append(i)
    return out


def encode_samples(rows):
    cdef list parts = []
    cdef char buf[192]
    cdef int m
    cdef double t, x, y, z, yaw, pitch
    for row in rows:
        t = row[0]; x = row[1]; y = row[2]; z = row[3]; yaw = row[4]; pitch = row[5]
        m = snprintf(buf, sizeof(buf), b"%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n",
                     t, x, y, z, yaw, pitch)
        if m <= 0 or m >= <int>sizeof(buf):
            raise ValueError("sample failed to format")
        parts.append(PyBytes_FromStringAndSize(buf, m))
    return b"".join(parts)


cdef inline double _field(const char *p, Py_ssize_t start, Py_ssize_t end, Py_ssize_t ln) except? -1e308:
    # strtod needs a NUL-terminated buffer; fields are short, copy to stack.
    cdef char tmp[64]
    cdef Py_ssize_t m = end - start
    cdef char *endp
    cdef double v
    if m <= 0 or m >= <Py_ssize_t>sizeof(tmp):
        raise ValueError(f"row {ln}: non-numeric field")
    memcpy(tmp, p + start, m)
    tmp[m] = 0
    v = strtod(tmp, &endp)
    if endp != tmp + m:
        raise ValueError(f"row {ln}: non-numeric field")
    return v


def decode_samples(bytes data):
    cdef Py_ssize_t n = PyBytes_GET_SIZE(data)
    if n == 0:
        return []
    cdef const char *p = PyBytes_AS_STRING(data)
    if p[n - 1] != b"\n":
        raise ValueError("row 0: missing trailing newline")
    cdef list out = []
    cdef Py_ssize_t ln = 0
    cdef Py_ssize_t i = 0
    cdef Py_ssize_t start, j, nf
    cdef Py_ssize_t f0[7]
    cdef double v0, v1, v2, v3, v4, v5
    while i < n:
        ln += 1
        start = i
        nf = 0
        f0[0] = i
        j = i
        while j < n and p[j] != b"\n":
            if p[j] == b",":
                nf += 1
                if nf >= 7:
                    raise ValueError(f"row {ln}: expected 6 fields, got {nf + 1}")
                f0[nf] = j + 1
            j += 1
        if nf != 5:
            raise ValueError(f"row {ln}: expected 6 fields, got {nf + 1}")
        v0 = _field(p, f0[0], f0[1] - 1, ln)
        v1 = _field(p, f0[1], f0[2] - 1, ln)
        v2 = _field(p, f0[2], f0[3] - 1, ln)
        v3 = _field(p, f0[3], f0[4] - 1, ln)
        v4 = _field(p, f0[4], f0[5] - 1, ln)
        v5 = _field(p, f0[5], j, ln)
        out.append((v0, v1, v2, v3, v4, v5))
        i = j + 1
    return out


cdef inline double _yaw_of(double dx, double dy):
    if dx > 0:
        return 0.0
    if dx < 0:
        return -180.0
    if dy > 0:
        return 90.0
    return -90.0


cdef list _sample_loop(double *xs, double *ys, Py_ssize_t n, double period_s, double speed):
    cdef double total = <double>(n - 1)
    cdef list rows = []
    cdef long k = 0
    cdef double t, d, frac, ax, ay, dx, dy
    cdef Py_ssize_t i
    while True:
        t = k * period_s
        d = t * speed
        if d >= total:
            break
        i = <Py_ssize_t>d
        frac = d - i
        ax = xs[i]
        ay = ys[i]
        dx = xs[i + 1] - ax
        dy = ys[i + 1] - ay
        rows.append((t, ax + dx * frac, ay + dy * frac, 0.0, _yaw_of(dx, dy), 0.0))
        k += 1
    dx = xs[n - 1] - xs[n - 2]
    dy = ys[n - 1] - ys[n - 2]
    rows.append((total / speed, xs[n - 1], ys[n - 1], 0.0, _yaw_of(dx, dy), 0.0))
    return rows


def interpolate_track(list path, double period_s, double speed):
    cdef Py_ssize_t n = len(path)
    if n == 0:
        return []
    cdef object cell
    cdef double fx, fy
    if n == 1:
        cell = path[0]
        fx = <double>cell[0]
        fy = <double>cell[1]
        return [(0.0, fx, fy, 0.0, 0.0, 0.0)]
    # Unpack the path once into C arrays: the sampling loop is pure C after this.
    cdef double *xs = <double *> PyMem_Malloc(n * sizeof(double))
    cdef double *ys = <double *> PyMem_Malloc(n * sizeof(double))
    if xs == NULL or ys == NULL:
        if xs != NULL:
            PyMem_Free(xs)
        if ys != NULL:
            PyMem_Free(ys)
        raise MemoryError()
    cdef Py_ssize_t i
    try:
        for i in range(n):
            cell = path[i]
            xs[i] = <double>cell[0]
            ys[i] = <double>cell[1]
        return _sample_loop(xs, ys, n, period_s, speed)
    finally:
        PyMem_Free(xs)
        PyMem_Free(ys)
