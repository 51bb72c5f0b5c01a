# cython: language_level=3
"""Compiled hot loops. Mirrors ``_pykernels`` exactly; see ``kernels``."""

from posix.time cimport clock_gettime, timespec, CLOCK_MONOTONIC


cdef extern from "<sched.h>" nogil:
    int sched_yield()


cdef inline double _now() noexcept nogil:
    cdef timespec ts
    clock_gettime(CLOCK_MONOTONIC, &ts)
    return ts.tv_sec + ts.tv_nsec * 1e-9


def spin(double seconds, long iterations=1, bint yield_cpu=True):
    cdef double t0, deadline
    cdef long i
    if seconds < 0:
        raise ValueError("negative spin duration")
    if iterations < 0:
        raise ValueError("negative iteration count")
    with nogil:
        t0 = _now()
        for i in range(iterations):
            deadline = _now() + seconds
            while _now() < deadline:
                if yield_cpu:
                    sched_yield()
    return _now() - t0


def scan_frames(const unsigned char[:] buf, Py_ssize_t start, unsigned long cap):
    cdef Py_ssize_t n = buf.shape[0]
    cdef Py_ssize_t pos = start
    cdef unsigned long length
    spans = []
    while n - pos >= 4:
        length = (<unsigned long>buf[pos]
                  | (<unsigned long>buf[pos + 1] << 8)
                  | (<unsigned long>buf[pos + 2] << 16)
                  | (<unsigned long>buf[pos + 3] << 24))
        if length > cap:
            return spans, pos, length
        if <unsigned long>(n - pos - 4) < length:
            break
        spans.append((pos + 4, pos + 4 + <Py_ssize_t>length))
        pos += 4 + <Py_ssize_t>length
    return spans, pos, 0
