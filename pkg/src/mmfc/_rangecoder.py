"""Numba kernels for the 32-bit range coder (16-bit probabilities).

Byte output follows the LZMA carry/cache scheme.  Two byte-savings on top:
the always-zero leading byte is never written, and the final flush writes
only as many bytes as are needed to land inside the last interval.  The
decoder pads a short tail with at most ``MAX_PAD`` implicit zero bytes.
"""

import numpy as np
from numba import njit

PROB_BITS = 16
PROB_TOTAL = 1 << PROB_BITS
TOP = 1 << 24
MAX_PAD = 4

OK = 0
ERR_TRUNCATED = 1
ERR_CORRUPT = 2


@njit(cache=True)
def _shift_low(low, cache, cache_size, skip, out, pos):
    if low < 0xFF000000 or low >= 0x100000000:
        carry = low >> 32
        temp = cache
        while True:
            if skip:
                skip = False
            else:
                out[pos] = (temp + carry) & 0xFF
                pos += 1
            temp = 0xFF
            cache_size -= 1
            if cache_size == 0:
                break
        cache = (low >> 24) & 0xFF
    cache_size += 1
    low = (low & 0x00FFFFFF) << 8
    return low, cache, cache_size, skip, pos


@njit(cache=True)
def encode_kernel(bins, chans, literals, offsets, nbins, cdf, out):
    """Returns the number of bytes written into ``out``."""
    n = bins.shape[0]
    if n == 0:
        return 0
    low = np.int64(0)
    rng = np.int64(0xFFFFFFFF)
    cache = np.int64(0)
    cache_size = np.int64(1)
    skip = True
    pos = 0
    for i in range(n):
        c = chans[i]
        base = offsets[c]
        b = bins[i]
        start = np.int64(cdf[base + b])
        size = np.int64(cdf[base + b + 1]) - start
        r = rng >> PROB_BITS
        low += start * r
        rng = r * size
        while rng < TOP:
            rng <<= 8
            low, cache, cache_size, skip, pos = _shift_low(low, cache, cache_size, skip, out, pos)
        if b == 0 or b == nbins[c] - 1:
            lit = np.int64(literals[i])
            for half in (lit >> 16, lit & 0xFFFF):
                r = rng >> PROB_BITS
                low += half * r
                rng = r
                while rng < TOP:
                    rng <<= 8
                    low, cache, cache_size, skip, pos = _shift_low(low, cache, cache_size, skip, out, pos)
    # shortest value with trailing zero bytes inside [low, low + rng)
    k = 0
    value = low
    for k in range(5):
        shift = 32 - 8 * k
        mask = (np.int64(1) << shift) - 1
        value = (low + mask) & ~mask
        if value < low + rng:
            break
    low = value
    for _ in range(k + 1):
        low, cache, cache_size, skip, pos = _shift_low(low, cache, cache_size, skip, out, pos)
    return pos


@njit(cache=True)
def decode_kernel(payload, chans, offsets, nbins, cdf, out_bins, out_literals):
    """Fills the output arrays; returns (status, bytes consumed)."""
    n = chans.shape[0]
    size_in = payload.shape[0]
    pos = 0
    pad = 0
    code = np.int64(0)
    rng = np.int64(0xFFFFFFFF)
    for _ in range(4):
        if pos < size_in:
            code = (code << 8) | np.int64(payload[pos])
            pos += 1
        else:
            code = code << 8
            pad += 1
    for i in range(n):
        c = chans[i]
        base = offsets[c]
        nb = nbins[c]
        r = rng >> PROB_BITS
        v = code // r
        if v >= PROB_TOTAL:
            return ERR_CORRUPT, pos
        lo = 0
        hi = nb - 1
        while lo < hi:
            mid = (lo + hi + 1) >> 1
            if cdf[base + mid] <= v:
                lo = mid
            else:
                hi = mid - 1
        b = lo
        start = np.int64(cdf[base + b])
        size = np.int64(cdf[base + b + 1]) - start
        code -= start * r
        rng = r * size
        while rng < TOP:
            rng <<= 8
            if pos < size_in:
                code = (code << 8) | np.int64(payload[pos])
                pos += 1
            else:
                code = code << 8
                pad += 1
                if pad > MAX_PAD:
                    return ERR_TRUNCATED, pos
        out_bins[i] = b
        if b == 0 or b == nb - 1:
            lit = np.int64(0)
            for _ in range(2):
                r = rng >> PROB_BITS
                half = code // r
                if half >= PROB_TOTAL:
                    return ERR_CORRUPT, pos
                code -= half * r
                rng = r
                lit = (lit << 16) | half
                while rng < TOP:
                    rng <<= 8
                    if pos < size_in:
                        code = (code << 8) | np.int64(payload[pos])
                        pos += 1
                    else:
                        code = code << 8
                        pad += 1
                        if pad > MAX_PAD:
                            return ERR_TRUNCATED, pos
            out_literals[i] = lit
    return OK, pos
