"""Quantization, discretized-logistic entropy model, rate estimates and range coding."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import _rangecoder as _rc
from .ndgrad import Graph, Node, Parameter, default_dtype
from .rng import fnv1a64

PROB_BITS = _rc.PROB_BITS
PROB_TOTAL = _rc.PROB_TOTAL
PMF_FLOOR = 2.0 ** -PROB_BITS
SCALE_MIN = 1e-6
PARAM_STEP = 256  # (mu, s) are quantized to 1/256 before any table is built
SUPPORT_HALF_WIDTH = 16  # support is mu +- 16 s
SUPPORT_LIMITS = (-(2**15), 2**15 - 1)
MAX_SUPPORT_BINS = 4096
LITERAL_BITS = 32


class DecodeError(ValueError):
    """Payload cannot be decoded with the given table."""

    def __init__(self, msg: str, offset: int | None = None):
        super().__init__(msg)
        self.offset = offset  # payload byte offset, when known


def quantize(x: np.ndarray, mode: str = "round", rng: np.random.Generator | None = None) -> np.ndarray:
    """``round``: nearest integer, ties to even.  ``noise``: x + U(-1/2, 1/2)."""
    x = np.asarray(x)
    if mode == "round":
        return np.rint(x)
    if mode == "noise":
        if rng is None:
            raise ValueError("noise quantization needs a random generator")
        return x + rng.uniform(-0.5, 0.5, size=x.shape).astype(x.dtype, copy=False)
    raise ValueError(f"unknown quantization mode {mode!r}")


def _softplus(x):
    return np.logaddexp(0.0, x)


def _inv_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 20, y, np.log(np.expm1(np.clip(y, 1e-12, 20))))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class EntropyModel:
    """Per-channel discretized logistic prior.

    The scale is stored as an unconstrained parameter and mapped through
    softplus, floored at ``SCALE_MIN``.
    """

    def __init__(self, name: str, channels: int, loc=None, scale=None, dtype=None):
        dtype = dtype or default_dtype()
        loc = np.zeros(channels) if loc is None else np.broadcast_to(np.asarray(loc, float), (channels,))
        scale = np.ones(channels) if scale is None else np.broadcast_to(np.asarray(scale, float), (channels,))
        self.channels = channels
        self.loc = Parameter(f"{name}.loc", np.array(loc, dtype=dtype))
        self.raw_scale = Parameter(f"{name}.raw_scale", _inv_softplus(scale).astype(dtype))

    @property
    def params(self) -> list[Parameter]:
        return [self.loc, self.raw_scale]

    @property
    def scale(self) -> np.ndarray:
        return np.maximum(_softplus(self.raw_scale.tensor.astype(np.float64)), SCALE_MIN)

    def logistic(self) -> tuple[np.ndarray, np.ndarray]:
        return self.loc.tensor.astype(np.float64), self.scale

    def nodes(self, g: Graph) -> tuple[Node, Node]:
        loc = g.param(self.loc)
        scale = g.maximum(g.softplus(g.param(self.raw_scale)), SCALE_MIN)
        return loc, scale

    def quantized(self) -> tuple[np.ndarray, np.ndarray]:
        return quantize_logistic(*self.logistic())

    def serialize(self) -> bytes:
        qloc, qscale = self.quantized()
        return serialize_quantized(qloc, qscale)

    def digest(self) -> int:
        return fnv1a64(self.serialize())


def quantize_logistic(loc, scale) -> tuple[np.ndarray, np.ndarray]:
    """Integer (mu, s) in units of 1/256; s is at least one unit."""
    qloc = np.rint(np.asarray(loc, np.float64) * PARAM_STEP).astype(np.int64)
    qscale = np.maximum(np.rint(np.asarray(scale, np.float64) * PARAM_STEP), 1).astype(np.int64)
    return qloc, qscale


def serialize_quantized(qloc: np.ndarray, qscale: np.ndarray) -> bytes:
    qloc = np.asarray(qloc).ravel()
    qscale = np.asarray(qscale).ravel()
    head = struct.pack("<I", qloc.size)
    return head + qloc.astype("<i4").tobytes() + qscale.astype("<i4").tobytes()


def deserialize_quantized(blob: bytes) -> tuple[np.ndarray, np.ndarray]:
    (n,) = struct.unpack_from("<I", blob, 0)
    qloc = np.frombuffer(blob, "<i4", n, 4).astype(np.int64)
    qscale = np.frombuffer(blob, "<i4", n, 4 + 4 * n).astype(np.int64)
    return qloc, qscale


# --------------------------------------------------------------------------
# probabilities


def _support(loc: np.ndarray, scale: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    kmin = np.floor(loc - SUPPORT_HALF_WIDTH * scale)
    kmax = np.ceil(loc + SUPPORT_HALF_WIDTH * scale)
    kmin = np.clip(kmin, *SUPPORT_LIMITS).astype(np.int64)
    kmax = np.clip(kmax, *SUPPORT_LIMITS).astype(np.int64)
    centre = np.clip(np.rint(loc), *SUPPORT_LIMITS).astype(np.int64)
    half = MAX_SUPPORT_BINS // 2
    wide = kmax - kmin + 1 > MAX_SUPPORT_BINS
    kmin = np.where(wide, np.maximum(centre - half + 1, SUPPORT_LIMITS[0]), kmin)
    kmax = np.where(wide, np.minimum(kmin + MAX_SUPPORT_BINS - 1, SUPPORT_LIMITS[1]), kmax)
    return kmin, kmax


@dataclass
class _Bins:
    """Flattened per-channel bin probabilities (tails included)."""

    kmin: np.ndarray
    nbins: np.ndarray  # in-support bins + 2 tails
    offsets: np.ndarray  # start of each channel in ``probs``
    probs: np.ndarray


def _bin_probs(loc: np.ndarray, scale: np.ndarray) -> _Bins:
    loc = np.asarray(loc, np.float64).ravel()
    scale = np.asarray(scale, np.float64).ravel()
    kmin, kmax = _support(loc, scale)
    nbins = kmax - kmin + 3
    offsets = np.concatenate([[0], np.cumsum(nbins)[:-1]]).astype(np.int64)
    total = int(nbins.sum())
    chan = np.repeat(np.arange(loc.size), nbins)
    j = np.arange(total) - offsets[chan]  # 0 = lower tail, nbins-1 = upper tail
    k = kmin[chan] + j - 1
    mu, s = loc[chan], scale[chan]
    upper = _sigmoid((k + 0.5 - mu) / s)
    lower = _sigmoid((k - 0.5 - mu) / s)
    # right of the median use survival functions to avoid cancellation
    right = k - mu > 0
    mass = np.where(right, _sigmoid(-(k - 0.5 - mu) / s) - _sigmoid(-(k + 0.5 - mu) / s), upper - lower)
    is_lo = j == 0
    is_hi = j == nbins[chan] - 1
    mass = np.where(is_lo, _sigmoid((kmin[chan] - 0.5 - mu) / s), mass)
    mass = np.where(is_hi, _sigmoid(-(kmax[chan] + 0.5 - mu) / s), mass)
    mass = np.maximum(mass, PMF_FLOOR)
    norm = np.add.reduceat(mass, offsets)
    probs = mass / norm[chan]
    return _Bins(kmin=kmin, nbins=nbins, offsets=offsets, probs=probs)


def bin_pmf(model: EntropyModel, channel: int, k: int) -> float:
    """Probability of integer ``k`` in ``channel``; out-of-support values get
    their whole tail bin's probability (the literal costs bits on top)."""
    loc, scale = model.logistic()
    bins = _bin_probs(loc[channel:channel + 1], scale[channel:channel + 1])
    m = int(bins.nbins[0]) - 2
    j = int(k) - int(bins.kmin[0]) + 1
    j = 0 if j < 1 else (m + 1 if j > m else j)
    return float(bins.probs[j])


def logistic_rate_nodes(g: Graph, y: Node, loc: Node, scale: Node) -> Node:
    """Graph nodes for the total bits of noisy latent ``y`` (noise-mode rate)."""
    lik = g.maximum(g.bin_likelihood(y, loc, scale), PMF_FLOOR)
    return g.scale(g.reduce_sum(g.log(lik)), -1.0 / np.log(2.0))


def noise_rate_bits(y: np.ndarray, loc, scale) -> float:
    from .ndgrad import _bin_likelihood  # numpy twin of the graph op

    y = np.asarray(y, np.float64)
    lik = np.maximum(_bin_likelihood(y, np.asarray(loc, np.float64), np.asarray(scale, np.float64)), PMF_FLOOR)
    return float(-np.log2(lik).sum())


def discrete_rate_bits(symbols: np.ndarray, loc, scale) -> float:
    """Bits of integer ``symbols`` (shape [..., C]) under the quantized
    discrete pmf, including literal escapes."""
    symbols = np.asarray(symbols, np.int64)
    channels = symbols.shape[-1]
    loc = np.broadcast_to(np.asarray(loc, np.float64), symbols.shape)
    scale = np.broadcast_to(np.asarray(scale, np.float64), symbols.shape)
    qloc, qscale = quantize_logistic(loc, scale)
    # rows sharing one model need a single table
    if qloc.ndim > 1 and np.all(qloc == qloc.reshape(-1, channels)[:1]) and np.all(qscale == qscale.reshape(-1, channels)[:1]):
        qloc, qscale = qloc.reshape(-1, channels)[0], qscale.reshape(-1, channels)[0]
        chans = np.tile(np.arange(channels), symbols.size // channels)
    else:
        chans = np.arange(symbols.size)
    bins = _bin_probs(qloc / PARAM_STEP, qscale / PARAM_STEP)
    k = symbols.ravel()
    m = bins.nbins[chans] - 2
    j = k - bins.kmin[chans] + 1
    tail = (j < 1) | (j > m)
    j = np.where(j < 1, 0, np.where(j > m, m + 1, j))
    p = bins.probs[bins.offsets[chans] + j]
    return float(-np.log2(p).sum() + LITERAL_BITS * tail.sum())


def estimate_rate_bits(latent: np.ndarray, model: EntropyModel | tuple, mode: str = "round") -> float:
    """Sum of -log2 p over the latent.

    ``noise``: ``latent`` holds noisy values scored by the continuous
    relaxation.  ``round``: it is rounded and scored by the discrete pmf of
    the quantized model, i.e. what the range coder will actually use.
    ``model`` is an EntropyModel or a (loc, scale) pair broadcastable to
    the latent.
    """
    loc, scale = model.logistic() if isinstance(model, EntropyModel) else model
    latent = np.asarray(latent)
    if latent.shape[-1:] != np.shape(loc)[-1:] and np.ndim(loc) > 0:
        raise ValueError(f"latent channels {latent.shape[-1:]} do not match model {np.shape(loc)}")
    if mode == "noise":
        return noise_rate_bits(latent, loc, scale)
    if mode == "round":
        return discrete_rate_bits(np.rint(latent), loc, scale)
    raise ValueError(f"unknown mode {mode!r}")


# --------------------------------------------------------------------------
# fixed-point tables and range coding


@dataclass
class CdfTable:
    """Per-channel cumulative frequencies, flattened.

    Channel ``c`` occupies ``cdf[offsets[c] : offsets[c] + nbins[c] + 1]``;
    bin 0 and bin ``nbins[c] - 1`` are the lower/upper escape tails, bins in
    between are the integers ``kmin[c] ...``.
    """

    kmin: np.ndarray
    nbins: np.ndarray
    offsets: np.ndarray
    cdf: np.ndarray

    @property
    def channels(self) -> int:
        return int(self.kmin.size)

    def channel_cdf(self, c: int) -> np.ndarray:
        o = int(self.offsets[c])
        return self.cdf[o:o + int(self.nbins[c]) + 1]

    def frequencies(self, c: int) -> np.ndarray:
        return np.diff(self.channel_cdf(c))

    def support(self, c: int) -> tuple[int, int]:
        return int(self.kmin[c]), int(self.kmin[c] + self.nbins[c] - 3)


def table_from_quantized(qloc: np.ndarray, qscale: np.ndarray) -> CdfTable:
    qloc = np.asarray(qloc, np.int64).ravel()
    qscale = np.asarray(qscale, np.int64).ravel()
    bins = _bin_probs(qloc / PARAM_STEP, qscale / PARAM_STEP)
    n_ch = qloc.size
    chan = np.repeat(np.arange(n_ch), bins.nbins)
    spare = PROB_TOTAL - bins.nbins
    freq = 1 + np.floor(bins.probs * spare[chan]).astype(np.int64)
    sums = np.add.reduceat(freq, bins.offsets)
    # leftover counts go to the first most probable bin of each channel
    order = np.lexsort((np.arange(freq.size), -bins.probs, chan))
    first = order[np.searchsorted(chan[order], np.arange(n_ch))]
    freq[first] += PROB_TOTAL - sums
    cdf_offsets = bins.offsets + np.arange(n_ch)
    cdf = np.zeros(freq.size + n_ch, dtype=np.int64)
    for_pos = np.arange(freq.size) + chan + 1
    cdf[for_pos] = freq
    # per-channel cumulative sums
    csum = np.cumsum(cdf)
    cdf = csum - np.repeat(csum[cdf_offsets], bins.nbins + 1)
    return CdfTable(kmin=bins.kmin, nbins=bins.nbins, offsets=cdf_offsets, cdf=cdf)


def build_cdf_table(model: EntropyModel | tuple) -> CdfTable:
    """Deterministic table from the quantized (mu, s) of ``model``."""
    if isinstance(model, EntropyModel):
        qloc, qscale = model.quantized()
    else:
        qloc, qscale = quantize_logistic(*model)
    return table_from_quantized(qloc, qscale)


def _channels_for(count: int, table: CdfTable, channels) -> np.ndarray:
    if channels is None:
        return (np.arange(count) % table.channels).astype(np.int64)
    channels = np.asarray(channels, np.int64).ravel()
    if channels.size != count:
        raise ValueError("one channel id per symbol is required")
    if channels.size and (channels.min() < 0 or channels.max() >= table.channels):
        raise ValueError("channel id out of range")
    return channels


def rc_encode(symbols, table: CdfTable, channels=None) -> bytes:
    """Range-code integer ``symbols``; symbol i uses ``channels[i]`` or
    ``i % table.channels``.  Out-of-support values escape to a tail bin
    followed by a raw 32-bit two's-complement literal."""
    symbols = np.asarray(symbols, np.int64).ravel()
    n = symbols.size
    if n == 0:
        return b""
    if symbols.min() < -(2**31) or symbols.max() >= 2**31:
        raise ValueError("symbols must fit in 32-bit two's complement")
    chans = _channels_for(n, table, channels)
    m = table.nbins[chans] - 2
    j = symbols - table.kmin[chans] + 1
    bins = np.where(j < 1, 0, np.where(j > m, m + 1, j)).astype(np.int64)
    literals = (symbols & 0xFFFFFFFF).astype(np.int64)
    out = np.zeros(8 * n + 16, dtype=np.uint8)
    written = _rc.encode_kernel(bins, chans, literals, table.offsets, table.nbins, table.cdf, out)
    return out[:written].tobytes()


def rc_decode(payload: bytes, table: CdfTable, count: int, channels=None, strict: bool = False) -> np.ndarray:
    """Inverse of :func:`rc_encode`.  A table differing from the encoder's
    cannot be detected here; callers guard with header hashes.

    ``strict`` re-encodes the decoded symbols and requires the result to equal
    ``payload`` byte for byte.  The encoder output is canonical (minimal
    flush), so this catches almost every corrupted or padded payload and
    locates the first bad byte.
    """
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    chans = _channels_for(count, table, channels)
    data = np.frombuffer(payload, dtype=np.uint8)
    bins = np.zeros(count, dtype=np.int64)
    literals = np.zeros(count, dtype=np.int64)
    status, consumed = _rc.decode_kernel(data, chans, table.offsets, table.nbins, table.cdf, bins, literals)
    if status == _rc.ERR_TRUNCATED:
        raise DecodeError(f"payload truncated: ran out of bytes at offset {consumed} of {len(payload)}", consumed)
    if status != _rc.OK:
        raise DecodeError(f"corrupt payload near byte offset {consumed}", consumed)
    m = table.nbins[chans] - 2
    values = table.kmin[chans] + bins - 1
    tail = (bins == 0) | (bins == m + 1)
    lit = np.where(literals >= 2**31, literals - 2**32, literals)
    symbols = np.where(tail, lit, values).astype(np.int64)
    if strict:
        again = rc_encode(symbols, table, chans)
        if again != bytes(payload):
            n = min(len(again), len(payload))
            diff = np.flatnonzero(np.frombuffer(again[:n], np.uint8) != np.frombuffer(bytes(payload)[:n], np.uint8))
            off = int(diff[0]) if diff.size else n
            raise DecodeError(f"payload is not a valid encoding: first inconsistent byte at offset {off}", off)
    return symbols
