"""Probability models, rate estimation, and a bit-exact range coder.

Two probability models feed both the differentiable rate term of the
training loss and the integer CDF tables used for actual coding:

* :class:`GaussianConditional` - per-element mean/scale from the hyper
  decoder, used for the main latents.
* :class:`FactorizedPrior` - a learned per-channel monotone CDF (a tiny
  positive-weight network per channel), used for the hyper latents.

Coding is a carry-propagating range coder with 64-bit registers, byte-wise
renormalization and 16-bit probability totals.  Table building is done in
float64 with a fixed evaluation order so encoder and decoder construct
bitwise-identical tables from identical inputs.
"""

from __future__ import annotations

import math
import struct

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SCALE_FLOOR = 0.04  # minimum coding scale, in gained units
PROB_FLOOR = 2.0**-16  # likelihood clamp for the differentiable rate
LOG2_E = 1.0 / math.log(2.0)

TOT_BITS = 16
TOTAL = 1 << TOT_BITS
_MASK64 = (1 << 64) - 1
_RENORM = 1 << 56
_TAIL_CLAMP = 6.0  # symbol support half-width, in scale units
_MAX_HALF_SUPPORT = 512  # hard cap on per-element table width

ESCAPE_BIAS = 1 << 31  # raw escape payload is a biased 32-bit integer


class DecodeError(Exception):
    """Raised when an entropy-coded payload cannot be decoded."""


# -- differentiable rate estimates ---------------------------------------------


def bits_from_cdf(values: Tensor, cdf_fn) -> tuple[Tensor, Tensor]:
    """Total and per-element bits of integer-bin mass under a CDF callable."""
    upper = cdf_fn(values + 0.5)
    lower = cdf_fn(values - 0.5)
    p = ad.maximum(upper - lower, PROB_FLOOR)
    per_element = ad.log(p) * (-LOG2_E)
    return per_element.sum(), per_element


class GaussianConditional:
    """Quantized-Gaussian likelihoods with a floored scale."""

    def __init__(self, scale_floor: float = SCALE_FLOOR):
        if scale_floor <= 0:
            raise ValueError("scale floor must be positive")
        self.scale_floor = float(scale_floor)

    def bits(self, values: Tensor, mean: Tensor, scale: Tensor) -> tuple[Tensor, Tensor]:
        """Differentiable (total, per-element) bits for values on the integer grid.

        Evaluated symmetrically around the mean so the CDF difference stays
        well conditioned far out in the tails.
        """
        scale = ad.maximum(scale, self.scale_floor)
        neg_dist = -ad.absolute(values - mean)
        upper = ad.std_normal_cdf((neg_dist + 0.5) / scale)
        lower = ad.std_normal_cdf((neg_dist - 0.5) / scale)
        p = ad.maximum(upper - lower, PROB_FLOOR)
        per_element = ad.log(p) * (-LOG2_E)
        return per_element.sum(), per_element

    def build_tables(self, mean: np.ndarray, scale: np.ndarray) -> "SymbolTables":
        """Integer CDF per element over [mean - 6*scale, mean + 6*scale]."""
        mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        scale = np.maximum(np.asarray(scale, dtype=np.float64).reshape(-1), self.scale_floor)
        center = np.rint(mean)
        half = np.minimum(np.ceil(_TAIL_CLAMP * scale), _MAX_HALF_SUPPORT)
        lo = (center - half).astype(np.int64)
        hi = (center + half).astype(np.int64)
        widths = (hi - lo + 1).astype(np.int64)
        wmax = int(widths.max())

        # boundary grid: element i, slot k covers integer lo[i] + k
        ks = np.arange(wmax + 1, dtype=np.float64)
        bounds = (lo[:, None] + ks[None, :] - 0.5 - mean[:, None]) / scale[:, None]
        cdf = _ndtr(bounds)
        pmf = np.diff(cdf, axis=1)
        pmf[ks[None, 1:] > widths[:, None]] = 0.0
        tail = 1.0 - (cdf[np.arange(len(mean)), widths] - cdf[:, 0])
        rows = _quantize_pmf_rows(pmf, widths, np.maximum(tail, 0.0))
        return SymbolTables(rows, lo, np.arange(len(mean), dtype=np.int64))


class FactorizedPrior:
    """Learned univariate CDF per channel, built from positive-weight layers.

    Each layer applies softplus-constrained matrices plus a bounded
    gating nonlinearity, ending in a sigmoid, which keeps the CDF monotone
    in its input for any parameter values.
    """

    def __init__(self, channels: int, filters=(3, 3, 3), init_scale: float = 10.0, dtype=np.float64):
        self.channels = channels
        self.filters = tuple(filters)
        dims = (1,) + self.filters + (1,)
        scale = init_scale ** (1.0 / (len(self.filters) + 1))
        self.matrices = []
        self.biases = []
        self.factors = []
        r = np.random.default_rng(0xC0DEC)
        for i in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(ad.parameter(np.full((channels, dims[i + 1], dims[i]), init), dtype=dtype))
            self.biases.append(ad.parameter(r.uniform(-0.5, 0.5, (channels, dims[i + 1], 1)), dtype=dtype))
            if i < len(dims) - 2:
                self.factors.append(ad.parameter(np.zeros((channels, dims[i + 1], 1)), dtype=dtype))

    def parameters(self, prefix: str) -> dict:
        out = {}
        for i, m in enumerate(self.matrices):
            out[f"{prefix}.m{i}"] = m
        for i, b in enumerate(self.biases):
            out[f"{prefix}.b{i}"] = b
        for i, f in enumerate(self.factors):
            out[f"{prefix}.a{i}"] = f
        return out

    def cdf_channelwise(self, x: Tensor) -> Tensor:
        """CDF of a [C, 1, M] batch of points, one row of points per channel."""
        u = x
        n_layers = len(self.matrices)
        for i in range(n_layers):
            u = ad.matmul(ad.softplus(self.matrices[i]), u) + self.biases[i]
            if i < n_layers - 1:
                u = u + ad.tanh(self.factors[i]) * ad.tanh(u)
        return ad.sigmoid(u)

    def _to_channel_rows(self, z: Tensor) -> Tensor:
        b, c, h, w = z.shape
        return z.transpose((1, 0, 2, 3)).reshape(c, 1, b * h * w)

    def cdf(self, z: Tensor) -> Tensor:
        """CDF evaluated per element of a [B,C,h,w] tensor, same shape out."""
        b, c, h, w = z.shape
        rows = self.cdf_channelwise(self._to_channel_rows(z))
        return rows.reshape(c, b, h, w).transpose((1, 0, 2, 3))

    def bits(self, z: Tensor) -> tuple[Tensor, Tensor]:
        return bits_from_cdf(z, self.cdf)

    def build_tables(self, batch: int, height: int, width: int) -> "SymbolTables":
        """Integer CDF per channel, support found by an expanding tail scan."""
        half = 8
        tail_eps = 2.0**-17
        while True:
            # boundaries -half-0.5 .. half+0.5 bracket integer slots -half..half
            bounds_grid = np.arange(-half, half + 2, dtype=np.float64) - 0.5
            with ad.no_grad():
                pts = np.broadcast_to(bounds_grid, (self.channels, 1, bounds_grid.size)).copy()
                bounds = self.cdf_channelwise(Tensor(pts)).data[:, 0, :]
            if (bounds[:, 0].max() < tail_eps and (1.0 - bounds[:, -1]).max() < tail_eps) or half >= (1 << 14):
                break
            half *= 2
        pmf = np.maximum(np.diff(bounds, axis=1), 0.0)
        widths = np.full(self.channels, pmf.shape[1], dtype=np.int64)
        tail = np.maximum(bounds[:, 0] + (1.0 - bounds[:, -1]), 0.0)
        rows = _quantize_pmf_rows(pmf, widths, tail)

        row_index = np.broadcast_to(
            np.arange(self.channels, dtype=np.int64)[None, :, None], (batch, self.channels, height * width)
        ).reshape(-1)
        offsets = np.full(row_index.size, -half, dtype=np.int64)
        return SymbolTables(rows, offsets, row_index)


def _ndtr(x: np.ndarray) -> np.ndarray:
    from scipy import special

    return special.ndtr(x)


def _quantize_pmf_rows(
    pmf: np.ndarray, widths: np.ndarray, tail: np.ndarray | None = None
) -> list[np.ndarray]:
    """Quantize each pmf row to integer CDFs summing 2^16.

    When ``tail`` is given, an escape slot with the tail mass is appended to
    every row.  Every slot keeps a count of at least 1 so no symbol in
    support is uncodable.  Deterministic: pure elementwise float64 followed
    by an integer fixup applied to the largest slot.
    """
    n, wmax = pmf.shape
    if tail is not None:
        slots = np.concatenate([pmf, tail[:, None]], axis=1)
        nslots = widths + 1
    else:
        slots = pmf
        nslots = widths.copy()
    norm = slots.sum(axis=1, keepdims=True)
    slots = slots / np.maximum(norm, 1e-300)
    budget = TOTAL - nslots
    counts = np.floor(slots * budget[:, None]).astype(np.int64) + 1
    mask = np.arange(slots.shape[1])[None, :] < nslots[:, None]
    counts[~mask] = 0
    deficit = TOTAL - counts.sum(axis=1)
    rich = np.argmax(counts, axis=1)
    counts[np.arange(n), rich] += deficit
    rows = []
    for i in range(n):
        k = int(nslots[i])
        cdf = np.zeros(k + 1, dtype=np.int64)
        np.cumsum(counts[i, :k], out=cdf[1:])
        rows.append(cdf)
    return rows


class SymbolTables:
    """Per-element integer CDFs: row lookup, integer offset, escape slot last."""

    def __init__(self, rows: list[np.ndarray], offsets: np.ndarray, row_index: np.ndarray, has_escape: bool = True):
        self.rows = [np.asarray(r, dtype=np.int64) for r in rows]
        self.offsets = np.asarray(offsets, dtype=np.int64).reshape(-1)
        self.row_index = np.asarray(row_index, dtype=np.int64).reshape(-1)
        self.has_escape = bool(has_escape)
        if self.offsets.shape != self.row_index.shape:
            raise ValueError("offsets and row_index must align")

    @property
    def num_elements(self) -> int:
        return self.offsets.size

    def num_symbols(self, row: np.ndarray) -> int:
        return row.size - 2 if self.has_escape else row.size - 1

    def table_bits(self, values: np.ndarray) -> float:
        """Ideal code length of values under the integer tables (incl. escapes)."""
        vals = np.asarray(values, dtype=np.int64).reshape(-1)
        total = 0.0
        for i, v in enumerate(vals):
            row = self.rows[self.row_index[i]]
            k = v - self.offsets[i]
            nsym = self.num_symbols(row)
            if 0 <= k < nsym:
                total += -math.log2((row[k + 1] - row[k]) / TOTAL)
            elif self.has_escape:
                total += -math.log2((row[nsym + 1] - row[nsym]) / TOTAL) + 32.0
            else:
                raise ValueError(f"value {v} outside escape-free table support")
        return total


def build_cdf_tables(pmfs, offsets=None, escape: bool = True) -> SymbolTables:
    """Quantize float pmf rows (one per element) into coder-ready tables.

    Rows may have different lengths.  With ``escape`` a final slot with the
    leftover mass is appended to every row for out-of-support values.
    """
    pmfs = [np.asarray(p, dtype=np.float64).reshape(-1) for p in pmfs]
    n = len(pmfs)
    if n == 0:
        return SymbolTables([], np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), has_escape=escape)
    widths = np.array([p.size for p in pmfs], dtype=np.int64)
    wmax = int(widths.max())
    mat = np.zeros((n, wmax), dtype=np.float64)
    for i, p in enumerate(pmfs):
        mat[i, : p.size] = p
    tail = np.maximum(1.0 - mat.sum(axis=1), 0.0) if escape else None
    rows = _quantize_pmf_rows(mat, widths, tail)
    if offsets is None:
        offsets = np.zeros(n, dtype=np.int64)
    return SymbolTables(rows, offsets, np.arange(n, dtype=np.int64), has_escape=escape)


# -- range coder -----------------------------------------------------------------


class RangeEncoder:
    """Carry-propagating byte-wise range coder (64-bit registers)."""

    def __init__(self):
        self._low = 0
        self._range = _MASK64
        self._cache = 0
        self._cache_size = 1  # leading byte absorbs a possible carry
        self._out = bytearray()

    def _shift_low(self):
        if self._low < (0xFF << 56) or self._low > _MASK64:
            carry = self._low >> 64
            self._out.append((self._cache + carry) & 0xFF)
            filler = (0xFF + carry) & 0xFF
            for _ in range(self._cache_size - 1):
                self._out.append(filler)
            self._cache_size = 0
            self._cache = (self._low >> 56) & 0xFF
        self._cache_size += 1
        self._low = (self._low & (_RENORM - 1)) << 8

    def encode(self, cum: int, freq: int) -> None:
        """Narrow the interval to [cum, cum+freq) / 2^16."""
        if freq <= 0 or cum < 0 or cum + freq > TOTAL:
            raise ValueError(f"bad coder interval cum={cum} freq={freq}")
        r = self._range >> TOT_BITS
        self._low += r * cum
        self._range = r * freq
        while self._range < _RENORM:
            self._shift_low()
            self._range = (self._range << 8) & _MASK64

    def finish(self) -> bytes:
        """Flush the shortest byte tail that pins the final interval."""
        low, rng = self._low, self._range
        target = low
        for k in range(64, 7, -8):
            step = 1 << k
            v = ((low + step - 1) >> k) << k
            if low <= v < low + rng:
                target = v
                break
        self._low = target
        for _ in range(9):
            self._shift_low()
        out = bytes(self._out)
        end = len(out)
        while end > 0 and out[end - 1] == 0:
            end -= 1
        return out[:end]


class RangeDecoder:
    """Mirror of :class:`RangeEncoder`; missing bytes read as zero."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 1  # skip the carry-absorbing lead byte
        self._range = _MASK64
        self._code = 0
        for _ in range(8):
            self._code = (self._code << 8) | self._next_byte()
        self._r = 0

    def _next_byte(self) -> int:
        b = self._data[self._pos] if self._pos < len(self._data) else 0
        self._pos += 1
        return b

    def decode_cum(self) -> int:
        self._r = self._range >> TOT_BITS
        cum = self._code // self._r
        return cum if cum < TOTAL else TOTAL - 1

    def consume(self, cum: int, freq: int) -> None:
        self._code -= cum * self._r
        self._range = self._r * freq
        if self._code < 0:
            raise DecodeError(f"corrupt range-coded stream near byte {self._pos}")
        while self._range < _RENORM:
            self._code = ((self._code << 8) | self._next_byte()) & _MASK64
            self._range = (self._range << 8) & _MASK64


def range_encode(symbols, tables: SymbolTables) -> bytes:
    """Entropy-encode integer symbols; out-of-support values take the escape path."""
    vals = np.asarray(symbols, dtype=np.int64).reshape(-1)
    if vals.size != tables.num_elements:
        raise ValueError(f"got {vals.size} symbols for {tables.num_elements} table slots")
    enc = RangeEncoder()
    rows = tables.rows
    row_index = tables.row_index
    offsets = tables.offsets
    for i in range(vals.size):
        row = rows[row_index[i]]
        k = int(vals[i]) - int(offsets[i])
        nsym = tables.num_symbols(row)
        if 0 <= k < nsym:
            enc.encode(int(row[k]), int(row[k + 1] - row[k]))
        elif tables.has_escape:
            enc.encode(int(row[nsym]), int(row[nsym + 1] - row[nsym]))
            u = (int(vals[i]) + ESCAPE_BIAS) & 0xFFFFFFFF
            enc.encode((u >> 16) & 0xFFFF, 1)
            enc.encode(u & 0xFFFF, 1)
        else:
            raise ValueError(f"symbol {vals[i]} outside escape-free table support")
    return enc.finish()


def range_decode(data: bytes, tables: SymbolTables, count: int | None = None) -> np.ndarray:
    """Decode ``count`` symbols (default: all table slots); bit-exact inverse."""
    n = tables.num_elements if count is None else int(count)
    if n > tables.num_elements:
        raise ValueError(f"cannot decode {n} symbols with {tables.num_elements} table slots")
    dec = RangeDecoder(data)
    out = np.empty(n, dtype=np.int64)
    rows = tables.rows
    for i in range(n):
        row = rows[tables.row_index[i]]
        cum = dec.decode_cum()
        k = int(np.searchsorted(row, cum, side="right")) - 1
        if k < 0 or k >= row.size - 1:
            raise DecodeError(f"symbol out of table range near byte {dec._pos}")
        dec.consume(int(row[k]), int(row[k + 1] - row[k]))
        if tables.has_escape and k == tables.num_symbols(row):
            hi = dec.decode_cum()
            dec.consume(hi, 1)
            lo = dec.decode_cum()
            dec.consume(lo, 1)
            out[i] = ((hi << 16) | lo) - ESCAPE_BIAS
        else:
            out[i] = k + int(tables.offsets[i])
    return out


# -- chunk framing -----------------------------------------------------------------


def pack_chunk(payload: bytes) -> bytes:
    """32-bit little-endian length prefix, then the coder bytes."""
    return struct.pack("<I", len(payload)) + payload


def unpack_chunk(buf: bytes, offset: int) -> tuple[bytes, int]:
    if offset + 4 > len(buf):
        raise DecodeError(f"truncated chunk header at byte {offset}")
    (length,) = struct.unpack_from("<I", buf, offset)
    end = offset + 4 + length
    if end > len(buf):
        raise DecodeError(f"truncated chunk payload at byte {offset + 4} (need {length} bytes)")
    return bytes(buf[offset + 4 : end]), end
