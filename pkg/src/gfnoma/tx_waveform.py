"""
Transmitter side: Zadoff-Chu spreading codes and M-ary DPSK.

Zadoff-Chu sequence of odd length ``L``, root ``r`` and cyclic shift ``c``::

    a_r[n] = exp(-j * pi * r * n * (n + 1) / L),   n = 0..L-1
    zc[n]  = a_r[(n + c) mod L] / sqrt(L)

Distinct roots at prime ``L`` give cross-correlation magnitude exactly
``1/sqrt(L)``; distinct shifts of one root are orthogonal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import gcd

import numpy as np

from .errors import CapacityError, ParameterError


def zc_sequence(root: int, shift: int, length: int) -> np.ndarray:
    """Unit-energy, cyclically shifted Zadoff-Chu sequence of odd length."""
    if length <= 0 or length % 2 == 0:
        raise ParameterError(f"ZC length must be odd and positive, got {length}")
    if gcd(root, length) != 1:
        raise ParameterError(f"root {root} is not coprime with length {length}")
    if not 0 <= shift < length:
        raise ParameterError(f"shift {shift} outside [0, {length})")
    n = np.arange(length)
    base = np.exp(-1j * np.pi * root * n * (n + 1) / length)
    return np.roll(base, -shift) / np.sqrt(length)


def available_roots(length: int) -> list[int]:
    """Roots in ``[1, length)`` that are coprime with ``length``."""
    return [r for r in range(1, length) if gcd(r, length) == 1]


@dataclass(frozen=True)
class SpreadingMatrix:
    """L x U matrix whose column ``u`` is the code of device ``u``."""

    entries: np.ndarray
    plan: tuple[tuple[int, int], ...]

    @property
    def L(self) -> int:
        return self.entries.shape[0]

    @property
    def U(self) -> int:
        return self.entries.shape[1]

    def restrict(self, support) -> np.ndarray:
        """Columns of the matrix at the given device indices (L x K)."""
        idx = np.asarray(support, dtype=int)
        return self.entries[:, idx]


def build_spreading_matrix(L: int, U: int, plan=None) -> SpreadingMatrix:
    """Stack ``U`` ZC codes of length ``L``.

    Without an explicit plan, (root, shift) pairs are taken root-major in
    increasing order: (r1, 0), (r1, 1), ..., (r1, L-1), (r2, 0), ...
    """
    if U < 1:
        raise ParameterError(f"need at least one device, got U={U}")
    if plan is None:
        roots = available_roots(L) if L > 0 and L % 2 == 1 else []
        capacity = len(roots) * L
        if U > capacity:
            raise CapacityError(
                f"L={L} offers {capacity} distinct (root, shift) pairs, {U} requested"
            )
        plan = [(r, c) for r in roots for c in range(L)][:U]
    plan = tuple((int(r), int(c)) for r, c in plan)
    if len(plan) != U:
        raise ParameterError(f"plan has {len(plan)} entries for U={U}")
    if len(set(plan)) != U:
        raise ParameterError("plan entries must be pairwise distinct")
    cols = [zc_sequence(r, c, L) for r, c in plan]
    return SpreadingMatrix(entries=np.stack(cols, axis=1), plan=plan)


def _gray(q: int) -> int:
    return q ^ (q >> 1)


@dataclass(frozen=True)
class DpskAlphabet:
    """M-PSK points ``exp(j 2 pi q / M)`` with Gray bit labels.

    Point ``q`` carries the ``log2(M)`` bits of ``gray(q)``, most significant
    bit first.  For M=4 this is 00->1, 01->j, 11->-1, 10->-j.  The
    demodulation set equals the full constellation.
    """

    order: int = 4
    reference: complex = 1.0 + 0.0j
    points: np.ndarray = field(init=False, repr=False)
    labels: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        M = self.order
        if M < 2 or M & (M - 1):
            raise ParameterError(f"DPSK order must be a power of two >= 2, got {M}")
        q = np.arange(M)
        pts = np.exp(2j * np.pi * q / M)
        # exact axis points keep the M=2/4 round trips bit-exact
        pts = np.where(np.abs(pts.real) < 1e-15, 1j * pts.imag, pts)
        pts = np.where(np.abs(pts.imag) < 1e-15, pts.real + 0j, pts)
        k = self.bits_per_symbol
        labels = np.array(
            [[(_gray(i) >> (k - 1 - b)) & 1 for b in range(k)] for i in range(M)],
            dtype=np.uint8,
        ).reshape(M, k)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", labels)
        if np.min(np.abs(pts - self.reference)) > 1e-12:
            raise ParameterError("reference symbol must be a constellation point")

    @property
    def bits_per_symbol(self) -> int:
        return int(self.order).bit_length() - 1

    @property
    def Q(self) -> int:
        return self.order

    def nearest_index(self, symbols) -> np.ndarray:
        s = np.asarray(symbols, dtype=complex).reshape(-1)
        if s.size == 0:
            return np.zeros(0, dtype=int)
        return np.argmin(np.abs(s[:, None] - self.points[None, :]), axis=1)


_MOD_ORDERS = {"dbpsk": 2, "dqpsk": 4, "d8psk": 8, "d16psk": 16}


def alphabet_from_name(name: str) -> DpskAlphabet:
    """Build an alphabet from ``dbpsk``/``dqpsk``/``d8psk``/``d16psk``."""
    try:
        return DpskAlphabet(order=_MOD_ORDERS[name.lower()])
    except KeyError:
        raise ParameterError(f"unknown modulation {name!r}") from None


def dpsk_map_bits(bits, alphabet: DpskAlphabet) -> np.ndarray:
    """Map a flat bit sequence to data symbols, one per ``log2(M)``-bit word."""
    b = np.asarray(bits, dtype=np.uint8).reshape(-1)
    k = alphabet.bits_per_symbol
    if b.size % k:
        raise ParameterError(f"{b.size} bits do not split into {k}-bit words")
    if b.size == 0:
        return np.zeros(0, dtype=complex)
    words = b.reshape(-1, k)
    gray_vals = words @ (1 << np.arange(k - 1, -1, -1))
    # invert the Gray code: point index whose label equals the word
    lut = np.empty(alphabet.order, dtype=int)
    lut[[_gray(q) for q in range(alphabet.order)]] = np.arange(alphabet.order)
    return alphabet.points[lut[gray_vals]]


def dpsk_hard_demap(symbols, alphabet: DpskAlphabet) -> np.ndarray:
    """Bits of the constellation points nearest to ``symbols``."""
    idx = alphabet.nearest_index(symbols)
    return alphabet.labels[idx].reshape(-1)


def differential_encode(data, reference: complex = 1.0 + 0.0j) -> np.ndarray:
    """Transmitted sequence ``s`` with ``s[0] = reference``, ``s[t] = data[t-1] * s[t-1]``."""
    d = np.asarray(data, dtype=complex).reshape(-1)
    return np.concatenate(([complex(reference)], reference * np.cumprod(d)))


def differential_decode(s) -> np.ndarray:
    """Symbol ratios ``s[t] / s[t-1]``."""
    s = np.asarray(s, dtype=complex)
    return s[..., 1:] / s[..., :-1]


@dataclass
class SymbolFrame:
    """Data and transmitted symbols of one device over a frame of length T."""

    data: np.ndarray
    symbols: np.ndarray

    @property
    def T(self) -> int:
        return self.symbols.shape[-1]


def random_frame(rng, alphabet: DpskAlphabet, T: int) -> tuple[SymbolFrame, np.ndarray]:
    """Random bits for ``T - 1`` data symbols, differentially encoded."""
    bits = rng.integers(0, 2, size=(T - 1) * alphabet.bits_per_symbol, dtype=np.uint8)
    data = dpsk_map_bits(bits, alphabet)
    return SymbolFrame(data=data, symbols=differential_encode(data, alphabet.reference)), bits
