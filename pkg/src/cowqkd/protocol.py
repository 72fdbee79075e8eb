"""Logical layer of the coherent one-way protocol.

Alice encodes each logical symbol in a pair of time slots:

    Bit0  -> (mu, 0)    pulse in the early slot
    Bit1  -> (0, mu)    pulse in the late slot
    Decoy -> (mu, mu)   both slots filled, carries no key

Bob decodes an early-slot click as 0 and a late-slot click as 1.  Sifting keeps
the pairs where Bob saw exactly one data-line click and Alice did not send a
decoy.
"""

from __future__ import annotations

import enum
import io
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import DomainError, ProtocolError

_CHUNK = 1 << 22


class LogicalSymbol(enum.IntEnum):
    BIT0 = 0
    BIT1 = 1
    DECOY = 2


class Slot(enum.IntEnum):
    EARLY = 0
    LATE = 1
    OUT_OF_WINDOW = 2
    DARK = 3


class Stage(enum.IntEnum):
    RAW = 0
    SIFTED = 1
    POST_DISCLOSE = 2
    CORRECTED = 3
    FINAL = 4


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def symbol_to_pulses(symbol: LogicalSymbol, mu: float) -> tuple[float, float]:
    """Mean photon numbers of the (early, late) pulses for ``symbol``."""
    if not mu > 0:
        raise DomainError(f"mu must be > 0, got {mu!r}")
    symbol = LogicalSymbol(symbol)
    if symbol is LogicalSymbol.BIT0:
        return (mu, 0.0)
    if symbol is LogicalSymbol.BIT1:
        return (0.0, mu)
    return (mu, mu)


# (early, late) occupancy per symbol code, indexed by LogicalSymbol value
_OCCUPANCY = np.array([[1, 0], [0, 1], [1, 1]], dtype=bool)


@dataclass(frozen=True)
class SymbolFrame:
    """Alice's symbol sequence together with the parameters that produced it."""

    symbols: np.ndarray  # uint8 codes of LogicalSymbol
    seed: int
    f: float
    mu: float

    def __post_init__(self):
        if len(self.symbols) == 0:
            raise DomainError("a frame needs at least one symbol")

    def __len__(self):
        return len(self.symbols)

    @property
    def n_pulses(self) -> int:
        return 2 * len(self.symbols)

    def occupancy(self) -> np.ndarray:
        """Boolean (n, 2) array: which slots carry a non-empty pulse."""
        return _OCCUPANCY[self.symbols]

    def pulse_train(self) -> np.ndarray:
        """Interleaved intensities, early slot first, length ``2 * len(self)``."""
        return self.occupancy().reshape(-1).astype(float) * self.mu

    def decoy_fraction(self) -> float:
        return float(np.count_nonzero(self.symbols == LogicalSymbol.DECOY)) / len(self)

    def to_bytes(self) -> bytes:
        head = struct.pack("<QQdd", len(self.symbols), self.seed & (2**64 - 1), self.f, self.mu)
        return head + self.symbols.astype(np.uint8).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "SymbolFrame":
        n, seed, f, mu = struct.unpack_from("<QQdd", data)
        body = data[32:]
        if len(body) != n:
            raise DomainError(f"frame record declares {n} symbols but carries {len(body)}")
        return cls(np.frombuffer(body, dtype=np.uint8).copy(), seed, f, mu)


def encode_sequence(seed: int, n_symbols: int, f: float = 0.5, mu: float = 0.5) -> SymbolFrame:
    """Draw ``n_symbols`` i.i.d. symbols: decoy with probability f, each bit (1-f)/2."""
    if n_symbols < 1:
        raise DomainError("n_symbols must be >= 1")
    if not 0.0 <= f <= 1.0:
        raise DomainError(f"f must lie in [0, 1], got {f!r}")
    if not mu > 0:
        raise DomainError(f"mu must be > 0, got {mu!r}")
    rng = np.random.default_rng(seed)
    out = np.empty(n_symbols, dtype=np.uint8)
    bit0_edge = f + (1.0 - f) / 2.0
    for start in range(0, n_symbols, _CHUNK):
        u = rng.random(min(_CHUNK, n_symbols - start))
        block = np.full(u.shape, LogicalSymbol.BIT1, dtype=np.uint8)
        block[u < bit0_edge] = LogicalSymbol.BIT0
        block[u < f] = LogicalSymbol.DECOY
        out[start:start + len(u)] = block
    return SymbolFrame(out, seed, f, mu)


@dataclass
class BitBlock:
    """A key buffer tagged with its pipeline stage.

    ``bits`` is an unpacked uint8 array of 0/1 values.  ``index`` optionally
    carries the pair index each bit came from, which keeps the two parties'
    blocks aligned through sifting and disclosure.
    """

    bits: np.ndarray
    stage: Stage
    meta: dict = field(default_factory=dict)
    index: Optional[np.ndarray] = None

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        self.stage = Stage(self.stage)
        if self.index is not None:
            self.index = np.asarray(self.index, dtype=np.int64)
            if len(self.index) != len(self.bits):
                raise DomainError("index and bits lengths differ")

    def __len__(self):
        return len(self.bits)

    def advance(self, stage: Stage, bits: np.ndarray, index: Optional[np.ndarray] = None,
                **meta) -> "BitBlock":
        """Return the block at a later stage; stages and lengths only move forward."""
        stage = Stage(stage)
        if stage <= self.stage:
            raise ProtocolError(f"cannot move from {self.stage.name} to {stage.name}")
        if len(bits) > len(self.bits):
            raise ProtocolError("a stage transition cannot lengthen the key")
        return BitBlock(bits, stage, {**self.meta, **meta}, index)

    def to_bytes(self) -> bytes:
        """Length-prefixed record: stage, bit count, MSB-first packed bits, JSON meta."""
        packed = np.packbits(self.bits, bitorder="big").tobytes()
        meta = json.dumps(self.meta, sort_keys=True, default=_json_default).encode()
        buf = io.BytesIO()
        buf.write(struct.pack("<BQ", int(self.stage), len(self.bits)))
        buf.write(packed)
        buf.write(struct.pack("<Q", len(meta)))
        buf.write(meta)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "BitBlock":
        stage, nbits = struct.unpack_from("<BQ", data)
        off = 9
        nbytes = (nbits + 7) // 8
        if len(data) < off + nbytes + 8:
            raise DomainError("truncated bit-block record")
        bits = np.unpackbits(np.frombuffer(data, np.uint8, nbytes, off), count=nbits, bitorder="big")
        off += nbytes
        (mlen,) = struct.unpack_from("<Q", data, off)
        off += 8
        if len(data) != off + mlen:
            raise DomainError("bit-block record length mismatch")
        meta = json.loads(data[off:].decode()) if mlen else {}
        return cls(bits, Stage(stage), meta)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def single_clicks(pair_index: np.ndarray, slot: np.ndarray, n_pairs: int):
    """Reduce clicks to one slot per pair; returns (pairs, slots, double_click_count)."""
    in_window = (slot == Slot.EARLY) | (slot == Slot.LATE)
    pi = pair_index[in_window]
    sl = slot[in_window].astype(np.int64)
    if len(pi) and (pi.min() < 0 or pi.max() >= n_pairs):
        bad = pi[(pi < 0) | (pi >= n_pairs)][0]
        raise ProtocolError(f"detection references pair {bad} outside a frame of {n_pairs}")
    keys = np.unique(pi * 2 + sl)
    pairs, first, counts = np.unique(keys // 2, return_index=True, return_counts=True)
    single = counts == 1
    return pairs[single], (keys[first[single]] % 2).astype(np.uint8), int(np.count_nonzero(~single))


def sift(frame: SymbolFrame, detections) -> tuple[BitBlock, BitBlock]:
    """Align Alice's and Bob's raw keys.

    ``detections`` is anything with ``pair_index`` and ``slot`` arrays (a
    :class:`cowqkd.detection.DetectionRecord`).  Pairs with clicks in both
    slots are dropped and counted in ``meta["double_clicks"]``; clicks on
    decoy pairs are counted in ``meta["decoy_clicks"]``.
    """
    pairs, bob_bits, doubles = single_clicks(np.asarray(detections.pair_index, dtype=np.int64),
                                              np.asarray(detections.slot), len(frame))
    sym = frame.symbols[pairs]
    keep = sym != LogicalSymbol.DECOY
    idx = pairs[keep]
    meta = {"seed": int(frame.seed), "f": frame.f, "mu": frame.mu,
            "double_clicks": doubles, "decoy_clicks": int(np.count_nonzero(~keep))}
    alice = BitBlock(sym[keep].astype(np.uint8), Stage.SIFTED, dict(meta), idx)
    bob = BitBlock(bob_bits[keep], Stage.SIFTED, dict(meta), idx.copy())
    return alice, bob


def sift_indices(frame: SymbolFrame, pair_indices: Iterable[int]) -> np.ndarray:
    """Alice's half of sifting: the announced pairs that were not decoys."""
    pi = np.asarray(list(pair_indices) if not isinstance(pair_indices, np.ndarray) else pair_indices,
                    dtype=np.int64)
    if len(pi) and (pi.min() < 0 or pi.max() >= len(frame)):
        raise ProtocolError("announced pair index outside the frame")
    return pi[frame.symbols[pi] != LogicalSymbol.DECOY]


@dataclass(frozen=True)
class Disclosure:
    """Positions (into the sifted block) and values of publicly compared bits."""

    positions: np.ndarray
    bits: np.ndarray

    def __len__(self):
        return len(self.positions)

    def as_pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.positions.tolist(), self.bits.tolist()))


def disclose_positions(n: int, dr: float, seed: int) -> np.ndarray:
    """Sorted positions of ``round(dr * n)`` bits chosen uniformly without replacement."""
    if not 0.0 <= dr <= 1.0:
        raise DomainError(f"DR must lie in [0, 1], got {dr!r}")
    k = min(n, round_half_up(dr * n))
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)


def disclose_sample(block: BitBlock, dr: float, seed: int) -> tuple[Disclosure, BitBlock]:
    """Split off a public sample of the sifted key; the rest moves to PostDisclose."""
    pos = disclose_positions(len(block), dr, seed)
    keep = np.ones(len(block), dtype=bool)
    keep[pos] = False
    index = block.index[keep] if block.index is not None else None
    rest = block.advance(Stage.POST_DISCLOSE, block.bits[keep], index, disclose_seed=int(seed), dr=dr)
    return Disclosure(pos, block.bits[pos].copy()), rest
