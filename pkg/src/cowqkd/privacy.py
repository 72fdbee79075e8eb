"""Privacy amplification by Toeplitz hashing.

An ``n_out x n_in`` Toeplitz matrix is defined by one vector ``diag`` of
``n_in + n_out - 1`` bits::

    T[i, j] = diag[j - i + n_out - 1]

so ``diag[n_out - 1]`` sits on the main diagonal, ``diag[:n_out]`` read
backwards is the first column and ``diag[n_out - 1:]`` is the first row.

:func:`hash_fft` embeds ``T`` in a circulant of power-of-two size and
evaluates the product with a real FFT; :func:`hash_naive` is the direct
GF(2) matrix-vector product it is checked against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DomainError, NumericalIntegrityError
from .protocol import round_half_up

# Largest convolution term is n_in; doubles hold integers exactly below 2**52.
_MAX_EXACT = 2**52
_RESIDUE_LIMIT = 0.25


def output_length(n_in: int, cr: float) -> int:
    """Bits left after compressing ``n_in`` bits by ratio ``cr`` (round half up)."""
    if not 0.0 <= cr <= 1.0:
        raise DomainError(f"CR must lie in [0, 1], got {cr!r}")
    return max(0, round_half_up(n_in * (1.0 - cr)))


@dataclass(frozen=True, eq=False)
class ToeplitzDescriptor:
    n_in: int
    n_out: int
    diag: np.ndarray
    seed: int = 0

    def __post_init__(self):
        if self.n_in < 1 or self.n_out < 0 or self.n_out > self.n_in:
            raise DomainError(f"need 0 <= n_out <= n_in and n_in >= 1, got {self.n_out}, {self.n_in}")
        if self.n_in >= _MAX_EXACT:
            raise DomainError("input too long for exact double-precision convolution")
        want = self.n_in + self.n_out - 1 if self.n_out else 0
        if len(self.diag) != want:
            raise DomainError(f"diag must have {want} bits, got {len(self.diag)}")

    @classmethod
    def from_seed(cls, seed: int, n_in: int, n_out: int) -> "ToeplitzDescriptor":
        rng = np.random.default_rng([seed, n_in, n_out])
        length = n_in + n_out - 1 if n_out else 0
        return cls(n_in, n_out, rng.integers(0, 2, size=length, dtype=np.uint8), seed)

    @classmethod
    def for_ratio(cls, seed: int, n_in: int, cr: float) -> "ToeplitzDescriptor":
        return cls.from_seed(seed, n_in, output_length(n_in, cr))

    def matrix(self) -> np.ndarray:
        """Dense ``T`` (only sensible for small sizes)."""
        i = np.arange(self.n_out)[:, None]
        j = np.arange(self.n_in)[None, :]
        return self.diag[j - i + self.n_out - 1].astype(np.uint8)

    def column(self, j: int) -> np.ndarray:
        return self.diag[j - np.arange(self.n_out) + self.n_out - 1].astype(np.uint8)


def _check_input(desc: ToeplitzDescriptor, bits) -> np.ndarray:
    x = np.asarray(bits, dtype=np.uint8)
    if x.shape != (desc.n_in,):
        raise DomainError(f"expected {desc.n_in} input bits, got {x.shape}")
    return x


def hash_naive(desc: ToeplitzDescriptor, bits) -> np.ndarray:
    """Row-by-row GF(2) product; O(n_in * n_out)."""
    x = _check_input(desc, bits)
    if desc.n_out == 0:
        return np.zeros(0, dtype=np.uint8)
    ones = np.flatnonzero(x)
    out = np.zeros(desc.n_out, dtype=np.uint8)
    for i in range(desc.n_out):
        # row i is diag[n_out - 1 - i : n_out - 1 - i + n_in]
        out[i] = np.count_nonzero(desc.diag[ones + desc.n_out - 1 - i]) & 1
    return out


def _next_pow2(k: int) -> int:
    return 1 << max(0, (k - 1).bit_length())


def hash_fft(desc: ToeplitzDescriptor, bits) -> np.ndarray:
    """Toeplitz product through a circulant embedding and a real FFT.

    ``y[i] = sum_j diag[j + k] x[j]`` with ``k = n_out - 1 - i`` is a
    correlation; convolving ``diag`` with reversed ``x`` on a circle of length
    ``L >= n_in + n_out - 1`` leaves the needed coefficients free of
    wrap-around.  Coefficients are rounded to integers and reduced mod 2; a
    rounding residue above 0.25 raises :class:`NumericalIntegrityError`.
    """
    x = _check_input(desc, bits)
    if desc.n_out == 0:
        return np.zeros(0, dtype=np.uint8)
    n_in, n_out = desc.n_in, desc.n_out
    size = _next_pow2(n_in + n_out - 1)
    conv = np.fft.irfft(np.fft.rfft(desc.diag.astype(float), size)
                        * np.fft.rfft(x[::-1].astype(float), size), size)
    # linear index p = n_in + n_out - 2 - i for output bit i
    picked = conv[(n_in + n_out - 2 - np.arange(n_out)) % size]
    rounded = np.rint(picked)
    residue = np.max(np.abs(picked - rounded))
    if residue > _RESIDUE_LIMIT:
        raise NumericalIntegrityError(f"FFT rounding residue {residue:.3g} exceeds {_RESIDUE_LIMIT}")
    return (rounded.astype(np.int64) & 1).astype(np.uint8)


def amplify(bits, seed: int, cr: float, block_size: int) -> tuple[np.ndarray, list[dict]]:
    """Compress a reconciled key block by block.

    Each full ``block_size`` chunk is hashed with its own descriptor seeded
    by ``(seed, block_id)``; trailing bits are dropped.  Returns the
    concatenated output and one manifest entry per block.
    """
    x = np.asarray(bits, dtype=np.uint8)
    outs, manifest = [], []
    for k in range(len(x) // block_size):
        bseed = int(np.random.SeedSequence([seed, k]).generate_state(1, np.uint64)[0])
        desc = ToeplitzDescriptor.for_ratio(bseed, block_size, cr)
        outs.append(hash_fft(desc, x[k * block_size:(k + 1) * block_size]))
        manifest.append({"block_id": k, "n_in": block_size, "n_out": desc.n_out})
    out = np.concatenate(outs) if outs else np.zeros(0, np.uint8)
    return out, manifest


def write_final_key(path, bits, seed: int, cr: float, blocks: Iterable[dict]) -> Path:
    """Write the key as packed bytes plus a ``.manifest.json`` sidecar.

    Bits are packed MSB-first; the manifest records the exact bit count.
    """
    path = Path(path)
    x = np.asarray(bits, dtype=np.uint8)
    path.write_bytes(np.packbits(x, bitorder="big").tobytes())
    blocks = list(blocks)
    manifest = {"seed": int(seed), "cr": cr, "n_bits": int(len(x)),
                "n_in": sum(b["n_in"] for b in blocks), "n_out": sum(b["n_out"] for b in blocks),
                "blocks": blocks}
    side = path.with_name(path.name + ".manifest.json")
    side.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return side


def read_final_key(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    manifest = json.loads(path.with_name(path.name + ".manifest.json").read_text())
    raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    return np.unpackbits(raw, count=manifest["n_bits"], bitorder="big"), manifest
