"""SimHash fingerprints over random hyperplanes, bit-packed into uint64 words."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from eta_ctr import _kernels
from eta_ctr.numeric import DTYPE, ShapeError

WORD_BITS = 64

RULES = ("projection", "sum-of-signs")


class HashParameterError(ValueError):
    pass


def n_words(m: int) -> int:
    return (m + WORD_BITS - 1) // WORD_BITS


@dataclass(frozen=True)
class HashPlanes:
    """A fixed random d x m matrix; column i is the i-th hash function.

    ``rule`` picks how a column turns an embedding into a bit:
    ``"projection"`` sets the bit when the inner product is positive,
    ``"sum-of-signs"`` when the sum of per-coordinate signs
    ``sgn(e[j] * H[j, i])`` is positive.
    """

    d: int
    m: int
    seed: int
    planes: np.ndarray = field(repr=False)
    rule: str = "projection"

    def __post_init__(self):
        if self.planes.shape != (self.d, self.m):
            raise ShapeError(f"planes shape {self.planes.shape} != ({self.d}, {self.m})")
        if self.rule not in RULES:
            raise HashParameterError(f"unknown hash rule {self.rule!r}; expected one of {RULES}")
        self.planes.setflags(write=False)

    @property
    def words(self) -> int:
        return n_words(self.m)


def new_planes(d: int, m: int, seed: int, rule: str = "projection") -> HashPlanes:
    if d < 1 or m < 1:
        raise HashParameterError(f"need d >= 1 and m >= 1, got d={d}, m={m}")
    planes = np.random.default_rng(seed).standard_normal((d, m)).astype(DTYPE)
    return HashPlanes(d=d, m=m, seed=seed, planes=planes, rule=rule)


@dataclass(frozen=True)
class Fingerprint:
    words: np.ndarray
    m: int

    def bits(self) -> np.ndarray:
        return unpack_bits(self.words[None, :], self.m)[0]

    def __eq__(self, other):
        return isinstance(other, Fingerprint) and self.m == other.m and np.array_equal(self.words, other.words)

    def __hash__(self):
        return hash((self.m, self.words.tobytes()))


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack an (n, m) 0/1 array into (n, ceil(m/64)) uint64 words, bit i in word i // 64."""
    bits = np.asarray(bits, dtype=bool)
    n, m = bits.shape
    w = n_words(m)
    packed = np.packbits(bits, axis=1, bitorder="little")
    buf = np.zeros((n, w * 8), dtype=np.uint8)
    buf[:, : packed.shape[1]] = packed
    return buf.view("<u8").astype(np.uint64, copy=False).reshape(n, w)


def unpack_bits(words: np.ndarray, m: int) -> np.ndarray:
    words = np.ascontiguousarray(words, dtype="<u8")
    raw = words.view(np.uint8).reshape(words.shape[0], -1)
    return np.unpackbits(raw, axis=1, count=m, bitorder="little").astype(np.uint8)


def signature_bits(E: np.ndarray, planes: HashPlanes) -> np.ndarray:
    E = np.asarray(E, dtype=DTYPE)
    if E.ndim != 2 or E.shape[1] != planes.d:
        raise ShapeError(f"embeddings of shape {E.shape} do not match planes with d={planes.d}")
    if planes.rule == "projection":
        votes = E @ planes.planes
    else:
        votes = np.sign(E) @ np.sign(planes.planes)
    # an exact zero lands in the "else" branch and yields 0
    return votes > 0


def fingerprint_batch(E: np.ndarray, planes: HashPlanes) -> np.ndarray:
    """Fingerprints of every row of ``E`` as an (L, words) uint64 array."""
    return pack_bits(signature_bits(E, planes))


def simhash(e: np.ndarray, planes: HashPlanes) -> Fingerprint:
    e = np.asarray(e, dtype=DTYPE)
    if e.ndim != 1 or e.shape[0] != planes.d:
        raise ShapeError(f"embedding of shape {e.shape} does not match planes with d={planes.d}")
    return Fingerprint(words=fingerprint_batch(e[None, :], planes)[0], m=planes.m)


def hamming(a: Fingerprint, b: Fingerprint) -> int:
    if a.m != b.m:
        raise HashParameterError(f"fingerprint lengths differ: {a.m} vs {b.m}")
    x = np.bitwise_xor(a.words, b.words)[None, :]
    return int(_kernels.popcount_words(x)[0])


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise distances between two packed fingerprint arrays."""
    if a.shape[1] != b.shape[1]:
        raise HashParameterError(f"word counts differ: {a.shape[1]} vs {b.shape[1]}")
    return _kernels.hamming_matrix(np.ascontiguousarray(a), np.ascontiguousarray(b))
