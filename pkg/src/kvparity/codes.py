"""Erasure codecs over byte shards: XOR, shortened RDP and systematic Reed-Solomon.

Shard indices follow one convention everywhere: ``0..n-1`` are data shards and
``n..n+k-1`` are parity shards. For RDP, index ``n`` is the row parity and
``n + 1`` the diagonal parity.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from . import gf
from .errors import ConfigError, ShardError, UnrecoverableError

Buffer = Union[bytes, bytearray, memoryview, np.ndarray]


class Kind(str, enum.Enum):
    XOR = "xor"
    RDP = "rdp"
    RS = "rs"


@dataclass(frozen=True)
class CodingScheme:
    kind: Kind
    n: int
    k: int

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.n < 1 or self.k < 1:
            raise ConfigError(f"n and k must be positive, got n={self.n} k={self.k}")
        if self.kind is Kind.XOR and self.k != 1:
            raise ConfigError("xor coding has exactly one parity shard")
        if self.kind is Kind.RDP and self.k != 2:
            raise ConfigError("rdp coding has exactly two parity shards")
        if self.kind is Kind.RS and self.k > self.n:
            raise ConfigError(f"reed-solomon needs k <= n, got n={self.n} k={self.k}")
        if self.n + self.k > gf.ORDER:
            raise ConfigError(f"n + k = {self.n + self.k} exceeds {gf.ORDER}")

    @classmethod
    def xor(cls, n: int) -> "CodingScheme":
        return cls(Kind.XOR, n, 1)

    @classmethod
    def rdp(cls, n: int) -> "CodingScheme":
        return cls(Kind.RDP, n, 2)

    @classmethod
    def rs(cls, n: int, k: int) -> "CodingScheme":
        return cls(Kind.RS, n, k)

    @property
    def width(self) -> int:
        return self.n + self.k

    def __str__(self) -> str:
        return f"{self.kind.value}({self.n},{self.k})"


@dataclass(frozen=True)
class ErasurePattern:
    lost: frozenset

    @classmethod
    def of(cls, lost: Iterable[int]) -> "ErasurePattern":
        return cls(frozenset(int(i) for i in lost))

    def data_losses(self, scheme: CodingScheme) -> list[int]:
        return sorted(i for i in self.lost if i < scheme.n)

    def reconstructable(self, scheme: CodingScheme) -> bool:
        return all(0 <= i < scheme.width for i in self.lost) and len(self.lost) <= max_tolerance(scheme)


def max_tolerance(scheme: CodingScheme) -> int:
    return scheme.k


# -- Reed-Solomon -----------------------------------------------------------


@lru_cache(maxsize=None)
def _cauchy(n: int, k: int) -> tuple[tuple[int, ...], ...]:
    # x_i = i (parity rows), y_j = k + j (data columns); the two sets are disjoint
    return tuple(tuple(gf.gf_inv(i ^ (k + j)) for j in range(n)) for i in range(k))


# -- RDP --------------------------------------------------------------------


def _is_prime(v: int) -> bool:
    if v < 2:
        return False
    f = 2
    while f * f <= v:
        if v % f == 0:
            return False
        f += 1
    return True


def rdp_prime(n: int) -> int:
    """Smallest prime p with p - 1 >= n; columns n..p-2 are virtual zero shards."""
    p = 2
    while p - 1 < n or not _is_prime(p):
        p += 1
    return p


def _rdp_masks(n: int) -> np.ndarray:
    p = rdp_prime(n)
    rows = p - 1
    masks = np.zeros((2, rows, rows, n + 1), dtype=np.uint8)
    for r in range(rows):
        masks[0, r, r, :n] = 1
        for c in range(n + 1):
            col = c if c < n else p - 1
            d = (r + col) % p
            if d != p - 1:
                masks[1, d, r, c] = 1
    return masks


def build_encoding_matrix(scheme: CodingScheme) -> np.ndarray:
    """Parity coefficients for ``scheme``.

    Xor and Reed-Solomon return a ``(k, n)`` uint8 matrix of GF(2^8) coefficients.
    RDP is XOR-only, so it returns membership masks of shape
    ``(2, p-1, p-1, n+1)``: ``masks[q, e, r, c]`` is 1 when the block at stripe
    row ``r`` of column ``c`` (data columns, then the row parity) feeds element
    ``e`` of parity ``q`` (0 = row, 1 = diagonal).
    """
    if scheme.kind is Kind.XOR:
        return np.ones((1, scheme.n), dtype=np.uint8)
    if scheme.kind is Kind.RS:
        return np.array(_cauchy(scheme.n, scheme.k), dtype=np.uint8)
    return _rdp_masks(scheme.n)


def _as_arrays(bufs: Sequence[Buffer]) -> list[np.ndarray]:
    out = []
    for b in bufs:
        if isinstance(b, np.ndarray):
            out.append(np.ascontiguousarray(b, dtype=np.uint8).reshape(-1))
        else:
            out.append(np.frombuffer(bytes(b), dtype=np.uint8))
    return out


def _check_equal_lengths(bufs: Sequence[np.ndarray]) -> int:
    lengths = {b.size for b in bufs}
    if len(lengths) > 1:
        raise ShardError(f"shards must have equal length, got {sorted(lengths)}")
    return lengths.pop() if lengths else 0


def encode(scheme: CodingScheme, data: Sequence[Buffer]) -> list[np.ndarray]:
    if len(data) != scheme.n:
        raise ShardError(f"{scheme} expects {scheme.n} data shards, got {len(data)}")
    shards = _as_arrays(data)
    _check_equal_lengths(shards)
    if scheme.kind is Kind.XOR:
        return [np.bitwise_xor.reduce(np.stack(shards), axis=0)]
    if scheme.kind is Kind.RS:
        return gf.mat_vec_apply(_cauchy(scheme.n, scheme.k), shards)
    return _rdp_encode(scheme.n, shards)


def _rdp_layout(n: int, length: int) -> tuple[int, int, int]:
    p = rdp_prime(n)
    rows = p - 1
    block = length // rows
    return p, block, block * rows


def _rdp_diagonals(p: int, block: int, cols: Mapping[int, np.ndarray]) -> np.ndarray:
    """Diagonal parity over stripe columns; ``cols`` maps column -> (rows, block)."""
    q = np.zeros((p - 1, block), dtype=np.uint8)
    for c, blocks in cols.items():
        for r in range(p - 1):
            d = (r + c) % p
            if d != p - 1:
                q[d] ^= blocks[r]
    return q


def _tail_q(tails: Sequence[np.ndarray]) -> np.ndarray:
    acc = np.zeros_like(tails[0])
    for j, t in enumerate(tails):
        gf.addmul(acc, gf.gf_pow(2, j), t)
    return acc


def _rdp_encode(n: int, shards: list[np.ndarray]) -> list[np.ndarray]:
    length = shards[0].size
    p, block, body = _rdp_layout(n, length)
    row = np.bitwise_xor.reduce(np.stack(shards), axis=0)
    cols = {c: shards[c][:body].reshape(p - 1, block) for c in range(n)}
    cols[p - 1] = row[:body].reshape(p - 1, block)
    diag = np.empty(length, dtype=np.uint8)
    diag[:body] = _rdp_diagonals(p, block, cols).reshape(-1)
    # bytes past the last whole stripe: RAID-6 style Q = sum 2^j * d_j
    diag[body:] = _tail_q([s[body:] for s in shards])
    return [row, diag]


def reconstruct(
    scheme: CodingScheme,
    surviving: Mapping[int, Buffer],
    lost: Union[ErasurePattern, Iterable[int]],
) -> dict[int, np.ndarray]:
    """Rebuild every shard in ``lost`` (data and parity) from ``surviving``."""
    pattern = lost if isinstance(lost, ErasurePattern) else ErasurePattern.of(lost)
    bad = [i for i in pattern.lost if not 0 <= i < scheme.width]
    if bad:
        raise ShardError(f"shard indices {sorted(bad)} outside [0, {scheme.width})")
    if len(pattern.lost) > max_tolerance(scheme):
        raise UnrecoverableError(
            f"{len(pattern.lost)} erasures exceed the {scheme} tolerance of {max_tolerance(scheme)}"
        )
    missing = [i for i in range(scheme.width) if i not in pattern.lost and i not in surviving]
    if missing:
        raise ShardError(f"surviving shards {missing} not supplied")
    if not pattern.lost:
        return {}
    have = {i: a for i, a in zip(surviving.keys(), _as_arrays(list(surviving.values())))
            if i not in pattern.lost}
    _check_equal_lengths(list(have.values()))

    if scheme.kind is Kind.XOR:
        (i,) = pattern.lost
        return {i: np.bitwise_xor.reduce(np.stack(list(have.values())), axis=0)}
    if scheme.kind is Kind.RS:
        return _rs_reconstruct(scheme, have, pattern)
    return _rdp_reconstruct(scheme.n, have, pattern)


def _rs_reconstruct(scheme: CodingScheme, have: dict[int, np.ndarray], pattern: ErasurePattern):
    n = scheme.n
    coef = _cauchy(n, scheme.k)
    lost_data = pattern.data_losses(scheme)
    out: dict[int, np.ndarray] = {}
    if lost_data:
        rows = [i - n for i in sorted(have) if i >= n][: len(lost_data)]
        sub = [[coef[p][j] for j in lost_data] for p in rows]
        inv = gf.mat_inv(sub)
        syndromes = []
        for p in rows:
            s = have[n + p].copy()
            for j in range(n):
                if j not in pattern.lost:
                    gf.addmul(s, coef[p][j], have[j])
            syndromes.append(s)
        for j, buf in zip(lost_data, gf.mat_vec_apply(inv, syndromes)):
            out[j] = buf
    lost_parity = sorted(i for i in pattern.lost if i >= n)
    if lost_parity:
        data = [out[j] if j in out else have[j] for j in range(n)]
        rows = [[coef[i - n][j] for j in range(n)] for i in lost_parity]
        for i, buf in zip(lost_parity, gf.mat_vec_apply(rows, data)):
            out[i] = buf
    return out


def _rdp_reconstruct(n: int, have: dict[int, np.ndarray], pattern: ErasurePattern):
    length = next(iter(have.values())).size
    p, block, body = _rdp_layout(n, length)
    row_idx, diag_idx = n, n + 1
    lost = set(pattern.lost)
    out: dict[int, np.ndarray] = {}

    if diag_idx in lost:
        # at most one other column is gone: the row parity alone repairs it
        others = lost - {diag_idx}
        if others:
            (i,) = others
            rest = [have[j] for j in range(n + 1) if j != i]
            out[i] = np.bitwise_xor.reduce(np.stack(rest), axis=0)
        data = [out.get(j, have.get(j)) for j in range(n)]
        out[diag_idx] = _rdp_encode(n, data)[1]
        return out

    full = {j: have[j] for j in range(n + 1) if j not in lost}
    for j in lost:
        out[j] = np.empty(length, dtype=np.uint8)

    # stripe body: peel row and diagonal equations with a single unknown
    col_of = {j: j for j in range(n)}
    col_of[row_idx] = p - 1
    lost_cols = {col_of[j]: j for j in lost}
    known: dict[tuple[int, int], np.ndarray] = {}
    zero = np.zeros(block, dtype=np.uint8)
    for c in range(p):
        for r in range(p - 1):
            if c in lost_cols:
                continue
            if c == p - 1:
                known[(r, c)] = full[row_idx][r * block:(r + 1) * block]
            elif c < n:
                known[(r, c)] = full[c][r * block:(r + 1) * block]
            else:
                known[(r, c)] = zero
    diag = have[diag_idx][:body].reshape(p - 1, block)
    unknown = {(r, c) for c in lost_cols for r in range(p - 1)}
    equations = [(None, [(r, c) for c in range(p)]) for r in range(p - 1)]
    equations += [(diag[d], [(r, (d - r) % p) for r in range(p - 1)]) for d in range(p - 1)]
    while unknown:
        progressed = False
        for rhs, cells in equations:
            missing = [cell for cell in cells if cell in unknown]
            if len(missing) != 1:
                continue
            acc = np.zeros(block, dtype=np.uint8) if rhs is None else rhs.copy()
            for cell in cells:
                if cell != missing[0]:
                    acc ^= known[cell]
            known[missing[0]] = acc
            unknown.discard(missing[0])
            progressed = True
        if not progressed:
            raise UnrecoverableError(f"rdp diagonal walk stalled for pattern {sorted(lost)}")
    for c, j in lost_cols.items():
        for r in range(p - 1):
            out[j][r * block:(r + 1) * block] = known[(r, c)]

    # tail bytes: P/Q equations
    tl = slice(body, length)
    lost_data = sorted(j for j in lost if j < n)
    p_syn = full[row_idx][tl].copy() if row_idx in full else None
    q_syn = have[diag_idx][tl].copy()
    for j in range(n):
        if j in full:
            if p_syn is not None:
                p_syn ^= full[j][tl]
            gf.addmul(q_syn, gf.gf_pow(2, j), full[j][tl])
    if len(lost_data) == 2:
        x, y = lost_data
        gx, gy = gf.gf_pow(2, x), gf.gf_pow(2, y)
        # q_syn = gx*Dx ^ gy*Dy, p_syn = Dx ^ Dy
        t = q_syn.copy()
        gf.addmul(t, gy, p_syn)
        dx = gf.scale(gf.gf_inv(gx ^ gy), t)
        out[x][tl] = dx
        out[y][tl] = dx ^ p_syn
    elif len(lost_data) == 1:
        (x,) = lost_data
        if p_syn is not None:
            out[x][tl] = p_syn
        else:
            out[x][tl] = gf.scale(gf.gf_inv(gf.gf_pow(2, x)), q_syn)
    if row_idx in lost:
        data = [out[j] if j in out else full[j] for j in range(n)]
        out[row_idx][tl] = np.bitwise_xor.reduce(np.stack([d[tl] for d in data]), axis=0)
    return out
