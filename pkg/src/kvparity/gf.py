"""GF(2^8) arithmetic over the polynomial x^8 + x^4 + x^3 + x^2 + 1.

Scalar helpers use log/antilog tables; buffer helpers use a full 256x256
product table so a whole shard can be scaled with one numpy gather.
"""

from __future__ import annotations

import numpy as np

PRIM_POLY = 0x11D
FIELD_SIZE = 256
ORDER = FIELD_SIZE - 1


def _build_tables() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    exp = np.zeros(2 * FIELD_SIZE, dtype=np.uint8)
    log = np.zeros(FIELD_SIZE, dtype=np.int32)
    x = 1
    for i in range(ORDER):
        exp[i] = x
        log[x] = i
        x <<= 1
        if x & 0x100:
            x ^= PRIM_POLY
    exp[ORDER : 2 * ORDER] = exp[:ORDER]
    # full product table; row 0 and column 0 stay zero
    la = log[1:, None] + log[None, 1:]
    mul = np.zeros((FIELD_SIZE, FIELD_SIZE), dtype=np.uint8)
    mul[1:, 1:] = exp[la]
    exp.flags.writeable = False
    log.flags.writeable = False
    mul.flags.writeable = False
    return exp, log, mul


EXP, LOG, MUL = _build_tables()


def gf_add(a: int, b: int) -> int:
    return a ^ b


def gf_mul(a: int, b: int) -> int:
    if a == 0 or b == 0:
        return 0
    return int(EXP[LOG[a] + LOG[b]])


def gf_inv(a: int) -> int:
    if a == 0:
        raise ZeroDivisionError("0 has no multiplicative inverse in GF(2^8)")
    return int(EXP[ORDER - LOG[a]])


def gf_div(a: int, b: int) -> int:
    if b == 0:
        raise ZeroDivisionError("division by zero in GF(2^8)")
    if a == 0:
        return 0
    return int(EXP[(LOG[a] - LOG[b]) % ORDER])


def gf_pow(a: int, e: int) -> int:
    if e == 0:
        return 1
    if a == 0:
        return 0
    return int(EXP[(LOG[a] * e) % ORDER])


def scale(coef: int, buf: np.ndarray) -> np.ndarray:
    """Multiply every byte of ``buf`` by ``coef``."""
    if coef == 0:
        return np.zeros_like(buf)
    if coef == 1:
        return buf.copy()
    return MUL[coef][buf]


def addmul(acc: np.ndarray, coef: int, buf: np.ndarray) -> None:
    """acc ^= coef * buf, in place."""
    if coef == 0:
        return
    if coef == 1:
        np.bitwise_xor(acc, buf, out=acc)
    else:
        np.bitwise_xor(acc, MUL[coef][buf], out=acc)


def mat_inv(m: list[list[int]]) -> list[list[int]]:
    """Gauss-Jordan inverse of a square GF(2^8) matrix."""
    n = len(m)
    a = [list(row) for row in m]
    inv = [[int(i == j) for j in range(n)] for i in range(n)]
    for col in range(n):
        piv = next((r for r in range(col, n) if a[r][col]), None)
        if piv is None:
            raise np.linalg.LinAlgError("singular matrix over GF(2^8)")
        a[col], a[piv] = a[piv], a[col]
        inv[col], inv[piv] = inv[piv], inv[col]
        p = gf_inv(a[col][col])
        a[col] = [gf_mul(v, p) for v in a[col]]
        inv[col] = [gf_mul(v, p) for v in inv[col]]
        for r in range(n):
            f = a[r][col]
            if r == col or f == 0:
                continue
            a[r] = [x ^ gf_mul(f, y) for x, y in zip(a[r], a[col])]
            inv[r] = [x ^ gf_mul(f, y) for x, y in zip(inv[r], inv[col])]
    return inv


def mat_vec_apply(m: list[list[int]], bufs: list[np.ndarray]) -> list[np.ndarray]:
    """Return ``m @ bufs`` where each element of ``bufs`` is a byte vector."""
    out = []
    for row in m:
        acc = np.zeros_like(bufs[0])
        for c, b in zip(row, bufs):
            addmul(acc, c, b)
        out.append(acc)
    return out
