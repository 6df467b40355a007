"""Single-input functional encryption for inner products (DDH-based).

Setup samples s in Z_p^eta and publishes h_i = g^{s_i}; a functional key for
y is <y, s>; a ciphertext of x is (g^r, h_i^r g^{x_i}); decryption computes
prod ct_i^{y_i} / ct_0^{sk} = g^{<x, y>} and takes a bounded discrete log.
Signed plaintexts and key vectors are folded into Z_p.
"""
from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Sequence

import gmpy2
from gmpy2 import mpz

from .dlog import DlogSolver, solve
from .group import GroupParams, from_hex, resolve_group, to_hex


class FEError(ValueError):
    pass


@dataclass(frozen=True)
class SiMasterSecret:
    params: GroupParams
    s: tuple


@dataclass(frozen=True)
class SiPublicKey:
    params: GroupParams
    h: tuple

    @property
    def eta(self) -> int:
        return len(self.h)

    def to_record(self) -> dict:
        return {"params": self.params.to_record(), "h": [to_hex(v) for v in self.h]}

    @classmethod
    def from_record(cls, rec: dict) -> "SiPublicKey":
        params = GroupParams.from_record(rec["params"])
        return cls(params, tuple(mpz(from_hex(v)) for v in rec["h"]))


@dataclass(frozen=True)
class SiCiphertext:
    ct0: int
    cts: tuple

    def __len__(self):
        return len(self.cts)

    def to_record(self) -> dict:
        return {"ct0": to_hex(self.ct0), "cts": [to_hex(v) for v in self.cts]}

    @classmethod
    def from_record(cls, rec: dict) -> "SiCiphertext":
        return cls(mpz(from_hex(rec["ct0"])), tuple(mpz(from_hex(v)) for v in rec["cts"]))


@dataclass(frozen=True)
class SiFunctionalKey:
    sk: int
    y: tuple

    def to_record(self) -> dict:
        return {"sk": to_hex(self.sk), "y": [int(v) for v in self.y]}

    @classmethod
    def from_record(cls, rec: dict) -> "SiFunctionalKey":
        return cls(mpz(from_hex(rec["sk"])), tuple(int(v) for v in rec["y"]))


def si_setup(group, eta: int, rng: random.Random | None = None):
    """Return ``(pk, msk)`` for vectors of length up to ``eta``.

    ``group`` may be a ``GroupParams``, a named parameter set or a bit count.
    """
    if eta < 1:
        raise FEError("eta must be >= 1")
    params = resolve_group(group, rng)
    s = tuple(params.sample_scalar(rng) for _ in range(eta))
    h = tuple(params.gexp(si) for si in s)
    return SiPublicKey(params, h), SiMasterSecret(params, s)


def si_derive_key(msk: SiMasterSecret, y: Sequence[int]) -> SiFunctionalKey:
    """sk = <y, s> mod p."""
    y = tuple(int(v) for v in y)
    if len(y) > len(msk.s):
        raise FEError(f"key vector length {len(y)} exceeds eta={len(msk.s)}")
    acc = mpz(0)
    for yi, si in zip(y, msk.s):
        if yi:
            acc += yi * si
    return SiFunctionalKey(acc % msk.params.p, y)


def _check_plaintext(x, eta: int, bound: int | None, p):
    if len(x) > eta:
        raise FEError(f"plaintext length {len(x)} exceeds eta={eta}")
    limit = bound if bound is not None else (p - 1) // 2
    for v in x:
        if abs(v) > limit:
            raise FEError(f"plaintext entry {v} exceeds bound {limit}")


def small_powers(params: GroupParams, values, memo: dict | None = None) -> list:
    """g^v for small signed v, memoised across calls through ``memo``."""
    memo = {} if memo is None else memo
    out = []
    for v in values:
        gv = memo.get(v)
        if gv is None:
            gv = params.gexp(v)
            memo[v] = gv
        out.append(gv)
    return out


def _encrypt_with_nonce(pk: SiPublicKey, x: Sequence[int], r, memo: dict | None = None):
    params = pk.params
    P = params.P
    gx = small_powers(params, x, memo)
    cts = tuple(gmpy2.powmod(hi, r, P) * gxi % P for hi, gxi in zip(pk.h, gx))
    return SiCiphertext(gmpy2.powmod(params.g, r, P), cts)


def si_encrypt(
    pk: SiPublicKey,
    x: Sequence[int],
    rng: random.Random | None = None,
    bound: int | None = None,
    memo: dict | None = None,
) -> SiCiphertext:
    x = [int(v) for v in x]
    _check_plaintext(x, pk.eta, bound, pk.params.p)
    r = pk.params.sample_scalar(rng)
    return _encrypt_with_nonce(pk, x, r, memo)


def _bucket_product(buckets: dict, P):
    """prod B_v^v over the buckets {v: B_v}, v > 0.

    With v_1 > ... > v_m and S_i = B_v1 ... B_vi the product equals
    prod S_i^(v_i - v_{i+1}); the gaps are small, so most factors cost a
    single multiplication.
    """
    if not buckets:
        return mpz(1)
    vals = sorted(buckets, reverse=True)
    S = None
    res = mpz(1)
    for i, v in enumerate(vals):
        S = buckets[v] if S is None else S * buckets[v] % P
        d = v - (vals[i + 1] if i + 1 < len(vals) else 0)
        res = res * (S if d == 1 else gmpy2.powmod(S, d, P)) % P
    return res


def signed_multiexp(bases, exps, P):
    """Return ``(prod b^e for e > 0, prod b^-e for e < 0)`` mod P.

    Bases sharing an exponent are multiplied together first; the buckets are
    then combined in about two modular operations each.
    """
    pos: dict = {}
    neg: dict = {}
    for b, e in zip(bases, exps):
        if e > 0:
            acc = pos.get(e)
            pos[e] = b if acc is None else acc * b % P
        elif e < 0:
            acc = neg.get(-e)
            neg[-e] = b if acc is None else acc * b % P
    return _bucket_product(pos, P), _bucket_product(neg, P)


def si_decrypt_raw(pk: SiPublicKey, ct: SiCiphertext, fk: SiFunctionalKey):
    """g^<x, y> without the final discrete log."""
    if len(fk.y) != len(ct.cts):
        raise FEError(f"key length {len(fk.y)} does not match ciphertext length {len(ct.cts)}")
    P = pk.params.P
    num, den = signed_multiexp(ct.cts, fk.y, P)
    den = den * gmpy2.powmod(ct.ct0, fk.sk, P) % P
    return num * gmpy2.invert(den, P) % P


def si_decrypt(pk: SiPublicKey, ct: SiCiphertext, fk: SiFunctionalKey, solver: DlogSolver) -> int:
    return solve(solver, si_decrypt_raw(pk, ct, fk))
