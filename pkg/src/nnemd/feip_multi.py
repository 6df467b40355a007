"""Multi-input functional encryption for inner products (DDH-based).

n parties each encrypt their own slice x_i of length eta_i under a party key;
a functional key for y = (y_1 || ... || y_n) lets the decryptor recover
sum_i <x_i, y_i> from one ciphertext per party.

Setup draws a = (1, a)^T, W_i in Z_p^{eta_i x 2} and u_i in Z_p^{eta_i}.
Party i encrypts with t_i = g^{a r_i} (two elements) and
c_i = g^{x_i + u_i + (W_i a) r_i}.  A key is d_i^T = y_i^T W_i and
z = sum_i <y_i, u_i>; decryption divides prod_i y_i^T c_i / d_i^T t_i by g^z.
"""
from __future__ import annotations

import random
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import gmpy2
from gmpy2 import mpz

from .dlog import DlogSolver, solve
from .feip_single import FEError, _check_plaintext, signed_multiexp, small_powers
from .group import GroupParams, from_hex, resolve_group, to_hex


@dataclass(frozen=True)
class MiMasterKeys:
    params: GroupParams
    a: int
    W_list: tuple  # n entries, each a tuple of eta_i (w0, w1) pairs
    u_list: tuple
    g_pow_a: tuple
    g_pow_Wa: tuple

    @property
    def n(self) -> int:
        return len(self.W_list)

    @property
    def eta_vec(self) -> tuple:
        return tuple(len(W) for W in self.W_list)

    @property
    def a_vec(self) -> tuple:
        return (mpz(1), self.a)


@dataclass(frozen=True)
class MiPartyKey:
    source_id: int
    params: GroupParams
    g_pow_a: tuple
    g_pow_Wa_i: tuple
    u_i: tuple

    @property
    def eta_i(self) -> int:
        return len(self.u_i)

    @cached_property
    def g_pow_u(self) -> tuple:
        return tuple(self.params.gexp(u) for u in self.u_i)

    def to_record(self) -> dict:
        return {
            "source_id": self.source_id,
            "params": self.params.to_record(),
            "g_pow_a": [to_hex(v) for v in self.g_pow_a],
            "g_pow_Wa_i": [to_hex(v) for v in self.g_pow_Wa_i],
            "u_i": [to_hex(v) for v in self.u_i],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "MiPartyKey":
        def ints(xs):
            return tuple(mpz(from_hex(v)) for v in xs)

        return cls(
            int(rec["source_id"]),
            GroupParams.from_record(rec["params"]),
            ints(rec["g_pow_a"]),
            ints(rec["g_pow_Wa_i"]),
            ints(rec["u_i"]),
        )


@dataclass(frozen=True)
class MiCiphertext:
    source_id: int
    t_i: tuple  # (g^{r_i}, g^{a r_i})
    c_i: tuple

    def __len__(self):
        return len(self.c_i)

    def to_record(self) -> dict:
        return {
            "source_id": self.source_id,
            "t": [to_hex(v) for v in self.t_i],
            "c": [to_hex(v) for v in self.c_i],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "MiCiphertext":
        return cls(
            int(rec["source_id"]),
            tuple(mpz(from_hex(v)) for v in rec["t"]),
            tuple(mpz(from_hex(v)) for v in rec["c"]),
        )


@dataclass(frozen=True)
class MiFunctionalKey:
    d_list: tuple  # n pairs
    z: int
    y: tuple

    def to_record(self) -> dict:
        return {
            "d": [[to_hex(d0), to_hex(d1)] for d0, d1 in self.d_list],
            "z": to_hex(self.z),
            "y": [int(v) for v in self.y],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "MiFunctionalKey":
        return cls(
            tuple((mpz(from_hex(a)), mpz(from_hex(b))) for a, b in rec["d"]),
            mpz(from_hex(rec["z"])),
            tuple(int(v) for v in rec["y"]),
        )

    def g_neg_z(self, params: GroupParams):
        cached = self.__dict__.get("_g_neg_z")
        if cached is None or cached[0] is not params:
            cached = (params, gmpy2.powmod(params.g, (params.p - self.z) % params.p, params.P))
            object.__setattr__(self, "_g_neg_z", cached)
        return cached[1]


def mi_setup(group, eta_vec: Sequence[int], n: int, rng: random.Random | None = None) -> MiMasterKeys:
    eta_vec = tuple(int(e) for e in eta_vec)
    if n < 1 or len(eta_vec) != n:
        raise FEError("need n >= 1 and one length per party")
    if any(e < 1 for e in eta_vec):
        raise FEError("every eta_i must be >= 1")
    params = resolve_group(group, rng)
    p = params.p
    a = params.sample_scalar(rng)
    W_list, u_list, g_pow_Wa = [], [], []
    for eta_i in eta_vec:
        W_i = tuple((params.sample_scalar(rng), params.sample_scalar(rng)) for _ in range(eta_i))
        u_i = tuple(params.sample_scalar(rng) for _ in range(eta_i))
        W_list.append(W_i)
        u_list.append(u_i)
        g_pow_Wa.append(tuple(params.gexp((w0 + w1 * a) % p) for w0, w1 in W_i))
    return MiMasterKeys(
        params,
        a,
        tuple(W_list),
        tuple(u_list),
        (params.g, params.gexp(a)),
        tuple(g_pow_Wa),
    )


def mi_party_key(master: MiMasterKeys, source_id: int) -> MiPartyKey:
    """Slice of the master material for party ``source_id`` (1-based)."""
    if not 1 <= source_id <= master.n:
        raise FEError(f"unknown source id {source_id}; expected 1..{master.n}")
    i = source_id - 1
    return MiPartyKey(
        source_id, master.params, master.g_pow_a, master.g_pow_Wa[i], master.u_list[i]
    )


def split_by_eta(y: Sequence[int], eta_vec: Sequence[int]) -> list:
    out, start = [], 0
    for e in eta_vec:
        out.append(tuple(y[start : start + e]))
        start += e
    return out


def mi_derive_key(master: MiMasterKeys, y: Sequence[int]) -> MiFunctionalKey:
    y = tuple(int(v) for v in y)
    if len(y) != sum(master.eta_vec):
        raise FEError(f"key vector length {len(y)} != sum(eta_vec) = {sum(master.eta_vec)}")
    p = master.params.p
    d_list = []
    z = mpz(0)
    for y_i, W_i, u_i in zip(split_by_eta(y, master.eta_vec), master.W_list, master.u_list):
        d0 = d1 = mpz(0)
        for yij, (w0, w1), uij in zip(y_i, W_i, u_i):
            if yij:
                d0 += yij * w0
                d1 += yij * w1
                z += yij * uij
        d_list.append((d0 % p, d1 % p))
    return MiFunctionalKey(tuple(d_list), z % p, y)


def _encrypt_with_nonce(key: MiPartyKey, x: Sequence[int], r, memo: dict | None = None):
    params = key.params
    P = params.P
    gx = small_powers(params, x, memo)
    t_i = (gmpy2.powmod(key.g_pow_a[0], r, P), gmpy2.powmod(key.g_pow_a[1], r, P))
    c_i = tuple(
        gxj * guj % P * gmpy2.powmod(gwa, r, P) % P
        for gxj, guj, gwa in zip(gx, key.g_pow_u, key.g_pow_Wa_i)
    )
    return MiCiphertext(key.source_id, t_i, c_i)


def mi_encrypt(
    key: MiPartyKey,
    x: Sequence[int],
    rng: random.Random | None = None,
    bound: int | None = None,
    memo: dict | None = None,
) -> MiCiphertext:
    x = [int(v) for v in x]
    if len(x) != key.eta_i:
        raise FEError(f"party {key.source_id} expects length {key.eta_i}, got {len(x)}")
    _check_plaintext(x, key.eta_i, bound, key.params.p)
    r = key.params.sample_scalar(rng)
    return _encrypt_with_nonce(key, x, r, memo)


def mi_decrypt_raw(params: GroupParams, cts: Sequence[MiCiphertext], fk: MiFunctionalKey):
    n = len(fk.d_list)
    ids = [ct.source_id for ct in cts]
    if ids != list(range(1, n + 1)):
        missing = sorted(set(range(1, n + 1)) - set(ids))
        raise FEError(f"need one ciphertext per source 1..{n} in order; missing {missing}")
    P = params.P
    num = mpz(1)
    den = mpz(1)
    start = 0
    for ct, (d0, d1) in zip(cts, fk.d_list):
        y_i = fk.y[start : start + len(ct.c_i)]
        start += len(ct.c_i)
        pn, pd = signed_multiexp(ct.c_i, y_i, P)
        num = num * pn % P
        den = den * pd % P * gmpy2.powmod(ct.t_i[0], d0, P) % P
        den = den * gmpy2.powmod(ct.t_i[1], d1, P) % P
    if start != len(fk.y):
        raise FEError("ciphertext lengths do not match the key partition")
    num = num * fk.g_neg_z(params) % P
    return num * gmpy2.invert(den, P) % P


def mi_decrypt(
    params: GroupParams, cts: Sequence[MiCiphertext], fk: MiFunctionalKey, solver: DlogSolver
) -> int:
    return solve(solver, mi_decrypt_raw(params, cts, fk))
