"""Prime-order subgroup of Z_P^* for a safe prime P = 2p + 1.

Group elements and scalars are plain integers (gmpy2 ``mpz`` internally);
``GroupParams`` carries the modulus and exposes the arithmetic.  Exponents
are always reduced mod the subgroup order ``p``.
"""
from __future__ import annotations

import random
from dataclasses import dataclass

import gmpy2
from gmpy2 import mpz

GroupElement = int
Scalar = int

MR_ROUNDS = 64
MIN_LAMBDA = 64
MAX_LAMBDA = 4096


class GroupError(ValueError):
    pass


class GroupGenTimeout(RuntimeError):
    pass


@dataclass(frozen=True)
class GroupParams:
    modulus_P: int
    order_p: int
    generator_g: int
    security_lambda: int

    def __post_init__(self):
        # keep mpz copies for the hot paths
        object.__setattr__(self, "_P", mpz(self.modulus_P))
        object.__setattr__(self, "_p", mpz(self.order_p))
        object.__setattr__(self, "_g", mpz(self.generator_g))

    @property
    def P(self):
        return self._P

    @property
    def p(self):
        return self._p

    @property
    def g(self):
        return self._g

    def validate(self) -> "GroupParams":
        """Raise ``GroupError`` unless every structural invariant holds."""
        P, p, g = self._P, self._p, self._g
        if P != 2 * p + 1:
            raise GroupError("modulus is not 2p + 1")
        if not gmpy2.is_prime(p, MR_ROUNDS) or not gmpy2.is_prime(P, MR_ROUNDS):
            raise GroupError("P and p must both be prime")
        if not 2 <= g <= P - 1:
            raise GroupError("generator out of range")
        if g == 1 or gmpy2.powmod(g, p, P) != 1:
            raise GroupError("g does not generate the order-p subgroup")
        if p.bit_length() < self.security_lambda:
            raise GroupError("order shorter than the security parameter")
        return self

    def is_member(self, a) -> bool:
        return 1 <= a < self._P and gmpy2.powmod(a, self._p, self._P) == 1

    def exp(self, base, e):
        return gmpy2.powmod(base, mpz(e) % self._p, self._P)

    def gexp(self, e):
        return gmpy2.powmod(self._g, mpz(e) % self._p, self._P)

    def mul(self, a, b):
        return a * b % self._P

    def inv(self, a):
        return gmpy2.invert(a, self._P)

    def sample_scalar(self, rng: random.Random | None = None):
        rng = rng or _system_rng
        return mpz(rng.randrange(int(self._p)))

    def to_record(self) -> dict:
        return {
            "P": to_hex(self.modulus_P),
            "p": to_hex(self.order_p),
            "g": to_hex(self.generator_g),
            "lambda": self.security_lambda,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "GroupParams":
        return cls(
            from_hex(rec["P"]), from_hex(rec["p"]), from_hex(rec["g"]), int(rec["lambda"])
        ).validate()


_system_rng = random.SystemRandom()


def to_hex(v) -> str:
    """Lowercase hex without leading zeros ("0" for zero)."""
    return format(int(v), "x")


def from_hex(s: str) -> int:
    return int(s, 16)


def group_gen(
    security_lambda: int, rng: random.Random | None = None, max_attempts: int = 200_000
) -> GroupParams:
    """Random safe-prime group whose subgroup order has exactly ``security_lambda`` bits."""
    if not MIN_LAMBDA <= security_lambda <= MAX_LAMBDA:
        raise GroupError(f"security_lambda must be in [{MIN_LAMBDA}, {MAX_LAMBDA}]")
    rng = rng or _system_rng
    top = mpz(1) << (security_lambda - 1)
    for _ in range(max_attempts):
        p = mpz(rng.getrandbits(security_lambda)) | top | 1
        # p = 1 mod 3 makes 3 | 2p + 1
        if p % 3 != 2:
            continue
        if not gmpy2.is_prime(p, 25):
            continue
        P = 2 * p + 1
        if not (gmpy2.is_prime(P, MR_ROUNDS) and gmpy2.is_prime(p, MR_ROUNDS)):
            continue
        while True:
            h = mpz(rng.randrange(2, int(P) - 1))
            g = gmpy2.powmod(h, 2, P)
            if g != 1:
                break
        return GroupParams(int(P), int(p), int(g), security_lambda).validate()
    raise GroupGenTimeout(f"no safe prime found in {max_attempts} attempts")


# fixed parameter sets; the generator 4 = 2^2 is a quadratic residue, hence of order p
_NAMED = {
    "tiny": (23, 11, 4, 4),
    "test64": (
        "155715dfd5c7e8fbf",
        "aab8aefeae3f47df",
        4,
        64,
    ),
    "demo512": (
        "14ec34b2e3307899fc6cb1a518ce71847bc23c0f17598b500d0e7c415ff6055157309596b250d8ea"
        "4409d1633327218eb50827212fd2cebc3d8f2e9ab092d4eb3",
        "a761a5971983c4cfe3658d28c6738c23de11e078bacc5a806873e20affb02a8ab984acb59286c752"
        "204e8b1999390c75a84139097e9675e1ec7974d58496a759",
        4,
        512,
    ),
    "secure2048": (
        "137504b230497adfb7fdbcba306619309676a20fc979d1e5effeb021287acb76a0174e0df4ec109b"
        "1227d5ed95ff382e37984ad6f1e8a22c79cf45b20a0baa44793d5322e9e6d8ec9acf271305c1fbcb"
        "d4cfbd63f1aac774bf0c26c6b4570c6f32b240028fc672e224c6d2f7ac0a950fea4b83a5e798365c"
        "a3d0abc2b301bd50bfdb7444192130f77c9c4381b5f8dafd9f09bc67600df3ffd2b81bdb728e5b98"
        "01127bc718f41e47158097bc8f681d1fb1613260090602d0f95502d9501dfa259d2d924393adb585"
        "1a2c43b432ebea1f776a264de22ac34c7f236d00a323974611c28dd78090f631fb944383721a6c59"
        "713b2ca43309bc1dea19442d6f7e263fb",
        "9ba82591824bd6fdbfede5d18330c984b3b5107e4bce8f2f7ff5810943d65bb500ba706fa76084d8"
        "913eaf6caff9c171bcc256b78f451163ce7a2d90505d5223c9ea99174f36c764d67938982e0fde5e"
        "a67deb1f8d563ba5f8613635a2b86379959200147e339711263697bd6054a87f525c1d2f3cc1b2e5"
        "1e855e15980dea85fedba220c90987bbe4e21c0dafc6d7ecf84de33b006f9ffe95c0dedb9472dcc0"
        "0893de38c7a0f238ac04bde47b40e8fd8b09930048301687caa816ca80efd12ce96c921c9d6dac28"
        "d1621da1975f50fbbb51326f11561a63f91b6805191cba308e146ebc0487b18fdca21c1b90d362cb"
        "89d96521984de0ef50ca216b7bf131fd",
        4,
        2048,
    ),
}

_cache: dict[str, GroupParams] = {}


def named_group(name: str) -> GroupParams:
    if name not in _NAMED:
        raise GroupError(f"unknown parameter set {name!r}; choose from {sorted(_NAMED)}")
    if name not in _cache:
        P, p, g, lam = _NAMED[name]
        P = P if isinstance(P, int) else from_hex(P)
        p = p if isinstance(p, int) else from_hex(p)
        _cache[name] = GroupParams(P, p, g, lam).validate()
    return _cache[name]


def resolve_group(group, rng: random.Random | None = None) -> GroupParams:
    """Accept a ``GroupParams``, a named set, or a bit count."""
    if isinstance(group, GroupParams):
        return group
    if isinstance(group, str):
        if group.isdigit():
            return group_gen(int(group), rng)
        return named_group(group)
    return group_gen(int(group), rng)
