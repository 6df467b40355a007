"""Trusted third-party authority: owns both master secrets, registers data
sources, and issues functional keys after the weights filter accepts them."""
from __future__ import annotations

import hashlib
import json
import random
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .feip_multi import (
    MiFunctionalKey,
    MiMasterKeys,
    MiPartyKey,
    mi_derive_key,
    mi_party_key,
    mi_setup,
)
from .feip_single import SiFunctionalKey, SiMasterSecret, SiPublicKey, si_derive_key, si_setup
from .group import GroupParams, resolve_group

SI = "SI"
MI = "MI"


class AuthorityError(ValueError):
    pass


class FilterRejected(AuthorityError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class WeightsFilterPolicy:
    tau: int = 2
    eta_limit: int = 0
    eta_vec_limit: tuple = ()

    def __post_init__(self):
        if self.tau < 2:
            raise AuthorityError("tau must be >= 2")


@dataclass(frozen=True)
class FilterVerdict:
    accepted: bool
    reason: str = ""

    def __bool__(self):
        return self.accepted


@dataclass(frozen=True)
class KeyRequestRecord:
    timestamp: float
    scheme: str
    y_digest: str
    verdict: str
    reason: str = ""


@dataclass(frozen=True)
class Registration:
    """What a data source receives from the authority."""

    source_id: int
    si_pk: SiPublicKey
    eta: int
    mi_key: MiPartyKey | None = None
    eta_vec: tuple = ()
    n: int = 0


@dataclass
class AuthorityState:
    si_pk: SiPublicKey
    si_msk: SiMasterSecret
    mi_keys: MiMasterKeys | None
    filter: WeightsFilterPolicy
    registered_sources: dict = field(default_factory=dict)
    request_log: list = field(default_factory=list)
    log_path: Path | None = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def params(self) -> GroupParams:
        return self.si_pk.params

    @property
    def eta(self) -> int:
        return self.si_pk.eta

    @property
    def eta_vec(self) -> tuple:
        return self.mi_keys.eta_vec if self.mi_keys else ()

    @property
    def n(self) -> int:
        return self.mi_keys.n if self.mi_keys else 0

    # the server-side proxy in the wire module mirrors these two methods
    def serve_si_key(self, y) -> SiFunctionalKey:
        return serve_si_key(self, y)

    def serve_mi_key(self, y) -> MiFunctionalKey:
        return serve_mi_key(self, y)


def authority_init(
    group,
    eta: int,
    eta_vec: Sequence[int] = (),
    n: int = 0,
    tau: int = 2,
    rng: random.Random | None = None,
    log_path: str | Path | None = None,
) -> AuthorityState:
    """Set up both cryptosystems over one group.

    ``n = 0`` (with an empty ``eta_vec``) skips the multi-input scheme, which
    is only needed when some source holds a feature slice.
    """
    eta_vec = tuple(int(e) for e in eta_vec)
    if len(eta_vec) != n:
        raise AuthorityError(f"eta_vec has {len(eta_vec)} entries but n = {n}")
    policy = WeightsFilterPolicy(tau, eta, eta_vec)
    params = resolve_group(group, rng)
    si_pk, si_msk = si_setup(params, eta, rng)
    mi_keys = mi_setup(params, eta_vec, n, rng) if n else None
    return AuthorityState(
        si_pk, si_msk, mi_keys, policy, log_path=Path(log_path) if log_path else None
    )


def register_source(
    state: AuthorityState, source_id: int, partial: bool = False, mi_slot: int | None = None
) -> Registration:
    """Register a source once and hand over its public material.

    Partial-feature sources additionally occupy one multi-input slot (1..n);
    the slot is the next free one unless ``mi_slot`` pins it.
    """
    with state._lock:
        if source_id in state.registered_sources:
            raise AuthorityError(f"source {source_id} already registered")
        mi_key = None
        if partial:
            if state.mi_keys is None:
                raise AuthorityError("no multi-input cryptosystem was set up")
            used = {r.mi_key.source_id for r in state.registered_sources.values() if r.mi_key}
            if mi_slot is None:
                free = [s for s in range(1, state.n + 1) if s not in used]
                if not free:
                    raise AuthorityError(f"capacity of {state.n} partial sources exceeded")
                mi_slot = free[0]
            elif mi_slot in used or not 1 <= mi_slot <= state.n:
                raise AuthorityError(f"multi-input slot {mi_slot} unavailable")
            mi_key = mi_party_key(state.mi_keys, mi_slot)
        reg = Registration(source_id, state.si_pk, state.eta, mi_key, state.eta_vec, state.n)
        state.registered_sources[source_id] = reg
        return reg


def filter_check(policy: WeightsFilterPolicy, y: Sequence[int], scheme: str) -> FilterVerdict:
    if scheme == SI:
        if len(y) > policy.eta_limit:
            return FilterVerdict(False, f"|y| = {len(y)} exceeds eta = {policy.eta_limit}")
    elif scheme == MI:
        if len(y) != sum(policy.eta_vec_limit):
            return FilterVerdict(
                False, f"|y| = {len(y)} differs from sum(eta_vec) = {sum(policy.eta_vec_limit)}"
            )
    else:
        return FilterVerdict(False, f"unknown scheme {scheme!r}")
    nonzero = sum(1 for v in y if v)
    if nonzero < policy.tau:
        return FilterVerdict(False, f"{nonzero} non-zero entries, fewer than tau = {policy.tau}")
    return FilterVerdict(True)


def y_digest(y: Sequence[int]) -> str:
    return hashlib.sha256(",".join(str(int(v)) for v in y).encode()).hexdigest()


def _log(state: AuthorityState, scheme: str, y, verdict: FilterVerdict):
    rec = KeyRequestRecord(
        time.time(), scheme, y_digest(y), "issued" if verdict else "rejected", verdict.reason
    )
    state.request_log.append(rec)
    if state.log_path is not None:
        with open(state.log_path, "a") as fh:
            fh.write(json.dumps(asdict(rec)) + "\n")


def _serve(state: AuthorityState, y, scheme: str, derive):
    y = [int(v) for v in y]
    with state._lock:
        verdict = filter_check(state.filter, y, scheme)
        _log(state, scheme, y, verdict)
        if not verdict:
            raise FilterRejected(verdict.reason)
        return derive(y)


def serve_si_key(state: AuthorityState, y) -> SiFunctionalKey:
    return _serve(state, y, SI, lambda v: si_derive_key(state.si_msk, v))


def serve_mi_key(state: AuthorityState, y) -> MiFunctionalKey:
    if state.mi_keys is None:
        raise AuthorityError("no multi-input cryptosystem was set up")
    return _serve(state, y, MI, lambda v: mi_derive_key(state.mi_keys, v))
