"""Non-interactive secure two-party matrix products between a client pool
holding X (encrypted row by row) and a server holding plaintext W.

``s2phc_*`` covers horizontally partitioned X (every source holds full rows,
single-input FE); ``s2pvc_*`` covers vertically partitioned X (every source
holds a column slice of the same rows, multi-input FE).  Client functions
never take a server handle: the client side is one-way.
"""
from __future__ import annotations

import random
import time
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .dlog import DlogSolver, solve
from .encoding import BoundExceeded, FixedPointCodec, decode_product, encode_matrix
from .feip_multi import MiCiphertext, MiPartyKey, _encrypt_with_nonce as _mi_enc
from .feip_multi import mi_decrypt_raw
from .feip_single import FEError, SiCiphertext, SiPublicKey, si_decrypt_raw
from .feip_single import _encrypt_with_nonce as _si_enc

HPT_ROW = "SI"
VPT_SLICE = "MI"


class ProtocolAbort(RuntimeError):
    pass


@dataclass(frozen=True)
class EncryptedBatch:
    """Row-wise ciphertexts of one client matrix.

    ``shape`` is the shape of the underlying integer matrix; multi-input
    ciphertexts are zero-padded to the party's slot width, so their length
    can exceed ``shape[1]``.
    """

    kind: str
    rows: tuple
    shape: tuple
    eps_client: int
    source_id: int

    def to_record(self) -> dict:
        return {
            "kind": self.kind,
            "source_id": self.source_id,
            "shape": list(self.shape),
            "eps_client": self.eps_client,
            "rows": [ct.to_record() for ct in self.rows],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "EncryptedBatch":
        ct_cls = SiCiphertext if rec["kind"] == HPT_ROW else MiCiphertext
        return cls(
            rec["kind"],
            tuple(ct_cls.from_record(r) for r in rec["rows"]),
            tuple(rec["shape"]),
            int(rec["eps_client"]),
            int(rec["source_id"]),
        )


@dataclass
class ServerEvalConfig:
    codec: FixedPointCodec  # server-side precision and value bound
    solver: DlogSolver
    authority: Any  # anything with serve_si_key / serve_mi_key
    si_pk: SiPublicKey | None = None
    eta: int = 0
    eta_vec: tuple = ()
    n: int = 0
    timings: dict = field(default_factory=lambda: {"keyreq": 0.0, "decrypt": 0.0})

    @property
    def eps_server(self) -> int:
        return self.codec.precision_eps


def _rng(rng):
    return rng if rng is not None else random.SystemRandom()


def _encode_client(codec: FixedPointCodec, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ProtocolAbort(f"expected a matrix, got shape {X.shape}")
    try:
        return encode_matrix(codec, X)
    except BoundExceeded as exc:
        raise ProtocolAbort(f"encoding failed: {exc}") from exc


def s2phc_client_encrypt(
    codec: FixedPointCodec, si_pk: SiPublicKey, X, rng=None, source_id: int = 0
) -> EncryptedBatch:
    X_int = _encode_client(codec, X)
    r, c = X_int.shape
    if c > si_pk.eta:
        raise ProtocolAbort(f"column count {c} exceeds eta = {si_pk.eta}")
    rng = _rng(rng)
    memo: dict = {}
    params = si_pk.params
    rows = tuple(
        _si_enc(si_pk, row, params.sample_scalar(rng), memo) for row in X_int.tolist()
    )
    return EncryptedBatch(HPT_ROW, rows, (r, c), codec.precision_eps, source_id)


def s2pvc_client_encrypt(
    codec: FixedPointCodec, mi_party_key: MiPartyKey, X_slice, rng=None
) -> EncryptedBatch:
    X_int = _encode_client(codec, X_slice)
    r, c = X_int.shape
    eta_i = mi_party_key.eta_i
    if c > eta_i:
        raise ProtocolAbort(f"slice width {c} exceeds eta_{mi_party_key.source_id} = {eta_i}")
    rng = _rng(rng)
    memo: dict = {}
    params = mi_party_key.params
    pad = [0] * (eta_i - c)
    rows = tuple(
        _mi_enc(mi_party_key, row + pad, params.sample_scalar(rng), memo)
        for row in X_int.tolist()
    )
    return EncryptedBatch(VPT_SLICE, rows, (r, c), codec.precision_eps, mi_party_key.source_id)


def _encode_server(cfg: ServerEvalConfig, W) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ProtocolAbort(f"expected a weight matrix, got shape {W.shape}")
    try:
        return encode_matrix(cfg.codec, W)
    except BoundExceeded as exc:
        raise ProtocolAbort(f"weight encoding failed: {exc}") from exc


def _common_eps(batches) -> int:
    eps = {b.eps_client for b in batches}
    if len(eps) != 1:
        raise ProtocolAbort(f"sources disagree on client precision: {sorted(eps)}")
    return eps.pop()


def _solve(cfg: ServerEvalConfig, h) -> int:
    return solve(cfg.solver, h)


def s2phc_server_eval_int(batches: Sequence[EncryptedBatch], W_int, cfg: ServerEvalConfig):
    """Integer product of the stacked client rows with ``W_int``.

    Rows are stacked in ascending source id, then client row order.
    """
    if not batches:
        raise ProtocolAbort("no ciphertexts")
    if any(b.kind != HPT_ROW for b in batches):
        raise ProtocolAbort("horizontal evaluation needs single-input row ciphertexts")
    cols = {b.shape[1] for b in batches}
    if len(cols) != 1:
        raise ProtocolAbort(f"sources disagree on column count: {sorted(cols)}")
    c = cols.pop()
    W_int = np.asarray(W_int)
    eta = cfg.eta or (cfg.si_pk.eta if cfg.si_pk else c)
    if W_int.shape[0] != c or W_int.shape[0] > eta:
        raise ProtocolAbort(f"weight rows {W_int.shape[0]} must equal {c} and be <= eta = {eta}")
    ordered = sorted(batches, key=lambda b: b.source_id)
    cts = [ct for b in ordered for ct in b.rows]

    t0 = time.perf_counter()
    keys = [cfg.authority.serve_si_key(col) for col in W_int.T.tolist()]
    t1 = time.perf_counter()
    Z = np.empty((len(cts), len(keys)), dtype=object)
    pk = cfg.si_pk
    for i, ct in enumerate(cts):
        for j, fk in enumerate(keys):
            Z[i, j] = _solve(cfg, si_decrypt_raw(pk, ct, fk))
    t2 = time.perf_counter()
    cfg.timings["keyreq"] += t1 - t0
    cfg.timings["decrypt"] += t2 - t1
    return _as_int_array(Z)


def s2phc_server_eval(batches: Sequence[EncryptedBatch], W, cfg: ServerEvalConfig) -> np.ndarray:
    W_int = _encode_server(cfg, W)
    eps_c = _common_eps(batches)
    return decode_product(s2phc_server_eval_int(batches, W_int, cfg), eps_c, cfg.eps_server)


def s2pvc_server_eval_int(batches: Sequence[EncryptedBatch], W_int, cfg: ServerEvalConfig):
    """Integer product of the column-concatenated source slices with ``W_int``."""
    if not batches:
        raise ProtocolAbort("no ciphertexts")
    if any(b.kind != VPT_SLICE for b in batches):
        raise ProtocolAbort("vertical evaluation needs multi-input slice ciphertexts")
    n = cfg.n
    if len(batches) > n:
        raise ProtocolAbort(f"{len(batches)} sources exceed the allowed n = {n}")
    ordered = sorted(batches, key=lambda b: b.source_id)
    ids = [b.source_id for b in ordered]
    if ids != list(range(1, n + 1)):
        missing = sorted(set(range(1, n + 1)) - set(ids))
        raise ProtocolAbort(f"missing source(s) {missing}")
    rows = {b.shape[0] for b in ordered}
    if len(rows) != 1:
        raise ProtocolAbort(f"sources disagree on row count: {sorted(rows)}")
    W_int = np.asarray(W_int)
    widths = [b.shape[1] for b in ordered]
    if W_int.shape[0] != sum(widths) or W_int.shape[0] > sum(cfg.eta_vec):
        raise ProtocolAbort(
            f"weight rows {W_int.shape[0]} must equal sum of slice widths {sum(widths)}"
            f" and be <= sum(eta_vec) = {sum(cfg.eta_vec)}"
        )

    # key vector per column: each source's block zero-padded to its slot width
    slot_widths = [len(b.rows[0]) if b.rows else cfg.eta_vec[k] for k, b in enumerate(ordered)]
    offsets = np.cumsum([0] + widths)
    t0 = time.perf_counter()
    keys = []
    for col in W_int.T.tolist():
        y = []
        for k, (w, sw) in enumerate(zip(widths, slot_widths)):
            y.extend(col[offsets[k] : offsets[k] + w])
            y.extend([0] * (sw - w))
        keys.append(cfg.authority.serve_mi_key(y))
    t1 = time.perf_counter()
    params = cfg.solver.params
    r = rows.pop()
    Z = np.empty((r, len(keys)), dtype=object)
    for i in range(r):
        cts = [b.rows[i] for b in ordered]
        for j, fk in enumerate(keys):
            Z[i, j] = _solve(cfg, mi_decrypt_raw(params, cts, fk))
    t2 = time.perf_counter()
    cfg.timings["keyreq"] += t1 - t0
    cfg.timings["decrypt"] += t2 - t1
    return _as_int_array(Z)


def s2pvc_server_eval(batches: Sequence[EncryptedBatch], W, cfg: ServerEvalConfig) -> np.ndarray:
    W_int = _encode_server(cfg, W)
    eps_c = _common_eps(batches)
    return decode_product(s2pvc_server_eval_int(batches, W_int, cfg), eps_c, cfg.eps_server)


def _as_int_array(Z) -> np.ndarray:
    try:
        return Z.astype(np.int64)
    except OverflowError:
        return Z


__all__ = [
    "EncryptedBatch",
    "FEError",
    "ProtocolAbort",
    "ServerEvalConfig",
    "s2phc_client_encrypt",
    "s2phc_server_eval",
    "s2phc_server_eval_int",
    "s2pvc_client_encrypt",
    "s2pvc_server_eval",
    "s2pvc_server_eval_int",
]
