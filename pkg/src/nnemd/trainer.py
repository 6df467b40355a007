"""End-to-end training: meta exchange, entity alignment, client preprocessing,
the privacy guard and the server loop for horizontal, vertical and hybrid
partitions.

The loop is shared by three layer-1 engines: ``EncryptedEngine`` (the real
protocol), ``FixedPointEngine`` (plaintext, same encode/product/decode
pipeline, hence bit-identical) and ``FloatEngine`` (plain float baseline).
"""
from __future__ import annotations

import hashlib
import json
import math
import random
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .authority import AuthorityState, FilterRejected, Registration, authority_init, register_source
from .dlog import BSGS, NotInRange, build_solver
from .encoding import FixedPointCodec, decode_product, encode_matrix, int_matmul
from .feip_single import FEError
from .nn import (
    SIGMOID,
    Hyperparams,
    MlpModel,
    accuracy,
    apply_grads,
    cross_entropy,
    feed_forward_from,
    first_layer_grad,
    gradients,
    init_weights,
    one_hot,
)
from .protocols import (
    HPT_ROW,
    VPT_SLICE,
    ProtocolAbort,
    ServerEvalConfig,
    s2phc_client_encrypt,
    s2phc_server_eval_int,
    s2pvc_client_encrypt,
    s2pvc_server_eval_int,
)

HPT = "HPT"
VPT = "VPT"
HYBRID = "hybrid"
T_F = "T_f"
T_P = "T_p"


class TrainingError(RuntimeError):
    pass


class PrivacyGuardRefused(TrainingError):
    pass


@dataclass
class DataSource:
    """Client-held plaintext.  ``ids`` are entity identifiers used only for
    alignment of feature-slice sources."""

    source_id: int
    X: np.ndarray
    y: np.ndarray | None = None
    dataset_type: str = T_F
    ids: Sequence | None = None

    def meta(self) -> "SourceMeta":
        return SourceMeta(
            self.source_id, self.dataset_type, self.X.shape[0], self.X.shape[1], self.y is not None
        )


@dataclass(frozen=True)
class SourceMeta:
    source_id: int
    dataset_type: str
    sample_count: int
    feature_count: int
    has_labels: bool


@dataclass(frozen=True)
class SourceGroup:
    """One horizontal slice of the data: a single full-feature source (SI) or
    the feature-slice sources that jointly hold the same rows (MI), listed in
    slot order."""

    kind: str
    source_ids: tuple
    widths: tuple
    label_source: int

    @property
    def n_feature(self) -> int:
        return sum(self.widths)


@dataclass
class TrainingPlan:
    mode: str
    arch: tuple
    p_batch: int
    epochs: int
    shuffle_period: int
    eps_client: int = 2
    eps_server: int = 2
    hyper: Hyperparams = field(default_factory=Hyperparams)
    hidden_activation: str = SIGMOID
    tau: int = 2
    client_bound: float = 1.0
    groups: tuple = ()

    def __post_init__(self):
        if self.shuffle_period < 1:
            raise TrainingError("shuffle_period must be >= 1")

    @property
    def n_shuffle(self) -> int:
        return math.ceil(self.epochs / self.shuffle_period)

    @property
    def n_feature(self) -> int:
        return self.arch[0]

    @property
    def n_classes(self) -> int:
        return self.arch[-1]

    @property
    def seed(self) -> int:
        return self.hyper.seed

    @property
    def eta(self) -> int:
        """Single-input length: full rows forward, batch-length rows backward."""
        return max(self.n_feature, self.p_batch)

    @property
    def vertical_group(self) -> SourceGroup | None:
        return next((g for g in self.groups if g.kind == VPT_SLICE), None)


@dataclass
class PlainBatch:
    X: np.ndarray
    mask: np.ndarray
    Y: np.ndarray | None


@dataclass
class PreprocessedSource:
    """Everything a source sends for one shuffle.  ``ff_batches`` and
    ``bp_batches`` hold EncryptedBatch objects, or plaintext arrays when built
    for a plaintext engine."""

    source_id: int
    shuffle_index: int
    ff_batches: list
    bp_batches: list
    labels: list
    masks: list


@dataclass
class Step:
    kind: str
    group: int
    ff: list
    bp: list
    Y: np.ndarray
    mask: np.ndarray


@dataclass(frozen=True)
class GuardVerdict:
    passed: bool
    n_epoch: int
    n_shuffle: int
    n_feature: int

    def __bool__(self):
        return self.passed

    @property
    def reason(self) -> str:
        rel = "<" if self.passed else ">="
        return f"n_epoch/n_shuffle = {self.n_epoch}/{self.n_shuffle} {rel} n_feature = {self.n_feature}"


# ---------------------------------------------------------------- meta + plan


def exchange_meta(metas: Sequence[SourceMeta], p_batch: int, **plan_fields):
    """Validate the sources' meta information and build the plan.

    Every full-feature source forms its own group; all feature-slice sources
    form one vertical group whose widths must add up to the full feature
    count.
    """
    metas = sorted(metas, key=lambda m: m.source_id)
    if not metas:
        raise TrainingError("no data sources")
    if len({m.source_id for m in metas}) != len(metas):
        raise TrainingError("duplicate source ids")
    full = [m for m in metas if m.dataset_type == T_F]
    part = [m for m in metas if m.dataset_type == T_P]
    if len(full) + len(part) != len(metas):
        raise TrainingError("unknown dataset type")
    mode = HYBRID if full and part else (HPT if full else VPT)

    groups = []
    if len({m.feature_count for m in full}) > 1:
        raise TrainingError(
            f"full-feature sources disagree on feature count: {sorted({m.feature_count for m in full})}"
        )
    for m in full:
        if not m.has_labels:
            raise TrainingError(f"full-feature source {m.source_id} holds no labels")
        groups.append(SourceGroup(HPT_ROW, (m.source_id,), (m.feature_count,), m.source_id))
    if part:
        counts = {m.sample_count for m in part}
        if len(counts) != 1:
            raise TrainingError(f"feature-slice sources disagree on sample count: {sorted(counts)}")
        holders = [m.source_id for m in part if m.has_labels]
        if len(holders) != 1:
            raise TrainingError(f"exactly one feature-slice source must hold labels, got {holders}")
        groups.append(
            SourceGroup(
                VPT_SLICE,
                tuple(m.source_id for m in part),
                tuple(m.feature_count for m in part),
                holders[0],
            )
        )
    n_feature = groups[0].n_feature
    for g in groups:
        if g.n_feature != n_feature:
            raise TrainingError(
                f"group {g.source_ids} covers {g.n_feature} features, expected {n_feature}"
            )
        if g.n_feature == 0:
            raise TrainingError(f"group {g.source_ids} is empty")
    min_rows = min(m.sample_count for m in metas)
    if not 1 <= p_batch <= min_rows:
        raise TrainingError(f"p_batch = {p_batch} must be in [1, {min_rows}]")
    plan = TrainingPlan(mode=mode, p_batch=p_batch, groups=tuple(groups), **plan_fields)
    if plan.arch[0] != n_feature:
        raise TrainingError(f"arch input width {plan.arch[0]} != feature count {n_feature}")
    return plan, list(metas)


def privacy_guard_check(plan: TrainingPlan, n_feature: int | None = None) -> GuardVerdict:
    """Pass iff n_epoch / n_shuffle < n_feature (strict).

    ``n_feature`` defaults to the narrowest source, the weakest position.
    """
    if n_feature is None:
        n_feature = min(w for g in plan.groups for w in g.widths) if plan.groups else plan.n_feature
    return guard_verdict(plan.epochs, plan.n_shuffle, n_feature)


def guard_verdict(n_epoch: int, n_shuffle: int, n_feature: int) -> GuardVerdict:
    return GuardVerdict(n_epoch < n_feature * n_shuffle, n_epoch, n_shuffle, n_feature)


# ------------------------------------------------------------ client side


def _id_hash(v) -> str:
    return hashlib.sha256(str(v).encode()).hexdigest()


def hash_ids(ids) -> list:
    return [_id_hash(v) for v in ids]


def entity_resolution_stub(id_lists: dict, coordinator_seed: int, prehashed: bool = False) -> dict:
    """Inner join on hashed ids, then a seeded shuffle of the joined order.

    Returns ``{source_id: row index array}`` so that row i of every source
    refers to the same entity.  With ``prehashed`` the lists already hold
    ``hash_ids`` output, which is what a remote coordinator receives.
    """
    if not id_lists:
        raise TrainingError("no sources to align")
    hashed = {sid: list(ids) if prehashed else hash_ids(ids) for sid, ids in id_lists.items()}
    common = set.intersection(*(set(h) for h in hashed.values()))
    if not common:
        raise TrainingError("entity resolution found no common ids")
    order = sorted(common)
    rng = np.random.default_rng([int(coordinator_seed), 0x5EED])
    order = [order[i] for i in rng.permutation(len(order))]
    perms = {}
    for sid, hs in hashed.items():
        pos = {h: i for i, h in enumerate(hs)}
        perms[sid] = np.array([pos[h] for h in order], dtype=np.int64)
    return perms


def align_sources(sources: Sequence[DataSource], coordinator_seed: int) -> list:
    """Apply entity resolution to the feature-slice sources that carry ids."""
    part = [s for s in sources if s.dataset_type == T_P and s.ids is not None]
    if not part:
        return list(sources)
    perms = entity_resolution_stub({s.source_id: s.ids for s in part}, coordinator_seed)
    out = []
    for s in sources:
        if s.source_id in perms:
            idx = perms[s.source_id]
            y = None if s.y is None else np.asarray(s.y)[idx]
            ids = [s.ids[i] for i in idx]
            s = DataSource(s.source_id, s.X[idx], y, s.dataset_type, ids)
        out.append(s)
    return out


def shuffle_order(n: int, client_seed: int, tag: int, shuffle_index: int) -> np.ndarray:
    """Row order for one shuffle.  Feature-slice sources share ``tag`` = 0 so
    their rows stay aligned; full-feature sources use their own id."""
    return np.random.default_rng([int(client_seed), int(tag), int(shuffle_index)]).permutation(n)


def client_batches(
    source: DataSource, plan: TrainingPlan, shuffle_index: int, client_seed: int
) -> list:
    """Shuffle, cut into ``p_batch`` rows, zero-pad and mask the tail batch."""
    n = source.X.shape[0]
    tag = 0 if source.dataset_type == T_P else source.source_id
    order = shuffle_order(n, client_seed, tag, shuffle_index)
    out = []
    for start in range(0, n, plan.p_batch):
        idx = order[start : start + plan.p_batch]
        k = len(idx)
        X = np.zeros((plan.p_batch, source.X.shape[1]))
        X[:k] = source.X[idx]
        mask = np.zeros(plan.p_batch)
        mask[:k] = 1.0
        Y = None
        if source.y is not None:
            Y = np.zeros((plan.p_batch, plan.n_classes))
            Y[:k] = one_hot(np.asarray(source.y)[idx], plan.n_classes)
        out.append(PlainBatch(X, mask, Y))
    return out


def client_preprocess(
    source: DataSource,
    plan: TrainingPlan,
    reg: Registration | None,
    shuffle_index: int = 0,
    client_seed: int = 0,
    rng=None,
) -> PreprocessedSource:
    """Batch and encrypt one source for one shuffle; ``reg=None`` keeps the
    batches in plaintext for the reference engines."""
    batches = client_batches(source, plan, shuffle_index, client_seed)
    codec = FixedPointCodec(plan.eps_client, plan.client_bound)
    ff, bp = [], []
    for b in batches:
        if reg is None:
            ff.append(b.X)
            bp.append(b.X.T.copy())
        elif source.dataset_type == T_F:
            ff.append(s2phc_client_encrypt(codec, reg.si_pk, b.X, rng, source.source_id))
            bp.append(s2phc_client_encrypt(codec, reg.si_pk, b.X.T, rng, source.source_id))
        else:
            if reg.mi_key is None:
                raise TrainingError(f"source {source.source_id} has no multi-input key")
            slot = reg.mi_key.source_id
            ff.append(s2pvc_client_encrypt(codec, reg.mi_key, b.X, rng))
            bp.append(s2phc_client_encrypt(codec, reg.si_pk, b.X.T, rng, slot))
    return PreprocessedSource(
        source.source_id,
        shuffle_index,
        ff,
        bp,
        [b.Y for b in batches],
        [b.mask for b in batches],
    )


# ------------------------------------------------------------ server side


def group_steps(group_index: int, group: SourceGroup, prepped: dict) -> list:
    members = [prepped[sid] for sid in group.source_ids]
    n_batches = {len(m.ff_batches) for m in members}
    if len(n_batches) != 1:
        raise TrainingError(f"group {group.source_ids} members disagree on batch count")
    holder = prepped[group.label_source]
    steps = []
    for b in range(n_batches.pop()):
        Y = holder.labels[b]
        if Y is None:
            raise TrainingError(f"source {group.label_source} sent no labels")
        steps.append(
            Step(
                group.kind,
                group_index,
                [m.ff_batches[b] for m in members],
                [m.bp_batches[b] for m in members],
                Y,
                holder.masks[b],
            )
        )
    return steps


def hybrid_compose(per_group_steps: Sequence[list]) -> list:
    """Round-robin interleave of the groups' batch streams."""
    if not per_group_steps:
        raise TrainingError("no groups")
    for i, steps in enumerate(per_group_steps):
        if not steps:
            raise TrainingError(f"group {i} has no batches")
    out = []
    for b in range(max(len(s) for s in per_group_steps)):
        out.extend(s[b] for s in per_group_steps if b < len(s))
    return out


def compose_stream(plan: TrainingPlan, prepped: Sequence[PreprocessedSource]) -> list:
    by_id = {p.source_id: p for p in prepped}
    return hybrid_compose([group_steps(i, g, by_id) for i, g in enumerate(plan.groups)])


def server_encode(M, eps_server: int, tau: int):
    """Encode a server matrix after scaling it by its largest magnitude.

    Returns ``(M_int, scale, eligible)``; ``eligible[j]`` says whether column
    j has enough non-zero entries to pass the authority's filter.
    """
    M = np.asarray(M, dtype=np.float64)
    scale = float(np.max(np.abs(M))) if M.size else 0.0
    if scale == 0.0:
        scale = 1.0
    M_int = encode_matrix(FixedPointCodec(eps_server, 1.0), np.clip(M / scale, -1.0, 1.0))
    eligible = np.count_nonzero(M_int, axis=0) >= tau
    return M_int, scale, eligible


class _Layer1Engine:
    """Computes X·W_1 and X^T·σ for one step."""

    def __init__(self):
        self.timings = {"keyreq": 0.0, "decrypt": 0.0}

    def forward(self, step: Step, W1):
        raise NotImplementedError

    def backward(self, step: Step, sigma):
        raise NotImplementedError


class FloatEngine(_Layer1Engine):
    def forward(self, step, W1):
        return np.hstack(step.ff) @ W1

    def backward(self, step, sigma):
        return np.vstack(step.bp) @ sigma


class _EncodedEngine(_Layer1Engine):
    def __init__(self, eps_client: int, eps_server: int, tau: int):
        super().__init__()
        self.eps_client = eps_client
        self.eps_server = eps_server
        self.tau = tau

    def _int_product(self, step, M_int, forward: bool):
        raise NotImplementedError

    def _product(self, step, M, forward: bool):
        M_int, scale, elig = server_encode(M, self.eps_server, self.tau)
        if forward and not elig.all():
            bad = np.flatnonzero(~elig).tolist()
            raise ProtocolAbort(f"weight columns {bad} have fewer than tau = {self.tau} non-zeros")
        n_rows = sum(b.shape[0] for b in step.bp) if not forward else step.mask.shape[0]
        Z_int = np.zeros((n_rows, M.shape[1]), dtype=np.int64)
        if elig.any():
            Z_int[:, elig] = self._int_product(step, M_int[:, elig], forward)
        return decode_product(Z_int, self.eps_client, self.eps_server) * scale

    def forward(self, step, W1):
        return self._product(step, W1, True)

    def backward(self, step, sigma):
        return self._product(step, sigma, False)


class FixedPointEngine(_EncodedEngine):
    """Plaintext reference: same encoding and integer products, no crypto."""

    def __init__(self, eps_client: int, eps_server: int, tau: int, client_bound: float = 1.0):
        super().__init__(eps_client, eps_server, tau)
        self.codec = FixedPointCodec(eps_client, client_bound)

    def _int_product(self, step, M_int, forward):
        X = np.hstack(step.ff) if forward else np.vstack(step.bp)
        return int_matmul(encode_matrix(self.codec, X), M_int)


class EncryptedEngine(_EncodedEngine):
    def __init__(self, cfg: ServerEvalConfig, eps_client: int, tau: int):
        super().__init__(eps_client, cfg.eps_server, tau)
        self.cfg = cfg
        self.timings = cfg.timings

    def _int_product(self, step, M_int, forward):
        if forward and step.kind == VPT_SLICE:
            return s2pvc_server_eval_int(step.ff, M_int, self.cfg)
        return s2phc_server_eval_int(step.ff if forward else step.bp, M_int, self.cfg)


def _emit(sink, rec):
    if sink is not None:
        sink(rec)


def server_train(
    prepped_by_shuffle: Sequence[Sequence[PreprocessedSource]],
    plan: TrainingPlan,
    engine: _Layer1Engine,
    eval_set=None,
    metrics_sink: Callable | None = None,
    unsafe_override: bool = False,
) -> tuple:
    """Run the training loop; returns ``(model, metrics)``.

    Shuffle k's batches are used for epochs [k*period, (k+1)*period).
    """
    verdict = privacy_guard_check(plan)
    if not verdict and not unsafe_override:
        raise PrivacyGuardRefused(f"privacy guard refused: {verdict.reason}")
    if len(prepped_by_shuffle) < plan.n_shuffle:
        raise TrainingError(f"need {plan.n_shuffle} shuffles, got {len(prepped_by_shuffle)}")
    model = init_weights(plan.arch, plan.seed, plan.hidden_activation)
    hp = plan.hyper
    metrics = []
    global_batch = 0
    for epoch in range(plan.epochs):
        steps = compose_stream(plan, prepped_by_shuffle[epoch // plan.shuffle_period])
        for b, step in enumerate(steps):
            t0 = time.perf_counter()
            k0, d0 = engine.timings["keyreq"], engine.timings["decrypt"]
            try:
                A1_pre = engine.forward(step, model.weights[0])
                acts = feed_forward_from(A1_pre, model, step.Y, step.mask)
                grads, sigma = gradients(acts, model, hp.l2)
                sigma = sigma * step.mask[:, None]
                XT_sigma = engine.backward(step, sigma)
            except (ProtocolAbort, FilterRejected, NotInRange, FEError) as exc:
                raise TrainingError(f"aborted at epoch {epoch} batch {b}: {exc}") from exc
            grads[0] = first_layer_grad(XT_sigma, model, acts.n_real, hp.l2)
            loss = cross_entropy(acts.A[-1], step.Y, step.mask)
            apply_grads(model, grads, hp.learning_rate_alpha)
            total = time.perf_counter() - t0
            tk = engine.timings["keyreq"] - k0
            td = engine.timings["decrypt"] - d0
            rec = {
                "epoch": epoch,
                "batch": b,
                "step": global_batch,
                "loss": loss,
                "t_keyreq_ms": tk * 1e3,
                "t_decrypt_ms": td * 1e3,
                "t_plain_ms": max(total - tk - td, 0.0) * 1e3,
            }
            metrics.append(rec)
            _emit(metrics_sink, rec)
            global_batch += 1
    summary = {"summary": True, "steps": global_batch}
    if eval_set is not None:
        summary["accuracy"] = accuracy(model, *eval_set)
    metrics.append(summary)
    _emit(metrics_sink, summary)
    return model, metrics


def jsonl_sink(path):
    def sink(rec):
        with open(path, "a") as fh:
            fh.write(json.dumps(rec) + "\n")

    return sink


# ------------------------------------------------------------ all in one


ENCRYPTED = "encrypted"
FIXED_POINT = "fixed-point"
FLOAT = "float"


def solver_bound(plan: TrainingPlan) -> int:
    """Largest |inner product| either direction can produce."""
    cb = FixedPointCodec(plan.eps_client, plan.client_bound).int_bound
    sb = FixedPointCodec(plan.eps_server, 1.0).int_bound
    return plan.eta * cb * sb


def setup_authority(plan: TrainingPlan, group="demo512", rng=None, log_path=None) -> AuthorityState:
    vg = plan.vertical_group
    eta_vec = vg.widths if vg else ()
    return authority_init(group, plan.eta, eta_vec, len(eta_vec), plan.tau, rng, log_path)


def register_all(state: AuthorityState, plan: TrainingPlan, sources: Sequence[DataSource]) -> dict:
    """Register every source; feature-slice sources get their slot from group order."""
    vg = plan.vertical_group
    regs = {}
    for s in sorted(sources, key=lambda s: s.source_id):
        slot = vg.source_ids.index(s.source_id) + 1 if vg and s.source_id in vg.source_ids else None
        regs[s.source_id] = register_source(state, s.source_id, slot is not None, slot)
    return regs


def make_plan(sources: Sequence[DataSource], p_batch: int, **plan_fields) -> TrainingPlan:
    plan, _ = exchange_meta([s.meta() for s in sources], p_batch, **plan_fields)
    return plan


def train(
    sources: Sequence[DataSource],
    plan_fields: dict,
    engine: str = ENCRYPTED,
    group="demo512",
    client_seed: int = 0,
    coordinator_seed: int = 0,
    eval_set=None,
    metrics_sink: Callable | None = None,
    unsafe_override: bool = False,
    dlog_mode: str = BSGS,
    rng=None,
    log_path=None,
    authority: AuthorityState | None = None,
) -> tuple:
    """Everything in one process.  Returns ``(model, metrics, authority)``;
    ``authority`` is None for the plaintext engines."""
    p_batch = plan_fields.pop("p_batch")
    sources = align_sources(sources, coordinator_seed)
    plan = make_plan(sources, p_batch, **plan_fields)
    verdict = privacy_guard_check(plan)
    if not verdict and not unsafe_override:
        raise PrivacyGuardRefused(f"privacy guard refused: {verdict.reason}")

    state = None
    if engine == ENCRYPTED:
        state = authority or setup_authority(plan, group, rng, log_path)
        regs = register_all(state, plan, sources)
        solver = build_solver(state.params, solver_bound(plan), dlog_mode)
        cfg = ServerEvalConfig(
            FixedPointCodec(plan.eps_server, 1.0),
            solver,
            state,
            si_pk=state.si_pk,
            eta=state.eta,
            eta_vec=state.eta_vec,
            n=state.n,
        )
        eng = EncryptedEngine(cfg, plan.eps_client, plan.tau)
    elif engine == FIXED_POINT:
        regs = {s.source_id: None for s in sources}
        eng = FixedPointEngine(plan.eps_client, plan.eps_server, plan.tau, plan.client_bound)
    elif engine == FLOAT:
        regs = {s.source_id: None for s in sources}
        eng = FloatEngine()
    else:
        raise ValueError(f"unknown engine {engine!r}")

    rng = rng if rng is not None else random.SystemRandom()
    t0 = time.perf_counter()
    prepped = [
        [client_preprocess(s, plan, regs[s.source_id], k, client_seed, rng) for s in sources]
        for k in range(plan.n_shuffle)
    ]
    t_client = time.perf_counter() - t0
    model, metrics = server_train(prepped, plan, eng, eval_set, metrics_sink, unsafe_override)
    metrics[-1]["t_client_ms"] = t_client * 1e3
    return model, metrics, state
