"""Role runners: everything in one process, or TPA / server / client over TCP,
plus the per-mini-batch benchmark."""
from __future__ import annotations

import json
import logging
import random
import socket
import threading
import time
from pathlib import Path

import numpy as np

from .authority import FilterRejected, Registration, authority_init, register_source
from .config import RunConfig, crypto_dims, load_data, partition, run_digest, source_layout
from .dlog import build_solver
from .encoding import FixedPointCodec
from .feip_multi import MiFunctionalKey, MiPartyKey
from .feip_single import SiFunctionalKey, SiPublicKey
from .nn import save_checkpoint
from .protocols import EncryptedBatch, ServerEvalConfig
from .trainer import (
    ENCRYPTED,
    T_P,
    DataSource,
    EncryptedEngine,
    PreprocessedSource,
    PrivacyGuardRefused,
    SourceMeta,
    TrainingPlan,
    client_preprocess,
    entity_resolution_stub,
    exchange_meta,
    guard_verdict,
    hash_ids,
    jsonl_sink,
    privacy_guard_check,
    server_train,
    solver_bound,
    train,
)
from .wire import Channel, ConnectionClosed, RemoteAbort, WireError

log = logging.getLogger("nnemd")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_GUARD = 2


def _out(cfg: RunConfig) -> Path:
    out = cfg.path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fresh(path: Path) -> Path:
    if path.exists():
        path.unlink()
    return path


def guard_for_config(cfg: RunConfig):
    """Guard verdict computable from the config alone (narrowest source)."""
    widths = [b - a for _, _, (a, b), _ in source_layout(cfg)]
    n_shuffle = -(-cfg.epochs // cfg.shuffle_period)
    return guard_verdict(cfg.epochs, n_shuffle, min(widths))


def _refuse(cfg: RunConfig) -> bool:
    verdict = guard_for_config(cfg)
    if verdict or cfg.unsafe_override_privacy_guard:
        return False
    print(f"privacy guard refused: {verdict.reason}")
    return True


# ------------------------------------------------------------ all in one


def run_all_in_one(cfg: RunConfig) -> int:
    if _refuse(cfg):
        return EXIT_GUARD
    X, y, eval_set = load_data(cfg)
    sources = partition(cfg, X, y)
    out = _out(cfg)
    try:
        model, metrics, _ = train(
            sources,
            cfg.plan_fields(),
            ENCRYPTED,
            group=cfg.group,
            client_seed=cfg.client_seed,
            coordinator_seed=cfg.coordinator_seed,
            eval_set=eval_set,
            metrics_sink=jsonl_sink(_fresh(out / "metrics.jsonl")),
            unsafe_override=cfg.unsafe_override_privacy_guard,
            dlog_mode=cfg.dlog_mode,
            log_path=_fresh(out / "tpa_log.jsonl"),
        )
    except PrivacyGuardRefused as exc:
        print(str(exc))
        return EXIT_GUARD
    save_checkpoint(model, out / "model.ckpt")
    summary = metrics[-1]
    print(json.dumps(summary))
    return EXIT_OK


# ------------------------------------------------------------ records


def registration_record(reg: Registration) -> dict:
    return {
        "source_id": reg.source_id,
        "si_pk": reg.si_pk.to_record(),
        "eta": reg.eta,
        "mi_key": reg.mi_key.to_record() if reg.mi_key else None,
        "eta_vec": list(reg.eta_vec),
        "n": reg.n,
    }


def registration_from_record(rec: dict) -> Registration:
    mi = MiPartyKey.from_record(rec["mi_key"]) if rec["mi_key"] else None
    return Registration(
        rec["source_id"],
        SiPublicKey.from_record(rec["si_pk"]),
        rec["eta"],
        mi,
        tuple(rec["eta_vec"]),
        rec["n"],
    )


def _matrix(a):
    return None if a is None else np.asarray(a, dtype=np.float64).tolist()


def _connect(host, port, digest, cfg: RunConfig) -> Channel:
    """Connect, retrying while the peer is still starting up."""
    deadline = time.monotonic() + cfg.connect_timeout
    while True:
        try:
            return Channel.connect(host, port, digest, cfg.max_frame_bytes)
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.2)


def _listener(host, port) -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen()
    return srv


# ------------------------------------------------------------ TPA


def run_tpa(cfg: RunConfig) -> int:
    if _refuse(cfg):
        return EXIT_GUARD
    eta, eta_vec = crypto_dims(cfg)
    out = _out(cfg)
    state = authority_init(
        cfg.group, eta, eta_vec, len(eta_vec), cfg.tau, log_path=_fresh(out / "tpa_log.jsonl")
    )
    digest = run_digest(cfg)
    slots = {sid: i + 1 for i, (sid, *_rest) in enumerate(r for r in source_layout(cfg) if r[1] == T_P)}
    stop = threading.Event()

    def public_record():
        return {
            "si_pk": state.si_pk.to_record(),
            "eta": state.eta,
            "eta_vec": list(state.eta_vec),
            "n": state.n,
        }

    def serve(sock):
        ch = Channel(sock, digest, cfg.max_frame_bytes)
        try:
            hello = ch.expect("Hello")
            role = hello.payload.get("role")
            while True:
                msg = ch.recv()
                if msg.type == "RegisterSource":
                    sid = int(msg.payload["source_id"])
                    if role == "server":
                        ch.send("PublicKeyDelivery", public_record())
                        continue
                    try:
                        reg = register_source(state, sid, sid in slots, slots.get(sid))
                    except ValueError as exc:
                        ch.send("Reject", {"reason": str(exc)})
                        continue
                    ch.send("PublicKeyDelivery", registration_record(reg))
                elif msg.type in ("SiKeyRequest", "MiKeyRequest"):
                    if role != "server":
                        ch.send("Reject", {"reason": "only the server may request keys"})
                        continue
                    try:
                        if msg.type == "SiKeyRequest":
                            key = state.serve_si_key(msg.payload["y"])
                            ch.send("SiKeyResponse", {"key": key.to_record()})
                        else:
                            key = state.serve_mi_key(msg.payload["y"])
                            ch.send("MiKeyResponse", {"key": key.to_record()})
                    except FilterRejected as exc:
                        ch.send("Reject", {"reason": exc.reason})
                elif msg.type == "Done":
                    if role == "server":
                        stop.set()
                    return
                else:
                    ch.abort(f"unexpected {msg.type}")
                    return
        except (ConnectionClosed, RemoteAbort, WireError, OSError) as exc:
            log.info("tpa connection ended: %s", exc)
        finally:
            ch.close()

    srv = _listener(cfg.tpa_host, cfg.tpa_port)
    srv.settimeout(0.2)
    try:
        while not stop.is_set():
            try:
                sock, _ = srv.accept()
            except socket.timeout:
                continue
            sock.settimeout(None)
            threading.Thread(target=serve, args=(sock,), daemon=True).start()
    finally:
        srv.close()
    return EXIT_OK


class RemoteAuthority:
    """Server-side stand-in for the authority; same two methods."""

    def __init__(self, channel: Channel):
        self.ch = channel

    def _request(self, type_, y, resp_type, key_cls):
        self.ch.send(type_, {"y": [int(v) for v in y]})
        msg = self.ch.expect(resp_type, "Reject")
        if msg.type == "Reject":
            raise FilterRejected(msg.payload.get("reason", "rejected"))
        return key_cls.from_record(msg.payload["key"])

    def serve_si_key(self, y) -> SiFunctionalKey:
        return self._request("SiKeyRequest", y, "SiKeyResponse", SiFunctionalKey)

    def serve_mi_key(self, y) -> MiFunctionalKey:
        return self._request("MiKeyRequest", y, "MiKeyResponse", MiFunctionalKey)


# ------------------------------------------------------------ server


def run_server(cfg: RunConfig) -> int:
    if _refuse(cfg):
        return EXIT_GUARD
    digest = run_digest(cfg)
    out = _out(cfg)
    eval_set = None
    if cfg.test_images or cfg.test_csv:
        _, _, eval_set = load_data(cfg)

    tpa = _connect(cfg.tpa_host, cfg.tpa_port, digest, cfg)
    tpa.send("Hello", {"role": "server"})
    tpa.send("RegisterSource", {"source_id": 0})
    pub = tpa.expect("PublicKeyDelivery").payload
    si_pk = SiPublicKey.from_record(pub["si_pk"])

    n_clients = len(source_layout(cfg))
    srv = _listener(cfg.server_host, cfg.server_port)
    conns: dict = {}
    metas: dict = {}
    hashes: dict = {}
    try:
        srv.settimeout(cfg.connect_timeout)
        while len(conns) < n_clients:
            sock, _ = srv.accept()
            sock.settimeout(None)
            ch = Channel(sock, digest, cfg.max_frame_bytes)
            try:
                hello = ch.expect("Hello")
            except (WireError, ConnectionClosed) as exc:
                log.warning("rejected client: %s", exc)
                ch.close()
                continue
            sid = int(hello.payload["source_id"])
            if sid in conns:
                ch.abort(f"source {sid} already connected")
                ch.close()
                continue
            meta = ch.expect("MetaInfo").payload
            conns[sid] = ch
            metas[sid] = SourceMeta(**meta["meta"])
            if meta.get("id_hashes") is not None:
                hashes[sid] = meta["id_hashes"]

        if hashes:
            perms = entity_resolution_stub(hashes, cfg.coordinator_seed, prehashed=True)
            for sid, perm in perms.items():
                conns[sid].send("Alignment", {"perm": perm.tolist()})
                m = metas[sid]
                metas[sid] = SourceMeta(sid, m.dataset_type, len(perm), m.feature_count, m.has_labels)

        plan, _ = exchange_meta(list(metas.values()), **cfg.plan_fields())
        verdict = privacy_guard_check(plan)
        if not verdict and not cfg.unsafe_override_privacy_guard:
            for ch in conns.values():
                ch.abort("privacy guard refused")
            print(f"privacy guard refused: {verdict.reason}")
            return EXIT_GUARD

        prepped = [[None] * n_clients for _ in range(plan.n_shuffle)]
        order = sorted(conns)
        for col, sid in enumerate(order):
            prepped_sid = _receive_source(conns[sid], sid, plan)
            for k in range(plan.n_shuffle):
                prepped[k][col] = prepped_sid[k]

        solver = build_solver(si_pk.params, solver_bound(plan), cfg.dlog_mode)
        scfg = ServerEvalConfig(
            FixedPointCodec(plan.eps_server, 1.0),
            solver,
            RemoteAuthority(tpa),
            si_pk=si_pk,
            eta=pub["eta"],
            eta_vec=tuple(pub["eta_vec"]),
            n=pub["n"],
        )
        engine = EncryptedEngine(scfg, plan.eps_client, plan.tau)
        model, metrics = server_train(
            prepped,
            plan,
            engine,
            eval_set,
            jsonl_sink(_fresh(out / "metrics.jsonl")),
            cfg.unsafe_override_privacy_guard,
        )
        save_checkpoint(model, out / "model.ckpt")
        print(json.dumps(metrics[-1]))
        for ch in conns.values():
            ch.send("Done", {})
        tpa.send("Done", {})
        return EXIT_OK
    except Exception as exc:
        for ch in conns.values():
            ch.abort(str(exc))
        raise
    finally:
        for ch in conns.values():
            ch.close()
        tpa.close()
        srv.close()


def _receive_source(ch: Channel, sid: int, plan: TrainingPlan) -> list:
    """Collect one client's batches and labels for every shuffle until Done."""
    shuffles = {
        k: PreprocessedSource(sid, k, [], [], [], []) for k in range(plan.n_shuffle)
    }
    while True:
        msg = ch.expect("CiphertextBatch", "LabelBlock", "Done")
        p = msg.payload
        if msg.type == "Done":
            break
        k = int(p["shuffle"])
        if k not in shuffles:
            raise WireError(f"source {sid} sent unknown shuffle {k}")
        if msg.type == "CiphertextBatch":
            shuffles[k].ff_batches.append(EncryptedBatch.from_record(p["ff"]))
            shuffles[k].bp_batches.append(EncryptedBatch.from_record(p["bp"]))
        else:
            shuffles[k].labels = [None if Y is None else np.asarray(Y, dtype=np.float64) for Y in p["labels"]]
            shuffles[k].masks = [np.asarray(m, dtype=np.float64) for m in p["masks"]]
    return [shuffles[k] for k in range(plan.n_shuffle)]


# ------------------------------------------------------------ client


def client_plan(cfg: RunConfig) -> TrainingPlan:
    return TrainingPlan(mode=cfg.mode, **cfg.plan_fields())


def run_client(cfg: RunConfig) -> int:
    if _refuse(cfg):
        return EXIT_GUARD
    digest = run_digest(cfg)
    X, y, _ = load_data(cfg)
    mine = [s for s in partition(cfg, X, y) if s.source_id == cfg.source_id]
    if not mine:
        print(f"source {cfg.source_id} is not part of this run")
        return EXIT_ERROR
    source: DataSource = mine[0]

    tpa = _connect(cfg.tpa_host, cfg.tpa_port, digest, cfg)
    try:
        tpa.send("Hello", {"role": "client", "source_id": source.source_id})
        tpa.send("RegisterSource", {"source_id": source.source_id})
        msg = tpa.expect("PublicKeyDelivery", "Reject")
        if msg.type == "Reject":
            print(f"registration rejected: {msg.payload.get('reason')}")
            return EXIT_ERROR
        reg = registration_from_record(msg.payload)
        tpa.send("Done", {})
    finally:
        tpa.close()

    ch = _connect(cfg.server_host, cfg.server_port, digest, cfg)
    try:
        ch.send("Hello", {"role": "client", "source_id": source.source_id})
        id_hashes = hash_ids(source.ids) if source.dataset_type == T_P and source.ids is not None else None
        meta = source.meta()
        ch.send("MetaInfo", {"meta": meta.__dict__, "id_hashes": id_hashes})
        if id_hashes is not None:
            perm = np.asarray(ch.expect("Alignment").payload["perm"], dtype=np.int64)
            source = DataSource(
                source.source_id,
                source.X[perm],
                None if source.y is None else np.asarray(source.y)[perm],
                source.dataset_type,
                [source.ids[i] for i in perm],
            )
        plan = client_plan(cfg)
        rng = random.SystemRandom()
        for k in range(plan.n_shuffle):
            pre = client_preprocess(source, plan, reg, k, cfg.client_seed, rng)
            for ff, bp in zip(pre.ff_batches, pre.bp_batches):
                ch.send("CiphertextBatch", {"shuffle": k, "ff": ff.to_record(), "bp": bp.to_record()})
            ch.send(
                "LabelBlock",
                {"shuffle": k, "labels": [_matrix(Y) for Y in pre.labels], "masks": [_matrix(m) for m in pre.masks]},
            )
        ch.send("Done", {})
        ch.expect("Done")
        return EXIT_OK
    except RemoteAbort as exc:
        print(f"server aborted: {exc}")
        return EXIT_ERROR
    finally:
        ch.close()


# ------------------------------------------------------------ bench


def bench(cfg: RunConfig) -> list:
    """Per-mini-batch timing of the encrypted step across hidden depths."""
    X, y, _ = load_data(cfg)
    n = cfg.bench_batch * cfg.bench_steps
    if X.shape[0] < n:
        raise ValueError(f"bench needs {n} samples, dataset has {X.shape[0]}")
    X, y = X[:n], y[:n]
    rows = []
    for mode in cfg.bench_modes:
        for depth in cfg.bench_depths:
            arch = [cfg.arch[0]] + [cfg.bench_width] * depth + [cfg.arch[-1]]
            sub = RunConfig(
                mode=mode,
                group=cfg.group,
                tau=cfg.tau,
                eps_client=cfg.eps_client,
                eps_server=cfg.eps_server,
                dlog_mode=cfg.dlog_mode,
                arch=arch,
                hidden_activation=cfg.hidden_activation,
                learning_rate=cfg.learning_rate,
                p_batch=cfg.bench_batch,
                epochs=1,
                shuffle_period=1,
                seed=cfg.seed,
                n_sources=1 if mode == "HPT" else cfg.n_sources,
                n_full_sources=cfg.n_full_sources,
            )
            sources = partition(sub, X, y)
            _, metrics, _ = train(sources, sub.plan_fields(), ENCRYPTED, group=cfg.group, dlog_mode=cfg.dlog_mode)
            steps = [m for m in metrics if "summary" not in m]
            total = [m["t_keyreq_ms"] + m["t_decrypt_ms"] + m["t_plain_ms"] for m in steps]
            rows.append(
                {
                    "mode": mode,
                    "depth": depth,
                    "arch": arch,
                    "batch": cfg.bench_batch,
                    "steps": len(steps),
                    "t_batch_ms": float(np.mean(total)),
                    "t_keyreq_ms": float(np.mean([m["t_keyreq_ms"] for m in steps])),
                    "t_decrypt_ms": float(np.mean([m["t_decrypt_ms"] for m in steps])),
                    "t_plain_ms": float(np.mean([m["t_plain_ms"] for m in steps])),
                    "t_client_encrypt_ms": metrics[-1]["t_client_ms"] / len(steps),
                }
            )
    return rows


def run_bench(cfg: RunConfig) -> int:
    rows = bench(cfg)
    out = _out(cfg)
    (out / "bench.json").write_text(json.dumps(rows, indent=2))
    print(f"{'mode':<6} {'depth':>5} {'batch ms':>10} {'keyreq ms':>10} {'decrypt ms':>11} {'plain ms':>9}")
    for r in rows:
        print(
            f"{r['mode']:<6} {r['depth']:>5} {r['t_batch_ms']:>10.1f} {r['t_keyreq_ms']:>10.1f}"
            f" {r['t_decrypt_ms']:>11.1f} {r['t_plain_ms']:>9.1f}"
        )
    return EXIT_OK
