"""Run configuration: a flat TOML key/value file shared by every role."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .data import CSV, MNIST_IDX, DatasetSpec, load_dataset
from .nn import Hyperparams
from .trainer import HPT, HYBRID, T_F, T_P, VPT, DataSource

ROLES = ("all-in-one", "tpa", "server", "client")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    role: str = "all-in-one"
    mode: str = HPT
    # crypto
    group: str = "demo512"
    tau: int = 2
    eps_client: int = 2
    eps_server: int = 2
    dlog_mode: str = "bsgs"
    # plan
    arch: list = field(default_factory=lambda: [784, 128, 10])
    hidden_activation: str = "sigmoid"
    learning_rate: float = 1.0
    l2: float = 0.0
    p_batch: int = 50
    epochs: int = 5
    shuffle_period: int = 5
    seed: int = 0
    client_seed: int = 0
    coordinator_seed: int = 0
    # partitioning
    n_sources: int = 5
    n_full_sources: int = 1
    # data
    data_format: str = MNIST_IDX
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_csv: str = ""
    test_csv: str = ""
    label_column: str = "label"
    normalize: bool = True
    n_train: int = 0
    n_test: int = 0
    # io and transport
    out_dir: str = "nnemd-out"
    tpa_host: str = "127.0.0.1"
    tpa_port: int = 7301
    server_host: str = "127.0.0.1"
    server_port: int = 7302
    source_id: int = 0
    shared_secret: str = ""
    max_frame_bytes: int = 256 * 2**20
    connect_timeout: float = 60.0
    unsafe_override_privacy_guard: bool = False
    # bench
    bench_depths: list = field(default_factory=lambda: [1, 3, 5])
    bench_width: int = 64
    bench_batch: int = 60
    bench_modes: list = field(default_factory=lambda: [HPT, VPT])
    bench_steps: int = 2
    base_dir: str = "."

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"unknown role {self.role!r}")
        if self.mode not in (HPT, VPT, HYBRID):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.role == "client" and self.source_id < 1:
            raise ConfigError("role = client requires source_id >= 1")
        if self.n_sources < 1:
            raise ConfigError("n_sources must be >= 1")
        if self.mode == HYBRID and not 1 <= self.n_full_sources <= self.n_sources - 2:
            raise ConfigError("hybrid needs at least one full source and two slice sources")

    def path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else Path(self.base_dir) / q

    def hyper(self) -> Hyperparams:
        return Hyperparams(self.learning_rate, self.l2, self.p_batch, self.epochs, self.seed)

    def plan_fields(self) -> dict:
        return dict(
            p_batch=self.p_batch,
            arch=tuple(self.arch),
            epochs=self.epochs,
            shuffle_period=self.shuffle_period,
            eps_client=self.eps_client,
            eps_server=self.eps_server,
            hyper=self.hyper(),
            hidden_activation=self.hidden_activation,
            tau=self.tau,
        )


DIGEST_FIELDS = (
    "mode", "group", "tau", "eps_client", "eps_server", "dlog_mode", "arch",
    "hidden_activation", "learning_rate", "l2", "p_batch", "epochs",
    "shuffle_period", "seed", "n_sources", "n_full_sources", "shared_secret",
)


def run_digest(cfg: RunConfig) -> str:
    """Digest of everything the roles must agree on (plus the shared secret)."""
    body = {k: getattr(cfg, k) for k in DIGEST_FIELDS}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def load_config(path, **overrides) -> RunConfig:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    for k, v in raw.items():
        if isinstance(v, dict):
            raise ConfigError(f"config must be flat; {k!r} is a table")
    raw.setdefault("base_dir", str(path.parent))
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**raw)


# ------------------------------------------------------------ partitioning


def source_layout(cfg: RunConfig) -> list:
    """``[(source_id, dataset_type, feature_range, holds_labels)]`` derived
    from the config alone, so every role agrees on it without data."""
    n_feature = cfg.arch[0]
    if cfg.mode == HPT:
        return [(k, T_F, (0, n_feature), True) for k in range(1, cfg.n_sources + 1)]
    n_full = cfg.n_full_sources if cfg.mode == HYBRID else 0
    n_slice = cfg.n_sources - n_full
    if n_slice > n_feature:
        raise ConfigError(f"{n_slice} slice sources for {n_feature} features")
    out = [(k, T_F, (0, n_feature), True) for k in range(1, n_full + 1)]
    cuts = np.array_split(np.arange(n_feature), n_slice)
    for i, c in enumerate(cuts):
        out.append((n_full + i + 1, T_P, (int(c[0]), int(c[-1]) + 1), i == 0))
    return out


def crypto_dims(cfg: RunConfig) -> tuple:
    """``(eta, eta_vec)`` for the authority."""
    eta = max(cfg.arch[0], cfg.p_batch)
    eta_vec = tuple(b - a for _, t, (a, b), _ in source_layout(cfg) if t == T_P)
    return eta, eta_vec


def partition(cfg: RunConfig, X, y) -> list:
    """Split a labelled training set into the configured sources.

    Samples are permuted with the run seed first; full-feature sources get
    disjoint row blocks, slice sources share one block and split its columns.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.shape[1] != cfg.arch[0]:
        raise ConfigError(f"data has {X.shape[1]} features, arch expects {cfg.arch[0]}")
    order = np.random.default_rng([int(cfg.seed), 1]).permutation(X.shape[0])
    layout = source_layout(cfg)
    n_full = sum(1 for _, t, _, _ in layout if t == T_F)
    n_blocks = n_full + (1 if n_full < len(layout) else 0)
    blocks = np.array_split(order, n_blocks)
    sources = []
    for sid, t, (a, b), labels in layout:
        if t == T_F:
            rows = blocks[sid - 1]
            sources.append(DataSource(sid, X[rows], y[rows], T_F))
        else:
            rows = blocks[-1]
            sources.append(
                DataSource(
                    sid, X[rows][:, a:b], y[rows] if labels else None, T_P, ids=rows.tolist()
                )
            )
    return sources


def _dataset_specs(cfg: RunConfig):
    if cfg.data_format == MNIST_IDX:
        train = (cfg.path(cfg.train_images), cfg.path(cfg.train_labels))
        test = (cfg.path(cfg.test_images), cfg.path(cfg.test_labels)) if cfg.test_images else None
    elif cfg.data_format == CSV:
        train = (cfg.path(cfg.train_csv),)
        test = (cfg.path(cfg.test_csv),) if cfg.test_csv else None
    else:
        raise ConfigError(f"unknown data_format {cfg.data_format!r}")
    mk = lambda paths, n: DatasetSpec(
        cfg.data_format, paths, cfg.normalize, None, (0, n) if n else None, cfg.label_column
    )
    return mk(train, cfg.n_train), (mk(test, cfg.n_test) if test else None)


def load_data(cfg: RunConfig) -> tuple:
    """``(train X, train y, eval set or None)``."""
    train_spec, test_spec = _dataset_specs(cfg)
    X, y = load_dataset(train_spec)
    if y is None:
        raise ConfigError("training data needs labels")
    eval_set = load_dataset(test_spec) if test_spec else None
    return X, y, eval_set
