import random

import numpy as np
import pytest

from nnemd.authority import authority_init
from nnemd.feip_single import si_decrypt, si_derive_key
from nnemd.dlog import build_solver
from nnemd.encoding import FixedPointCodec, encode_matrix
from nnemd.nn import Hyperparams, checkpoint_bytes
from nnemd.protocols import HPT_ROW, VPT_SLICE, ProtocolAbort
from nnemd.trainer import (
    ENCRYPTED,
    FIXED_POINT,
    FLOAT,
    HPT,
    HYBRID,
    T_F,
    T_P,
    VPT,
    DataSource,
    FloatEngine,
    PrivacyGuardRefused,
    SourceMeta,
    TrainingError,
    align_sources,
    client_batches,
    client_preprocess,
    compose_stream,
    entity_resolution_stub,
    exchange_meta,
    guard_verdict,
    hybrid_compose,
    make_plan,
    privacy_guard_check,
    register_all,
    server_encode,
    server_train,
    setup_authority,
    train,
)


def toy_data(n=8, seed=0):
    r = np.random.default_rng(seed)
    X = np.round(r.uniform(0, 1, (n, 4)), 3)
    y = (X[:, 0] + X[:, 1] > X[:, 2] + X[:, 3]).astype(int)
    return X, y


def fields(**kw):
    base = dict(
        arch=(4, 3, 2),
        p_batch=4,
        epochs=2,
        shuffle_period=1,
        eps_client=2,
        eps_server=2,
        hyper=Hyperparams(learning_rate_alpha=0.5, seed=3),
    )
    base.update(kw)
    return base


def hpt_sources():
    X1, y1 = toy_data(8, 1)
    X2, y2 = toy_data(8, 2)
    return [DataSource(1, X1, y1), DataSource(2, X2, y2)]


def vpt_sources(X, y):
    return [DataSource(1, X[:, :2], y, T_P), DataSource(2, X[:, 2:], None, T_P)]


def same_weights(a, b):
    return checkpoint_bytes(a) == checkpoint_bytes(b)


class TestExchangeMeta:
    def test_hpt_plan(self):
        metas = [SourceMeta(i, T_F, 12000, 784, True) for i in range(1, 6)]
        plan, _ = exchange_meta(metas, 50, arch=(784, 128, 10), epochs=2, shuffle_period=1)
        assert plan.mode == HPT and len(plan.groups) == 5
        assert all(g.kind == HPT_ROW for g in plan.groups)

    def test_vpt_plan(self):
        widths = [157, 157, 157, 157, 156]
        metas = [SourceMeta(i + 1, T_P, 60000, w, i == 0) for i, w in enumerate(widths)]
        plan, _ = exchange_meta(metas, 50, arch=(784, 128, 10), epochs=2, shuffle_period=1)
        assert plan.mode == VPT and plan.vertical_group.widths == tuple(widths)
        assert plan.vertical_group.label_source == 1

    def test_hybrid_plan(self):
        metas = [SourceMeta(1, T_F, 8, 4, True), SourceMeta(2, T_P, 8, 2, True), SourceMeta(3, T_P, 8, 2, False)]
        plan, _ = exchange_meta(metas, 4, arch=(4, 2), epochs=1, shuffle_period=1)
        assert plan.mode == HYBRID and [g.kind for g in plan.groups] == [HPT_ROW, VPT_SLICE]

    @pytest.mark.parametrize(
        "metas",
        [
            [SourceMeta(1, T_P, 8, 2, True), SourceMeta(2, T_P, 9, 2, False)],
            [SourceMeta(1, T_P, 8, 2, True), SourceMeta(2, T_P, 8, 2, True)],
            [SourceMeta(1, T_P, 8, 2, False), SourceMeta(2, T_P, 8, 2, False)],
            [SourceMeta(1, T_F, 8, 4, True), SourceMeta(2, T_F, 8, 3, True)],
            [SourceMeta(1, T_F, 8, 4, False)],
            [SourceMeta(1, T_F, 8, 4, True), SourceMeta(1, T_F, 8, 4, True)],
            [SourceMeta(1, T_F, 8, 4, True), SourceMeta(2, T_P, 8, 3, True)],
            [],
        ],
    )
    def test_invalid(self, metas):
        with pytest.raises(TrainingError):
            exchange_meta(metas, 4, arch=(4, 2), epochs=1, shuffle_period=1)

    def test_arch_and_batch_checks(self):
        metas = [SourceMeta(1, T_F, 8, 4, True)]
        with pytest.raises(TrainingError):
            exchange_meta(metas, 4, arch=(5, 2), epochs=1, shuffle_period=1)
        with pytest.raises(TrainingError):
            exchange_meta(metas, 9, arch=(4, 2), epochs=1, shuffle_period=1)


class TestEntityResolution:
    def test_identical_sets(self):
        ids = list(range(20))
        perms = entity_resolution_stub({1: ids, 2: ids[::-1]}, 7)
        assert sorted(perms[1].tolist()) == ids and len(perms[2]) == 20
        assert [ids[i] for i in perms[1]] == [ids[::-1][i] for i in perms[2]]

    def test_partial_overlap(self):
        a = [f"u{i}" for i in range(12)]
        b = [f"u{i}" for i in range(2, 12)] + [f"v{i}" for i in range(5)]
        perms = entity_resolution_stub({1: a, 2: b}, 0)
        common = set(a) & set(b)  # set-intersection oracle
        assert len(perms[1]) == len(perms[2]) == len(common) == 10
        assert [a[i] for i in perms[1]] == [b[i] for i in perms[2]]

    def test_disjoint(self):
        with pytest.raises(TrainingError):
            entity_resolution_stub({1: [1, 2], 2: [3, 4]}, 0)

    def test_align_sources_reorders_labels(self):
        X = np.arange(10.0).reshape(5, 2)
        ids_a, ids_b = [0, 1, 2, 3, 4], [4, 3, 2, 1, 0]
        a = DataSource(1, X, np.arange(5), T_P, ids_a)
        b = DataSource(2, X[::-1].copy(), None, T_P, ids_b)
        out = align_sources([a, b], 3)
        assert np.array_equal(out[0].X, out[1].X)
        assert out[0].ids == out[1].ids and list(out[0].y) == out[0].ids


class TestPreprocess:
    def test_hpt_batch_shapes(self):
        src = hpt_sources()[0]
        plan = make_plan([src], **fields())
        p = client_preprocess(src, plan, None)
        assert len(p.ff_batches) == len(p.bp_batches) == 2
        assert p.ff_batches[0].shape == (4, 4) and p.bp_batches[0].shape == (4, 4)
        assert np.array_equal(p.bp_batches[1], p.ff_batches[1].T)

    def test_vpt_slice_rows(self):
        X, y = toy_data(8)
        srcs = [DataSource(1, X[:, :3], y, T_P), DataSource(2, X[:, 3:], None, T_P)]
        plan = make_plan(srcs, **fields(epochs=1))
        state = setup_authority(plan, "test64", random.Random(0))
        regs = register_all(state, plan, srcs)
        p = client_preprocess(srcs[0], plan, regs[1], rng=random.Random(1))
        assert all(b.shape == (3, 4) for b in p.bp_batches)
        assert all(b.kind == VPT_SLICE and b.shape == (4, 3) for b in p.ff_batches)

    def test_tail_batch_is_padded_and_masked(self):
        X, y = toy_data(10)
        src = DataSource(1, X, y)
        plan = make_plan([src], **fields())
        batches = client_batches(src, plan, 0, 0)
        assert len(batches) == 3
        assert batches[-1].mask.tolist() == [1, 1, 0, 0]
        assert not batches[-1].X[2:].any() and not batches[-1].Y[2:].any()

    def test_white_box_round_trip(self):
        # decrypting with unit keys straight from the master secret recovers the encoded X
        src = hpt_sources()[0]
        plan = make_plan([src], **fields())
        state = setup_authority(plan, "test64", random.Random(2))
        regs = register_all(state, plan, [src])
        p = client_preprocess(src, plan, regs[1], rng=random.Random(3))
        raw = client_batches(src, plan, 0, 0)
        solver = build_solver(state.params, 10**4)
        for batch, plain in zip(p.ff_batches, raw):
            want = encode_matrix(FixedPointCodec(2, 1.0), plain.X)
            for ct, row in zip(batch.rows, want):
                for j in range(4):
                    unit = [0] * 4
                    unit[j] = 1
                    fk = si_derive_key(state.si_msk, unit)
                    assert si_decrypt(state.si_pk, ct, fk, solver) == row[j]


class TestGuard:
    @pytest.mark.parametrize(
        "n_epoch,n_shuffle,n_feature,ok",
        [(10, 10, 784, True), (800, 1, 784, False), (784, 1, 784, False), (783, 1, 784, True)],
    )
    def test_table(self, n_epoch, n_shuffle, n_feature, ok):
        assert bool(guard_verdict(n_epoch, n_shuffle, n_feature)) is ok

    def test_uses_narrowest_source(self):
        X, y = toy_data(8)
        srcs = [DataSource(1, X[:, :1], y, T_P), DataSource(2, X[:, 1:], None, T_P)]
        plan = make_plan(srcs, **fields(epochs=2, shuffle_period=2))
        v = privacy_guard_check(plan)
        assert not v and v.n_feature == 1 and "refuse" not in v.reason

    def test_refused_run_requests_no_keys(self):
        srcs = hpt_sources()
        plan = make_plan(srcs, **fields(epochs=8, shuffle_period=8))
        state = setup_authority(plan, "test64", random.Random(0))
        with pytest.raises(PrivacyGuardRefused):
            train(srcs, fields(epochs=8, shuffle_period=8), ENCRYPTED, authority=state, group="test64")
        assert state.request_log == []
        assert state.registered_sources == {}

    def test_override(self):
        model, metrics, _ = train(
            hpt_sources(), fields(epochs=8, shuffle_period=8), FLOAT, unsafe_override=True
        )
        assert metrics[-1]["steps"] == 8 * 4


class TestServerEncode:
    def test_scale_and_eligibility(self):
        M = np.array([[0.02, 0.0, 0.0], [-0.04, 0.0, 0.001]])
        M_int, scale, elig = server_encode(M, 2, 2)
        assert scale == 0.04
        assert M_int.tolist() == [[50, 0, 0], [-100, 0, 3]]
        assert elig.tolist() == [True, False, False]

    def test_zero_matrix(self):
        M_int, scale, elig = server_encode(np.zeros((2, 2)), 2, 2)
        assert scale == 1.0 and not M_int.any() and not elig.any()


class TestTraining:
    def test_hpt_encrypted_matches_fixed_point(self):
        rng = random.Random(5)
        enc, m_enc, state = train(hpt_sources(), fields(), ENCRYPTED, group="test64", rng=rng)
        ref, m_ref, _ = train(hpt_sources(), fields(), FIXED_POINT)
        assert same_weights(enc, ref)
        assert [r["loss"] for r in m_enc[:-1]] == [r["loss"] for r in m_ref[:-1]]
        assert all(r.verdict == "issued" for r in state.request_log)

    def test_vpt_encrypted_matches_fixed_point(self):
        X, y = toy_data(8)
        enc, _, _ = train(vpt_sources(X, y), fields(), ENCRYPTED, group="test64", rng=random.Random(1))
        ref, _, _ = train(vpt_sources(X, y), fields(), FIXED_POINT)
        assert same_weights(enc, ref)

    def test_vpt_equals_hpt_on_concatenation(self):
        # a single full source with id 0 shares the slice sources' shuffle stream
        X, y = toy_data(8)
        v, _, _ = train(vpt_sources(X, y), fields(), ENCRYPTED, group="test64", rng=random.Random(1))
        h, _, _ = train([DataSource(0, X, y)], fields(), ENCRYPTED, group="test64", rng=random.Random(2))
        assert same_weights(v, h)

    def test_hybrid_matches_fixed_point(self):
        X, y = toy_data(8, 4)
        Xf, yf = toy_data(8, 5)
        srcs = lambda: [DataSource(3, Xf, yf)] + vpt_sources(X, y)
        enc, _, _ = train(srcs(), fields(), ENCRYPTED, group="test64", rng=random.Random(1))
        ref, _, _ = train(srcs(), fields(), FIXED_POINT)
        assert same_weights(enc, ref)

    def test_zero_learning_rate(self):
        from nnemd.nn import init_weights

        model, _, _ = train(hpt_sources(), fields(hyper=Hyperparams(learning_rate_alpha=0.0, seed=3)), FIXED_POINT)
        assert same_weights(model, _with_step(init_weights((4, 3, 2), 3), model.step))

    def test_float_close_to_fixed_point(self):
        a, _, _ = train(hpt_sources(), fields(eps_client=4, eps_server=4), FLOAT)
        b, _, _ = train(hpt_sources(), fields(eps_client=4, eps_server=4), FIXED_POINT)
        assert all(np.allclose(x, y, atol=1e-2) for x, y in zip(a.weights, b.weights))

    def test_metrics_records(self, tmp_path):
        from nnemd.trainer import jsonl_sink
        import json

        path = tmp_path / "m.jsonl"
        X, y = toy_data(8, 9)
        _, metrics, _ = train(hpt_sources(), fields(), FIXED_POINT, metrics_sink=jsonl_sink(path), eval_set=(X, y))
        lines = [json.loads(s) for s in path.read_text().splitlines()]
        assert len(lines) == 2 * 4 + 1
        assert set(lines[0]) == {"epoch", "batch", "step", "loss", "t_keyreq_ms", "t_decrypt_ms", "t_plain_ms"}
        assert lines[-1]["summary"] and 0 <= lines[-1]["accuracy"] <= 1

    def test_abort_reports_position(self):
        # any protocol failure mid-run surfaces with its epoch and batch
        class Broken(FloatEngine):
            def forward(self, step, W1):
                raise ProtocolAbort("bad column")

        srcs = hpt_sources()
        plan = make_plan(srcs, **fields())
        prepped = [[client_preprocess(s, plan, None, k) for s in srcs] for k in range(plan.n_shuffle)]
        with pytest.raises(TrainingError, match="epoch 0 batch 0"):
            server_train(prepped, plan, Broken())


def _with_step(model, step):
    model.step = step
    return model


class TestStream:
    def test_hybrid_alternates(self):
        X, y = toy_data(8)
        srcs = [DataSource(3, *toy_data(8, 1))] + vpt_sources(X, y)
        plan = make_plan(srcs, **fields())
        prepped = [client_preprocess(s, plan, None) for s in srcs]
        kinds = [s.kind for s in compose_stream(plan, prepped)]
        assert kinds == [HPT_ROW, VPT_SLICE, HPT_ROW, VPT_SLICE]

    def test_empty_group(self):
        with pytest.raises(TrainingError):
            hybrid_compose([[1, 2], []])
        with pytest.raises(TrainingError):
            hybrid_compose([])

    @pytest.mark.parametrize("epochs,period,n_shuffle", [(4, 1, 4), (4, 2, 2), (5, 2, 3), (3, 5, 1)])
    def test_reshuffle_count(self, epochs, period, n_shuffle):
        seen = []

        class Recording(FloatEngine):
            def forward(self, step, W1):
                seen.append(step.ff[0].tobytes())
                return super().forward(step, W1)

        srcs = hpt_sources()[:1]
        plan = make_plan(srcs, **fields(epochs=epochs, shuffle_period=period, p_batch=8))
        assert plan.n_shuffle == n_shuffle
        prepped = [[client_preprocess(s, plan, None, k, 11) for s in srcs] for k in range(n_shuffle)]
        server_train(prepped, plan, Recording())
        assert len(seen) == epochs and len(set(seen)) == n_shuffle
