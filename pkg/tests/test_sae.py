import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gatebias import ConfigError, DataError, FormatError, NumericError
from gatebias import sae as S
from gatebias.sae import AdamW, SaeHyper, SaeModel


def random_model(d=5, M=8, k=3, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    W_dec = rng.standard_normal((d, M))
    W_dec /= np.linalg.norm(W_dec, axis=0)
    return SaeModel(rng.standard_normal((M, d)).astype(dtype), (0.1 * rng.standard_normal(d)).astype(dtype),
                    W_dec.astype(dtype), k)


def loss_only(model, X):
    err = S.decode(model, S.encode(model, X)) - X
    return float(np.einsum("ij,ij->", err, err)) / X.shape[0]


class TestTopK:
    def test_keeps_largest(self):
        assert S.topk(np.array([3.0, 1.0, 2.0]), 2).tolist() == [3.0, 0.0, 2.0]

    def test_identity_when_k_is_m(self):
        v = np.array([0.5, 2.0, 0.0, 1.0])
        assert np.array_equal(S.topk(v, 4), v)

    def test_lowest_index_wins_ties(self):
        assert S.topk(np.array([2.0, 2.0, 1.0]), 1).tolist() == [2.0, 0.0, 0.0]

    def test_negative_kept_values_clamped(self):
        assert S.topk(np.array([-1.0, -2.0, -3.0]), 2).tolist() == [0.0, 0.0, 0.0]

    @pytest.mark.parametrize("k", [0, 4])
    def test_k_out_of_range(self, k):
        with pytest.raises(ConfigError):
            S.topk(np.zeros(3), k)

    def test_batched_ties(self):
        v = np.array([[1.0, 1.0, 1.0, 0.0], [0.0, 5.0, 5.0, 5.0]])
        out = S.topk(v, 2)
        assert out.tolist() == [[1.0, 1.0, 0.0, 0.0], [0.0, 5.0, 5.0, 0.0]]


class TestEncodeDecode:
    def test_identity_embedding(self):
        m = SaeModel(np.eye(3), np.zeros(3), np.eye(3), 1)
        z = S.encode(m, np.array([0.5, -1.0, 2.0]))
        assert z.tolist() == [0.0, 0.0, 2.0]
        assert S.decode(m, z).tolist() == [0.0, 0.0, 2.0]

    def test_zero_code_gives_bias(self):
        m = random_model()
        assert np.array_equal(S.decode(m, np.zeros(m.M)), m.b_pre)

    def test_planted_atom_round_trip(self):
        rng = np.random.default_rng(2)
        atoms = np.linalg.qr(rng.standard_normal((6, 6)))[0].T
        m = SaeModel.from_dictionary(atoms, 1)
        h = 3 * atoms[4]
        assert np.abs(S.decode(m, S.encode(m, h)) - h).max() <= 1e-6

    def test_width_mismatch(self):
        m = random_model()
        with pytest.raises(DataError):
            S.encode(m, np.zeros(m.d + 1))
        with pytest.raises(DataError):
            S.decode(m, np.zeros(m.M + 1))

    def test_bad_shapes(self):
        with pytest.raises(DataError):
            SaeModel(np.zeros((4, 3)), np.zeros(3), np.zeros((3, 5)), 1)

    def test_default_dims(self):
        assert S.default_dims(64) == (512, 2)
        assert S.default_dims(4096) == (32768, 128)


class TestGradients:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_central_differences(self, seed):
        model = random_model(seed=seed)
        X = np.random.default_rng(seed + 10).standard_normal((6, model.d))
        _, grads, _ = S.loss_and_grads(model, X)
        eps = 1e-6
        for name in ("W_enc", "b_pre", "W_dec"):
            p = getattr(model, name)
            fd = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + eps
                up = loss_only(model, X)
                p[idx] = old - eps
                down = loss_only(model, X)
                p[idx] = old
                fd[idx] = (up - down) / (2 * eps)
            rel = np.linalg.norm(grads[name] - fd) / max(np.linalg.norm(fd), 1e-12)
            assert rel <= 1e-4, name

    def test_loss_value(self):
        model = random_model()
        X = np.random.default_rng(3).standard_normal((4, model.d))
        loss, _, z = S.loss_and_grads(model, X)
        assert loss == pytest.approx(loss_only(model, X), rel=1e-12)
        assert np.array_equal(z, S.encode(model, X))


class TestRenormalize:
    def test_scales_columns(self):
        m = SaeModel(np.eye(2), np.zeros(2), np.array([[2.0, 0.0], [0.0, 1.0]]), 1)
        out = S.renormalize_decoder(m)
        assert np.allclose(out.W_dec, np.eye(2), atol=1e-12)

    def test_unit_columns_unchanged(self):
        m = random_model()
        assert np.abs(S.renormalize_decoder(m).W_dec - m.W_dec).max() <= 1e-12

    def test_zero_column_reports_index(self):
        W = np.eye(3)
        W[:, 1] = 0
        with pytest.raises(NumericError, match="column 1"):
            S.renormalize_decoder(SaeModel(np.eye(3), np.zeros(3), W, 1))


class TestSchedule:
    def test_shape(self):
        lrs = [S.wsd_lr(t, 100, 1.0, 0.1, 0.8) for t in range(100)]
        assert lrs[0] == pytest.approx(0.1) and lrs[9] == pytest.approx(1.0)
        assert all(v == 1.0 for v in lrs[10:90])
        assert lrs[90] == pytest.approx(1.0) and lrs[99] == pytest.approx(0.1)
        assert all(a >= b for a, b in zip(lrs[90:], lrs[91:]))

    def test_hyper_fractions_must_sum_to_one(self):
        with pytest.raises(Exception, match="sum to 1"):
            SaeHyper(warmup=0.2, stable=0.8, decay=0.1)

    def test_library_defaults(self):
        h = SaeHyper()
        assert (h.learning_rate, h.adam_beta1, h.adam_beta2, h.batch_tokens) == (5e-4, 0.9, 0.999, 16384)
        assert (h.warmup, h.stable, h.decay) == (0.1, 0.8, 0.1)


class TestAdamW:
    def test_matches_reference_update(self):
        p = {"w": np.array([1.0, -2.0])}
        opt = AdamW(p, 0.9, 0.999, 1e-8, weight_decay=0.1)
        g1, g2 = np.array([0.5, -1.0]), np.array([0.2, 0.3])
        opt.step({"w": g1}, 0.01)
        opt.step({"w": g2}, 0.01)
        # hand-rolled reference
        w = np.array([1.0, -2.0])
        m = v = np.zeros(2)
        for t, g in enumerate((g1, g2), start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w = w * (1 - 0.01 * 0.1)
            w = w - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert np.allclose(p["w"], w, rtol=1e-12)


def orthonormal(d, seed=0):
    return np.linalg.qr(np.random.default_rng(seed).standard_normal((d, d)))[0].T


def one_sparse(atoms, n, seed=0):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, atoms.shape[0], n)
    return (rng.uniform(0.5, 1.5, n)[:, None] * atoms[idx]).astype(np.float32)


class TestTrain:
    def test_one_sparse_reconstruction(self):
        atoms = orthonormal(8)
        X = one_sparse(atoms, 4000)
        h = SaeHyper(batch_tokens=128, stage1_steps=3000, n_features=32, k=1, learning_rate=2e-3)
        model, trace = S.train(X, hyper=h, seed=0)
        diag = S.diagnostics(model, X)
        assert diag["recon_mse"] * X.shape[1] <= 1e-3 * X.var(axis=0).sum()
        assert len(trace.losses) == 3000 and trace.stage_boundary == 3000

    def test_constant_input(self):
        X = np.tile(np.array([1.0, -2.0, 0.5], np.float32), (64, 1))
        h = SaeHyper(batch_tokens=16, stage1_steps=300, n_features=6, k=1, learning_rate=1e-2)
        _, trace = S.train(X, hyper=h)
        assert trace.losses[-1] < 1e-3 * trace.losses[0] + 1e-6

    def test_decoder_unit_norm_after_every_step(self):
        X = one_sparse(orthonormal(6), 500)
        worst = []
        h = SaeHyper(batch_tokens=32, stage1_steps=50, stage2_steps=20, n_features=12, k=2)
        S.train(X, X[:100] * 2, h, callback=lambda t, m, l: worst.append(np.abs(m.decoder_norms - 1).max()))
        assert len(worst) == 70 and max(worst) <= 1e-6

    def test_stage_boundary_jump(self):
        atoms = orthonormal(8, seed=1)
        stage1 = one_sparse(atoms[:4], 3000)
        stage2 = one_sparse(atoms[4:], 3000, seed=1) * 3
        h = SaeHyper(batch_tokens=64, stage1_steps=600, stage2_steps=600, n_features=32, k=1, learning_rate=2e-3)
        _, trace = S.train(stage1, stage2, h)
        avg = trace.running_average(50)
        b = trace.stage_boundary
        assert trace.losses[b] > 2 * avg[b - 1]
        assert avg[-1] < trace.losses[b]

    def test_deterministic(self):
        X = one_sparse(orthonormal(5), 300)
        h = SaeHyper(batch_tokens=16, stage1_steps=40, n_features=10, k=2)
        a, ta = S.train(X, hyper=h, seed=3)
        b, tb = S.train(X, hyper=h, seed=3)
        assert np.array_equal(a.W_dec, b.W_dec) and np.array_equal(ta.losses, tb.losses)

    def test_empty_stage1(self):
        with pytest.raises(DataError):
            S.train(np.zeros((0, 4), np.float32), hyper=SaeHyper(stage1_steps=1))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_names_step(self):
        X = np.full((10, 3), np.inf, np.float32)
        with pytest.raises(NumericError, match="step 0"):
            S.train(X, hyper=SaeHyper(batch_tokens=4, stage1_steps=2, n_features=4, k=1))

    def test_running_average_restarts(self):
        t = S.LossTrace(np.array([1.0, 3.0, 10.0, 20.0]), 2)
        assert t.running_average(10).tolist() == [1.0, 2.0, 10.0, 15.0]


class TestDiagnostics:
    def test_perfect_reconstruction(self):
        atoms = orthonormal(4)
        X = one_sparse(atoms, 100).astype(np.float64)
        d = S.diagnostics(SaeModel.from_dictionary(atoms, 1), X)
        assert d["fraction_variance_explained"] == pytest.approx(1.0, abs=1e-12)

    def test_zero_encoder_all_dead(self):
        m = SaeModel(np.zeros((6, 3)), np.zeros(3), np.eye(3, 6), 2)
        assert S.diagnostics(m, np.ones((5, 3)))["dead_feature_count"] == 6

    def test_empty(self):
        with pytest.raises(DataError):
            S.diagnostics(random_model(), np.zeros((0, 5)))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = random_model(dtype=np.float32)
        p = tmp_path / "m.ckpt"
        S.save_checkpoint(m, p, {"seed": 4})
        back = S.load_checkpoint(p)
        for name in ("W_enc", "b_pre", "W_dec"):
            assert getattr(back, name).tobytes() == getattr(m, name).tobytes()
        assert back.k == m.k
        h = np.random.default_rng(0).standard_normal(m.d).astype(np.float32)
        assert np.array_equal(S.encode(back, h), S.encode(m, h))
        assert json.loads((tmp_path / "m.ckpt.json").read_text())["seed"] == 4

    def test_truncated(self, tmp_path):
        p = tmp_path / "m.ckpt"
        S.save_checkpoint(random_model(), p)
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(FormatError):
            S.load_checkpoint(p)

    def test_sidecar_mismatch(self, tmp_path):
        p = tmp_path / "m.ckpt"
        S.save_checkpoint(random_model(), p)
        (tmp_path / "m.ckpt.json").write_text(json.dumps({"d": 1, "M": 8, "K": 3}))
        with pytest.raises(FormatError, match="sidecar"):
            S.load_checkpoint(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "m.ckpt"
        S.save_checkpoint(random_model(), p)
        p.write_bytes(b"NOPE" + p.read_bytes()[4:])
        with pytest.raises(FormatError, match="magic"):
            S.load_checkpoint(p)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_code_sparsity_and_sign(seed, k):
    m = random_model(d=6, M=8, k=k, seed=seed)
    z = S.encode(m, np.random.default_rng(seed).standard_normal((5, 6)))
    assert np.all((z != 0).sum(axis=1) <= k) and z.min() >= 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_reconstruction_error_non_increasing_in_k(seed):
    # an orthonormal tied dictionary makes each added feature a projection that can only help
    atoms = orthonormal(6, seed=seed)
    h = np.random.default_rng(seed).standard_normal(6)
    errs = []
    for k in range(1, 7):
        m = SaeModel.from_dictionary(atoms, k)
        errs.append(np.linalg.norm(S.decode(m, S.encode(m, h)) - h))
    assert all(a >= b - 1e-12 for a, b in zip(errs, errs[1:]))
