from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zol import diffcore as dc
from zol.diffcore import Graph
from zol.envs import OfflineDataset, collect_donut
from zol.errors import DivergedTrainingError, FormatError, NumericError, ShapeError
from zol.fbmodel import (FBModel, FBTrainConfig, TransitionBatch, act_greedy, fb_td_loss,
                         load_checkpoint, project_z, reconstruct_reward, sample_latent,
                         sample_latents, save_checkpoint, train_fb)

from .oracles import central_difference

TINY = FBTrainConfig(batch_size=32, train_steps=20, d=4, f_hidden=(16,), b_hidden=(8,))


@pytest.fixture(scope="module")
def small_data():
    return collect_donut(2000, 0.6, 0)


def random_batch(model, rng, n=6):
    s = rng.normal(size=(n, model.state_dim))
    return TransitionBatch(s, rng.integers(0, model.n_actions, size=n),
                           rng.normal(size=(n, model.state_dim)),
                           rng.normal(size=(n, model.state_dim)))


class TestProjectZ:
    def test_example(self):
        assert np.array_equal(project_z([2.0, 0.0, 0.0, 0.0]), [2.0, 0.0, 0.0, 0.0])

    def test_zero_rejected(self):
        with pytest.raises(NumericError):
            project_z(np.zeros(3))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=16).filter(
        lambda v: np.linalg.norm(v) > 1e-6))
    def test_norm_and_idempotence(self, z):
        p = project_z(z)
        assert abs(np.linalg.norm(p) - np.sqrt(len(z))) < 1e-9
        assert np.allclose(project_z(p), p, atol=1e-12)


class TestActGreedy:
    def test_single_action(self):
        cfg = replace(TINY, d=2)
        model = FBModel.init(2, np.zeros((1, 2)), cfg, np.random.default_rng(0))
        assert act_greedy(model, np.array([0.5, 0.5]), np.ones(2)) == 0

    def test_tie_breaks_to_lowest_index(self, small_model, monkeypatch):
        monkeypatch.setattr(FBModel, "action_scores", lambda self, s, z, target=False:
                            np.array([[1.0, 3.0, 3.0]]))
        assert act_greedy(small_model, np.zeros(2), np.ones(4)) == 1

    def test_deterministic(self, small_model):
        s, z = np.array([0.4, -0.7]), project_z(np.arange(1.0, 5.0))
        assert act_greedy(small_model, s, z) == act_greedy(small_model, s, z)

    def test_shift_invariance(self, small_model):
        rng = np.random.default_rng(3)
        s = rng.normal(size=(20, 2))
        z = project_z(rng.normal(size=4))
        shift = np.zeros_like(small_model.F.biases[-1])
        shift[:] = 0.37 * z / (z @ z)  # adds 0.37 to every action's score
        shifted = small_model.copy()
        shifted.F.biases[-1] = shifted.F.biases[-1] + shift
        base = small_model.action_scores(s, z)
        assert np.allclose(shifted.action_scores(s, z), base + 0.37)
        assert np.array_equal(act_greedy(shifted, s, z), act_greedy(small_model, s, z))


class TestSampleLatent:
    def test_on_sphere(self, small_model, small_data):
        z = sample_latents(small_model, small_data, np.random.default_rng(0), 500, 0.5)
        assert np.allclose(np.linalg.norm(z, axis=1), 2.0, atol=1e-9)

    def test_sphere_mean_concentrates(self, small_model, small_data):
        z = sample_latents(small_model, small_data, np.random.default_rng(1), 10_000, 1.0)
        assert np.linalg.norm(z.mean(axis=0)) < 0.1 * 2.0

    def test_single_state_is_deterministic(self, small_model):
        one = OfflineDataset(np.array([[0.5, 0.2]]), np.zeros((1, 2)), np.array([[0.5, 0.2]]),
                             np.array([[0.5, 0.2]]))
        expected = project_z(small_model.backward_embed(one.s)[0])
        for seed in range(5):
            z = sample_latent(small_model, one, np.random.default_rng(seed), 0.0)
            assert np.allclose(z, expected, atol=1e-15)

    def test_empty_dataset(self, small_model):
        with pytest.raises(ValueError):
            sample_latent(small_model, OfflineDataset.empty(2, 2), np.random.default_rng(0))


class TestTDLoss:
    def test_gamma_zero_drops_bootstrap(self, small_model):
        model = small_model.copy()
        model.gamma = 0.0
        rng = np.random.default_rng(0)
        batch = random_batch(model, rng)
        z = project_z(rng.normal(size=(6, 4)))
        f = model.forward_embed(batch.s, batch.a_idx, z)
        b_plus = model.backward_embed(batch.s_plus)
        b_next = model.backward_embed(batch.s_next)
        ortho = np.sum((b_plus.T @ b_plus / 6 - np.eye(4)) ** 2)
        expected = np.mean((f @ b_plus.T) ** 2) - 2 * np.mean(np.sum(f * b_next, axis=1)) + ortho
        assert float(fb_td_loss(model, batch, z).value) == pytest.approx(expected, abs=1e-12)

    def test_identical_records_match_single_record(self, small_model):
        rng = np.random.default_rng(1)
        one = random_batch(small_model, rng, n=1)
        z = project_z(rng.normal(size=(1, 4)))
        rep = TransitionBatch(*(np.repeat(x, 5, axis=0) for x in
                                (one.s, one.a_idx, one.s_next, one.s_plus)))
        single = float(fb_td_loss(small_model, one, z).value)
        assert float(fb_td_loss(small_model, rep, np.repeat(z, 5, axis=0)).value) == \
            pytest.approx(single, abs=1e-12)

    def test_orthonormal_embeddings_zero_ortho(self, small_model):
        rng = np.random.default_rng(2)
        batch = random_batch(small_model, rng, n=8)
        z = project_z(rng.normal(size=(8, 4)))
        base = float(fb_td_loss(small_model, batch, z, ortho_coef=0.0).value)
        with_ortho = float(fb_td_loss(small_model, batch, z, ortho_coef=1.0).value)
        b = small_model.backward_embed(batch.s_plus)
        assert with_ortho - base == pytest.approx(np.sum((b.T @ b / 8 - np.eye(4)) ** 2))
        q = np.linalg.qr(rng.normal(size=(8, 4)))[0] * np.sqrt(8)
        g = Graph()
        cov = (g.const(q).T @ g.const(q)) * (1 / 8)
        assert float(dc.vsum(dc.square(cov - np.eye(4))).value) < 1e-24

    def test_shape_mismatch(self, small_model):
        rng = np.random.default_rng(0)
        with pytest.raises(ShapeError):
            fb_td_loss(small_model, random_batch(small_model, rng), np.ones((5, 4)))

    def test_gradients_match_finite_differences(self, small_model):
        model = small_model
        rng = np.random.default_rng(4)
        batch = random_batch(model, rng)
        z = project_z(rng.normal(size=(6, 4)))
        n_f = model.F.n_params()
        theta = np.concatenate([model.F.get_flat(), model.B.get_flat()])
        g = Graph()
        analytic = np.concatenate([x.ravel() for x in g.backward(fb_td_loss(model, batch, z,
                                                                            graph=g))])

        def loss_at(flat):
            m = model.copy()
            m.F.set_flat(flat[:n_f])
            m.B.set_flat(flat[n_f:])
            # target networks carry no gradient, so they stay fixed
            m.F_target, m.B_target = model.F_target, model.B_target
            return float(fb_td_loss(m, batch, z).value)

        for k in rng.choice(theta.size, size=10, replace=False):
            def along(t):
                v = theta.copy()
                v[k] = t[0]
                return loss_at(v)
            numeric = central_difference(along, theta[k:k + 1], 1e-6)[0]
            assert abs(analytic[k] - numeric) / max(1.0, abs(numeric)) < 1e-3


class TestTraining:
    def test_zero_steps_is_noop(self, small_data):
        model, losses = train_fb(small_data, replace(TINY, train_steps=0))
        fresh = FBModel.init(2, model.actions, TINY, np.random.default_rng(TINY.seed))
        assert losses == []
        assert np.array_equal(model.F.get_flat(), fresh.F.get_flat())

    def test_deterministic(self, small_data):
        a, la = train_fb(small_data, TINY)
        b, lb = train_fb(small_data, TINY)
        assert la == lb
        assert np.array_equal(a.F.get_flat(), b.F.get_flat())
        assert np.array_equal(a.B_target.get_flat(), b.B_target.get_flat())

    def test_zero_tau_freezes_targets(self, small_data):
        model, _ = train_fb(small_data, replace(TINY, polyak_tau=0.0))
        fresh = FBModel.init(2, model.actions, TINY, np.random.default_rng(TINY.seed))
        assert np.array_equal(model.F_target.get_flat(), fresh.F.get_flat())
        assert np.array_equal(model.B_target.get_flat(), fresh.B.get_flat())
        assert not np.array_equal(model.F.get_flat(), fresh.F.get_flat())

    def test_too_small_dataset(self, small_data):
        with pytest.raises(ValueError):
            train_fb(collect_donut(10, 0.6, 0), TINY)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_names_step(self, small_data):
        with pytest.raises(DivergedTrainingError) as info:
            train_fb(small_data, replace(TINY, lr=1e300))
        assert info.value.step >= 0

    def test_nearest_compass_action_mapping(self, small_model):
        assert list(small_model.action_index([[0.09, 0.01], [0.0, 0.0], [-0.01, 0.2]])) == [1, 0, 2]

    @pytest.mark.slow
    def test_default_config_loss_halves(self, donut_pretrained):
        _, losses = donut_pretrained
        assert len(losses) == 3000
        assert np.mean(losses[-100:]) < 0.5 * np.mean(losses[:100])


class TestReconstruction:
    def test_zero_latent(self, small_model):
        assert np.all(reconstruct_reward(small_model, np.ones((3, 2)), np.zeros(4)) == 0)

    def test_linear_in_z(self, small_model):
        s = np.random.default_rng(0).normal(size=(7, 2))
        z = np.arange(4.0)
        assert np.allclose(reconstruct_reward(small_model, s, 2 * z),
                           2 * reconstruct_reward(small_model, s, z), atol=1e-14)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, small_data):
        model, _ = train_fb(small_data, TINY)
        save_checkpoint(model, tmp_path / "m")
        back = load_checkpoint(tmp_path / "m")
        for name in ("F", "B", "F_target", "B_target"):
            assert getattr(back, name).get_flat().tobytes() == \
                getattr(model, name).get_flat().tobytes()
        assert back.gamma == model.gamma and np.array_equal(back.actions, model.actions)
        save_checkpoint(back, tmp_path / "n")
        assert (tmp_path / "m").read_bytes() == (tmp_path / "n").read_bytes()

    def test_state_action_flag_survives(self, tmp_path, small_model):
        model = FBModel.init(3, np.arange(4.0)[:, None], replace(TINY, b_uses_action=True),
                             np.random.default_rng(0))
        save_checkpoint(model, tmp_path / "m")
        assert load_checkpoint(tmp_path / "m").b_uses_action

    def test_bad_files(self, tmp_path, small_model):
        save_checkpoint(small_model, tmp_path / "m")
        data = (tmp_path / "m").read_bytes()
        for name, blob, offset in (("magic", b"ZOLX" + data[4:], 0),
                                   ("version", data[:4] + b"\x09\0\0\0" + data[8:], 4)):
            (tmp_path / name).write_bytes(blob)
            with pytest.raises(FormatError) as info:
                load_checkpoint(tmp_path / name)
            assert info.value.offset == offset
        (tmp_path / "t").write_bytes(data[:-3])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(tmp_path / "t")
        (tmp_path / "x").write_bytes(data + b"\0")
        with pytest.raises(FormatError, match="trailing"):
            load_checkpoint(tmp_path / "x")
