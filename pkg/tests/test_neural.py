import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nblpcfg import autodiff as ad
from nblpcfg import grammar as g
from nblpcfg import neural as N
from nblpcfg.inside import inside_nbl


def tiny(binding="D_with_C", seed=1, **kw):
    cfg = dict(embed_dim=8, n_nt=2, n_pt=4, d_h=3, vocab_size=6, binding=binding, seed=seed)
    cfg.update(kw)
    return N.init_model(N.ModelConfig(**cfg))


class TestInit:
    def test_xavier_bound(self):
        np.testing.assert_allclose(N.xavier_bound(256, 256), np.sqrt(6 / 512))
        assert abs(N.xavier_bound(256, 256) - 0.108253) < 1e-6

    def test_deterministic(self):
        a, b = tiny(seed=4), tiny(seed=4)
        for name in a.weights:
            np.testing.assert_array_equal(a[name].value, b[name].value)

    def test_within_bound(self):
        m = tiny()
        for name, (shape, fans) in N.weight_shapes(m.config).items():
            assert m[name].value.shape == shape
            assert np.abs(m[name].value).max() <= N.xavier_bound(*fans)

    def test_fusion_layer_maps_2d_to_d(self):
        assert tiny().weights["f.W"].value.shape == (16, 8)

    def test_config_validation(self):
        with pytest.raises(N.ConfigError):
            N.ModelConfig(d_h=0)
        with pytest.raises(N.ConfigError):
            N.ModelConfig(binding="D_with_X")


class TestResidual:
    def test_zero_weights_identity(self):
        y = ad.constant(np.arange(8.0).reshape(2, 4))
        z = ad.constant(np.zeros((4, 4)))
        np.testing.assert_array_equal(N.residual_block(y, z, z).value, y.value)

    def test_shape_preserved(self):
        rng = np.random.default_rng(0)
        out = N.residual_block(ad.constant(rng.standard_normal((3, 4))), ad.constant(rng.standard_normal((4, 4))),
                               ad.constant(rng.standard_normal((4, 4))))
        assert out.value.shape == (3, 4)

    def test_gradient(self):
        rng = np.random.default_rng(1)
        pts = [rng.standard_normal((2, 4)), rng.standard_normal((4, 4)), rng.standard_normal((4, 4))]
        report = ad.finite_diff_check(lambda xs: ad.sum_all(N.residual_block(*xs)), pts)
        assert report["ok"], report["max_rel_err"]

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            N.residual_block(ad.constant(np.ones((2, 4))), ad.constant(np.ones((3, 4))), ad.constant(np.ones((4, 4))))


class TestDistributions:
    @pytest.mark.parametrize("binding", g.BINDINGS)
    def test_valid(self, binding):
        assert g.validate_params(N.full_params(tiny(binding)), tol=1e-9) == []

    @pytest.mark.parametrize("binding", g.BINDINGS)
    def test_zero_weights_uniform(self, binding):
        m = tiny(binding)
        for leaf in m.weights.values():
            leaf.value[...] = 0.0
        p = N.full_params(m)
        for arr in (p.log_root, p.log_emit, p.log_latent, p.log_head, p.log_nonhead, p.log_word):
            flat = arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr[None]
            np.testing.assert_allclose(flat, np.broadcast_to(flat[:, :1], flat.shape), atol=1e-12)

    def test_bound_axis_size(self):
        m = tiny("D_with_C")
        d = N.compute_global_distributions(m)
        assert d.log_nonhead.value.shape == (3, 6, 2)
        np.testing.assert_allclose(np.exp(d.log_nonhead.value).reshape(3, -1).sum(1), 1.0, atol=1e-12)
        assert d.log_nonhead.value.reshape(3, -1).shape[1] == 2 * m.config.n_sym


class TestSentenceConditionals:
    def test_rows_normalize(self):
        lat = N.compute_sentence_conditionals(tiny(), [[0, 3, 5]]).value
        np.testing.assert_allclose(np.exp(lat).sum(-1), 1.0, atol=1e-12)

    def test_position_independent(self):
        lat = N.compute_sentence_conditionals(tiny(), [[2, 4, 2]]).value
        np.testing.assert_array_equal(lat[:, :, 0], lat[:, :, 2])

    def test_single_latent_state(self):
        lat = N.compute_sentence_conditionals(tiny(d_h=1), [[0, 1]]).value
        np.testing.assert_array_equal(lat, 0.0)

    def test_out_of_vocabulary(self):
        with pytest.raises(IndexError):
            N.compute_sentence_conditionals(tiny(), [[0, 6]])

    def test_deterministic(self):
        m = tiny()
        a = N.sentence_log_likelihood(m, [[0, 1, 2]]).log_likelihood
        b = N.sentence_log_likelihood(m, [[0, 1, 2]]).log_likelihood
        np.testing.assert_array_equal(a, b)


class TestLikelihood:
    @pytest.mark.parametrize("binding", g.BINDINGS)
    def test_matches_global_table(self, binding):
        m = tiny(binding)
        sents = [[0, 3, 5, 2], [1, 1, 4, 0]]
        ll = N.sentence_log_likelihood(m, sents).log_likelihood
        np.testing.assert_allclose(ll, inside_nbl(N.full_params(m), sents).log_likelihood, atol=1e-10)

    @settings(max_examples=6, deadline=None)
    @given(st.sampled_from(g.BINDINGS), st.sampled_from(sorted(N.weight_shapes(tiny().config))),
           st.integers(0, 1000))
    def test_gradient_single_weight(self, binding, name, seed):
        m = tiny(binding)
        if name not in m.weights:
            name = "dir_emb" if name == "pair_emb" else "pair_emb"
        sents = [[0, 3, 5], [1, 4, 0]]
        target = m[name]
        ad.backward(ad.sum_all(N.sentence_log_likelihood(m, sents).node))
        ana = target.grad.reshape(-1).copy()
        x0 = target.value.copy()
        rng = np.random.default_rng(seed)
        for k in rng.choice(x0.size, size=min(3, x0.size), replace=False):
            vals = []
            for step in (1e-5, -1e-5):
                target.value[...] = x0
                target.value.reshape(-1)[k] += step
                vals.append(float(N.sentence_log_likelihood(m, sents).log_likelihood.sum()))
            target.value[...] = x0
            num = (vals[0] - vals[1]) / 2e-5
            assert abs(num - ana[k]) / max(abs(num), abs(ana[k]), 1e-2) < 1e-4


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = tiny("D_with_Wq")
        path = tmp_path / "m.ckpt"
        N.save_checkpoint(m, path, vocab=list("abcdef"))
        back = N.load_checkpoint(path, m.config)
        assert back.config == m.config
        for name in m.weights:
            assert np.abs(back[name].value - m[name].value).max() <= 1e-6
        assert N.load_vocab(path) == list("abcdef")

    def test_layout(self, tmp_path):
        path = tmp_path / "m.ckpt"
        N.save_checkpoint(tiny(), path)
        raw = path.read_bytes()
        assert raw[:8] == b"NBLPCFG1"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        N.save_checkpoint(tiny(), path)
        raw = bytearray(path.read_bytes())
        raw[0:1] = b"X"
        path.write_bytes(bytes(raw))
        with pytest.raises(N.CheckpointMagicError):
            N.load_checkpoint(path)

    def test_config_mismatch(self, tmp_path):
        path = tmp_path / "m.ckpt"
        N.save_checkpoint(tiny(n_nt=3), path)
        with pytest.raises(N.CheckpointMismatchError):
            N.load_checkpoint(path, tiny().config)

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.ckpt"
        N.save_checkpoint(tiny(), path)
        path.write_bytes(path.read_bytes()[:-7])
        with pytest.raises(N.CheckpointTruncatedError):
            N.load_checkpoint(path)

    def test_errors_are_distinct(self):
        kinds = {N.CheckpointMagicError, N.CheckpointMismatchError, N.CheckpointTruncatedError}
        assert len(kinds) == 3 and all(issubclass(k, N.CheckpointError) for k in kinds)
