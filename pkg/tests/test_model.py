"""Tests for model assembly, the forward pass, pair scoring, and persistence.

Census stability and save/load are checked bitwise; scoring is checked
against an independent numpy cosine on the evaluation-path representations.
"""

import numpy as np
import pytest

from dualrec import autodiff as ad
from dualrec import model as md
from dualrec.config import ConfigError, RunConfig, VARIANTS
from dualrec.data import ArtifactError, InteractionSet
from dualrec.evaluation import model_representations
from dualrec.graph import build_bipartite_adjacency
from dualrec.training import _noise_rngs


def make_set(pairs, num_users, num_items):
    return InteractionSet(
        num_users=num_users,
        num_items=num_items,
        interactions=set(pairs),
        user_map={f"u{i}": i for i in range(num_users)},
        item_map={f"i{i}": i for i in range(num_items)},
    )


PAIRS_A = [(0, 0), (0, 1), (1, 2), (1, 3), (2, 4), (2, 0), (3, 5), (3, 1)]
PAIRS_B = [(0, 5), (0, 4), (1, 0), (1, 1), (2, 2), (2, 3), (3, 4), (3, 2)]


def adjacencies():
    return (
        build_bipartite_adjacency(make_set(PAIRS_A, 4, 6)),
        build_bipartite_adjacency(make_set(PAIRS_B, 4, 6)),
    )


def config(**kw):
    base = dict(k=3, l=2, epochs=1, lr=0.01, batch_size=8, eval_negatives=10,
                seed=0, init_std=0.3)
    base.update(kw)
    return RunConfig(**base)


class TestVariantComponents:
    def test_component_lists(self):
        assert md.variant_components("full") == ("spe", "ind", "sha")
        assert md.variant_components("wo_sha") == ("spe", "ind")
        assert md.variant_components("wo_spe") == ("ind", "sha")
        assert md.variant_components("wo_ind") == ("spe", "sha")
        assert md.variant_components("transfer_ind") == ("spe", "ind", "sha", "ind_other")
        assert md.variant_components("base") == ()

    def test_unknown_variant_raises(self):
        with pytest.raises(ConfigError):
            md.variant_components("nope")


class TestBuildModel:
    def test_census_deterministic(self):
        adj_a, adj_b = adjacencies()
        m1 = md.build_model(adj_a, adj_b, config())
        m2 = md.build_model(adj_a, adj_b, config())
        assert list(m1.params) == list(m2.params)
        for name in m1.params:
            np.testing.assert_array_equal(m1.params[name].data, m2.params[name].data)

    def test_base_variant_has_no_encoders(self):
        adj_a, adj_b = adjacencies()
        m = md.build_model(adj_a, adj_b, config(variant="base"))
        assert not m.encoders and m.classifier is None and not m.decoders
        assert m.domain_a.fusion is None
        assert not any(name.startswith("enc_") for name in m.params)

    def test_fusion_weights_only_for_attention(self):
        adj_a, adj_b = adjacencies()
        att = md.build_model(adj_a, adj_b, config(fusion="attention"))
        cat = md.build_model(adj_a, adj_b, config(fusion="concat"))
        assert att.domain_a.fusion is not None
        assert cat.domain_a.fusion is None

    def test_elbo_variant_carries_decoders(self):
        adj_a, adj_b = adjacencies()
        m = md.build_model(adj_a, adj_b, config(variant="elbo"))
        assert sorted(m.decoders) == ["a.h1", "a.h2", "aug.h1", "aug.h2", "b.h1", "b.h2"]
        for dec in m.decoders.values():
            assert dec.w.shape == (3, m.graph_width)

    def test_every_variant_builds_and_runs(self):
        adj_a, adj_b = adjacencies()
        users = np.arange(4)
        for variant in VARIANTS:
            m = md.build_model(adj_a, adj_b, config(variant=variant))
            fwd = md.forward(m, users, 0.4, stochastic=False)
            assert fwd.s_a.shape == (4, 3) and fwd.s_b.shape == (4, 3)

    def test_mismatched_user_sets_rejected(self):
        adj_a, _ = adjacencies()
        adj_other = build_bipartite_adjacency(make_set([(0, 0), (1, 1)], 2, 2))
        with pytest.raises(ConfigError):
            md.build_model(adj_a, adj_other, config())


class TestForward:
    def test_base_path_has_no_codes(self):
        adj_a, adj_b = adjacencies()
        m = md.build_model(adj_a, adj_b, config(variant="base"))
        fwd = md.forward(m, np.arange(4), 0.5, stochastic=False)
        assert fwd.codes == {} and fwd.enc_results == {}

    def test_full_codes_keys(self):
        adj_a, adj_b = adjacencies()
        m = md.build_model(adj_a, adj_b, config())
        fwd = md.forward(m, np.arange(4), 0.5, stochastic=False)
        assert sorted(fwd.codes) == ["ind_a", "ind_b", "sha", "spe_a", "spe_aug", "spe_b"]

    def test_lambda_endpoints_reproduce_pure_domains(self):
        adj_a, adj_b = adjacencies()
        m = md.build_model(adj_a, adj_b, config())
        users = np.arange(4)
        at_one = md.forward(m, users, 1.0, stochastic=False)
        at_zero = md.forward(m, users, 0.0, stochastic=False)
        np.testing.assert_array_equal(at_one.enc_inputs["aug"].data,
                                      at_one.enc_inputs["a"].data)
        np.testing.assert_array_equal(at_zero.enc_inputs["aug"].data,
                                      at_zero.enc_inputs["b"].data)

    def test_stochastic_draws_repeat_under_same_rngs(self):
        adj_a, adj_b = adjacencies()
        m = md.build_model(adj_a, adj_b, config())
        users = np.arange(4)
        cfg = m.config
        f1 = md.forward(m, users, 0.5, stochastic=True, noise_rngs=_noise_rngs(cfg, 3, 7))
        f2 = md.forward(m, users, 0.5, stochastic=True, noise_rngs=_noise_rngs(cfg, 3, 7))
        f3 = md.forward(m, users, 0.5, stochastic=True, noise_rngs=_noise_rngs(cfg, 3, 8))
        np.testing.assert_array_equal(f1.codes["sha"].data, f2.codes["sha"].data)
        assert np.abs(f1.codes["sha"].data - f3.codes["sha"].data).max() > 0

    def test_deterministic_path_equals_mu(self):
        adj_a, adj_b = adjacencies()
        m = md.build_model(adj_a, adj_b, config())
        fwd = md.forward(m, np.arange(4), 0.5, stochastic=False)
        for branch in md.BRANCHES:
            res = fwd.enc_results[branch]
            np.testing.assert_array_equal(res.z1.data, res.mu1.data)
            np.testing.assert_array_equal(res.z2.data, res.mu2.data)


class TestScorePairs:
    def test_matches_eval_path_cosine(self):
        adj_a, adj_b = adjacencies()
        m = md.build_model(adj_a, adj_b, config())
        rng = np.random.default_rng(7)
        users = rng.integers(0, 4, size=30)
        items = rng.integers(0, 6, size=30)
        fwd = md.forward(m, np.unique(users), 0.5, stochastic=False)
        y, _, _ = md.score_pairs(fwd, m, "a", users, items)
        s_a, t_a, _, _ = model_representations(m)
        sn = s_a / np.linalg.norm(s_a, axis=1, keepdims=True)
        tn = t_a / np.linalg.norm(t_a, axis=1, keepdims=True)
        manual = np.einsum("ij,ij->i", sn[users], tn[items]).reshape(-1, 1)
        np.testing.assert_allclose(y.data, manual, atol=1e-12)

    def test_scores_lie_in_cosine_range(self):
        adj_a, adj_b = adjacencies()
        m = md.build_model(adj_a, adj_b, config(variant="wo_ind"))
        fwd = md.forward(m, np.arange(4), 0.3, stochastic=False)
        y, _, _ = md.score_pairs(fwd, m, "b", np.array([0, 1, 2, 3]), np.array([0, 1, 2, 3]))
        assert np.all(np.abs(y.data) <= 1 + 1e-12)

    def test_user_missing_from_pass_raises(self):
        adj_a, adj_b = adjacencies()
        m = md.build_model(adj_a, adj_b, config())
        fwd = md.forward(m, np.array([0, 2]), 0.5, stochastic=False)
        with pytest.raises(ad.ContractError):
            md.score_pairs(fwd, m, "a", np.array([1]), np.array([0]))


class TestPersistence:
    def test_roundtrip_bitwise(self, tmp_path):
        adj_a, adj_b = adjacencies()
        m = md.build_model(adj_a, adj_b, config(variant="elbo"))
        path = str(tmp_path / "model.npz")
        md.save_model(path, m)
        loaded = md.load_model(path, adj_a, adj_b)
        assert list(loaded.params) == list(m.params)
        for name in m.params:
            np.testing.assert_array_equal(loaded.params[name].data, m.params[name].data)
        assert loaded.config == m.config

    def test_missing_file_raises_artifact_error(self, tmp_path):
        adj_a, adj_b = adjacencies()
        with pytest.raises(ArtifactError):
            md.load_model(str(tmp_path / "absent.npz"), adj_a, adj_b)

    def test_corrupt_file_raises_artifact_error(self, tmp_path):
        adj_a, adj_b = adjacencies()
        path = tmp_path / "junk.npz"
        path.write_bytes(b"not a zip archive")
        with pytest.raises(ArtifactError):
            md.load_model(str(path), adj_a, adj_b)

    def test_missing_config_entry_raises(self, tmp_path):
        adj_a, adj_b = adjacencies()
        path = tmp_path / "noconf.npz"
        np.savez(path, stray=np.zeros((2, 2)))
        with pytest.raises(ArtifactError):
            md.load_model(str(path), adj_a, adj_b)

    def test_shape_tamper_raises(self, tmp_path):
        adj_a, adj_b = adjacencies()
        m = md.build_model(adj_a, adj_b, config())
        path = str(tmp_path / "model.npz")
        md.save_model(path, m)
        arrays = dict(np.load(path, allow_pickle=False))
        first = next(name for name in arrays if name != "__config__")
        arrays[first] = np.zeros((1, 1))
        np.savez(path, **arrays)
        with pytest.raises(ArtifactError):
            md.load_model(path, adj_a, adj_b)
