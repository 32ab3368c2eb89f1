import numpy as np
import pytest

from ftensemble import ensemble as en
from ftensemble import network as nw
from ftensemble.errors import ContractError
from ftensemble.linalg import RngStream, random_symmetric, singular_values, sym_eig


def trivial_branch(index, probs, feature_dim=3):
    """Branch whose classifier always emits ``probs`` (zero features, bias
    log-probs: softmax(log p) = p)."""
    cfg = nw.BackboneConfig(input_shape=(feature_dim,), hidden_widths=(), feature_dim=feature_dim)
    params = nw.init_params(cfg, len(probs), RngStream(0, index).generator(),
                            clf_in_dim=feature_dim - 1)
    params.weights[0][:] = 0.0
    params.clf_w[:] = 0.0
    params.clf_b[:] = np.log(probs)
    proj = en.make_projection(feature_dim, RngStream(1, index))
    return cfg, en.Branch(index, proj, params)


class TestMakeProjection:
    def test_small_projection_orthonormal(self):
        p = en.make_projection(3, RngStream(0, 0))
        assert p.matrix.shape == (2, 3)
        assert np.abs(p.matrix @ p.matrix.T - np.eye(2)).max() <= 1e-8

    def test_deterministic(self):
        a = en.make_projection(6, RngStream(5, 9))
        b = en.make_projection(6, RngStream(5, 9))
        assert np.array_equal(a.matrix, b.matrix)
        assert (a.source_seed, a.source_stream) == (5, 9)

    def test_orthonormality_and_rank_via_svd_oracle(self):
        p = en.make_projection(8, RngStream(2, 0))
        assert np.abs(p.matrix @ p.matrix.T - np.eye(7)).max() <= 1e-8
        sv = singular_values(p.matrix)
        assert sv.shape == (7,)
        assert np.abs(sv - 1.0).max() <= 1e-8

    def test_rows_are_top_eigenvectors(self):
        # regenerate the symmetric matrix from the same stream and compare
        stream = RngStream(3, 4)
        p = en.make_projection(5, stream)
        z = random_symmetric(5, stream.generator())
        _, v = sym_eig(z)
        assert np.array_equal(p.matrix, v[:, :4].T)

    def test_distinct_streams_distinct_projections(self):
        mats = [en.make_projection(6, RngStream(7, i)).matrix for i in range(6)]
        for i in range(len(mats)):
            for j in range(i + 1, len(mats)):
                assert np.abs(mats[i] - mats[j]).max() > 1e-6

    @pytest.mark.parametrize("m", [4, 16, 33])
    def test_projection_suite_sizes(self, m):
        p = en.make_projection(m, RngStream(8, m))
        assert np.abs(p.matrix @ p.matrix.T - np.eye(m - 1)).max() <= 1e-8


class TestTransform:
    def test_drops_third_coordinate(self):
        proj = en.Projection(np.eye(3)[:2], 0, 0)
        feats = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        assert np.array_equal(en.transform(proj, feats), feats[:, :2])

    def test_zero_features(self):
        proj = en.make_projection(4, RngStream(0, 1))
        assert np.array_equal(en.transform(proj, np.zeros((3, 4))), np.zeros((3, 3)))

    def test_norm_non_expansion(self):
        proj = en.make_projection(8, RngStream(0, 2))
        feats = RngStream(0, 3).generator().normal(size=(10, 8))
        before = np.linalg.norm(feats, axis=1)
        after = np.linalg.norm(en.transform(proj, feats), axis=1)
        assert np.all(after <= before + 1e-10)

    def test_width_mismatch_rejected(self):
        proj = en.make_projection(4, RngStream(0, 4))
        with pytest.raises(ContractError):
            en.transform(proj, np.zeros((2, 5)))


class TestEnsemblePredict:
    def test_single_branch_equals_branch_output(self):
        cfg, branch = trivial_branch(0, [0.6, 0.4])
        model = en.EnsembleModel(cfg, 2, [branch])
        x = np.zeros((4, 3))
        assert np.array_equal(
            en.ensemble_predict(model, x), en.branch_predict(model, branch, x)
        )

    def test_two_branch_average(self):
        cfg, b0 = trivial_branch(0, [0.6, 0.4])
        _, b1 = trivial_branch(1, [0.2, 0.8])
        model = en.EnsembleModel(cfg, 2, [b0, b1])
        probs = en.ensemble_predict(model, np.zeros((3, 3)))
        assert np.abs(probs - np.array([0.4, 0.6])).max() <= 1e-12

    def test_identical_branches_argmax_stable(self):
        cfg = nw.BackboneConfig(input_shape=(5,), hidden_widths=(6,), feature_dim=4)
        params = nw.init_params(cfg, 3, RngStream(4, 0).generator(), clf_in_dim=3)
        proj = en.make_projection(4, RngStream(4, 1))
        branches = [en.Branch(i, proj, params) for i in range(5)]
        model = en.EnsembleModel(cfg, 3, branches)
        x = RngStream(4, 2).generator().normal(size=(12, 5))
        single = en.branch_predict(model, branches[0], x)
        combined = en.ensemble_predict(model, x)
        assert np.array_equal(np.argmax(single, axis=1), np.argmax(combined, axis=1))

    def test_rows_are_distributions(self):
        cfg = nw.BackboneConfig(input_shape=(5,), hidden_widths=(6,), feature_dim=4)
        branches = []
        for i in range(3):
            params = nw.init_params(cfg, 4, RngStream(5, i).generator(), clf_in_dim=3)
            branches.append(en.Branch(i, en.make_projection(4, RngStream(6, i)), params))
        model = en.EnsembleModel(cfg, 4, branches)
        probs = en.ensemble_predict(model, RngStream(5, 10).generator().normal(size=(9, 5)))
        assert probs.min() >= 0.0
        assert np.abs(probs.sum(axis=1) - 1.0).max() <= 1e-10

    def test_empty_branch_list_rejected(self):
        cfg = nw.BackboneConfig(input_shape=(5,), feature_dim=4)
        with pytest.raises(ContractError):
            en.ensemble_predict(en.EnsembleModel(cfg, 2, []), np.zeros((1, 5)))


class TestModelCheckpoint:
    def _model(self, shared=False):
        cfg = nw.BackboneConfig(input_shape=(6,), hidden_widths=(5,), feature_dim=4)
        if shared:
            base = nw.init_params(cfg, 3, RngStream(9, 0).generator(), clf_in_dim=3)
            branches = []
            for i in range(3):
                head_w, head_b = nw.init_classifier(RngStream(9, 10 + i).generator(), 3, 3)
                params = nw.NetParams(base.weights, base.biases, head_w, head_b)
                branches.append(en.Branch(i, en.make_projection(4, RngStream(9, 20 + i)), params))
        else:
            branches = [
                en.Branch(
                    i,
                    en.make_projection(4, RngStream(9, 20 + i)),
                    nw.init_params(cfg, 3, RngStream(9, i).generator(), clf_in_dim=3),
                )
                for i in range(3)
            ]
        return en.EnsembleModel(cfg, 3, branches, shared_backbone=shared,
                                meta={"config_hash": "abc", "seed": 1})

    @pytest.mark.parametrize("shared", [False, True])
    def test_round_trip(self, tmp_path, shared):
        model = self._model(shared)
        path = tmp_path / "model.ftem"
        en.save_model(path, model)
        loaded = en.load_model(path)
        assert loaded.n_classes == model.n_classes
        assert loaded.shared_backbone == model.shared_backbone
        assert loaded.meta == model.meta
        assert loaded.backbone_cfg == model.backbone_cfg
        x = RngStream(9, 99).generator().normal(size=(7, 6))
        assert np.array_equal(
            en.ensemble_predict(model, x), en.ensemble_predict(loaded, x)
        )
        if shared:
            assert loaded.branches[0].params.weights[0] is loaded.branches[1].params.weights[0]
