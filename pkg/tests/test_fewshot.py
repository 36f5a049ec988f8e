import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graspshot import fewshot as fs
from graspshot.detector import Detection
from graspshot.errors import (ConfigurationError, DegenerateDataError,
                              InsufficientRankError)
from graspshot.refine import RefinedFeatureSet
from oracles import pca_dense_reference, svm_qp_reference


class TestPcaFit:
    def test_rank_one_line_recovers_direction(self):
        u = np.array([3.0, 4.0]) / 5.0
        x = np.outer(np.linspace(-2, 2, 9), u)
        p = fs.pca_fit(x, 1)
        assert np.allclose(np.abs(p.components[0] @ u), 1.0, atol=1e-12)
        assert p.components[0][0] > 0    # sign convention

    def test_mean_transforms_to_zero(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(12, 6)) + 5.0
        p = fs.pca_fit(x, 3)
        z = fs.pca_transform(p, x.mean(axis=0))
        assert np.allclose(z, 0.0, atol=1e-9)

    def test_gram_matches_dense_reference(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(10, 40))
        p = fs.pca_fit(x, 3, method="gram")
        mean, comps, var = pca_dense_reference(x, 3)
        assert np.allclose(p.mean, mean, atol=1e-12)
        assert np.allclose(p.components, comps, atol=1e-8)
        assert np.allclose(p.explained_variance, var, atol=1e-8)

    @pytest.mark.parametrize("seed", range(5))
    def test_gram_and_dense_routes_agree(self, seed):
        rng = np.random.default_rng(seed)
        n, d = rng.integers(5, 30), rng.integers(10, 120)
        x = rng.normal(size=(n, d)) * rng.uniform(0.1, 3.0, size=d)
        k = int(min(n - 1, 4))
        a = fs.pca_fit(x, k, method="gram")
        b = fs.pca_fit(x, k, method="dense")
        assert np.allclose(a.components, b.components, atol=1e-8)
        assert np.allclose(a.explained_variance, b.explained_variance,
                           atol=1e-8)

    def test_components_orthonormal(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(20, 50))
        p = fs.pca_fit(x, 5)
        eye = p.components @ p.components.T
        assert np.allclose(eye, np.eye(5), atol=1e-8)

    def test_variances_non_increasing(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(30, 10))
        p = fs.pca_fit(x, 6)
        assert np.all(np.diff(p.explained_variance) <= 1e-12)

    def test_reconstruction_error_equals_discarded_variance(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(25, 12))
        n = x.shape[0]
        p = fs.pca_fit(x, 4)
        xc = x - p.mean
        z = fs.pca_transform(p, x)
        recon_err = np.sum((xc - z @ p.components) ** 2)
        total_var = np.sum(xc * xc) / n
        discarded = total_var - p.explained_variance.sum()
        assert recon_err == pytest.approx(n * discarded, abs=1e-8)

    def test_rank_deficit_raises(self):
        x = np.tile(np.array([[1.0, 2.0, 3.0]]), (6, 1))
        x[0] += 1e-3   # rank 2 centered data at best
        with pytest.raises(InsufficientRankError):
            fs.pca_fit(x, 3)

    def test_k_out_of_range_raises(self):
        x = np.random.default_rng(5).normal(size=(4, 10))
        with pytest.raises(ConfigurationError):
            fs.pca_fit(x, 4)    # k must be <= n-1
        with pytest.raises(ConfigurationError):
            fs.pca_fit(x, 0)

    def test_transform_dimension_mismatch(self):
        x = np.random.default_rng(6).normal(size=(8, 5))
        p = fs.pca_fit(x, 2)
        with pytest.raises(ConfigurationError):
            fs.pca_transform(p, np.zeros((3, 7)))

    def test_zero_input_rows_transform_to_minus_mean_projection(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(10, 6)) + 2.0
        p = fs.pca_fit(x, 3)
        z = fs.pca_transform(p, np.zeros((2, 6)))
        want = -(p.mean @ p.components.T)
        assert np.allclose(z, np.tile(want, (2, 1)), atol=1e-12)

    def test_full_orthonormal_basis_reproduces_centered_data(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(9, 4))
        p = fs.pca_fit(x, 3, method="dense")
        z = fs.pca_transform(p, x)
        # projecting back through the components recovers the projection
        assert np.allclose(z, (x - p.mean) @ p.components.T, atol=1e-12)


def svm_objective(model: fs.BinarySvm):
    coef = model.alphas * model.labels
    kern = fs.rbf_kernel(model.support_vectors, model.support_vectors,
                         model.gamma)
    return model.alphas.sum() - 0.5 * coef @ kern @ coef


class TestBinarySvm:
    def test_separable_clusters_perfect(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(15, 2)) + [6, 6]
        b = rng.normal(size=(15, 2)) - [6, 6]
        x = np.vstack([a, b])
        y = np.array([1.0] * 15 + [-1.0] * 15)
        model = fs.train_binary(x, y, c=1.0, gamma=0.5)
        assert np.all(np.sign(model.decision(x)) == y)

    def test_xor_with_rbf(self):
        x = np.array([[0.0, 0], [1, 1], [0, 1], [1, 0]])
        y = np.array([1.0, 1.0, -1.0, -1.0])
        model = fs.train_binary(x, y, c=10.0, gamma=1.0)
        assert np.all(np.sign(model.decision(x)) == y)

    @pytest.mark.parametrize("seed,c", [(0, 0.5), (1, 10.0), (2, 100.0)])
    def test_kkt_and_dual_bounds_on_overlapping_data(self, seed, c):
        rng = np.random.default_rng(seed)
        x = np.vstack([rng.normal(size=(20, 3)) + 0.7,
                       rng.normal(size=(20, 3)) - 0.7])
        y = np.array([1.0] * 20 + [-1.0] * 20)
        model = fs.train_binary(x, y, c=c, gamma=0.8)
        assert np.all(model.alphas >= 0)
        assert np.all(model.alphas <= c + 1e-12)
        assert fs.kkt_residual(model, x, y) < 1e-3

    @pytest.mark.parametrize("seed", [3, 4])
    def test_matches_qp_oracle_objective(self, seed):
        rng = np.random.default_rng(seed)
        x = np.vstack([rng.normal(size=(12, 2)) + 1.0,
                       rng.normal(size=(12, 2)) - 1.0])
        y = np.array([1.0] * 12 + [-1.0] * 12)
        gamma, c = 0.7, 5.0
        model = fs.train_binary(x, y, c=c, gamma=gamma)
        gram = fs.rbf_kernel(x, x, gamma)
        alphas_qp, bias_qp = svm_qp_reference(gram, y, c)
        obj_qp = alphas_qp.sum() - 0.5 * (alphas_qp * y) @ gram @ (alphas_qp * y)
        assert svm_objective(model) == pytest.approx(obj_qp,
                                                     abs=1e-3 * (1 + obj_qp))
        dec_qp = gram @ (alphas_qp * y) + bias_qp
        dec = model.decision(x)
        confident = np.abs(dec_qp) > 1e-2
        assert np.all(np.sign(dec[confident]) == np.sign(dec_qp[confident]))

    def test_support_vector_reordering_invariance(self):
        rng = np.random.default_rng(5)
        x = np.vstack([rng.normal(size=(10, 2)) + 1,
                       rng.normal(size=(10, 2)) - 1])
        y = np.array([1.0] * 10 + [-1.0] * 10)
        model = fs.train_binary(x, y, c=2.0, gamma=1.0)
        perm = rng.permutation(len(model.alphas))
        shuffled = fs.BinarySvm(model.support_vectors[perm],
                                model.alphas[perm], model.labels[perm],
                                model.bias, model.gamma, model.c)
        probe = rng.normal(size=(30, 2))
        assert np.max(np.abs(model.decision(probe)
                             - shuffled.decision(probe))) < 1e-6


class TestMulticlass:
    def blobs(self, seed=0, n=12):
        rng = np.random.default_rng(seed)
        centers = {"A": (5, 0), "B": (-5, 0), "C": (0, 6)}
        x, y = [], []
        for label, c in centers.items():
            x.append(rng.normal(scale=0.6, size=(n, 2)) + c)
            y += [label] * n
        return np.vstack(x), y

    def test_three_blobs_perfect(self):
        x, y = self.blobs()
        model = fs.svm_train(x, y, c=10.0, gamma=0.5)
        assert model.predict(x) == y

    def test_single_class_rejected(self):
        x = np.random.default_rng(1).normal(size=(6, 2))
        with pytest.raises(DegenerateDataError):
            fs.svm_train(x, ["A"] * 6, c=1.0, gamma=1.0)

    def test_vote_tie_breaks_lexicographically(self):
        sv = np.zeros((0, 2))
        empty = dict(support_vectors=sv, alphas=np.zeros(0),
                     labels=np.zeros(0), gamma=1.0, c=1.0)
        # constant decisions: (A,B)->A, (B,C)->B, (A,C)->C: one vote each
        model = fs.SvmModel(classes=("A", "B", "C"), pairs=[
            ("A", "B", fs.BinarySvm(bias=1.0, **empty)),
            ("A", "C", fs.BinarySvm(bias=-1.0, **empty)),
            ("B", "C", fs.BinarySvm(bias=1.0, **empty)),
        ])
        assert model.predict(np.zeros((1, 2))) == ["A"]


class TestGridSearch:
    def test_single_candidate_returned(self):
        x, y = TestMulticlass().blobs(seed=2)
        c, acc = fs.grid_search_C(x, y, grid=(7.0,), folds=3, gamma=0.5)
        assert c == 7.0
        assert 0 <= acc <= 1

    def test_separable_ties_resolve_to_smallest_c(self):
        x, y = TestMulticlass().blobs(seed=3)
        c, acc = fs.grid_search_C(x, y, grid=(10.0, 0.1, 1000.0), folds=3,
                                  gamma=0.5)
        assert acc == 1.0
        assert c == 0.1

    def test_tiny_class_reduces_folds_with_warning(self):
        rng = np.random.default_rng(4)
        x = np.vstack([rng.normal(size=(9, 2)) + 4,
                       rng.normal(size=(3, 2)) - 4])
        y = ["A"] * 9 + ["B"] * 3
        with pytest.warns(UserWarning, match="reducing folds"):
            c, acc = fs.grid_search_C(x, y, folds=5, gamma=0.5)
        assert acc == 1.0

    def test_deterministic(self):
        x, y = TestMulticlass().blobs(seed=5)
        a = fs.grid_search_C(x, y, folds=4, gamma=0.5)
        b = fs.grid_search_C(x, y, folds=4, gamma=0.5)
        assert a == b


CLASSES = ("Cylinder", "LShape", "Star", "TShape")


def make_class_means(rng, layer_spread):
    """Class means separated by layer_spread[layer_id] in a 30-d space
    per layer; bigger spread = easier to separate."""
    return {lid: {cls: rng.normal(size=30) * spread for cls in CLASSES}
            for lid, spread in layer_spread.items()}


def sample_feature_sets(rng, means, n_per_class, noise=0.3):
    out = []
    idx = 0
    for cls in CLASSES:
        for _ in range(n_per_class):
            per_layer = {lid: means[lid][cls] + rng.normal(scale=noise,
                                                           size=30)
                         for lid in means}
            out.append(RefinedFeatureSet(
                detection=Detection(0, 0, 1, 1, 0, 1.0, idx),
                per_layer=per_layer, source_scene_id=idx, true_shape=cls))
            idx += 1
    return out


def make_feature_sets(rng, n_per_class, layer_spread, noise=0.3):
    return sample_feature_sets(rng, make_class_means(rng, layer_spread),
                               n_per_class, noise)


class TestFitAllLayers:
    def test_discriminative_layer_selected_and_test_classified(self):
        rng = np.random.default_rng(0)
        spread = {"1-1": 0.05, "2-1": 2.0, "3-1": 0.4}
        means = make_class_means(rng, spread)
        support = sample_feature_sets(rng, means, 8)
        test = sample_feature_sets(rng, means, 5)
        cls, sel = fs.fit_all_layers(support, test, k=5)
        assert sel.chosen_layer_id == "2-1"
        assert set(sel.per_layer) == {"1-1", "2-1", "3-1"}
        preds = fs.classify(sel, cls, test)
        acc = np.mean([p == t.true_shape
                       for (_, p), t in zip(preds, test)])
        assert acc > 0.9

    def test_equal_layers_tie_to_earliest(self):
        rng = np.random.default_rng(1)
        base = make_feature_sets(rng, 6, {"1-1": 1.5})
        for fs_ in base:
            fs_.per_layer["2-1"] = fs_.per_layer["1-1"].copy()
        support, test = base[:16], base[16:]
        _, sel = fs.fit_all_layers(support, test, k=4)
        assert sel.per_layer["1-1"] == sel.per_layer["2-1"]
        assert sel.chosen_layer_id == "1-1"

    def test_scopes_share_selection_protocol(self):
        rng = np.random.default_rng(2)
        spread = {"1-1": 0.1, "2-1": 2.0}
        means = make_class_means(rng, spread)
        support = sample_feature_sets(rng, means, 8)
        test = sample_feature_sets(rng, means, 4)
        _, sel_joint = fs.fit_all_layers(support, test, k=5,
                                         pca_fit_scope="joint")
        _, sel_sup = fs.fit_all_layers(support, test, k=5,
                                       pca_fit_scope="support_only")
        assert sel_joint.chosen_layer_id == sel_sup.chosen_layer_id == "2-1"

    def test_excessive_k_names_layer(self):
        rng = np.random.default_rng(3)
        support = make_feature_sets(rng, 2, {"1-1": 1.0})
        with pytest.raises(ConfigurationError, match="layer 1-1"):
            fs.fit_all_layers(support, [], k=25)

    def test_unlabeled_support_rejected(self):
        rng = np.random.default_rng(4)
        support = make_feature_sets(rng, 3, {"1-1": 1.0})
        support[0].true_shape = None
        with pytest.raises(ConfigurationError, match="true_shape"):
            fs.fit_all_layers(support, [], k=2)

    def test_support_vector_reclassifies_to_own_label(self):
        rng = np.random.default_rng(5)
        support = make_feature_sets(rng, 8, {"1-1": 3.0}, noise=0.1)
        cls, sel = fs.fit_all_layers(support, [], k=4)
        preds = fs.classify(sel, cls, support)
        assert all(p == t.true_shape for (_, p), t in zip(preds, support))

    def test_empty_test_classifies_to_empty(self):
        rng = np.random.default_rng(6)
        support = make_feature_sets(rng, 4, {"1-1": 2.0})
        cls, sel = fs.fit_all_layers(support, [], k=3)
        assert fs.classify(sel, cls, []) == []


class TestBundle:
    def test_round_trip_preserves_predictions(self, tmp_path):
        rng = np.random.default_rng(7)
        spread = {"1-1": 0.2, "2-1": 1.5}
        means = make_class_means(rng, spread)
        support = sample_feature_sets(rng, means, 6)
        test = sample_feature_sets(rng, means, 4)
        cls, sel = fs.fit_all_layers(support, test, k=4)
        path = tmp_path / "bundle.gsct"
        fs.save_bundle(cls, sel, path)
        cls2, sel2 = fs.load_bundle(path)
        assert sel2.chosen_layer_id == sel.chosen_layer_id
        assert sel2.per_layer == sel.per_layer
        a = fs.classify(sel, cls, test)
        b = fs.classify(sel2, cls2, test)
        assert [p for _, p in a] == [p for _, p in b]
