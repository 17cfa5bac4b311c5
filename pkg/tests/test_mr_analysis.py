import numpy as np
import pytest

from mrlt.mr_analysis import (
    ThresholdPolicy,
    adapt_grid,
    build_adaptive_tree,
    detail,
    inverse_transform,
    mr_transform,
    predict,
    project,
    project_dense,
    threshold_reconstruct,
    update_virtual_leaves,
)
from mrlt.tree_mesh import BoundarySpec, NodeKind, check_graded, leaf_statistics, uniform_tree

from test_tree_mesh import figure_tree


def averages_1d(F, n):
    """Exact cell averages from an antiderivative F on [0, 1]."""
    x = np.linspace(0, 1, n + 1)
    return (F(x[1:]) - F(x[:-1])) * n


def averages_2d(F, n):
    x = np.linspace(0, 1, n + 1)
    X, Y = np.meshgrid(x, x, indexing="ij")
    G = F(X, Y)
    return (G[1:, 1:] - G[:-1, 1:] - G[1:, :-1] + G[:-1, :-1]) * n * n


class TestProjectPredict:
    def test_project_constant(self):
        assert project([1.0, 1.0]) == 1.0

    def test_project_symmetric(self):
        assert project([0.0, 2.0]) == 1.0

    def test_project_2d(self):
        assert project([1.0, 2.0, 3.0, 4.0]) == 2.5

    def test_predict_hand_values(self):
        assert np.allclose(predict([0.0, 0.0, 8.0]), [-1.0, 1.0])

    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_predict_constant(self, d):
        assert np.allclose(predict(np.full((3,) * d, 2.5)), 2.5)

    @pytest.mark.parametrize("d", [1, 2])
    def test_consistency(self, d):
        rng = np.random.default_rng(d)
        for _ in range(10):
            s = rng.normal(size=(3,) * d)
            assert project(predict(s).reshape(-1)) == pytest.approx(s[(1,) * d])

    def test_cross_term_weights(self):
        s = np.zeros((3, 3))
        s[2, 2] = 64.0
        kids = predict(s)
        assert kids[1, 1] == pytest.approx(1.0)
        assert kids[0, 0] == pytest.approx(1.0)
        assert kids[0, 1] == pytest.approx(-1.0)

    def test_detail(self):
        assert np.all(detail([1.0, 2.0], [1.0, 2.0]) == 0)


class TestTransform:
    def test_quadratic_details_vanish_1d(self):
        fine = averages_1d(lambda x: x**3 / 3 - 0.3 * x**2 + 0.1 * x, 64)
        details, _ = mr_transform(fine)
        for det in details:
            if det.size > 4:
                assert np.abs(det[2:-2]).max() < 1e-12

    def test_quadratic_details_vanish_2d(self):
        fine = averages_2d(lambda x, y: x**3 * y / 3 + x * y**2 / 2 - x * y**3 / 3, 32)
        details, _ = mr_transform(fine)
        for det in details:
            if det.shape[0] > 4:
                assert np.abs(det[2:-2, 2:-2]).max() < 1e-12

    def test_step_details_localized(self):
        n = 64
        fine = np.where((np.arange(n) + 0.5) / n < 0.5, 1.0, 0.0)
        details, _ = mr_transform(fine)
        big = np.nonzero(np.abs(details[0]) > 1e-14)[0]
        assert big.min() >= n // 2 - 4 and big.max() <= n // 2 + 3

    def test_constant_field(self):
        details, root = mr_transform(np.full(4, 5.0))
        assert root == pytest.approx(5.0)
        assert all(np.all(d == 0) for d in details)

    @pytest.mark.parametrize("seed", range(5))
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        d = 1 + seed % 2
        f = rng.normal(size=(2 ** (3 + seed),) * d if d == 1 else (2 ** (2 + seed),) * d)
        details, root = mr_transform(f)
        assert np.abs(inverse_transform(details, root) - f).max() < 1e-12

    def test_round_trip_components_periodic(self):
        rng = np.random.default_rng(7)
        f = rng.normal(size=(3, 16, 16))
        bnd = BoundarySpec.uniform(2, "periodic")
        details, root = mr_transform(f, bnd, d=2)
        assert np.abs(inverse_transform(details, root, bnd, d=2) - f).max() < 1e-12

    def test_linear_field_interior_details(self):
        fine = averages_1d(lambda x: x**2 / 2, 32)
        details, _ = mr_transform(fine)
        for det in details:
            if det.size > 4:
                assert np.abs(det[2:-2]).max() < 1e-12

    def test_threshold_error_control(self):
        fine = averages_1d(lambda x: -np.cos(2 * np.pi * x) / (2 * np.pi) + np.exp(-40 * (x - 0.4) ** 2), 256)
        errs = [np.abs(threshold_reconstruct(fine, eps) - fine).mean() for eps in (1e-3, 5e-4, 2.5e-4)]
        ratios = [e / eps for e, eps in zip(errs, (1e-3, 5e-4, 2.5e-4))]
        assert max(ratios) < 5.0


class TestAdapt:
    def test_constant_collapses(self):
        tree = build_adaptive_tree(np.full((1, 64), 3.0), 6, ThresholdPolicy(0.01))
        leaves, _, _ = leaf_statistics(tree)
        assert leaves == 1
        assert np.allclose(tree.leaf_values("q_new"), 3.0)

    def test_epsilon_zero_keeps_uniform(self):
        fine = np.random.default_rng(1).random((1, 64))
        tree = build_adaptive_tree(fine, 6, ThresholdPolicy(0.0))
        assert leaf_statistics(tree)[2] == 100.0

    def test_step_keeps_fine_cells_at_step(self):
        n, L, eps = 64, 6, 0.01
        fine = np.where((np.arange(n) + 0.5) / n < 0.5, 1.0, 0.0)[None]
        tree = build_adaptive_tree(fine, L, ThresholdPolicy(eps))
        check_graded(tree)
        finest = tree.topology(L).leaves
        assert finest.size > 0
        # every significant finest-level detail of the full transform survives as a leaf
        details, _ = mr_transform(fine[0])
        significant = np.nonzero(np.abs(details[0]) > eps)[0]
        assert set(significant) <= set(finest)
        assert finest.min() >= n // 2 - 8 and finest.max() <= n // 2 + 7
        assert np.abs(tree.to_uniform("q_new")[0] - fine[0]).max() <= 0.05

    def test_output_graded(self):
        rng = np.random.default_rng(3)
        fine = np.cumsum(rng.normal(size=(1, 32, 32)), axis=1) * 0.05
        tree = build_adaptive_tree(fine, 5, ThresholdPolicy(0.02))
        check_graded(tree)

    @staticmethod
    def front_tree(eps):
        n = 128
        F = lambda x: np.log(np.cosh(40 * (x - 0.4))) / 40
        return build_adaptive_tree(averages_1d(F, n)[None], 7, ThresholdPolicy(eps))

    def test_leaf_with_significant_detail_refines(self):
        tree = self.front_tree(0.05)
        before = leaf_statistics(tree)[0]
        assert adapt_grid(tree, ThresholdPolicy(0.002), "q_n")
        assert leaf_statistics(tree)[0] > before
        check_graded(tree)

    def test_repeated_adaptation_settles(self):
        tree = self.front_tree(0.05)
        policy = ThresholdPolicy(0.002)
        history = []
        for _ in range(8):
            adapt_grid(tree, policy, "q_n")
            history.append(tree.masks())
        assert not adapt_grid(tree, policy, "q_n")
        assert all(np.array_equal(a, b) for a, b in zip(history[-1], history[-2]))

    def test_restricted_remesh_agrees_with_settled_grid(self):
        tree = self.front_tree(0.05)
        policy = ThresholdPolicy(0.002)
        while adapt_grid(tree, policy, "q_n"):
            pass
        for lo in range(1, tree.L):
            assert not adapt_grid(tree, policy, "q_n", lo), lo

    def test_restricted_levels_frozen(self):
        tree = uniform_tree(1, 5)
        tree.data["q_n"][5][:] = 1.0
        before = tree.masks()
        adapt_grid(tree, ThresholdPolicy(0.1), "q_n", min_level=5)
        assert all(np.array_equal(a, b) for a, b in zip(before, tree.masks()))


class TestVirtualLeaves:
    def test_constant_parents(self):
        tree = figure_tree()
        for k in range(tree.L + 1):
            tree.data["q_n"][k][:] = 2.0
        update_virtual_leaves(tree, 4, "q_n")
        assert np.allclose(tree.data["q_n"][4][:, tree.topology(4).virtual], 2.0)

    def test_hand_stencil(self):
        tree = figure_tree()
        tree.data["q_n"][3][0, 2:5] = [0.0, 0.0, 8.0]
        update_virtual_leaves(tree, 4, "q_n")
        assert np.allclose(tree.data["q_n"][4][0, 6:8], [-1.0, 1.0])

    def test_slot_isolation(self):
        tree = figure_tree()
        tree.data["q_star"][3][:] = 5.0
        tree.data["q_n"][4][:] = -7.0
        update_virtual_leaves(tree, 4, "q_star")
        assert np.all(tree.data["q_n"][4] == -7.0)
        assert np.allclose(tree.data["q_star"][4][:, tree.topology(4).virtual], 5.0)

    def test_virtual_kinds(self):
        tree = figure_tree()
        assert all(tree.kind[4][v] == NodeKind.VIRTUAL for v in tree.topology(4).virtual)

    def test_project_dense_constant(self):
        assert np.allclose(project_dense(np.full((2, 8, 8), 1.5)), 1.5)
