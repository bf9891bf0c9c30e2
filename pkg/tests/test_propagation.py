import numpy as np
import pytest
from scipy import sparse

from clprop.compatibility import Beliefs, CompatibilityMatrix, sinkhorn_knopp
from clprop.graph import build_graph, one_hot
from clprop.propagation import (
    DivergenceError,
    EdgeWeightTensor,
    PropagationConfig,
    SingularSystemError,
    closed_form_clp,
    clp_star_aggregate,
    compute_messages,
    convergence_check,
    edge_weights,
    iteration_log_to_csv,
    propagate_clp,
    propagate_clp_star,
    propagate_lp,
    save_beliefs_tsv,
    spectral_radius,
)

from conftest import graph_from_edges, random_propagation_instance


def scaled_random_tensor(n, rho_target, seed, num_classes=1):
    """Single-pattern tensor whose first slice has a known spectral radius.

    The dense eigensolver provides the ground-truth radius of the base
    matrix; scaling is exact because rho is homogeneous.
    """
    rng = np.random.default_rng(seed)
    base = rng.random((n, n))
    np.fill_diagonal(base, 0.0)
    rho0 = np.max(np.abs(np.linalg.eigvals(base)))
    scaled = base * (rho_target / rho0)
    assert scaled.max() <= 1.0
    slices = [sparse.csr_matrix(scaled) for _ in range(num_classes)]
    return EdgeWeightTensor.from_slices(slices)


class TestEdgeWeights:
    def test_worked_instance_values(self, worked_example):
        graph, compat, beliefs = worked_example
        awf = edge_weights(graph, beliefs, compat)
        assert awf.arcs.tolist() == [[0, 1], [0, 2]]
        np.testing.assert_allclose(awf.weights[0], [0.112, 0.352], atol=1e-15)
        np.testing.assert_allclose(awf.weights[1], [0.392, 0.132], atol=1e-15)

    def test_identity_compat_one_hot_is_basis_vector(self):
        g = graph_from_edges(2, [(0, 1)], [1, 1], num_classes=3, directed=True)
        b = Beliefs(one_hot([1, 1], 3), "prior")
        h = CompatibilityMatrix(np.eye(3), "row_stochastic")
        awf = edge_weights(g, b, h)
        np.testing.assert_array_equal(awf.weights[0], [0, 1, 0])

    def test_homophily_degeneration_support(self):
        # identity compatibility + one-hot priors on a homophilous graph:
        # every arc weight vector is supported only on the shared class
        g = graph_from_edges(6, [(0, 1), (1, 2), (3, 4), (4, 5)], [0, 0, 0, 1, 1, 1])
        b = Beliefs(one_hot(g.labels, 2), "prior")
        h = CompatibilityMatrix(np.eye(2), "row_stochastic")
        awf = edge_weights(g, b, h)
        for (src, _), w in zip(awf.arcs, awf.weights):
            expected = np.zeros(2)
            expected[g.labels[src]] = 1.0
            np.testing.assert_array_equal(w, expected)

    def test_slice_pattern_equals_arc_set_when_undirected(self, path4):
        b = Beliefs(np.full((4, 2), 0.5), "prior")
        h = CompatibilityMatrix(np.full((2, 2), 0.5), "doubly_stochastic", 0.0)
        awf = edge_weights(path4, b, h)
        for slice_k in awf.per_class:
            coo = slice_k.tocoo()
            pattern = set(zip(coo.row.tolist(), coo.col.tolist()))
            assert pattern == set(map(tuple, path4.arcs.tolist()))

    def test_dimension_mismatch(self, path4):
        b = Beliefs(np.full((3, 2), 0.5), "prior")
        h = CompatibilityMatrix(np.eye(2), "row_stochastic")
        with pytest.raises(ValueError):
            edge_weights(path4, b, h)


class TestEdgeWeightTensor:
    def test_from_slices_requires_shared_pattern(self):
        a = sparse.csr_matrix(np.array([[0.0, 1.0], [0.0, 0.0]]))
        b = sparse.csr_matrix(np.array([[0.0, 0.0], [1.0, 0.0]]))
        with pytest.raises(ValueError, match="pattern"):
            EdgeWeightTensor.from_slices([a, b])

    def test_from_slices_round_trips(self):
        rng = np.random.default_rng(0)
        mask = rng.random((6, 6)) < 0.4
        np.fill_diagonal(mask, False)
        slices = [sparse.csr_matrix(np.where(mask, rng.random((6, 6)), 0.0)) for _ in range(3)]
        awf = EdgeWeightTensor.from_slices(slices)
        for rebuilt, original in zip(awf.per_class, slices):
            np.testing.assert_allclose(rebuilt.toarray(), original.toarray())

    def test_rejects_out_of_range_weights(self):
        with pytest.raises(ValueError, match="0, 1"):
            EdgeWeightTensor(
                np.array([[0, 1]]), np.array([[1.5]]), node_count=2
            )


class TestComputeMessages:
    def test_worked_instance_normalized(self, worked_example):
        graph, compat, beliefs = worked_example
        awf = edge_weights(graph, beliefs, compat)
        msgs = compute_messages(awf, beliefs, normalize=True)
        np.testing.assert_allclose(msgs[0], [0.175, 0.825], atol=1e-12)
        np.testing.assert_allclose(msgs[1], [0.66440678, 0.33559322], atol=1e-8)

    def test_worked_instance_raw(self, worked_example):
        graph, compat, beliefs = worked_example
        awf = edge_weights(graph, beliefs, compat)
        msgs = compute_messages(awf, beliefs, normalize=False)
        np.testing.assert_allclose(msgs[0], [0.0448, 0.2112], atol=1e-15)
        normalized = msgs[0] / msgs[0].sum()
        np.testing.assert_allclose(normalized, [0.175, 0.825], atol=1e-12)

    def test_zero_belief_row_gives_zero_message(self, worked_example):
        graph, compat, beliefs = worked_example
        awf = edge_weights(graph, beliefs, compat)
        silent = Beliefs(np.zeros((3, 2)), "propagated")
        msgs = compute_messages(awf, silent, normalize=True)
        np.testing.assert_array_equal(msgs, np.zeros((2, 2)))


class TestPropagateClp:
    def test_alpha_zero_returns_teleport(self, worked_example):
        graph, compat, beliefs = worked_example
        awf = edge_weights(graph, beliefs, compat)
        out, log = propagate_clp(awf, beliefs, PropagationConfig(alpha=0.0, max_iters=5))
        np.testing.assert_array_equal(out.values, beliefs.values)
        assert log[-1].residual == 0.0

    def test_zero_weights_fixed_point(self):
        awf = EdgeWeightTensor.from_slices([sparse.csr_matrix((4, 4)) for _ in range(2)])
        teleport = Beliefs(np.full((4, 2), 0.5), "prior")
        out, log = propagate_clp(awf, teleport, PropagationConfig(alpha=0.4))
        np.testing.assert_allclose(out.values, 0.6 * teleport.values)
        assert len(log) <= 2

    def test_limit_matches_closed_form(self):
        rng = np.random.default_rng(12)
        for trial in range(5):
            graph, b0, compat = random_propagation_instance(rng, max_nodes=25)
            awf = edge_weights(graph, b0, compat)
            alpha = 0.6
            if not all(v.ok for v in convergence_check(awf, alpha)):
                continue
            teleport = Beliefs(
                np.full((graph.node_count, b0.num_classes), 1.0 / b0.num_classes),
                "base_prediction",
            )
            out, _ = propagate_clp(
                awf, teleport, PropagationConfig(alpha, max_iters=20000, tol=1e-14)
            )
            for k in range(b0.num_classes):
                exact = closed_form_clp(awf.per_class[k], teleport.values[:, k], alpha, k)
                assert np.abs(exact - out.values[:, k]).max() < 1e-8

    def test_divergence_detected(self):
        awf = scaled_random_tensor(16, rho_target=1.5, seed=0)
        teleport = Beliefs(np.ones((16, 1)), "prior")
        with pytest.raises(DivergenceError):
            propagate_clp(awf, teleport, PropagationConfig(alpha=0.8, max_iters=500, tol=1e-300))

    def test_fixed_point_consistency(self):
        rng = np.random.default_rng(21)
        graph, b0, compat = random_propagation_instance(rng, max_nodes=20)
        awf = edge_weights(graph, b0, compat)
        alpha, tol = 0.5, 1e-12
        teleport = b0
        out, _ = propagate_clp(awf, teleport, PropagationConfig(alpha, max_iters=30000, tol=tol))
        reproduced = np.column_stack(
            [
                (1 - alpha) * teleport.values[:, k] + alpha * (awf.per_class[k] @ out.values[:, k])
                for k in range(b0.num_classes)
            ]
        )
        assert np.abs(reproduced - out.values).max() < 10 * tol

    def test_teleport_scaling_preserves_argmax(self):
        rng = np.random.default_rng(31)
        graph, b0, compat = random_propagation_instance(rng, max_nodes=20)
        awf = edge_weights(graph, b0, compat)
        config = PropagationConfig(0.5, max_iters=5000, tol=1e-12)
        out1, _ = propagate_clp(awf, b0, config)
        scaled = Beliefs(3.0 * b0.values, "propagated")
        out2, _ = propagate_clp(awf, scaled, config)
        np.testing.assert_allclose(out2.values, 3.0 * out1.values, rtol=1e-8, atol=1e-10)
        np.testing.assert_array_equal(out1.argmax(), out2.argmax())

    def test_normalized_messages_change_the_result(self, worked_example):
        graph, compat, beliefs = worked_example
        awf = edge_weights(graph, beliefs, compat)
        raw, _ = propagate_clp(awf, beliefs, PropagationConfig(0.5, max_iters=30))
        normed, _ = propagate_clp(
            awf, beliefs, PropagationConfig(0.5, max_iters=30, message_normalization=True)
        )
        assert (raw.values != normed.values).any()


class TestPropagateClpStar:
    def test_one_step_aggregates(self, worked_example):
        graph, compat, beliefs = worked_example
        agg = clp_star_aggregate(graph, beliefs.values, compat.values)
        np.testing.assert_allclose(agg[1], [0.56, 0.44], atol=1e-12)
        np.testing.assert_allclose(agg[2], [0.56, 0.44], atol=1e-12)
        np.testing.assert_allclose(agg[0], [0.0, 0.0], atol=1e-15)

    def test_identity_compat_reduces_to_plain_smoothing(self):
        g = graph_from_edges(4, [(0, 1), (1, 2), (2, 3)], [0, 0, 1, 1])
        teleport = Beliefs(one_hot(g.labels, 2), "prior")
        h = CompatibilityMatrix(np.eye(2), "row_stochastic")
        config = PropagationConfig(alpha=0.3, max_iters=200, tol=1e-12)
        out = propagate_clp_star(g, teleport, h, config)
        # hand iteration of b <- 0.7 t + 0.3 A b
        b = teleport.values.copy()
        a = g.adjacency.toarray().T
        for _ in range(200):
            b = 0.7 * teleport.values + 0.3 * (a @ b)
        np.testing.assert_allclose(out.values, b, atol=1e-9)

    def test_fixed_point_matches_kronecker_oracle(self):
        rng = np.random.default_rng(17)
        n, c = 10, 3
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.3]
        g = graph_from_edges(n, pairs, rng.integers(0, c, n), num_classes=c)
        values = rng.random((n, c))
        values /= values.sum(axis=1, keepdims=True)
        teleport = Beliefs(values, "base_prediction")
        h, _ = sinkhorn_knopp(rng.random((c, c)) + 0.1)
        compat = CompatibilityMatrix(h, "doubly_stochastic", 0.0)
        alpha = 0.15  # keep rho(alpha * H^T (x) A) < 1
        out = propagate_clp_star(
            g, teleport, compat, PropagationConfig(alpha, max_iters=20000, tol=1e-14)
        )
        a_recv = g.adjacency.T.toarray()
        system = np.eye(n * c) - alpha * np.kron(h.T, a_recv)
        vec = np.linalg.solve(system, (1 - alpha) * teleport.values.flatten(order="F"))
        np.testing.assert_allclose(out.values.flatten(order="F"), vec, atol=1e-8)


class TestPropagateLp:
    def test_two_cliques_adopt_their_seed_label(self):
        edges = [(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5)]
        g = graph_from_edges(6, edges, [0, 0, 0, 1, 1, 1])
        y = one_hot(g.labels, 2)
        out = propagate_lp(g, y, [0, 3], PropagationConfig(0.9, max_iters=200, tol=1e-12))
        np.testing.assert_array_equal(out.argmax(), g.labels)

    def test_alpha_zero_uniform_off_train(self):
        g = graph_from_edges(4, [(0, 1), (2, 3)], [0, 0, 1, 1])
        y = one_hot(g.labels, 2)
        with pytest.warns(UserWarning, match="unreachable"):
            out = propagate_lp(g, y, [0], PropagationConfig(0.0, max_iters=5))
        np.testing.assert_array_equal(out.values[0], y[0])
        np.testing.assert_allclose(out.values[1], [0.5, 0.5])

    def test_barbell_matches_dense_oracle(self):
        edges = [(0, 1), (0, 2), (1, 2), (2, 3), (3, 4), (3, 5), (4, 5)]
        g = graph_from_edges(6, edges, [0, 0, 0, 1, 1, 1])
        y = one_hot(g.labels, 2)
        train = [0, 5]
        alpha = 0.8
        out = propagate_lp(g, y, train, PropagationConfig(alpha, max_iters=50000, tol=1e-14))
        pattern = g.adjacency.maximum(g.adjacency.T)
        deg = np.asarray(pattern.sum(axis=1)).ravel()
        s = np.diag(deg ** -0.5) @ pattern.toarray() @ np.diag(deg ** -0.5)
        teleport = np.zeros_like(y)
        teleport[train] = y[train]
        exact = np.linalg.solve(np.eye(6) - alpha * s, (1 - alpha) * teleport)
        np.testing.assert_allclose(out.values, exact, atol=1e-8)


class TestClosedForm:
    def test_zero_matrix(self):
        x = closed_form_clp(np.zeros((3, 3)), np.array([1.0, 2.0, 3.0]), alpha=0.25)
        np.testing.assert_allclose(x, 0.75 * np.array([1.0, 2.0, 3.0]))

    def test_alpha_zero(self):
        rng = np.random.default_rng(1)
        d = rng.random(4)
        x = closed_form_clp(rng.random((4, 4)), d, alpha=0.0)
        np.testing.assert_allclose(x, d)

    def test_singular_system_names_class(self):
        w = np.eye(2) * 2.0  # I - 0.5 * 2I = 0
        with pytest.raises(SingularSystemError, match="class 1"):
            closed_form_clp(w, np.ones(2), alpha=0.5, class_index=1)

    def test_size_guard(self):
        big = sparse.csr_matrix((6000, 6000))
        with pytest.raises(ValueError, match="5000"):
            closed_form_clp(big, np.zeros(6000), alpha=0.5)


class TestSpectralRadius:
    def test_zero_matrix(self):
        assert spectral_radius(np.zeros((4, 4))).value == 0.0

    def test_diagonal(self):
        est = spectral_radius(np.diag([2.0, 1.0]))
        assert est.value == pytest.approx(2.0, abs=1e-9)

    def test_permutation_pair(self):
        est = spectral_radius(np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert est.value == pytest.approx(1.0, abs=1e-8)

    def test_random_nonnegative_matches_dense_eigensolver(self):
        rng = np.random.default_rng(14)
        for _ in range(10):
            n = int(rng.integers(3, 30))
            m = rng.random((n, n)) * rng.random()
            expected = np.max(np.abs(np.linalg.eigvals(m)))
            est = spectral_radius(m, iters=5000, tol=1e-12)
            assert est.value == pytest.approx(expected, rel=1e-6, abs=1e-8)

    def test_non_square(self):
        with pytest.raises(ValueError, match="square"):
            spectral_radius(np.ones((2, 3)))


class TestConvergenceCheck:
    def test_zero_slice_certified(self):
        awf = EdgeWeightTensor.from_slices([sparse.csr_matrix((3, 3))])
        verdicts = convergence_check(awf, alpha=0.99)
        assert verdicts[0].status == "certified"

    def test_small_norm_certified_without_eigensolve(self):
        m = sparse.csr_matrix(np.array([[0.0, 0.45], [0.45, 0.0]]))
        awf = EdgeWeightTensor.from_slices([m])
        verdict = convergence_check(awf, alpha=0.5)[0]
        assert verdict.status == "certified"
        assert verdict.norm_1 == pytest.approx(0.9)
        assert verdict.rho is None

    def test_divergent_verdict_and_growing_residuals(self):
        awf = scaled_random_tensor(12, rho_target=1.5, seed=3)
        verdict = convergence_check(awf, alpha=0.8)[0]
        assert verdict.status == "divergent"
        teleport = Beliefs(np.ones((12, 1)), "prior")
        with pytest.raises(DivergenceError) as err:
            propagate_clp(awf, teleport, PropagationConfig(0.8, max_iters=300, tol=1e-300))
        residuals = [rec.residual for rec in err.value.log]
        assert residuals[-1] > residuals[max(0, len(residuals) - 8)]

    def test_norm_chain(self):
        rng = np.random.default_rng(15)
        graph, b0, compat = random_propagation_instance(rng, max_nodes=30)
        awf = edge_weights(graph, b0, compat)
        for k, slice_k in enumerate(awf.per_class):
            rho, residual = spectral_radius(slice_k)
            data = slice_k.data
            frob = np.sqrt(np.sum(data ** 2))
            norm1 = np.abs(data).sum()
            assert rho <= frob + max(residual, 1e-6)
            assert frob <= norm1 + 1e-12


class TestWriters:
    def test_iteration_log_csv(self, tmp_path, worked_example):
        graph, compat, beliefs = worked_example
        awf = edge_weights(graph, beliefs, compat)
        _, log = propagate_clp(awf, beliefs, PropagationConfig(0.5, max_iters=20))
        path = tmp_path / "iters.csv"
        iteration_log_to_csv(log, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "iter,residual,residual_class_0,residual_class_1"
        assert len(lines) == len(log) + 1

    def test_beliefs_tsv(self, tmp_path):
        b = Beliefs(np.array([[1.0, 3.0], [0.0, 0.0]]), "propagated")
        path = tmp_path / "beliefs.tsv"
        save_beliefs_tsv(b, path)
        lines = path.read_text().splitlines()
        assert lines[0].split("\t") == ["0", "0.25", "0.75", "1"]
        assert lines[1].split("\t") == ["1", "0.5", "0.5", "0"]
