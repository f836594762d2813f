import itertools
from collections import deque

import numpy as np
import pytest

from neurodyn.errors import DegenerateFeatures, EmptyLabel, NonUnitInput
from neurodyn.maxflow import FlowNetwork
from neurodyn.mesh import icosphere
from neurodyn.parcellation import (
    LabelConfig,
    ParcellationParams,
    VmfComponent,
    alpha_expansion,
    default_sigma,
    estimate_vmf,
    init_labels,
    labeling_energy,
    pairwise_weight,
    parcellate,
    repair_empty_labels,
    seg_loss,
    total_energy,
    unary_energy,
    unary_matrix,
    unit_positions,
    vmf_log_normalizer,
)


def planted_regions(mesh, n_regions, noise, seed):
    """Geodesic Voronoi truth labels plus noisy one-hot direction features."""
    rng = np.random.default_rng(seed)
    v = mesh.n_vertices
    seeds = rng.choice(v, size=n_regions, replace=False)
    neigh = mesh.vertex_adjacency()
    dist = np.full((n_regions, v), np.inf)
    for k, s in enumerate(seeds):
        dist[k, s] = 0
        queue = deque([int(s)])
        while queue:
            u = queue.popleft()
            for w in neigh[u]:
                if dist[k, w] == np.inf:
                    dist[k, w] = dist[k, u] + 1
                    queue.append(w)
    truth = np.argmin(dist, axis=0) + 1
    dim = max(n_regions, 3)
    feats = np.eye(n_regions, dim)[truth - 1] + noise * rng.standard_normal((v, dim))
    return truth, feats


def best_agreement(truth, labels, n_regions):
    best = 0.0
    for perm in itertools.permutations(range(1, n_regions + 1)):
        mapped = np.array([perm[l - 1] for l in labels])
        best = max(best, float(np.mean(mapped == truth)))
    return best


def random_instance(rng, n_vertices, n_labels, edge_prob=0.4):
    edges = [
        (i, j)
        for i in range(n_vertices)
        for j in range(i + 1, n_vertices)
        if rng.random() < edge_prob
    ]
    edges = np.array(edges, dtype=np.int64).reshape(-1, 2)
    unary = 2.0 * rng.standard_normal((n_vertices, n_labels))
    weights = np.abs(rng.standard_normal(len(edges)))
    return unary, edges, weights


class TestMaxFlow:
    def test_textbook_network(self):
        # classic 4-node diamond: max flow 2000 + 30 limited by middle edges
        net = FlowNetwork(4)
        net.add_edge(0, 1, 1000)
        net.add_edge(0, 2, 1000)
        net.add_edge(1, 2, 1)
        net.add_edge(1, 3, 1000)
        net.add_edge(2, 3, 1000)
        assert net.max_flow(0, 3) == pytest.approx(2000)

    def test_min_cut_matches_flow(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            n = 6
            net = FlowNetwork(n)
            caps = {}
            for u in range(n):
                for v in range(n):
                    if u != v and rng.random() < 0.5:
                        c = float(rng.random())
                        net.add_edge(u, v, c)
                        caps[(u, v)] = caps.get((u, v), 0.0) + c
            flow = net.max_flow(0, n - 1)
            side = net.source_side(0)
            cut = sum(c for (u, v), c in caps.items() if side[u] and not side[v])
            assert flow == pytest.approx(cut, abs=1e-9)


class TestVmf:
    def test_kappa_zero_uniform(self):
        rng = np.random.default_rng(0)
        comp = VmfComponent(
            mu_f=np.array([1.0, 0, 0]), kappa_f=0.0,
            mu_s=np.array([0, 0, 1.0]), kappa_s=0.0,
        )
        energies = []
        for _ in range(20):
            f = rng.standard_normal(3)
            f /= np.linalg.norm(f)
            s = rng.standard_normal(3)
            s /= np.linalg.norm(s)
            energies.append(unary_energy(f, s, comp, eta=1.0))
        assert np.ptp(energies) < 1e-12

    def test_mean_direction_is_argmin(self):
        comp = VmfComponent(
            mu_f=np.array([0.0, 1.0, 0.0]), kappa_f=5.0,
            mu_s=np.array([0, 0, 1.0]), kappa_s=1.0,
        )
        s = np.array([1.0, 0.0, 0.0])
        at_mu = unary_energy(comp.mu_f, s, comp, eta=0.0)
        rng = np.random.default_rng(3)
        for _ in range(1000):
            f = rng.standard_normal(3)
            f /= np.linalg.norm(f)
            assert unary_energy(f, s, comp, eta=0.0) >= at_mu - 1e-12

    def test_eta_linearity(self):
        comp = VmfComponent(
            mu_f=np.array([1.0, 0, 0]), kappa_f=2.0,
            mu_s=np.array([0, 1.0, 0]), kappa_s=3.0,
        )
        f = np.array([0.0, 0.0, 1.0])
        s = np.array([1.0, 0.0, 0.0])
        e0 = unary_energy(f, s, comp, eta=0.0)
        e1 = unary_energy(f, s, comp, eta=1.0)
        e2 = unary_energy(f, s, comp, eta=2.0)
        assert e2 - e0 == pytest.approx(2.0 * (e1 - e0), abs=1e-10)

    def test_non_unit_input_rejected(self):
        comp = VmfComponent(
            mu_f=np.array([1.0, 0, 0]), kappa_f=1.0,
            mu_s=np.array([0, 1.0, 0]), kappa_s=1.0,
        )
        with pytest.raises(NonUnitInput):
            unary_energy(np.array([2.0, 0, 0]), np.array([0, 1.0, 0]), comp, 1.0)

    def test_log_normalizer_small_kappa_continuous(self):
        # series/uniform switchover must be continuous near zero
        for dim in (2, 3, 8):
            assert vmf_log_normalizer(1e-10, dim) == pytest.approx(
                vmf_log_normalizer(0.0, dim), abs=1e-6
            )

    def test_estimate_identical_vectors_hits_cap(self):
        labels = LabelConfig(labels=np.ones(5, dtype=np.int64), n_regions=1)
        feats = np.tile(np.array([1.0, 0.0, 0.0]), (5, 1))
        pos = np.tile(np.array([0.0, 0.0, 1.0]), (5, 1))
        params = ParcellationParams(n_regions=1, kappa_max=1e4)
        comp = estimate_vmf(labels, feats, pos, params)[0]
        assert comp.kappa_f == params.kappa_max
        assert comp.mu_f @ np.array([1.0, 0, 0]) == pytest.approx(1.0)

    def test_estimate_uniform_circle_kappa_near_zero(self):
        angles = np.linspace(0, 2 * np.pi, 400, endpoint=False)
        feats = np.column_stack([np.cos(angles), np.sin(angles)])
        labels = LabelConfig(labels=np.ones(400, dtype=np.int64), n_regions=1)
        params = ParcellationParams(n_regions=1)
        comp = estimate_vmf(labels, feats, feats, params)[0]
        assert comp.kappa_f <= 0.1

    def test_estimate_symmetric_pair_tie_break(self):
        feats = np.array([[1.0, 0.0], [-1.0, 0.0]])
        labels = LabelConfig(labels=np.ones(2, dtype=np.int64), n_regions=1)
        comp = estimate_vmf(labels, feats, feats, ParcellationParams(n_regions=1))[0]
        assert np.array_equal(comp.mu_f, np.array([1.0, 0.0]))
        assert comp.kappa_f == 0.0

    def test_estimate_empty_label_raises(self):
        labels = LabelConfig(labels=np.ones(3, dtype=np.int64), n_regions=2)
        feats = np.eye(3)
        with pytest.raises(EmptyLabel):
            estimate_vmf(labels, feats, feats, ParcellationParams(n_regions=2))


class TestPairwiseWeight:
    def test_equal_features_give_one(self):
        f = np.array([0.3, -0.2, 0.5])
        assert pairwise_weight(f, f, sigma=0.7) == 1.0

    def test_closed_form_point(self):
        f_u = np.array([1.0, 0.0])
        f_v = np.array([1.0 - np.sqrt(2.0) * 0.5, 0.0])  # distance sigma*sqrt(2)
        assert pairwise_weight(f_u, f_v, sigma=0.5) == pytest.approx(
            np.exp(-1.0), abs=1e-12
        )

    def test_monotone_in_distance(self):
        f = np.zeros(3)
        prev = 2.0
        for d in np.linspace(0.1, 2.0, 15):
            w = pairwise_weight(f, np.array([d, 0, 0]), sigma=0.8)
            assert w < prev
            prev = w


class TestEnergies:
    def setup_method(self):
        self.mesh = icosphere(1)
        rng = np.random.default_rng(5)
        self.x = rng.standard_normal((self.mesh.n_vertices, 3))
        self.features = self.x / np.linalg.norm(self.x, axis=1, keepdims=True)
        self.params = ParcellationParams(n_regions=3, smoothing=0.8, eta=0.4,
                                         sigma=0.9)
        labels = rng.integers(1, 4, self.mesh.n_vertices).astype(np.int64)
        labels[:3] = [1, 2, 3]  # keep every label populated
        self.labels = LabelConfig(labels=labels, n_regions=3)
        self.comps = estimate_vmf(self.labels, self.features,
                                  unit_positions(self.mesh), self.params)

    def test_lambda_zero_is_unary_sum(self):
        params = ParcellationParams(n_regions=3, smoothing=0.0, eta=0.4, sigma=0.9)
        e = total_energy(self.labels, self.features, self.mesh, self.comps, params)
        unary = unary_matrix(self.features, unit_positions(self.mesh),
                             self.comps, 0.4)
        direct = unary[np.arange(self.mesh.n_vertices),
                       self.labels.labels - 1].sum()
        assert e == pytest.approx(direct, abs=1e-10)

    def test_uniform_labels_no_pairwise(self):
        labels = LabelConfig(labels=np.ones(self.mesh.n_vertices, dtype=np.int64),
                             n_regions=1)
        params = ParcellationParams(n_regions=1, smoothing=5.0, eta=0.4, sigma=0.9)
        comps = estimate_vmf(labels, self.features, unit_positions(self.mesh),
                             params)
        e_smooth = total_energy(labels, self.features, self.mesh, comps, params)
        params0 = ParcellationParams(n_regions=1, smoothing=0.0, eta=0.4, sigma=0.9)
        e_plain = total_energy(labels, self.features, self.mesh, comps, params0)
        assert e_smooth == pytest.approx(e_plain, abs=1e-10)

    def test_matches_term_by_term_oracle(self):
        # tiny mesh: sum every term explicitly
        mesh = icosphere(0)
        rng = np.random.default_rng(7)
        x = rng.standard_normal((mesh.n_vertices, 3))
        feats = x / np.linalg.norm(x, axis=1, keepdims=True)
        params = ParcellationParams(n_regions=2, smoothing=1.3, eta=0.6, sigma=0.8)
        labels = LabelConfig(
            labels=(rng.integers(0, 2, mesh.n_vertices) + 1).astype(np.int64),
            n_regions=2,
        )
        if not np.any(labels.labels == 2):
            labels.labels[0] = 2
        pos = unit_positions(mesh)
        comps = estimate_vmf(labels, feats, pos, params)
        oracle = 0.0
        for v in range(mesh.n_vertices):
            oracle += unary_energy(feats[v], pos[v],
                                   comps[labels.labels[v] - 1], params.eta)
        for u, w in mesh.edges():
            if labels.labels[u] != labels.labels[w]:
                oracle += params.smoothing * pairwise_weight(feats[u], feats[w], 0.8)
        got = total_energy(labels, feats, mesh, comps, params)
        assert got == pytest.approx(oracle, abs=1e-12)


class TestAlphaExpansion:
    def test_all_alpha_unchanged(self):
        rng = np.random.default_rng(2)
        unary, edges, weights = random_instance(rng, 8, 3)
        labels = np.full(8, 2, dtype=np.int64)
        out = alpha_expansion(labels, 2, unary, edges, weights)
        assert np.array_equal(out, labels)

    def test_binary_exactness_vs_enumeration(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(3, 13))
            unary, edges, weights = random_instance(rng, n, 2)
            out = alpha_expansion(np.ones(n, dtype=np.int64), 2, unary, edges,
                                  weights)
            got = labeling_energy(out, unary, edges, weights)
            best = min(
                labeling_energy(np.array(cfg), unary, edges, weights)
                for cfg in itertools.product([1, 2], repeat=n)
            )
            assert got == pytest.approx(best, abs=1e-9)

    def test_energy_never_increases(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = int(rng.integers(4, 11))
            k = int(rng.integers(2, 5))
            unary, edges, weights = random_instance(rng, n, k)
            labels = rng.integers(1, k + 1, n).astype(np.int64)
            alpha = int(rng.integers(1, k + 1))
            before = labeling_energy(labels, unary, edges, weights)
            after = labeling_energy(
                alpha_expansion(labels, alpha, unary, edges, weights),
                unary, edges, weights,
            )
            assert after <= before + 1e-9


class TestInitLabels:
    def test_two_orthogonal_clusters(self):
        rng = np.random.default_rng(4)
        a = np.tile([1.0, 0.0, 0.0], (30, 1)) + 0.05 * rng.standard_normal((30, 3))
        b = np.tile([0.0, 1.0, 0.0], (30, 1)) + 0.05 * rng.standard_normal((30, 3))
        feats = np.vstack([a, b])
        config = init_labels(feats, 2, seed=0)
        first, second = config.labels[:30], config.labels[30:]
        assert len(np.unique(first)) == 1
        assert len(np.unique(second)) == 1
        assert first[0] != second[0]

    def test_single_region(self):
        config = init_labels(np.random.default_rng(0).standard_normal((10, 3)), 1)
        assert np.all(config.labels == 1)

    def test_deterministic_per_seed(self):
        feats = np.random.default_rng(8).standard_normal((40, 4))
        a = init_labels(feats, 3, seed=5)
        b = init_labels(feats, 3, seed=5)
        assert np.array_equal(a.labels, b.labels)

    def test_zero_row_rejected(self):
        feats = np.ones((5, 3))
        feats[2] = 0.0
        with pytest.raises(DegenerateFeatures):
            init_labels(feats, 2)

    def test_no_empty_labels(self):
        rng = np.random.default_rng(9)
        feats = rng.standard_normal((25, 3))
        for seed in range(5):
            config = init_labels(feats, 6, seed=seed)
            assert len(np.unique(config.labels)) == 6


class TestParcellate:
    def test_two_region_planted_recovery(self):
        mesh = icosphere(2)
        truth, feats = planted_regions(mesh, 2, noise=0.05, seed=1)
        res = parcellate(feats, mesh,
                         ParcellationParams(n_regions=2, smoothing=0.5, eta=0.1))
        assert best_agreement(truth, res.labels.labels, 2) >= 0.99

    def test_four_region_noisy_recovery(self):
        mesh = icosphere(2)
        truth, feats = planted_regions(mesh, 4, noise=0.4, seed=12)
        res = parcellate(feats, mesh,
                         ParcellationParams(n_regions=4, smoothing=2.0, eta=0.3))
        assert best_agreement(truth, res.labels.labels, 4) >= 0.90

    def test_huge_smoothing_single_label(self):
        mesh = icosphere(1)
        _, feats = planted_regions(mesh, 2, noise=1.5, seed=3)
        res = parcellate(feats, mesh,
                         ParcellationParams(n_regions=2, smoothing=500.0, eta=0.1))
        assert len(np.unique(res.labels.labels)) == 1

    def test_energy_trace_non_increasing(self):
        mesh = icosphere(1)
        _, feats = planted_regions(mesh, 3, noise=0.6, seed=4)
        res = parcellate(feats, mesh,
                         ParcellationParams(n_regions=3, smoothing=1.0, eta=0.5))
        assert np.all(np.diff(res.energy_trace) <= 1e-9)

    def test_infinite_tol_single_sweep(self):
        mesh = icosphere(1)
        _, feats = planted_regions(mesh, 2, noise=0.3, seed=5)
        res = parcellate(
            feats, mesh,
            ParcellationParams(n_regions=2, smoothing=1.0, eta=0.3, tol=np.inf),
        )
        assert res.n_iterations == 1

    def test_deterministic(self):
        mesh = icosphere(1)
        _, feats = planted_regions(mesh, 3, noise=0.5, seed=6)
        params = ParcellationParams(n_regions=3, smoothing=1.0, eta=0.5, seed=2)
        a = parcellate(feats, mesh, params)
        b = parcellate(feats, mesh, params)
        assert np.array_equal(a.labels.labels, b.labels.labels)
        assert a.energy == b.energy

    def test_repair_empty_labels(self):
        labels = np.array([1, 1, 1, 2], dtype=np.int64)
        unary = np.array([[0.0, 9, 9], [5.0, 9, 9], [1.0, 9, 9], [9, 0.0, 9]])
        repaired = repair_empty_labels(labels, 3, unary)
        assert sorted(np.unique(repaired)) == [1, 2, 3]
        # vertex 1 fits label 1 worst among movable vertices
        assert repaired[1] == 3


class TestSegLoss:
    def setup_method(self):
        self.mesh = icosphere(0)
        rng = np.random.default_rng(11)
        self.x = rng.standard_normal((self.mesh.n_vertices, 3)) + 0.5
        labels = (rng.integers(0, 2, self.mesh.n_vertices) + 1).astype(np.int64)
        labels[0], labels[1] = 1, 2
        self.labels = LabelConfig(labels=labels, n_regions=2)
        self.params = ParcellationParams(n_regions=2, smoothing=0.7, eta=0.5,
                                         sigma=0.8)
        feats = self.x / np.linalg.norm(self.x, axis=1, keepdims=True)
        self.comps = estimate_vmf(self.labels, feats, unit_positions(self.mesh),
                                  self.params)

    def test_equals_total_energy_on_unit_inputs(self):
        feats = self.x / np.linalg.norm(self.x, axis=1, keepdims=True)
        loss, _ = seg_loss(self.labels, feats, self.mesh, self.comps, self.params)
        energy = total_energy(self.labels, feats, self.mesh, self.comps,
                              self.params)
        assert loss == pytest.approx(energy, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        def value(flat):
            x = flat.reshape(self.x.shape)
            return seg_loss(self.labels, x, self.mesh, self.comps, self.params)[0]

        _, grad = seg_loss(self.labels, self.x, self.mesh, self.comps, self.params)
        flat = self.x.ravel().copy()
        eps = 1e-5
        numeric = np.empty_like(flat)
        for i in range(flat.size):
            up, down = flat.copy(), flat.copy()
            up[i] += eps
            down[i] -= eps
            numeric[i] = (value(up) - value(down)) / (2 * eps)
        rel = np.linalg.norm(grad.ravel() - numeric) / np.linalg.norm(numeric)
        assert rel <= 1e-4

    def test_lambda_zero_permutation_invariant_total(self):
        params = ParcellationParams(n_regions=2, smoothing=0.0, eta=0.0, sigma=0.8)
        loss, _ = seg_loss(self.labels, self.x, self.mesh, self.comps, params)
        perm = np.random.default_rng(0).permutation(self.mesh.n_vertices)
        loss_p, _ = seg_loss(
            LabelConfig(labels=self.labels.labels[perm], n_regions=2),
            self.x[perm], self.mesh, self.comps, params,
        )
        assert loss == pytest.approx(loss_p, abs=1e-10)
