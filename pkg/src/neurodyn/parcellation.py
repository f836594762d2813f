"""Mesh parcellation as MRF energy minimization with graph cuts.

Unary energies come from a dual von Mises-Fisher model (one vMF over
row-normalized feature directions, one over unit-normalized vertex
positions, combined with weight eta). Pairwise terms are a
gradient-weighted Potts model over mesh edges. Labels are optimized by
alpha-expansion moves, each solved exactly with one max-flow cut, and
the vMF parameters are re-estimated between sweeps; re-estimates that
would raise the current energy are rejected so the reported energy
trace never increases.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, ive

from .errors import (
    DegenerateFeatures,
    EmptyLabel,
    NonUnitInput,
    ShapeMismatch,
)
from .maxflow import FlowNetwork
from .mesh import TriangleMesh

UNIT_NORM_TOL = 1e-6
DEFAULT_KAPPA_MAX = 1e4


@dataclass
class LabelConfig:
    """Vertex labels in [1, K]."""

    labels: np.ndarray
    n_regions: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1:
            raise ShapeMismatch("labels must be a 1-D vector")
        if self.labels.size and (
            self.labels.min() < 1 or self.labels.max() > self.n_regions
        ):
            raise ShapeMismatch(
                f"labels must lie in [1, {self.n_regions}]"
            )


@dataclass
class VmfComponent:
    """Dual vMF parameters for one region."""

    mu_f: np.ndarray
    kappa_f: float
    mu_s: np.ndarray
    kappa_s: float

    def __post_init__(self):
        for name in ("mu_f", "mu_s"):
            mu = np.asarray(getattr(self, name), dtype=np.float64)
            if abs(np.linalg.norm(mu) - 1.0) > 1e-10:
                raise NonUnitInput(f"{name} must be unit norm")
            setattr(self, name, mu)
        if not (np.isfinite(self.kappa_f) and np.isfinite(self.kappa_s)):
            raise ShapeMismatch("kappa must be finite")


@dataclass
class ParcellationParams:
    n_regions: int
    smoothing: float = 1.0        # lambda in the Gibbs energy
    eta: float = 1.0              # spatial vMF weight
    sigma: float | None = None    # pairwise bandwidth; None = mean edge distance
    max_iters: int = 10
    tol: float = 1e-6
    seed: int = 0
    kappa_max: float = DEFAULT_KAPPA_MAX

    def __post_init__(self):
        if self.n_regions < 1:
            raise ShapeMismatch("n_regions must be >= 1")
        if self.smoothing < 0 or self.eta < 0:
            raise ShapeMismatch("smoothing and eta must be >= 0")
        if self.sigma is not None and self.sigma <= 0:
            raise ShapeMismatch("sigma must be > 0")


# --- von Mises-Fisher ---------------------------------------------------------


def vmf_log_normalizer(kappa: float, dim: int) -> float:
    """log C_p(kappa) for the vMF density on the unit sphere in R^dim."""
    if dim < 2:
        raise ShapeMismatch("vMF needs dimension >= 2")
    if kappa < 0:
        raise ShapeMismatch("kappa must be >= 0")
    if kappa < 1e-12:
        # uniform density: reciprocal surface area of S^{dim-1}
        return float(gammaln(dim / 2.0) - np.log(2.0) - (dim / 2.0) * np.log(np.pi))
    nu = dim / 2.0 - 1.0
    # ive is the exponentially scaled Bessel, so log I_nu = kappa + log(ive)
    log_bessel = kappa + np.log(ive(nu, kappa))
    return float(
        nu * np.log(kappa) - (dim / 2.0) * np.log(2.0 * np.pi) - log_bessel
    )


def vmf_log_density(x, mu, kappa: float) -> float:
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    return float(kappa * (mu @ x) + vmf_log_normalizer(kappa, x.size))


def _check_unit(x, name):
    norm = np.linalg.norm(x)
    if abs(norm - 1.0) > UNIT_NORM_TOL:
        raise NonUnitInput(f"{name} has norm {norm}, expected 1")


def unary_energy(feature, position, comp: VmfComponent, eta: float) -> float:
    """Negative dual-vMF log density, the MRF data term for one vertex."""
    feature = np.asarray(feature, dtype=np.float64)
    position = np.asarray(position, dtype=np.float64)
    _check_unit(feature, "feature")
    _check_unit(position, "position")
    return -vmf_log_density(feature, comp.mu_f, comp.kappa_f) - eta * vmf_log_density(
        position, comp.mu_s, comp.kappa_s
    )


def pairwise_weight(f_u, f_v, sigma: float) -> float:
    """Gradient-weighted Potts coefficient in (0, 1]."""
    if sigma <= 0:
        raise ShapeMismatch("sigma must be > 0")
    d = np.asarray(f_u, dtype=np.float64) - np.asarray(f_v, dtype=np.float64)
    return float(np.exp(-(d @ d) / (2.0 * sigma * sigma)))


def estimate_vmf(labels: LabelConfig, features, positions,
                 params: ParcellationParams):
    """Re-estimate one dual-vMF component per label.

    Mean directions are normalized resultants; concentrations use the
    Banerjee closed-form approximation capped at kappa_max. A zero
    resultant falls back to the first basis direction.
    """
    features = np.asarray(features, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64)
    comps = []
    for k in range(1, params.n_regions + 1):
        members = labels.labels == k
        if not members.any():
            raise EmptyLabel(f"label {k} has no vertices")
        mu_f, kappa_f = _vmf_fit(features[members], params.kappa_max)
        mu_s, kappa_s = _vmf_fit(positions[members], params.kappa_max)
        comps.append(VmfComponent(mu_f=mu_f, kappa_f=kappa_f,
                                  mu_s=mu_s, kappa_s=kappa_s))
    return comps


def _vmf_fit(points, kappa_max):
    n, dim = points.shape
    resultant = points.sum(axis=0)
    norm = np.linalg.norm(resultant)
    if norm < 1e-12:
        mu = np.zeros(dim)
        mu[0] = 1.0
        return mu, 0.0
    mu = resultant / norm
    rbar = norm / n
    if rbar >= 1.0 - 1e-12:
        return mu, float(kappa_max)
    kappa = rbar * (dim - rbar * rbar) / (1.0 - rbar * rbar)
    return mu, float(min(kappa, kappa_max))


# --- feature preparation -------------------------------------------------------


def normalize_rows(x):
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms < 1e-12):
        raise DegenerateFeatures(
            f"{int((norms < 1e-12).sum())} rows with zero norm"
        )
    return x / norms[:, None]


def unit_positions(mesh: TriangleMesh) -> np.ndarray:
    """Mesh positions centered at the centroid and scaled to the unit sphere."""
    centered = mesh.vertices - mesh.vertices.mean(axis=0)
    return normalize_rows(centered)


def default_sigma(features, edges) -> float:
    """Mean feature distance across mesh edges (1.0 when degenerate)."""
    d = np.linalg.norm(features[edges[:, 0]] - features[edges[:, 1]], axis=1)
    mean = float(d.mean()) if d.size else 0.0
    return mean if mean > 1e-12 else 1.0


def unary_matrix(features, positions, comps, eta: float) -> np.ndarray:
    """(V, K) table of unary energies, vectorized over vertices."""
    features = np.asarray(features, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64)
    v = features.shape[0]
    out = np.empty((v, len(comps)))
    dim_f = features.shape[1]
    dim_s = positions.shape[1]
    for k, comp in enumerate(comps):
        lc_f = vmf_log_normalizer(comp.kappa_f, dim_f)
        lc_s = vmf_log_normalizer(comp.kappa_s, dim_s)
        out[:, k] = -(comp.kappa_f * features @ comp.mu_f + lc_f) - eta * (
            comp.kappa_s * positions @ comp.mu_s + lc_s
        )
    return out


def edge_weights(features, edges, sigma: float) -> np.ndarray:
    d = features[edges[:, 0]] - features[edges[:, 1]]
    return np.exp(-(d * d).sum(axis=1) / (2.0 * sigma * sigma))


# --- energies and moves ---------------------------------------------------------


def labeling_energy(labels, unary, edges, weights) -> float:
    """Gibbs energy of a labeling given precomputed tables.

    ``weights`` must already include the smoothing factor lambda.
    """
    labels = np.asarray(labels, dtype=np.int64)
    data = unary[np.arange(labels.size), labels - 1].sum()
    if len(edges):
        cut = labels[edges[:, 0]] != labels[edges[:, 1]]
        data += weights[cut].sum()
    return float(data)


def total_energy(labels: LabelConfig, features, mesh: TriangleMesh, comps,
                 params: ParcellationParams) -> float:
    """Spec-shaped Gibbs energy: unary sum plus smoothed Potts over mesh edges."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != mesh.n_vertices or labels.labels.size != mesh.n_vertices:
        raise ShapeMismatch("features/labels must cover every mesh vertex")
    norms = np.linalg.norm(features, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
        raise NonUnitInput("feature rows must be unit norm")
    positions = unit_positions(mesh)
    edges = mesh.edges()
    sigma = params.sigma if params.sigma is not None else default_sigma(features, edges)
    unary = unary_matrix(features, positions, comps, params.eta)
    weights = params.smoothing * edge_weights(features, edges, sigma)
    return labeling_energy(labels.labels, unary, edges, weights)


def alpha_expansion(labels, alpha: int, unary, edges, weights) -> np.ndarray:
    """One expansion move: every vertex keeps its label or switches to alpha.

    Exact for Potts pairwise terms; the returned labeling never has higher
    energy than the input. Uses the standard submodular two-terminal
    construction (keep = source side, switch = sink side).
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    if not 1 <= alpha <= unary.shape[1]:
        raise ShapeMismatch(f"alpha {alpha} outside [1, {unary.shape[1]}]")
    cap_s = np.zeros(n)   # cut when the vertex switches to alpha
    cap_t = np.zeros(n)   # cut when the vertex keeps its label
    theta0 = unary[np.arange(n), labels - 1]
    theta1 = unary[:, alpha - 1].copy()
    already = labels == alpha
    theta0 = np.where(already, theta1, theta0)
    base = np.minimum(theta0, theta1)
    cap_t += theta0 - base
    cap_s += theta1 - base
    pair_caps = []
    for eid in range(len(edges)):
        u, v = int(edges[eid, 0]), int(edges[eid, 1])
        w = float(weights[eid])
        a = w * (labels[u] != labels[v])
        b = w * (labels[u] != alpha)
        c = w * (labels[v] != alpha)
        # E = A + (C-A) x_u - C x_v + (B+C-A) (1-x_u) x_v  (+ dropped consts)
        coeff_u = c - a
        if coeff_u >= 0:
            cap_s[u] += coeff_u
        else:
            cap_t[u] += -coeff_u
        cap_t[v] += c
        pair_caps.append((u, v, b + c - a))
    net = FlowNetwork(n + 2)
    source, sink = n, n + 1
    for v in range(n):
        if cap_s[v] > 0:
            net.add_edge(source, v, cap_s[v])
        if cap_t[v] > 0:
            net.add_edge(v, sink, cap_t[v])
    for u, v, cap in pair_caps:
        if cap > 0:
            net.add_edge(u, v, cap)
    net.max_flow(source, sink)
    keep = net.source_side(source)[:n]
    out = labels.copy()
    out[~keep] = alpha
    return out


def repair_empty_labels(labels, n_regions: int, unary) -> np.ndarray:
    """Assign the worst-fit vertex (max unary under its label) to each empty label."""
    labels = np.asarray(labels, dtype=np.int64).copy()
    for k in range(1, n_regions + 1):
        if np.any(labels == k):
            continue
        counts = np.bincount(labels, minlength=n_regions + 1)
        fit = unary[np.arange(labels.size), labels - 1]
        # never empty another region by stealing its only vertex
        movable = counts[labels] > 1
        if not movable.any():
            raise EmptyLabel(f"cannot repair label {k}: no movable vertex")
        fit = np.where(movable, fit, -np.inf)
        labels[int(np.argmax(fit))] = k
    return labels


# --- initialization -------------------------------------------------------------


def init_labels(decoded_pattern, n_regions: int, seed: int = 0,
                n_rounds: int = 50) -> LabelConfig:
    """Spherical k-means on row-normalized features, labels in [1, K].

    Deterministic for a fixed seed; empty clusters steal the vertex that
    matches its current center worst.
    """
    features = normalize_rows(decoded_pattern)
    v = features.shape[0]
    if n_regions > v:
        raise ShapeMismatch(f"K={n_regions} exceeds {v} vertices")
    if n_regions == 1:
        return LabelConfig(labels=np.ones(v, dtype=np.int64), n_regions=1)
    rng = np.random.default_rng(seed)
    # k-means++ style seeding on cosine distance
    centers = [features[int(rng.integers(v))]]
    while len(centers) < n_regions:
        sims = np.max(np.stack([features @ c for c in centers]), axis=0)
        dist = np.maximum(1.0 - sims, 0.0)
        if dist.sum() < 1e-15:
            idx = int(rng.integers(v))
        else:
            idx = int(rng.choice(v, p=dist / dist.sum()))
        centers.append(features[idx])
    centers = np.stack(centers)
    assign = np.zeros(v, dtype=np.int64)
    for _ in range(n_rounds):
        sims = features @ centers.T
        new_assign = np.argmax(sims, axis=1)
        for k in range(n_regions):
            if not np.any(new_assign == k):
                own_sim = sims[np.arange(v), new_assign]
                counts = np.bincount(new_assign, minlength=n_regions)
                movable = counts[new_assign] > 1
                own_sim = np.where(movable, own_sim, np.inf)
                new_assign[int(np.argmin(own_sim))] = k
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for k in range(n_regions):
            mean = features[assign == k].mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm > 1e-12:
                centers[k] = mean / norm
    return LabelConfig(labels=assign + 1, n_regions=n_regions)


# --- main loop --------------------------------------------------------------------


@dataclass
class ParcellationResult:
    labels: LabelConfig
    energy: float
    energy_trace: np.ndarray
    n_iterations: int


def parcellate(decoded_pattern, mesh: TriangleMesh,
               params: ParcellationParams) -> ParcellationResult:
    """Alternate vMF re-estimation and expansion sweeps until converged.

    Re-estimated components are kept only if they do not raise the current
    labeling's energy, so the energy trace is non-increasing.
    """
    decoded_pattern = np.asarray(decoded_pattern, dtype=np.float64)
    if decoded_pattern.shape[0] != mesh.n_vertices:
        raise ShapeMismatch(
            f"features have {decoded_pattern.shape[0]} rows, mesh has "
            f"{mesh.n_vertices} vertices"
        )
    features = normalize_rows(decoded_pattern)
    positions = unit_positions(mesh)
    edges = mesh.edges()
    sigma = params.sigma if params.sigma is not None else default_sigma(features, edges)
    weights = params.smoothing * edge_weights(features, edges, sigma)

    config = init_labels(decoded_pattern, params.n_regions, params.seed)
    labels = config.labels
    comps = estimate_vmf(config, features, positions, params)
    unary = unary_matrix(features, positions, comps, params.eta)
    energy = labeling_energy(labels, unary, edges, weights)
    trace = [energy]

    for iteration in range(params.max_iters):
        labels = repair_empty_labels(labels, params.n_regions, unary)
        candidate = estimate_vmf(
            LabelConfig(labels=labels, n_regions=params.n_regions),
            features, positions, params,
        )
        cand_unary = unary_matrix(features, positions, candidate, params.eta)
        cand_energy = labeling_energy(labels, cand_unary, edges, weights)
        if cand_energy <= energy:
            comps, unary, energy = candidate, cand_unary, cand_energy
        for alpha in range(1, params.n_regions + 1):
            labels = alpha_expansion(labels, alpha, unary, edges, weights)
        new_energy = labeling_energy(labels, unary, edges, weights)
        improvement = trace[-1] - new_energy
        trace.append(new_energy)
        energy = new_energy
        if improvement < params.tol:
            break
    return ParcellationResult(
        labels=LabelConfig(labels=labels, n_regions=params.n_regions),
        energy=energy,
        energy_trace=np.array(trace),
        n_iterations=len(trace) - 1,
    )


# --- differentiable segmentation loss ----------------------------------------------


def seg_loss(labels: LabelConfig, decoded_pattern, mesh: TriangleMesh, comps,
             params: ParcellationParams):
    """Gibbs energy of the decoded pattern, differentiable in the pattern.

    Same arithmetic as total_energy, but rows are normalized internally so
    the loss (and its gradient) is a function of the raw decoded features.
    Returns ``(loss, d loss / d decoded_pattern)``.
    """
    x = np.asarray(decoded_pattern, dtype=np.float64)
    if x.shape[0] != mesh.n_vertices:
        raise ShapeMismatch("decoded pattern must cover every mesh vertex")
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms < 1e-12):
        raise DegenerateFeatures("zero-norm decoded rows")
    f = x / norms[:, None]
    positions = unit_positions(mesh)
    edges = mesh.edges()
    sigma = params.sigma if params.sigma is not None else default_sigma(f, edges)

    lab = labels.labels
    grad_f = np.zeros_like(f)
    loss = 0.0
    dim_s = positions.shape[1]
    for k, comp in enumerate(comps):
        members = lab == k + 1
        if not members.any():
            continue
        lc_f = vmf_log_normalizer(comp.kappa_f, f.shape[1])
        lc_s = vmf_log_normalizer(comp.kappa_s, dim_s)
        loss += float(
            -(comp.kappa_f * f[members] @ comp.mu_f + lc_f).sum()
            - params.eta
            * (comp.kappa_s * positions[members] @ comp.mu_s + lc_s).sum()
        )
        grad_f[members] += -comp.kappa_f * comp.mu_f[None, :]
    cut = lab[edges[:, 0]] != lab[edges[:, 1]]
    if cut.any():
        eu, ev = edges[cut, 0], edges[cut, 1]
        d = f[eu] - f[ev]
        w = np.exp(-(d * d).sum(axis=1) / (2.0 * sigma * sigma))
        loss += float(params.smoothing * w.sum())
        dw = params.smoothing * w[:, None] * (-d / (sigma * sigma))
        np.add.at(grad_f, eu, dw)
        np.add.at(grad_f, ev, -dw)
    # chain through row normalization: df/dx = (I - f f^T) / |x|
    proj = grad_f - f * (grad_f * f).sum(axis=1, keepdims=True)
    grad_x = proj / norms[:, None]
    return loss, grad_x
