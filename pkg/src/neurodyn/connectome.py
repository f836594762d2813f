"""Region time series, attention-guided correlation estimation, baselines.

The personalized network path runs region-mean series through
self-attention, retrieves pattern tokens with cross-attention and takes
Pearson correlations of the retrieved features. Standard estimators
(Pearson, partial correlation, covariance) serve as baselines.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyRegion, ShapeMismatch, SingularCovariance
from .parcellation import LabelConfig
from .representation import PatternRepresentation

DEFAULT_ATTN_DIM = 32


@dataclass
class RegionTimeSeries:
    """Region-mean signal matrix (K, T) plus region sizes."""

    h: np.ndarray
    sizes: np.ndarray


@dataclass
class AttentionParams:
    """Single-head projections for self- and cross-attention."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_qc: np.ndarray
    w_kc: np.ndarray
    w_vc: np.ndarray
    d_k: int

    @classmethod
    def init(cls, n_timepoints: int, token_dim: int, d_k: int = DEFAULT_ATTN_DIM,
             d_v: int = DEFAULT_ATTN_DIM, seed: int = 0):
        """Seeded random projections, scaled to keep logits O(1)."""
        rng = np.random.default_rng(seed)

        def proj(n_in, n_out):
            return rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)

        return cls(
            w_q=proj(n_timepoints, d_k),
            w_k=proj(n_timepoints, d_k),
            w_v=proj(n_timepoints, d_v),
            w_qc=proj(d_v, d_k),
            w_kc=proj(token_dim, d_k),
            w_vc=proj(token_dim, d_v),
            d_k=d_k,
        )


@dataclass
class FunctionalNetwork:
    """K x K connectivity matrix with provenance metadata."""

    fc: np.ndarray
    estimator: str
    threshold: float | None = None
    notes: dict = field(default_factory=dict)

    @property
    def n_regions(self) -> int:
        return self.fc.shape[0]


def region_timeseries(b, labels: LabelConfig) -> RegionTimeSeries:
    """Average vertex rows within each label; every region must be populated."""
    data = b.data if hasattr(b, "data") else np.asarray(b, dtype=np.float64)
    if labels.labels.size != data.shape[0]:
        raise ShapeMismatch(
            f"{labels.labels.size} labels for {data.shape[0]} vertices"
        )
    k = labels.n_regions
    h = np.empty((k, data.shape[1]))
    sizes = np.empty(k, dtype=np.int64)
    for region in range(1, k + 1):
        members = labels.labels == region
        if not members.any():
            raise EmptyRegion(f"region {region} has no vertices")
        h[region - 1] = data[members].mean(axis=0)
        sizes[region - 1] = members.sum()
    return RegionTimeSeries(h=h, sizes=sizes)


def _softmax_rows(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def self_attention(h, params: AttentionParams, form: str = "standard") -> np.ndarray:
    """Intra-region mixing of the (K, T) series, output (K, d_v).

    ``form="standard"`` computes Softmax(Q K^T / sqrt(d_k)) V;
    ``form="literal"`` applies the row softmax to (Q K^T / sqrt(d_k)) V
    directly, as sometimes printed.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.shape[1] != params.w_q.shape[0]:
        raise ShapeMismatch(
            f"series has T={h.shape[1]}, projections expect {params.w_q.shape[0]}"
        )
    q = h @ params.w_q
    k = h @ params.w_k
    v = h @ params.w_v
    logits = q @ k.T / np.sqrt(params.d_k)
    if form == "standard":
        return _softmax_rows(logits) @ v
    if form == "literal":
        return _softmax_rows(logits @ v)
    raise ShapeMismatch(f"unknown attention form {form!r}")


def cross_attention(h_intra, pattern: PatternRepresentation,
                    params: AttentionParams) -> np.ndarray:
    """Retrieve pattern tokens per region, output (K, d_v)."""
    h_intra = np.asarray(h_intra, dtype=np.float64)
    tokens = pattern.z_pattern
    if h_intra.shape[1] != params.w_qc.shape[0]:
        raise ShapeMismatch(
            f"query input dim {h_intra.shape[1]} vs projection "
            f"{params.w_qc.shape[0]}"
        )
    if tokens.shape[1] != params.w_kc.shape[0]:
        raise ShapeMismatch(
            f"token dim {tokens.shape[1]} vs projection {params.w_kc.shape[0]}"
        )
    q = h_intra @ params.w_qc
    k = tokens @ params.w_kc
    v = tokens @ params.w_vc
    attn = _softmax_rows(q @ k.T / np.sqrt(params.d_k))
    return attn @ v


def _pearson_rows(x) -> np.ndarray:
    """Pearson correlation between rows; zero-variance rows correlate 0."""
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean(axis=1, keepdims=True)
    std = np.sqrt((centered * centered).sum(axis=1))
    degenerate = std < 1e-300
    safe = np.where(degenerate, 1.0, std)
    normed = centered / safe[:, None]
    fc = normed @ normed.T
    fc[degenerate, :] = 0.0
    fc[:, degenerate] = 0.0
    np.fill_diagonal(fc, 1.0)
    fc = np.clip(fc, -1.0, 1.0)
    return 0.5 * (fc + fc.T)


def correlation_network(h_cross) -> FunctionalNetwork:
    """Personalized network: Pearson correlation between retrieved feature rows."""
    h_cross = np.asarray(h_cross, dtype=np.float64)
    if h_cross.shape[0] < 2:
        raise ShapeMismatch("need at least two regions")
    return FunctionalNetwork(fc=_pearson_rows(h_cross), estimator="personalized")


def pearson_fc(h) -> FunctionalNetwork:
    h = np.asarray(h, dtype=np.float64)
    if h.shape[1] < 2:
        raise ShapeMismatch("need T >= 2 samples")
    return FunctionalNetwork(fc=_pearson_rows(h), estimator="pearson")


def covariance_fc(h) -> FunctionalNetwork:
    h = np.asarray(h, dtype=np.float64)
    if h.shape[1] < 2:
        raise ShapeMismatch("need T >= 2 samples")
    cov = np.cov(h)
    cov = 0.5 * (cov + cov.T)
    return FunctionalNetwork(fc=np.atleast_2d(cov), estimator="covariance")


def partial_corr_from_cov(cov) -> np.ndarray:
    """Partial correlations from a covariance matrix via its precision."""
    cov = np.asarray(cov, dtype=np.float64)
    try:
        precision = np.linalg.inv(cov)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance("covariance is singular; use a ridge") from exc
    d = np.sqrt(np.diag(precision))
    pc = -precision / np.outer(d, d)
    np.fill_diagonal(pc, 1.0)
    pc = np.clip(0.5 * (pc + pc.T), -1.0, 1.0)
    return pc


def partial_corr_fc(h, ridge: float | None = None) -> FunctionalNetwork:
    """Partial correlation network with a ridge-regularized covariance.

    ``ridge=None`` uses the default 1e-3 * trace / K; pass 0.0 to disable
    (raises SingularCovariance on rank-deficient data).
    """
    h = np.asarray(h, dtype=np.float64)
    cov = np.cov(h)
    cov = np.atleast_2d(0.5 * (cov + cov.T))
    k = cov.shape[0]
    if ridge is None:
        ridge = 1e-3 * np.trace(cov) / k
    return FunctionalNetwork(
        fc=partial_corr_from_cov(cov + ridge * np.eye(k)),
        estimator="partial",
        notes={"ridge": float(ridge)},
    )


def personalized_network(b, labels: LabelConfig, pattern: PatternRepresentation,
                         params: AttentionParams,
                         form: str = "standard") -> FunctionalNetwork:
    """Full personalized path: region means, self- then cross-attention, Pearson."""
    region = region_timeseries(b, labels)
    h_intra = self_attention(region.h, params, form=form)
    h_cross = cross_attention(h_intra, pattern, params)
    net = correlation_network(h_cross)
    net.notes["attention_form"] = form
    return net
