"""Pattern-representation model: autoencoder, latent diffusion, extraction.

Desk-scale stand-in for a pretrained backbone. The encoder and decoder
are single affine maps (optional tanh on the encoder), the denoiser is a
one-hidden-layer perceptron whose time-step embedding joins at the
output layer, and the pattern decoder maps each pattern token back to a
vertex map. All losses carry hand-derived gradients that are checked
against finite differences in the test suite.

Pattern token protocol: the denoiser hidden activations at step t* on
the diffused latent are mean-pooled over time columns and reshaped into
``n_tokens`` tokens. Pooling over time keeps the tokens invariant to
time-column permutations; a zero signal with zero biases yields zero
tokens because the time embedding does not feed the hidden layer.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import NegativeLoss, ShapeMismatch, StepOutOfRange
from .nnet import act, act_deriv_from_output, pack, unpack

DEFAULT_N_TOKENS = 8


@dataclass
class BoldMatrix:
    """Vertex-by-time signal matrix with acquisition metadata."""

    data: np.ndarray
    tr: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ShapeMismatch(f"signal must be (V, T) with V,T >= 1, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ShapeMismatch("signal contains non-finite entries")

    @property
    def n_vertices(self) -> int:
        return self.data.shape[0]

    @property
    def n_timepoints(self) -> int:
        return self.data.shape[1]


@dataclass
class EncoderDecoderParams:
    """Affine encoder/decoder pair plus the pattern decoder D1.

    w_enc: (d, V), b_enc: (d,) -- per-column map to the latent space
    w_dec: (V, d), b_dec: (V,) -- linear map back to vertex space
    w_pat: (V, d_token), b_pat: (V,) -- per-token map to vertex space
    """

    w_enc: np.ndarray
    b_enc: np.ndarray
    w_dec: np.ndarray
    b_dec: np.ndarray
    w_pat: np.ndarray
    b_pat: np.ndarray
    activation: str = "tanh"

    @classmethod
    def init(cls, n_vertices, latent_dim, token_dim, seed=0, scale=0.1,
             activation="tanh"):
        rng = np.random.default_rng(seed)
        return cls(
            w_enc=scale * rng.standard_normal((latent_dim, n_vertices)),
            b_enc=np.zeros(latent_dim),
            w_dec=scale * rng.standard_normal((n_vertices, latent_dim)),
            b_dec=np.zeros(n_vertices),
            w_pat=scale * rng.standard_normal((n_vertices, token_dim)),
            b_pat=np.zeros(n_vertices),
            activation=activation,
        )

    @classmethod
    def identity(cls, n_vertices, token_dim=1):
        eye = np.eye(n_vertices)
        return cls(
            w_enc=eye.copy(), b_enc=np.zeros(n_vertices),
            w_dec=eye.copy(), b_dec=np.zeros(n_vertices),
            w_pat=np.zeros((n_vertices, token_dim)), b_pat=np.zeros(n_vertices),
            activation="identity",
        )


@dataclass
class DenoiserParams:
    """One-hidden-layer noise predictor; the time embedding feeds the output."""

    w1: np.ndarray       # (hidden, d)
    b1: np.ndarray       # (hidden,)
    w2: np.ndarray       # (d, hidden)
    b2: np.ndarray       # (d,)
    w_time: np.ndarray   # (d,) scaled by t / t_steps at the output layer
    activation: str = "tanh"

    @classmethod
    def init(cls, latent_dim, hidden_dim, seed=0, scale=0.1, activation="tanh"):
        rng = np.random.default_rng(seed)
        return cls(
            w1=scale * rng.standard_normal((hidden_dim, latent_dim)),
            b1=np.zeros(hidden_dim),
            w2=scale * rng.standard_normal((latent_dim, hidden_dim)),
            b2=np.zeros(latent_dim),
            w_time=np.zeros(latent_dim),
            activation=activation,
        )

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]


@dataclass
class DiffusionSchedule:
    """Forward-noising schedule; alphas_bar[i] covers 1-based step i+1."""

    betas: np.ndarray

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.ndim != 1 or self.betas.size < 1:
            raise ShapeMismatch("betas must be a non-empty 1-D sequence")
        if np.any(self.betas < 0) or np.any(self.betas >= 1):
            raise ShapeMismatch("betas must lie in [0, 1)")
        self.alphas_bar = np.cumprod(1.0 - self.betas)

    @classmethod
    def linear(cls, t_steps=50, beta_min=1e-4, beta_max=0.02):
        return cls(betas=np.linspace(beta_min, beta_max, t_steps))

    @property
    def t_steps(self) -> int:
        return self.betas.size

    def alpha_bar(self, t: int) -> float:
        if not 1 <= t <= self.t_steps:
            raise StepOutOfRange(f"step {t} outside [1, {self.t_steps}]")
        return float(self.alphas_bar[t - 1])


@dataclass
class PatternRepresentation:
    """Pattern tokens (n_tokens, token_dim) with the extraction protocol trace."""

    z_pattern: np.ndarray
    t_star: int
    seed: int


# --- encoder / decoder -------------------------------------------------------


def encode(b: BoldMatrix, params: EncoderDecoderParams) -> np.ndarray:
    """Latent matrix Z = act(W_enc B + b_enc), shape (d, T)."""
    if params.w_enc.shape[1] != b.n_vertices:
        raise ShapeMismatch(
            f"encoder expects {params.w_enc.shape[1]} vertices, signal has {b.n_vertices}"
        )
    return act(params.w_enc @ b.data + params.b_enc[:, None], params.activation)


def decode(z: np.ndarray, params: EncoderDecoderParams) -> np.ndarray:
    """Reconstruction W_dec Z + b_dec, shape (V, T)."""
    if z.shape[0] != params.w_dec.shape[1]:
        raise ShapeMismatch(
            f"decoder expects latent dim {params.w_dec.shape[1]}, got {z.shape[0]}"
        )
    return params.w_dec @ z + params.b_dec[:, None]


def stage1_loss(b: BoldMatrix, params: EncoderDecoderParams) -> float:
    """Mean squared autoencoding error."""
    diff = decode(encode(b, params), params) - b.data
    return float(np.mean(diff * diff))


def stage1_grads(b: BoldMatrix, params: EncoderDecoderParams):
    """Gradients of stage1_loss wrt (w_enc, b_enc, w_dec, b_dec)."""
    x = b.data
    z = encode(b, params)
    xhat = decode(z, params)
    g = (2.0 / x.size) * (xhat - x)
    dw_dec = g @ z.T
    db_dec = g.sum(axis=1)
    dz = params.w_dec.T @ g
    dz_pre = dz * act_deriv_from_output(z, params.activation)
    dw_enc = dz_pre @ x.T
    db_enc = dz_pre.sum(axis=1)
    return {"w_enc": dw_enc, "b_enc": db_enc, "w_dec": dw_dec, "b_dec": db_dec}


# --- diffusion ---------------------------------------------------------------


def forward_diffuse(z0, t: int, eps, schedule: DiffusionSchedule) -> np.ndarray:
    """Closed-form forward noising z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != z0.shape:
        raise ShapeMismatch(f"eps {eps.shape} must match z0 {z0.shape}")
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def denoiser_forward(z_t, t: int, den: DenoiserParams, schedule: DiffusionSchedule):
    """Predicted noise plus the cache needed for backprop."""
    z_t = np.asarray(z_t, dtype=np.float64)
    if z_t.ndim == 1:
        z_t = z_t[:, None]
    temb = t / schedule.t_steps
    pre = den.w1 @ z_t + den.b1[:, None]
    hidden = act(pre, den.activation)
    out = den.w2 @ hidden + den.b2[:, None] + (den.w_time * temb)[:, None]
    return out, (z_t, hidden, temb)


def _stage2_draw(z0, schedule: DiffusionSchedule, seed: int):
    rng = np.random.default_rng(seed)
    t = int(rng.integers(1, schedule.t_steps + 1))
    eps = rng.standard_normal(z0.shape)
    return t, eps


def stage2_loss(z0, schedule: DiffusionSchedule, den: DenoiserParams,
                seed: int) -> float:
    """Noise-prediction MSE on one (t, eps) draw taken from ``seed``."""
    t, eps = _stage2_draw(z0, schedule, seed)
    z_t = forward_diffuse(z0, t, eps, schedule)
    pred, _ = denoiser_forward(z_t, t, den, schedule)
    diff = pred - eps
    return float(np.mean(diff * diff))


def stage2_grads(z0, schedule: DiffusionSchedule, den: DenoiserParams, seed: int):
    """Gradients of stage2_loss wrt the denoiser parameters (same draw)."""
    t, eps = _stage2_draw(z0, schedule, seed)
    z_t = forward_diffuse(z0, t, eps, schedule)
    pred, (z_t, hidden, temb) = denoiser_forward(z_t, t, den, schedule)
    g = (2.0 / pred.size) * (pred - eps)
    dw2 = g @ hidden.T
    db2 = g.sum(axis=1)
    dw_time = temb * g.sum(axis=1)
    dhidden = den.w2.T @ g
    dpre = dhidden * act_deriv_from_output(hidden, den.activation)
    dw1 = dpre @ z_t.T
    db1 = dpre.sum(axis=1)
    return {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2, "w_time": dw_time}


# --- pattern extraction ------------------------------------------------------


def extract_pattern(b: BoldMatrix, params: EncoderDecoderParams,
                    den: DenoiserParams, schedule: DiffusionSchedule,
                    t_star: int | None = None, seed: int = 0,
                    n_tokens: int = DEFAULT_N_TOKENS,
                    noise_std: float = 0.0) -> PatternRepresentation:
    """Pattern tokens from the denoiser hidden layer at step t*.

    The latent is taken along the deterministic forward-marginal mean
    ``sqrt(ab) z0`` by default; set ``noise_std`` to also mix in the
    seeded noise draw. Hidden activations are mean-pooled over time and
    reshaped to ``(n_tokens, hidden_dim // n_tokens)``.
    """
    if t_star is None:
        t_star = int(np.ceil(schedule.t_steps / 2))
    if den.hidden_dim % n_tokens != 0:
        raise ShapeMismatch(
            f"hidden dim {den.hidden_dim} not divisible by n_tokens {n_tokens}"
        )
    z0 = encode(b, params)
    eps = np.random.default_rng(seed).standard_normal(z0.shape)
    z_t = forward_diffuse(z0, t_star, noise_std * eps, schedule)
    _, (_, hidden, _) = denoiser_forward(z_t, t_star, den, schedule)
    pooled = hidden.mean(axis=1)
    tokens = pooled.reshape(n_tokens, -1)
    return PatternRepresentation(z_pattern=tokens, t_star=t_star, seed=seed)


def decode_pattern(pattern: PatternRepresentation,
                   params: EncoderDecoderParams) -> np.ndarray:
    """Map each token to a vertex map; columns are per-token maps, (V, M)."""
    z = pattern.z_pattern
    if z.shape[1] != params.w_pat.shape[1]:
        raise ShapeMismatch(
            f"token dim {z.shape[1]} does not match pattern decoder "
            f"{params.w_pat.shape[1]}"
        )
    return params.w_pat @ z.T + params.b_pat[:, None]


# --- stage 3 and physics -----------------------------------------------------


def _pattern_mean_map(pattern, params):
    zbar = pattern.z_pattern.mean(axis=0)
    return params.w_pat @ zbar + params.b_pat, zbar


def stage3_loss(b: BoldMatrix, pattern: PatternRepresentation,
                params: EncoderDecoderParams) -> float:
    """MSE between the signal and the token-mean vertex map broadcast over time."""
    xbar, _ = _pattern_mean_map(pattern, params)
    if xbar.shape[0] != b.n_vertices:
        raise ShapeMismatch(
            f"pattern decoder yields {xbar.shape[0]} vertices, signal has {b.n_vertices}"
        )
    diff = xbar[:, None] - b.data
    return float(np.mean(diff * diff))


def stage3_grads(b: BoldMatrix, pattern: PatternRepresentation,
                 params: EncoderDecoderParams):
    """Gradients of stage3_loss wrt (w_pat, b_pat)."""
    xbar, zbar = _pattern_mean_map(pattern, params)
    n_t = b.n_timepoints
    g = (2.0 / b.data.size) * (n_t * xbar - b.data.sum(axis=1))
    return {"w_pat": np.outer(g, zbar), "b_pat": g}


def physics_loss_value(b: BoldMatrix, params: EncoderDecoderParams,
                       den: DenoiserParams, schedule: DiffusionSchedule,
                       phi_dyn: np.ndarray, t_star: int | None = None,
                       seed: int = 0, n_tokens: int = DEFAULT_N_TOKENS) -> float:
    """Consistency loss between the decoded pattern map and the dynamic field."""
    pattern = extract_pattern(b, params, den, schedule, t_star, seed, n_tokens)
    xbar, _ = _pattern_mean_map(pattern, params)
    if phi_dyn.shape != b.data.shape:
        raise ShapeMismatch(f"dynamic field {phi_dyn.shape} vs signal {b.data.shape}")
    diff = xbar[:, None] - phi_dyn
    return float(np.mean(diff * diff))


def physics_grads(b: BoldMatrix, params: EncoderDecoderParams,
                  den: DenoiserParams, schedule: DiffusionSchedule,
                  phi_dyn: np.ndarray, t_star: int | None = None,
                  seed: int = 0, n_tokens: int = DEFAULT_N_TOKENS):
    """Gradients of the physics loss through the whole extraction chain.

    Returns two dicts, one for the encoder/pattern-decoder parameters and
    one for the denoiser (its output layer does not sit on the token path,
    so those entries are zero).
    """
    if t_star is None:
        t_star = int(np.ceil(schedule.t_steps / 2))
    x = b.data
    z0 = encode(b, params)
    ab = schedule.alpha_bar(t_star)
    z_t = np.sqrt(ab) * z0
    _, (_, hidden, _) = denoiser_forward(z_t, t_star, den, schedule)
    n_tok = n_tokens
    token_dim = den.hidden_dim // n_tok
    pooled = hidden.mean(axis=1)
    zbar = pooled.reshape(n_tok, token_dim).mean(axis=0)
    xbar = params.w_pat @ zbar + params.b_pat

    n_t = x.shape[1]
    g = (2.0 / x.size) * (n_t * xbar - phi_dyn.sum(axis=1))
    dw_pat = np.outer(g, zbar)
    db_pat = g
    dzbar = params.w_pat.T @ g
    dpooled = np.tile(dzbar / n_tok, n_tok)
    dhidden = np.repeat(dpooled[:, None], hidden.shape[1], axis=1) / hidden.shape[1]
    dpre = dhidden * act_deriv_from_output(hidden, den.activation)
    dw1 = dpre @ z_t.T
    db1 = dpre.sum(axis=1)
    dz_t = den.w1.T @ dpre
    dz0 = np.sqrt(ab) * dz_t
    dz0_pre = dz0 * act_deriv_from_output(z0, params.activation)
    dw_enc = dz0_pre @ x.T
    db_enc = dz0_pre.sum(axis=1)
    enc_grads = {
        "w_enc": dw_enc, "b_enc": db_enc,
        "w_dec": np.zeros_like(params.w_dec), "b_dec": np.zeros_like(params.b_dec),
        "w_pat": dw_pat, "b_pat": db_pat,
    }
    den_grads = {
        "w1": dw1, "b1": db1,
        "w2": np.zeros_like(den.w2), "b2": np.zeros_like(den.b2),
        "w_time": np.zeros_like(den.w_time),
    }
    return enc_grads, den_grads


# --- joint loss and task losses ----------------------------------------------


def joint_loss(task_loss: float, seg_loss: float, lambda1: float = 0.1) -> float:
    """Fine-tuning objective: task loss plus weighted segmentation loss."""
    if task_loss < 0 or seg_loss < 0:
        raise NegativeLoss(
            f"loss terms must be >= 0, got task={task_loss}, seg={seg_loss}"
        )
    return task_loss + lambda1 * seg_loss


def cross_entropy(prob_true_class) -> float:
    """Mean negative log-probability assigned to the true class."""
    p = np.asarray(prob_true_class, dtype=np.float64)
    if np.any(p <= 0) or np.any(p > 1):
        raise ShapeMismatch("class probabilities must lie in (0, 1]")
    return float(np.mean(-np.log(p)))


def mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    return float(np.mean((pred - target) ** 2))


# --- parameter packing and training loops -------------------------------------

ENC_FIELDS = ("w_enc", "b_enc", "w_dec", "b_dec", "w_pat", "b_pat")
DEN_FIELDS = ("w1", "b1", "w2", "b2", "w_time")


def params_to_vector(obj, fields) -> np.ndarray:
    return pack([getattr(obj, f) for f in fields])


def params_from_vector(obj, fields, vec):
    shapes = [getattr(obj, f).shape for f in fields]
    arrays = unpack(np.asarray(vec, dtype=np.float64), shapes)
    return replace(obj, **dict(zip(fields, arrays)))


def grads_to_vector(grads: dict, fields) -> np.ndarray:
    return pack([grads[f] for f in fields])


def train_stage1(b: BoldMatrix, params: EncoderDecoderParams, steps: int,
                 rate: float):
    """Autoencoder training by backtracking gradient descent."""
    from .nnet import descend

    fields = ("w_enc", "b_enc", "w_dec", "b_dec")

    def loss_and_grad(vec):
        p = params_from_vector(params, fields, vec)
        return stage1_loss(b, p), grads_to_vector(stage1_grads(b, p), fields)

    vec, trace = descend(params_to_vector(params, fields), loss_and_grad, steps, rate)
    return params_from_vector(params, fields, vec), trace


def train_stage2(b: BoldMatrix, params: EncoderDecoderParams,
                 den: DenoiserParams, schedule: DiffusionSchedule, steps: int,
                 rate: float, seed: int = 0):
    """Denoiser training; each step works on a fresh seeded (t, eps) draw."""
    from .nnet import grad_step

    z0 = encode(b, params)
    trace = []
    for step in range(steps):
        draw_seed = seed + step

        def loss_and_grad(vec, _s=draw_seed):
            d = params_from_vector(den, DEN_FIELDS, vec)
            return (
                stage2_loss(z0, schedule, d, _s),
                grads_to_vector(stage2_grads(z0, schedule, d, _s), DEN_FIELDS),
            )

        vec, loss, _ = grad_step(params_to_vector(den, DEN_FIELDS), loss_and_grad, rate)
        den = params_from_vector(den, DEN_FIELDS, vec)
        trace.append(loss)
    return den, np.array(trace)


def train_stage3(b: BoldMatrix, params: EncoderDecoderParams,
                 pattern: PatternRepresentation, steps: int, rate: float):
    """Pattern-decoder training against the raw signal."""
    from .nnet import descend

    fields = ("w_pat", "b_pat")

    def loss_and_grad(vec):
        p = params_from_vector(params, fields, vec)
        return (
            stage3_loss(b, pattern, p),
            grads_to_vector(stage3_grads(b, pattern, p), fields),
        )

    vec, trace = descend(params_to_vector(params, fields), loss_and_grad, steps, rate)
    return params_from_vector(params, fields, vec), trace


def physics_finetune(b: BoldMatrix, params: EncoderDecoderParams,
                     den: DenoiserParams, schedule: DiffusionSchedule,
                     phi_dyn: np.ndarray, steps: int, rate: float,
                     t_star: int | None = None, seed: int = 0,
                     n_tokens: int = DEFAULT_N_TOKENS,
                     freeze: tuple = ()):
    """Fine-tune on the physics-consistency loss; all parts unfrozen by default.

    ``freeze`` may contain "encoder", "denoiser" or "pattern_decoder".
    """
    enc_fields = tuple(
        f for f in ENC_FIELDS
        if not (f in ("w_enc", "b_enc") and "encoder" in freeze)
        and not (f in ("w_pat", "b_pat") and "pattern_decoder" in freeze)
    )
    den_fields = () if "denoiser" in freeze else DEN_FIELDS

    from .nnet import grad_step

    trace = []
    for _ in range(steps):
        joint = np.concatenate([
            params_to_vector(params, enc_fields),
            params_to_vector(den, den_fields) if den_fields else np.empty(0),
        ])
        n_enc = params_to_vector(params, enc_fields).size

        def loss_and_grad(vec):
            p = params_from_vector(params, enc_fields, vec[:n_enc])
            d = (params_from_vector(den, den_fields, vec[n_enc:])
                 if den_fields else den)
            loss = physics_loss_value(b, p, d, schedule, phi_dyn, t_star, seed,
                                      n_tokens)
            ge, gd = physics_grads(b, p, d, schedule, phi_dyn, t_star, seed,
                                   n_tokens)
            gvec = np.concatenate([
                grads_to_vector(ge, enc_fields),
                grads_to_vector(gd, den_fields) if den_fields else np.empty(0),
            ])
            return loss, gvec

        joint, loss, _ = grad_step(joint, loss_and_grad, rate)
        params = params_from_vector(params, enc_fields, joint[:n_enc])
        if den_fields:
            den = params_from_vector(den, den_fields, joint[n_enc:])
        trace.append(loss)
    return params, den, np.array(trace)
