"""Observation-conditioned DDPM over action chunks.

The policy works internally on actions rescaled to [-1, 1] per dimension and
on z-scored observations; both sets of statistics live with the parameters
and are written into checkpoints.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graphcore import (
    MlpSpec,
    Node,
    ParamVector,
    ShapeError,
    Tape,
    init_mlp,
    mlp_forward,
    mlp_graph,
)

CHECKPOINT_MAGIC = b"PDCK1"
N_FREQS = 4
TIME_EMBED_DIM = 1 + 2 * N_FREQS


@dataclass(frozen=True)
class NoiseSchedule:
    """Coefficients of the reverse update ``A <- alpha (A - gamma eps) + sigma z``.

    Index ``k`` runs over ``0..K-1``; index 0 is the last (least noisy) step.
    """

    K: int
    beta_min: float
    beta_max: float
    betas: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    sigma: np.ndarray
    alpha_bar: np.ndarray


def make_schedule(K: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Linear variance schedule with the standard DDPM posterior coefficients."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(
            f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )
    betas = np.linspace(beta_min, beta_max, K)
    alpha_bar = np.cumprod(1.0 - betas)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    alpha = 1.0 / np.sqrt(1.0 - betas)
    gamma = betas / np.sqrt(1.0 - alpha_bar)
    # posterior variance; prev[0] = 1 makes sigma[0] exactly 0
    sigma = np.sqrt(betas * (1.0 - prev) / (1.0 - alpha_bar))
    return NoiseSchedule(
        K=int(K),
        beta_min=float(beta_min),
        beta_max=float(beta_max),
        betas=betas,
        alpha=alpha,
        gamma=gamma,
        sigma=sigma,
        alpha_bar=alpha_bar,
    )


def forward_noise(A0, k, eps, sched: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_k) A0 + sqrt(1 - abar_k) eps``; ``k`` may be an int or one index per row."""
    A0 = np.asarray(A0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if A0.shape != eps.shape:
        raise ShapeError(f"noise shape {eps.shape} does not match actions {A0.shape}")
    k = np.asarray(k)
    if np.any(k < 0) or np.any(k >= sched.K):
        raise ValueError(f"step index out of range [0, {sched.K})")
    abar = sched.alpha_bar[k]
    if abar.ndim == 1 and A0.ndim == 2:
        abar = abar[:, None]
    return np.sqrt(abar) * A0 + np.sqrt(1.0 - abar) * eps


def timestep_embedding(k, K: int) -> np.ndarray:
    """``k/K`` followed by sin/cos features at 4 octave-spaced frequencies."""
    k = np.atleast_1d(np.asarray(k, dtype=np.float64))
    phase = k / K
    freqs = np.pi * 2.0 ** np.arange(N_FREQS)
    ang = phase[:, None] * freqs[None, :]
    return np.concatenate([phase[:, None], np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class DiffusionPolicy:
    encoder_spec: MlpSpec
    denoiser_spec: MlpSpec
    params: ParamVector
    schedule: NoiseSchedule
    chunk_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    obs_mean: np.ndarray
    obs_std: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.denoiser_spec.output_dim != self.chunk_dim:
            raise ShapeError("denoiser output must equal the chunk dimension")
        expected_in = self.encoder_spec.output_dim + self.chunk_dim + TIME_EMBED_DIM
        if self.denoiser_spec.input_dim != expected_in:
            raise ShapeError(
                f"denoiser input {self.denoiser_spec.input_dim} != "
                f"features + chunk + time embedding ({expected_in})"
            )
        for name in ("action_low", "action_high", "obs_mean", "obs_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    @classmethod
    def create(
        cls,
        obs_dim: int,
        chunk_dim: int,
        rng: np.random.Generator,
        *,
        feature_dim: int = 32,
        encoder_hidden=(64,),
        denoiser_hidden=(128, 128),
        activation: str = "relu",
        K: int = 50,
        beta_min: float = 1e-3,
        beta_max: float = 0.3,
        action_low=None,
        action_high=None,
        obs_mean=None,
        obs_std=None,
    ) -> "DiffusionPolicy":
        enc = MlpSpec(obs_dim, tuple(encoder_hidden), feature_dim, activation)
        den = MlpSpec(
            feature_dim + chunk_dim + TIME_EMBED_DIM, tuple(denoiser_hidden), chunk_dim, activation
        )
        arrays = init_mlp(enc, rng, "enc.")
        arrays.update(init_mlp(den, rng, "den."))
        return cls(
            encoder_spec=enc,
            denoiser_spec=den,
            params=ParamVector.from_arrays(arrays),
            schedule=make_schedule(K, beta_min, beta_max),
            chunk_dim=chunk_dim,
            action_low=-np.ones(chunk_dim) if action_low is None else action_low,
            action_high=np.ones(chunk_dim) if action_high is None else action_high,
            obs_mean=np.zeros(obs_dim) if obs_mean is None else obs_mean,
            obs_std=np.ones(obs_dim) if obs_std is None else obs_std,
        )

    @property
    def obs_dim(self) -> int:
        return self.encoder_spec.input_dim

    def with_params(self, params: ParamVector) -> "DiffusionPolicy":
        return DiffusionPolicy(
            self.encoder_spec, self.denoiser_spec, params, self.schedule, self.chunk_dim,
            self.action_low, self.action_high, self.obs_mean, self.obs_std, dict(self.metadata),
        )

    def copy(self) -> "DiffusionPolicy":
        return self.with_params(self.params.copy())

    # -- normalisation -----------------------------------------------------

    def fit_normalization(self, obs: np.ndarray, actions: np.ndarray) -> None:
        """Set observation z-scoring and [-1, 1] action scaling from data."""
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        self.metadata["normalization"] = "data"
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        self.obs_mean = obs.mean(axis=0)
        std = obs.std(axis=0)
        self.obs_std = np.where(std > 1e-6, std, 1.0)
        self.action_low = actions.min(axis=0)
        self.action_high = actions.max(axis=0)

    def set_bounds(self, low: float = 0.0, high: float = 1.0) -> None:
        """Fixed box normalisation: [low, high] maps to [-1, 1] for actions and observations."""
        self.action_low = np.full(self.chunk_dim, float(low))
        self.action_high = np.full(self.chunk_dim, float(high))
        self.obs_mean = np.full(self.obs_dim, 0.5 * (low + high))
        self.obs_std = np.full(self.obs_dim, 0.5 * (high - low))
        self.metadata["normalization"] = "workspace"

    def _action_scale(self) -> tuple[np.ndarray, np.ndarray]:
        center = 0.5 * (self.action_high + self.action_low)
        half = 0.5 * (self.action_high - self.action_low)
        return center, np.where(half > 1e-9, half, 1.0)

    def normalize_actions(self, actions) -> np.ndarray:
        center, half = self._action_scale()
        return (np.asarray(actions, dtype=np.float64) - center) / half

    def denormalize_actions(self, actions) -> np.ndarray:
        center, half = self._action_scale()
        return np.asarray(actions, dtype=np.float64) * half + center

    def normalize_obs(self, obs) -> np.ndarray:
        return (np.asarray(obs, dtype=np.float64) - self.obs_mean) / self.obs_std

    # -- network -----------------------------------------------------------

    def _check_dims(self, obs: np.ndarray, chunk: np.ndarray) -> None:
        if obs.ndim != 2 or obs.shape[1] != self.obs_dim:
            raise ShapeError(f"observations must be (n, {self.obs_dim}), got {obs.shape}")
        if chunk.ndim != 2 or chunk.shape[1] != self.chunk_dim:
            raise ShapeError(f"chunks must be (n, {self.chunk_dim}), got {chunk.shape}")
        if obs.shape[0] != chunk.shape[0]:
            raise ShapeError("observation and chunk batch sizes differ")

    def features(self, obs) -> np.ndarray:
        """Encoder output for raw observations."""
        return mlp_forward(self.encoder_spec, self.params, self.normalize_obs(obs), "enc.")

    def predict_noise(self, obs, A_k, k, features: np.ndarray | None = None) -> np.ndarray:
        """Noise estimate for raw observations and normalised noisy chunks (batched)."""
        A_k = np.atleast_2d(np.asarray(A_k, dtype=np.float64))
        if features is None:
            obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
            self._check_dims(obs, A_k)
            features = self.features(obs)
        n = A_k.shape[0]
        temb = timestep_embedding(np.broadcast_to(k, (n,)), self.schedule.K)
        x = np.concatenate([features, A_k, temb], axis=1)
        return mlp_forward(self.denoiser_spec, self.params, x, "den.")

    def noise_graph(self, tape: Tape, nodes: dict[str, Node], obs, A_k, k) -> Node:
        """Record the noise prediction; ``nodes`` come from ``tape.watch`` or ``tape.frozen``."""
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        A_k = np.atleast_2d(np.asarray(A_k, dtype=np.float64))
        self._check_dims(obs, A_k)
        feats = mlp_graph(tape, self.encoder_spec, nodes, tape.constant(self.normalize_obs(obs)), "enc.")
        temb = timestep_embedding(np.broadcast_to(k, (A_k.shape[0],)), self.schedule.K)
        x = tape.concat([feats, tape.constant(A_k), tape.constant(temb)], axis=1)
        return mlp_graph(tape, self.denoiser_spec, nodes, x, "den.")


def ddpm_loss_graph(tape: Tape, nodes, policy: DiffusionPolicy, obs, A0, k, eps) -> Node:
    """Mean squared noise-prediction error, recorded on ``tape``.

    ``A0`` is the normalised clean chunk batch (n, chunk_dim).
    """
    A0 = np.atleast_2d(np.asarray(A0, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    A_k = forward_noise(A0, k, eps, policy.schedule)
    pred = policy.noise_graph(tape, nodes, obs, A_k, k)
    if not np.all(np.isfinite(pred.value)):
        raise FloatingPointError("denoiser produced non-finite output")
    return tape.mean(tape.sum_of_squares(pred - eps, axis=1)) * (1.0 / policy.chunk_dim)


def ddpm_loss(policy: DiffusionPolicy, obs, A0, k, eps) -> float:
    tape = Tape()
    return float(ddpm_loss_graph(tape, tape.frozen(policy.params), policy, obs, A0, k, eps).value)


def sample(policy: DiffusionPolicy, obs, rng: np.random.Generator, normalized: bool = False) -> np.ndarray:
    """Draw one action chunk per observation row by running the reverse chain.

    Observation features are computed once and reused at every denoising
    step. The final step adds no noise. Returns raw (denormalised) actions
    unless ``normalized`` is set.
    """
    obs = np.asarray(obs, dtype=np.float64)
    single = obs.ndim == 1
    obs = np.atleast_2d(obs)
    if obs.shape[1] != policy.obs_dim:
        raise ShapeError(f"observations must have dim {policy.obs_dim}, got {obs.shape[1]}")
    sched = policy.schedule
    n = obs.shape[0]
    feats = policy.features(obs)
    A = rng.standard_normal((n, policy.chunk_dim))
    for k in range(sched.K - 1, -1, -1):
        eps_hat = policy.predict_noise(None, A, k, features=feats)
        A = sched.alpha[k] * (A - sched.gamma[k] * eps_hat)
        if k > 0:
            A = A + sched.sigma[k] * rng.standard_normal(A.shape)
    out = A if normalized else policy.denormalize_actions(A)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# checkpoint file


def save_checkpoint(path, policy: DiffusionPolicy, metadata: dict | None = None) -> None:
    """Write ``PDCK1`` header, header byte-length line, JSON header, raw <f8 params."""
    meta = dict(policy.metadata)
    if metadata:
        meta.update(metadata)
    header = {
        "schedule": {
            "K": policy.schedule.K,
            "beta_min": policy.schedule.beta_min,
            "beta_max": policy.schedule.beta_max,
        },
        "encoder_spec": policy.encoder_spec.to_dict(),
        "denoiser_spec": policy.denoiser_spec.to_dict(),
        "chunk_dim": policy.chunk_dim,
        "layout": [[n, list(s)] for n, s in policy.params.layout],
        "action_low": policy.action_low.tolist(),
        "action_high": policy.action_high.tolist(),
        "obs_mean": policy.obs_mean.tolist(),
        "obs_std": policy.obs_std.tolist(),
        "metadata": meta,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b"\n")
        fh.write(str(len(blob)).encode() + b"\n")
        fh.write(blob)
        fh.write(policy.params.values.astype("<f8").tobytes())


def load_checkpoint(path) -> DiffusionPolicy:
    data = Path(path).read_bytes()
    magic, _, rest = data.partition(b"\n")
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a policy checkpoint (magic {magic[:8]!r})")
    size_line, _, rest = rest.partition(b"\n")
    size = int(size_line)
    header = json.loads(rest[:size])
    raw = rest[size:]
    layout = [(n, tuple(s)) for n, s in header["layout"]]
    expected = sum(int(np.prod(s, dtype=np.int64)) for _, s in layout)
    if len(raw) != 8 * expected:
        raise ValueError(f"{path}: expected {expected} parameters, found {len(raw) / 8:g}")
    params = ParamVector(np.frombuffer(raw, dtype="<f8").astype(np.float64), layout)
    enc, den = header["encoder_spec"], header["denoiser_spec"]
    s = header["schedule"]
    return DiffusionPolicy(
        encoder_spec=MlpSpec(enc["input_dim"], tuple(enc["hidden_dims"]), enc["output_dim"], enc["activation"]),
        denoiser_spec=MlpSpec(den["input_dim"], tuple(den["hidden_dims"]), den["output_dim"], den["activation"]),
        params=params,
        schedule=make_schedule(s["K"], s["beta_min"], s["beta_max"]),
        chunk_dim=header["chunk_dim"],
        action_low=np.array(header["action_low"]),
        action_high=np.array(header["action_high"]),
        obs_mean=np.array(header["obs_mean"]),
        obs_std=np.array(header["obs_std"]),
        metadata=header["metadata"],
    )
