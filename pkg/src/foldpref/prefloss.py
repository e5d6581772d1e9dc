"""Preference objectives for diffusion policies: DPO, RPO, KTO and RKO.

All four share one primitive, the per-sample denoising residual
``||eps - eps_net(obs, A_k, k)||^2`` evaluated with the same ``(k, eps)``
draw under the trainable policy and the frozen reference.

Sign convention. With ``delta = residual_theta - residual_ref`` and the
per-sample reward ``r = beta * (residual_ref - residual_theta)``, every loss
here decreases when the trainable policy denoises winners better than the
reference and losers worse:

* DPO  ``softplus(beta * (delta_w - delta_l))`` averaged over pairs
* RPO  the same pair term weighted by ``omega[i, j]``, rows summed, averaged over winners
* KTO  ``-mean(sigmoid(q * (r - Q_ref)))``
* RKO  ``-sum(s * sigmoid(q * (r - Q_ref))) / sum(s)``
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .ddpm import DiffusionPolicy, forward_noise
from .graphcore import Node, ShapeError, Tape

WIN, LOSE = 1, -1


@dataclass(frozen=True)
class LossConfig:
    beta: float
    tau: float = 0.15
    qref_mode: Literal["zero", "batch_mean_clamped"] = "batch_mean_clamped"

    def __post_init__(self) -> None:
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.qref_mode not in ("zero", "batch_mean_clamped"):
            raise ValueError(f"unknown qref_mode {self.qref_mode!r}")


@dataclass(frozen=True)
class PreferenceSample:
    obs: np.ndarray
    chunk: np.ndarray
    label: int
    source_pref: str = ""

    def __post_init__(self) -> None:
        if self.label not in (WIN, LOSE):
            raise ValueError(f"label must be +1 or -1, got {self.label}")


@dataclass
class PreferenceBatch:
    """Stacked samples plus their diffusion draws.

    ``chunks`` are normalised clean chunks. ``k``/``eps`` hold one draw per
    row and are shared by the trainable and reference evaluations.
    """

    obs: np.ndarray
    chunks: np.ndarray
    labels: np.ndarray
    k: np.ndarray
    eps: np.ndarray

    def __post_init__(self) -> None:
        self.obs = np.atleast_2d(np.asarray(self.obs, dtype=np.float64))
        self.chunks = np.atleast_2d(np.asarray(self.chunks, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        self.k = np.asarray(self.k, dtype=np.int64).ravel()
        self.eps = np.atleast_2d(np.asarray(self.eps, dtype=np.float64))
        n = self.obs.shape[0]
        if not (self.chunks.shape[0] == self.labels.size == self.k.size == self.eps.shape[0] == n):
            raise ShapeError("batch fields disagree on the number of samples")
        if self.eps.shape != self.chunks.shape:
            raise ShapeError(f"noise {self.eps.shape} does not match chunks {self.chunks.shape}")
        if not np.all(np.isin(self.labels, (WIN, LOSE))):
            raise ValueError("labels must be +1 or -1")

    def __len__(self) -> int:
        return self.labels.size

    @property
    def win_idx(self) -> np.ndarray:
        return np.flatnonzero(self.labels == WIN)

    @property
    def lose_idx(self) -> np.ndarray:
        return np.flatnonzero(self.labels == LOSE)

    @classmethod
    def draw(cls, obs, chunks, labels, K: int, rng: np.random.Generator) -> "PreferenceBatch":
        """Attach fresh uniform steps and standard-normal noise."""
        chunks = np.atleast_2d(np.asarray(chunks, dtype=np.float64))
        k = rng.integers(0, K, size=chunks.shape[0])
        eps = rng.standard_normal(chunks.shape)
        return cls(obs, chunks, labels, k, eps)

    def subset(self, idx) -> "PreferenceBatch":
        idx = np.asarray(idx)
        return PreferenceBatch(self.obs[idx], self.chunks[idx], self.labels[idx], self.k[idx], self.eps[idx])


# ---------------------------------------------------------------------------
# residuals


def residual_graph(tape: Tape, nodes, policy: DiffusionPolicy, batch: PreferenceBatch) -> Node:
    """Per-sample squared noise error, shape (B,), recorded on ``tape``."""
    A_k = forward_noise(batch.chunks, batch.k, batch.eps, policy.schedule)
    pred = policy.noise_graph(tape, nodes, batch.obs, A_k, batch.k)
    return tape.sum_of_squares(tape.sub(batch.eps, pred), axis=1)


def residual(policy: DiffusionPolicy, batch: PreferenceBatch) -> np.ndarray:
    """Per-sample squared noise error without recording (used for the frozen reference)."""
    A_k = forward_noise(batch.chunks, batch.k, batch.eps, policy.schedule)
    pred = policy.predict_noise(batch.obs, A_k, batch.k)
    return ((batch.eps - pred) ** 2).sum(axis=1)


@dataclass
class Residuals:
    """Trainable residuals (a tape node) next to frozen reference residuals."""

    theta: Node
    ref: np.ndarray
    labels: np.ndarray

    @property
    def tape(self) -> Tape:
        return self.theta.tape

    def delta(self) -> Node:
        return self.theta - self.ref

    def rewards(self, beta: float) -> Node:
        return self.tape.mul(beta, self.tape.sub(self.ref, self.theta))


def compute_residuals(tape: Tape, nodes, theta: DiffusionPolicy, ref: DiffusionPolicy, batch: PreferenceBatch) -> Residuals:
    return Residuals(residual_graph(tape, nodes, theta, batch), residual(ref, batch), batch.labels)


# ---------------------------------------------------------------------------
# similarity weights


@dataclass
class EmbeddingEncoder:
    """Frozen observation embedding ``f(o)`` used for similarity weights."""

    mode: Literal["frozen_reference_encoder", "identity"] = "identity"
    policy: DiffusionPolicy | None = None

    def __post_init__(self) -> None:
        if self.mode == "frozen_reference_encoder":
            if self.policy is None:
                raise ValueError("reference-encoder mode needs a policy")
            # private copy so later training cannot touch it
            self.policy = self.policy.copy()
        elif self.mode != "identity":
            raise ValueError(f"unknown encoder mode {self.mode!r}")

    @classmethod
    def from_reference(cls, policy: DiffusionPolicy) -> "EmbeddingEncoder":
        return cls("frozen_reference_encoder", policy)

    def __call__(self, obs) -> np.ndarray:
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        if self.mode == "identity":
            return obs
        return self.policy.features(obs)


@dataclass
class SimilarityWeights:
    omega: np.ndarray
    s: np.ndarray | None = None
    zero_norm_winners: list[int] = field(default_factory=list)
    zero_norm_losers: list[int] = field(default_factory=list)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-pairwise cosine; zero-norm rows give cosine 0. Also returns the zero-norm masks."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ua = np.divide(a, na[:, None], out=np.zeros_like(a), where=na[:, None] > 0)
    ub = np.divide(b, nb[:, None], out=np.zeros_like(b), where=nb[:, None] > 0)
    return ua @ ub.T, na == 0, nb == 0


def similarity_weights(win_obs, lose_obs, encoder: EmbeddingEncoder, tau: float) -> SimilarityWeights:
    """Row-stochastic ``omega[i, j] = softmax_j(-(1 - cos(f(o_i^w), f(o_j^l))) / tau)``."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    fw, fl = encoder(win_obs), encoder(lose_obs)
    if fw.shape[0] < 1 or fl.shape[0] < 1:
        raise ValueError("similarity weights need at least one winner and one loser")
    cos, zw, zl = cosine_matrix(fw, fl)
    logits = -(1.0 - cos) / tau
    logits -= logits.max(axis=1, keepdims=True)
    z = np.exp(logits)
    omega = z / z.sum(axis=1, keepdims=True)
    return SimilarityWeights(
        omega, zero_norm_winners=np.flatnonzero(zw).tolist(), zero_norm_losers=np.flatnonzero(zl).tolist()
    )


def rko_weights(omega: np.ndarray) -> np.ndarray:
    """Per-sample weights ``[1 + max_j omega_ij ..., sum_i omega_ij ...]`` rescaled to mean 1."""
    omega = np.asarray(omega, dtype=np.float64)
    if omega.ndim != 2 or omega.shape[0] < 1 or omega.shape[1] < 1:
        raise ShapeError(f"omega must be a non-empty matrix, got shape {omega.shape}")
    if np.any(omega < 0) or not np.allclose(omega.sum(axis=1), 1.0, rtol=0, atol=1e-9):
        raise ValueError("omega must be row-stochastic")
    raw = np.concatenate([1.0 + omega.max(axis=1), omega.sum(axis=0)])
    return raw * (raw.size / raw.sum())


# ---------------------------------------------------------------------------
# losses


def dpo_loss(res: Residuals, pairs: np.ndarray, cfg: LossConfig) -> Node:
    """``pairs`` is (P, 2) of (winner row, loser row) indices into the batch."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.shape[0] == 0:
        raise ValueError("DPO needs at least one (win, lose) pair")
    if np.any(res.labels[pairs[:, 0]] != WIN) or np.any(res.labels[pairs[:, 1]] != LOSE):
        raise ValueError("each DPO pair must be (winner, loser)")
    tape = res.tape
    delta = res.delta()
    margin = tape.sub(delta[pairs[:, 0]], delta[pairs[:, 1]])
    return tape.mean(tape.softplus(tape.mul(cfg.beta, margin)))


def rpo_loss(res: Residuals, omega: np.ndarray, cfg: LossConfig) -> Node:
    """Every winner against every loser, pair terms weighted by ``omega``."""
    win = np.flatnonzero(res.labels == WIN)
    lose = np.flatnonzero(res.labels == LOSE)
    if win.size == 0 or lose.size == 0:
        raise ValueError("RPO needs both winners and losers in the batch")
    omega = np.asarray(omega, dtype=np.float64)
    if omega.shape != (win.size, lose.size):
        raise ShapeError(f"omega shape {omega.shape} != ({win.size}, {lose.size})")
    tape = res.tape
    delta = res.delta()
    dw = tape.reshape(delta[win], (win.size, 1))
    dl = tape.reshape(delta[lose], (1, lose.size))
    terms = tape.softplus(tape.mul(cfg.beta, tape.sub(dw, dl)))
    return tape.sum(tape.mul(omega, terms)) * (1.0 / win.size)


def estimate_qref(rewards, cfg: LossConfig) -> float:
    """Centering constant for KTO/RKO utilities; never differentiated."""
    rewards = np.asarray(rewards, dtype=np.float64).ravel()
    if rewards.size == 0:
        raise ValueError("cannot estimate Q_ref from an empty batch")
    if cfg.qref_mode == "zero":
        return 0.0
    return max(0.0, float(rewards.mean()))


def utilities(res: Residuals, cfg: LossConfig, qref: float | None = None) -> Node:
    tape = res.tape
    r = res.rewards(cfg.beta)
    if qref is None:
        qref = estimate_qref(r.value, cfg)
    return tape.sigmoid(tape.mul(res.labels.astype(np.float64), tape.sub(r, qref)))


def kto_loss(res: Residuals, cfg: LossConfig, qref: float | None = None) -> Node:
    if res.labels.size == 0:
        raise ValueError("empty batch")
    return -res.tape.mean(utilities(res, cfg, qref))


def rko_sample_weights(res_labels: np.ndarray, omega: np.ndarray | None) -> np.ndarray:
    """Spread ``rko_weights`` over batch rows; single-class batches get all ones."""
    labels = np.asarray(res_labels)
    win = np.flatnonzero(labels == WIN)
    lose = np.flatnonzero(labels == LOSE)
    s = np.ones(labels.size)
    if win.size and lose.size:
        if omega is None:
            raise ValueError("mixed batch needs omega for reweighting")
        w = rko_weights(omega)
        s[win] = w[: win.size]
        s[lose] = w[win.size:]
    return s


def rko_loss(
    res: Residuals,
    cfg: LossConfig,
    omega: np.ndarray | None = None,
    reweight: bool = True,
    qref: float | None = None,
) -> Node:
    """Similarity-weighted KTO. With ``reweight=False`` every weight is 1."""
    if res.labels.size == 0:
        raise ValueError("empty batch")
    s = rko_sample_weights(res.labels, omega) if reweight else np.ones(res.labels.size)
    u = utilities(res, cfg, qref)
    return -res.tape.sum(res.tape.mul(s, u)) * (1.0 / s.sum())


# ---------------------------------------------------------------------------
# dispatch


METHODS = ("dpo", "rpo", "kto", "rko", "rko_norw")


def pair_rows(labels: np.ndarray) -> np.ndarray:
    """Zip winners and losers in batch order into (P, 2) DPO pairs."""
    win = np.flatnonzero(labels == WIN)
    lose = np.flatnonzero(labels == LOSE)
    n = min(win.size, lose.size)
    if n == 0:
        raise ValueError("DPO needs at least one winner and one loser")
    return np.stack([win[:n], lose[:n]], axis=1)


def preference_loss(
    method: str,
    tape: Tape,
    nodes,
    theta: DiffusionPolicy,
    ref: DiffusionPolicy,
    batch: PreferenceBatch,
    cfg: LossConfig,
    encoder: EmbeddingEncoder | None = None,
) -> Node:
    """Record ``method``'s loss for one batch on ``tape``."""
    if method not in METHODS:
        raise ValueError(f"unknown preference method {method!r}")
    needs_pairs = method in ("dpo", "rpo")
    if needs_pairs and (batch.win_idx.size == 0 or batch.lose_idx.size == 0):
        raise ValueError(f"{method} needs winners and losers in every batch")
    res = compute_residuals(tape, nodes, theta, ref, batch)
    if method == "dpo":
        return dpo_loss(res, pair_rows(batch.labels), cfg)
    if method == "kto":
        return kto_loss(res, cfg)
    omega = None
    if batch.win_idx.size and batch.lose_idx.size and method != "rko_norw":
        encoder = encoder or EmbeddingEncoder.from_reference(ref)
        omega = similarity_weights(batch.obs[batch.win_idx], batch.obs[batch.lose_idx], encoder, cfg.tau).omega
    if method == "rpo":
        return rpo_loss(res, omega, cfg)
    return rko_loss(res, cfg, omega, reweight=(method == "rko"))
