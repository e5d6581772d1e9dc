"""Self-verification suite behind ``foldpref check``.

Each check returns a :class:`CheckResult` with the measured quantity and the
tolerance it was held to, so a report line reads like
``PASS grad/dpo  max_rel_err=3.1e-08  tol=1e-04``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import prefloss
from .ddpm import DiffusionPolicy, ddpm_loss_graph
from .graphcore import Tape, finite_diff_check
from .harness import ProbeSet, checkpoint_score
from .datasets import Demonstration
from .prefloss import (
    LOSE,
    WIN,
    EmbeddingEncoder,
    LossConfig,
    PreferenceBatch,
    Residuals,
    compute_residuals,
    estimate_qref,
    rko_weights,
    similarity_weights,
)

OBS_DIM = 6
CHUNK_DIM = 4


@dataclass
class CheckResult:
    name: str
    measured: float
    tolerance: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{tag} {self.name:<34} measured={self.measured:.3e}  tol={self.tolerance:.0e}{extra}"


def _within(name: str, measured: float, tol: float, detail: str = "") -> CheckResult:
    ok = bool(np.isfinite(measured) and measured <= tol)
    return CheckResult(name, float(measured), tol, ok, detail)


def tiny_policy(rng: np.random.Generator, obs_dim: int = OBS_DIM, chunk_dim: int = CHUNK_DIM) -> DiffusionPolicy:
    # smooth activations keep central differences meaningful
    policy = DiffusionPolicy.create(
        obs_dim, chunk_dim, rng, feature_dim=5, encoder_hidden=(7,), denoiser_hidden=(9,),
        activation="tanh", K=10, beta_min=1e-2, beta_max=0.3,
    )
    policy.set_bounds(0.0, 1.0)
    return policy


def perturbed(policy: DiffusionPolicy, rng: np.random.Generator, scale: float) -> DiffusionPolicy:
    vals = policy.params.values + scale * rng.standard_normal(len(policy.params))
    return policy.with_params(policy.params.with_values(vals))


def random_batch(rng: np.random.Generator, n_win: int, n_lose: int, K: int = 10,
                 obs_dim: int = OBS_DIM, chunk_dim: int = CHUNK_DIM) -> PreferenceBatch:
    n = n_win + n_lose
    labels = np.r_[np.full(n_win, WIN), np.full(n_lose, LOSE)]
    obs = rng.uniform(0.0, 1.0, size=(n, obs_dim))
    chunks = rng.uniform(-1.0, 1.0, size=(n, chunk_dim))
    return PreferenceBatch.draw(obs, chunks, labels, K, rng)


LossBuilder = Callable[[Tape, dict], object]


def loss_builders(theta: DiffusionPolicy, ref: DiffusionPolicy, batch: PreferenceBatch,
                  cfg: LossConfig) -> dict[str, LossBuilder]:
    """Closures ``(tape, nodes) -> scalar`` for every loss, with non-differentiable inputs pinned."""
    enc = EmbeddingEncoder.from_reference(ref)
    win, lose = batch.win_idx, batch.lose_idx
    omega = similarity_weights(batch.obs[win], batch.obs[lose], enc, cfg.tau).omega

    # Q_ref carries no gradient, so it is frozen at the base point
    probe = Tape()
    base = compute_residuals(probe, probe.frozen(theta.params), theta, ref, batch)
    qref = estimate_qref(base.rewards(cfg.beta).value, cfg)

    def res(tape, nodes):
        return compute_residuals(tape, nodes, theta, ref, batch)

    return {
        "ddpm": lambda t, n: ddpm_loss_graph(t, n, theta, batch.obs, batch.chunks, batch.k, batch.eps),
        "dpo": lambda t, n: prefloss.dpo_loss(res(t, n), prefloss.pair_rows(batch.labels), cfg),
        "rpo": lambda t, n: prefloss.rpo_loss(res(t, n), omega, cfg),
        "kto": lambda t, n: prefloss.kto_loss(res(t, n), cfg, qref),
        "rko": lambda t, n: prefloss.rko_loss(res(t, n), cfg, omega, True, qref),
    }


def gradient_checks(n_batches: int = 20, components: int = 24, seed: int = 0,
                    tol: float = 1e-4) -> list[CheckResult]:
    """Central differences (step 1e-5) against reverse mode for every loss."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(n_batches):
        ref = tiny_policy(rng)
        theta = perturbed(ref, rng, 0.05)
        n_win = int(rng.integers(1, 5))
        n_lose = int(rng.integers(1, 9 - n_win))
        batch = random_batch(rng, n_win, n_lose, ref.schedule.K)
        cfg = LossConfig(beta=float(rng.uniform(1.0, 20.0)))
        idx = rng.choice(len(theta.params), size=min(components, len(theta.params)), replace=False)
        for name, fn in loss_builders(theta, ref, batch, cfg).items():
            err = finite_diff_check(fn, theta.params, 1e-5, idx)
            worst[name] = max(worst.get(name, 0.0), err)
    return [_within(f"grad/{k}", v, tol, f"{n_batches} batches") for k, v in worst.items()]


def identity_checks(seed: int = 1) -> list[CheckResult]:
    """Loss values when the trainable policy equals the reference."""
    rng = np.random.default_rng(seed)
    ref = tiny_policy(rng)
    batch = random_batch(rng, 3, 3, ref.schedule.K)
    out = []

    def run(fn):
        tape = Tape()
        res = compute_residuals(tape, tape.frozen(ref.params), ref, ref, batch)
        return float(fn(res).value)

    cfg = LossConfig(beta=10.0)
    dpo = run(lambda r: prefloss.dpo_loss(r, prefloss.pair_rows(batch.labels), cfg))
    out.append(_within("identity/dpo=ln2", abs(dpo - math.log(2.0)), 1e-10))
    cfg0 = LossConfig(beta=12.0, qref_mode="zero")
    kto = run(lambda r: prefloss.kto_loss(r, cfg0))
    out.append(_within("identity/kto=-0.5", abs(kto + 0.5), 1e-10))
    omega = similarity_weights(batch.obs[batch.win_idx], batch.obs[batch.lose_idx],
                               EmbeddingEncoder.from_reference(ref), cfg0.tau).omega
    rko = run(lambda r: prefloss.rko_loss(r, cfg0, omega))
    out.append(_within("identity/rko=-0.5", abs(rko + 0.5), 1e-10))

    win = [_fake_demo(rng, "pref_1") for _ in range(2)]
    lose = [_fake_demo(rng, "pref_2") for _ in range(2)]
    probe = ProbeSet.build(ref, win, lose, 4, seed)
    out.append(_within("identity/gap=0", abs(checkpoint_score(ref, ref, probe, 12.0)), 1e-10))
    return out


def _fake_demo(rng: np.random.Generator, pref: str) -> Demonstration:
    steps = [(rng.uniform(0, 1, OBS_DIM), rng.uniform(0, 1, CHUNK_DIM)) for _ in range(2)]
    return Demonstration("toy", pref, "standard", 0, steps, 1.0)


def direction_checks(seed: int = 2) -> list[CheckResult]:
    """Improving winners relative to the reference must lower every loss below its identity value."""
    rng = np.random.default_rng(seed)
    ref = tiny_policy(rng)
    batch = random_batch(rng, 2, 2, ref.schedule.K)
    tape = Tape()
    base = compute_residuals(tape, tape.frozen(ref.params), ref, ref, batch)
    # hand-built residuals: winners 0.5 lower than the reference, losers 0.5 higher
    shift = np.where(batch.labels == WIN, -0.5, 0.5)
    res = Residuals(tape.constant(base.ref + shift), base.ref, batch.labels)
    cfg = LossConfig(beta=1.0, qref_mode="zero")
    omega = np.full((2, 2), 0.5)
    values = {
        "dpo": (float(prefloss.dpo_loss(res, prefloss.pair_rows(batch.labels), cfg).value), math.log(2.0)),
        "rpo": (float(prefloss.rpo_loss(res, omega, cfg).value), math.log(2.0)),
        "kto": (float(prefloss.kto_loss(res, cfg).value), -0.5),
        "rko": (float(prefloss.rko_loss(res, cfg, omega).value), -0.5),
    }
    out = []
    for name, (v, neutral) in values.items():
        margin = v - neutral
        out.append(CheckResult(f"direction/{name}", margin, 0.0, bool(margin < 0),
                               "loss minus identity value, must be < 0"))
    return out


def reweighting_checks(seed: int = 3) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    row_err, mean_err = 0.0, 0.0
    for _ in range(50):
        w, l = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        fw, fl = rng.standard_normal((w, 5)), rng.standard_normal((l, 5))
        omega = similarity_weights(fw, fl, EmbeddingEncoder(), float(rng.uniform(0.01, 2.0))).omega
        row_err = max(row_err, float(np.abs(omega.sum(axis=1) - 1.0).max()))
        mean_err = max(mean_err, abs(float(rko_weights(omega).mean()) - 1.0))
    out.append(_within("reweight/omega_rows_sum_1", row_err, 1e-12))
    out.append(_within("reweight/mean_s_1", mean_err, 1e-12))
    s = rko_weights(np.array([[1.0]]))
    out.append(_within("reweight/W1L1_s", float(np.abs(s - [4 / 3, 2 / 3]).max()), 1e-15))

    wide = similarity_weights(rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), EmbeddingEncoder(), 1e6).omega
    out.append(_within("reweight/tau_large_uniform", float(np.abs(wide - 0.2).max()), 1e-6))
    fw = np.array([[1.0, 0.0], [0.0, 1.0]])
    fl = np.array([[1.0, 0.1], [0.6, 0.8], [-1.0, 0.2]])
    sharp = similarity_weights(fw, fl, EmbeddingEncoder(), 1e-3).omega
    onehot = np.zeros_like(sharp)
    onehot[np.arange(2), sharp.argmax(axis=1)] = 1.0
    out.append(_within("reweight/tau_small_onehot", float(np.abs(sharp - onehot).max()), 1e-6))

    # loss-level reductions
    ref = tiny_policy(rng)
    theta = perturbed(ref, rng, 0.05)
    batch = random_batch(rng, 3, 2, ref.schedule.K)
    cfg = LossConfig(beta=12.0)
    tape = Tape()
    res = compute_residuals(tape, tape.frozen(theta.params), theta, ref, batch)
    omega = similarity_weights(batch.obs[batch.win_idx], batch.obs[batch.lose_idx],
                               EmbeddingEncoder.from_reference(ref), cfg.tau).omega
    norw = float(prefloss.rko_loss(res, cfg, omega, reweight=False).value)
    kto = float(prefloss.kto_loss(res, cfg).value)
    out.append(_within("reweight/rko_norw=kto", abs(norw - kto), 1e-12))

    pair = random_batch(rng, 1, 1, ref.schedule.K)
    tape = Tape()
    res = compute_residuals(tape, tape.frozen(theta.params), theta, ref, pair)
    rpo = float(prefloss.rpo_loss(res, np.ones((1, 1)), cfg).value)
    dpo = float(prefloss.dpo_loss(res, np.array([[0, 1]]), cfg).value)
    out.append(_within("reweight/rpo_single_pair=dpo", abs(rpo - dpo), 1e-12))
    return out


def run_all(gradient_batches: int = 20) -> list[CheckResult]:
    return (gradient_checks(gradient_batches) + identity_checks() + direction_checks()
            + reweighting_checks())
