"""Training loops, checkpoint selection, rollout evaluation, sweeps and A/B analysis."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import betaln

from . import foldsim
from .datasets import Demonstration, stack_steps
from .ddpm import DiffusionPolicy, ddpm_loss_graph, sample
from .foldsim import TaskSet
from .graphcore import Tape, backward
from .prefloss import (
    LOSE,
    METHODS,
    WIN,
    EmbeddingEncoder,
    LossConfig,
    PreferenceBatch,
    preference_loss,
    residual,
)

log = logging.getLogger(__name__)

ALL_METHODS = ("ddpm",) + METHODS
DEFAULT_BETA = {"dpo": 10.0, "rpo": 20.0, "kto": 12.0, "rko": 12.0, "rko_norw": 12.0}


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss or parameter."""


@dataclass
class PolicyConfig:
    feature_dim: int = 32
    encoder_hidden: tuple[int, ...] = (64,)
    denoiser_hidden: tuple[int, ...] = (128, 128)
    activation: str = "relu"
    K: int = 50
    beta_min: float = 1e-3
    beta_max: float = 0.3
    normalization: str = "workspace"

    def fit(self, policy: DiffusionPolicy, obs: np.ndarray, actions: np.ndarray) -> None:
        if self.normalization == "workspace":
            policy.set_bounds(0.0, 1.0)
        elif self.normalization == "data":
            policy.fit_normalization(obs, actions)
        else:
            raise ValueError(f"unknown normalization {self.normalization!r}")

    def build(self, obs_dim: int, chunk_dim: int, rng: np.random.Generator) -> DiffusionPolicy:
        return DiffusionPolicy.create(
            obs_dim, chunk_dim, rng,
            feature_dim=self.feature_dim,
            encoder_hidden=tuple(self.encoder_hidden),
            denoiser_hidden=tuple(self.denoiser_hidden),
            activation=self.activation,
            K=self.K, beta_min=self.beta_min, beta_max=self.beta_max,
        )


@dataclass
class TrainConfig:
    method: str = "ddpm"
    steps: int = 20000
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    loss_cfg: LossConfig | None = None
    eval_every: int = 500
    seed: int = 0
    holdout_fraction: float = 0.1
    probe_draws: int = 8
    ddpm_init: str = "fresh"
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    def __post_init__(self) -> None:
        if self.method not in ALL_METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {ALL_METHODS}")
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1 or self.probe_draws < 1:
            raise ValueError("steps must be >= 0; batch_size, eval_every, probe_draws >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.ddpm_init not in ("fresh", "reference"):
            raise ValueError("ddpm_init must be 'fresh' or 'reference'")
        if self.loss_cfg is None and self.method != "ddpm":
            self.loss_cfg = LossConfig(beta=DEFAULT_BETA[self.method])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["policy"]["encoder_hidden"] = list(self.policy.encoder_hidden)
        d["policy"]["denoiser_hidden"] = list(self.policy.denoiser_hidden)
        return d


# ---------------------------------------------------------------------------
# optimisers


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, values: np.ndarray, grad: np.ndarray) -> None:
        values -= self.lr * grad


class Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, values: np.ndarray, grad: np.ndarray) -> None:
        if self.m is None:
            self.m = np.zeros_like(values)
            self.v = np.zeros_like(values)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        values -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(cfg: TrainConfig):
    return Adam(cfg.learning_rate) if cfg.optimizer == "adam" else SGD(cfg.learning_rate)


@dataclass
class TrainResult:
    policy: DiffusionPolicy
    losses: list[float]
    gaps: list[tuple[int, float]] = field(default_factory=list)
    selected_step: int | None = None


def _check_finite(loss: float, params, step: int) -> None:
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss at step {step}")
    if not params.is_finite():
        raise NumericalError(f"non-finite parameters after step {step}")


# ---------------------------------------------------------------------------
# reference training


def _fit_ddpm(policy: DiffusionPolicy, obs: np.ndarray, chunks: np.ndarray, cfg: TrainConfig,
              rng: np.random.Generator) -> list[float]:
    """Minimise the noise-prediction loss in place; ``chunks`` are normalised."""
    opt = make_optimizer(cfg)
    losses = []
    n = obs.shape[0]
    K = policy.schedule.K
    for it in range(cfg.steps):
        idx = rng.integers(0, n, size=cfg.batch_size)
        k = rng.integers(0, K, size=cfg.batch_size)
        eps = rng.standard_normal((cfg.batch_size, policy.chunk_dim))
        tape = Tape()
        loss = ddpm_loss_graph(tape, tape.watch(policy.params), policy, obs[idx], chunks[idx], k, eps)
        grad = backward(tape, loss, policy.params)
        opt.step(policy.params.values, grad.values)
        value = float(loss.value)
        _check_finite(value, policy.params, it)
        losses.append(value)
    return losses


def dataset_loss(policy: DiffusionPolicy, obs, actions, draws: int = 8, seed: int = 0) -> float:
    """Noise-prediction loss averaged over fixed draws, for before/after comparisons."""
    rng = np.random.default_rng(seed)
    chunks = policy.normalize_actions(actions)
    obs_r = np.repeat(obs, draws, axis=0)
    ch_r = np.repeat(chunks, draws, axis=0)
    k = rng.integers(0, policy.schedule.K, size=ch_r.shape[0])
    eps = rng.standard_normal(ch_r.shape)
    tape = Tape()
    return float(ddpm_loss_graph(tape, tape.frozen(policy.params), policy, obs_r, ch_r, k, eps).value)


def train_reference(demos: list[Demonstration], cfg: TrainConfig) -> TrainResult:
    """Fit a DDPM policy to preference-free demonstrations."""
    if not demos:
        raise ValueError("reference dataset is empty")
    obs, actions = stack_steps(demos)
    rng = np.random.default_rng(cfg.seed)
    policy = cfg.policy.build(obs.shape[1], actions.shape[1], rng)
    cfg.policy.fit(policy, obs, actions)
    losses = _fit_ddpm(policy, obs, policy.normalize_actions(actions), cfg, rng)
    policy.metadata.update({"role": "reference", "train": cfg.to_dict(), "steps_done": cfg.steps,
                            "n_demos": len(demos), "prefs": sorted({d.pref for d in demos})})
    return TrainResult(policy, losses)


# ---------------------------------------------------------------------------
# preference training


def split_holdout(demos: Sequence[Demonstration], fraction: float, seed: int, salt: int):
    """Deterministic (train, held-out) split of one class; keeps at least one training demo."""
    n = len(demos)
    n_hold = int(round(n * fraction)) if n > 1 else 0
    n_hold = min(max(n_hold, 1 if (fraction > 0 and n > 1) else 0), n - 1)
    perm = np.random.default_rng([seed, salt]).permutation(n)
    hold = sorted(perm[:n_hold].tolist())
    held = set(hold)
    return [demos[i] for i in range(n) if i not in held], [demos[i] for i in hold]


@dataclass
class ProbeSet:
    """Held-out samples with fixed diffusion draws for checkpoint scoring."""

    batch: PreferenceBatch

    @classmethod
    def build(cls, policy: DiffusionPolicy, win: list[Demonstration], lose: list[Demonstration],
              draws: int, seed: int) -> "ProbeSet":
        if not win or not lose:
            raise ValueError("checkpoint scoring needs held-out winners and losers")
        wo, wa = stack_steps(win)
        lo, la = stack_steps(lose)
        obs = np.repeat(np.concatenate([wo, lo]), draws, axis=0)
        chunks = np.repeat(policy.normalize_actions(np.concatenate([wa, la])), draws, axis=0)
        labels = np.repeat(np.r_[np.full(len(wo), WIN), np.full(len(lo), LOSE)], draws)
        return cls(PreferenceBatch.draw(obs, chunks, labels, policy.schedule.K, np.random.default_rng(seed)))


def checkpoint_score(theta: DiffusionPolicy, ref: DiffusionPolicy, probe: ProbeSet, beta: float) -> float:
    """Mean winner reward minus mean loser reward, ``r = beta (res_ref - res_theta)``."""
    b = probe.batch
    r = beta * (residual(ref, b) - residual(theta, b))
    return float(r[b.labels == WIN].mean() - r[b.labels == LOSE].mean())


class _Sampler:
    """Assembles training batches for one method."""

    def __init__(self, method: str, obs_w, ch_w, obs_l, ch_l, batch_size: int, K: int):
        self.method, self.B, self.K = method, batch_size, K
        self.obs_w, self.ch_w = obs_w, ch_w
        self.obs_l, self.ch_l = obs_l, ch_l
        if method in ("dpo", "rpo") and (obs_w is None or obs_l is None or not len(obs_w) or not len(obs_l)):
            raise ValueError(f"{method} needs both winning and losing samples to form pairs")
        if method not in ("ddpm",) and obs_l is not None:
            self.obs_all = np.concatenate([obs_w, obs_l])
            self.ch_all = np.concatenate([ch_w, ch_l])
            self.lab_all = np.r_[np.full(len(obs_w), WIN), np.full(len(obs_l), LOSE)]

    def __call__(self, rng: np.random.Generator) -> PreferenceBatch:
        B = self.B
        if self.method == "ddpm":
            i = rng.integers(0, len(self.obs_w), size=B)
            return PreferenceBatch.draw(self.obs_w[i], self.ch_w[i], np.full(B, WIN), self.K, rng)
        if self.method in ("dpo", "rpo"):
            h = max(B // 2, 1)
            i = rng.integers(0, len(self.obs_w), size=h)
            j = rng.integers(0, len(self.obs_l), size=h)
            obs = np.concatenate([self.obs_w[i], self.obs_l[j]])
            ch = np.concatenate([self.ch_w[i], self.ch_l[j]])
            lab = np.r_[np.full(h, WIN), np.full(h, LOSE)]
            return PreferenceBatch.draw(obs, ch, lab, self.K, rng)
        i = rng.integers(0, len(self.obs_all), size=B)
        return PreferenceBatch.draw(self.obs_all[i], self.ch_all[i], self.lab_all[i], self.K, rng)


def train_preference(method: str, win_demos: list[Demonstration], lose_demos: list[Demonstration] | None,
                     ref: DiffusionPolicy | None, cfg: TrainConfig) -> TrainResult:
    """Fine-tune from ``ref`` with a preference loss, or train the winners-only DDPM baseline.

    The DDPM baseline never touches ``lose_demos`` or ``ref`` (unless
    ``cfg.ddpm_init == "reference"``, which only copies the reference weights).
    """
    if method not in ALL_METHODS:
        raise ValueError(f"unknown method {method!r}")
    cfg = replace(cfg, method=method, loss_cfg=cfg.loss_cfg if method == cfg.method else None)
    if not win_demos:
        raise ValueError("no winning demonstrations")
    rng = np.random.default_rng(cfg.seed)
    win_train, win_hold = split_holdout(win_demos, cfg.holdout_fraction, cfg.seed, 1)
    wo, wa = stack_steps(win_train)

    if method == "ddpm":
        if cfg.ddpm_init == "reference":
            if ref is None:
                raise ValueError("ddpm_init='reference' needs a reference policy")
            theta = ref.copy()
        else:
            theta = cfg.policy.build(wo.shape[1], wa.shape[1], rng)
            cfg.policy.fit(theta, wo, wa)
        losses = _fit_ddpm(theta, wo, theta.normalize_actions(wa), cfg, rng)
        theta.metadata = {"role": "ddpm", "train": cfg.to_dict(), "n_win": len(win_demos)}
        return TrainResult(theta, losses)

    if ref is None:
        raise ValueError(f"{method} needs a reference checkpoint")
    if not lose_demos:
        raise ValueError(f"{method} needs losing demonstrations in the preference dataset")
    lose_train, lose_hold = split_holdout(lose_demos, cfg.holdout_fraction, cfg.seed, 2)
    lo, la = stack_steps(lose_train)
    sampler = _Sampler(method, wo, ref.normalize_actions(wa), lo, ref.normalize_actions(la),
                       cfg.batch_size, ref.schedule.K)
    probe = None
    if win_hold and lose_hold:
        probe = ProbeSet.build(ref, win_hold, lose_hold, cfg.probe_draws, cfg.seed + 7919)

    theta = ref.copy()
    encoder = EmbeddingEncoder.from_reference(ref)
    opt = make_optimizer(cfg)
    losses: list[float] = []
    gaps: list[tuple[int, float]] = []
    best_values, best_gap, best_step = theta.params.values.copy(), -np.inf, None
    for it in range(cfg.steps):
        batch = sampler(rng)
        tape = Tape()
        loss = preference_loss(method, tape, tape.watch(theta.params), theta, ref, batch, cfg.loss_cfg, encoder)
        grad = backward(tape, loss, theta.params)
        opt.step(theta.params.values, grad.values)
        value = float(loss.value)
        _check_finite(value, theta.params, it)
        losses.append(value)
        done = it + 1
        if probe is not None and (done % cfg.eval_every == 0 or done == cfg.steps):
            gap = checkpoint_score(theta, ref, probe, cfg.loss_cfg.beta)
            gaps.append((done, gap))
            if gap > best_gap:
                best_gap, best_step = gap, done
                best_values = theta.params.values.copy()
    if probe is not None and best_step is not None:
        theta = theta.with_params(theta.params.with_values(best_values))
    theta.metadata = {"role": method, "train": cfg.to_dict(), "n_win": len(win_demos),
                      "n_lose": len(lose_demos), "selected_step": best_step,
                      "selected_gap": None if best_step is None else best_gap}
    return TrainResult(theta, losses, gaps, best_step)


# ---------------------------------------------------------------------------
# evaluation


Actor = Callable[[list, np.ndarray, np.random.Generator], np.ndarray]


def policy_actor(policy: DiffusionPolicy) -> Actor:
    return lambda states, obs, rng: sample(policy, obs, rng)


def expert_actor(pref: foldsim.PreferenceSpec, noise_scale: float = 0.0) -> Actor:
    def act(states, obs, rng):
        return np.stack([foldsim.expert_action(s, pref, noise_scale, rng) for s in states])
    return act


@dataclass
class EvalReport:
    scores: list[float]
    mean: float
    std: float
    n: int
    terminations: dict[str, int]
    reasons: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(policy, tasks: TaskSet, garment: str, pref: str, n_runs: int = 10, seed: int = 0) -> EvalReport:
    """Score ``n_runs`` seeded rollouts; ``policy`` is a DiffusionPolicy or an Actor."""
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    actor = policy_actor(policy) if isinstance(policy, DiffusionPolicy) else policy
    g = tasks.garment(garment)
    p = tasks.pref(garment, pref)
    reset_seeds = np.random.SeedSequence(seed).generate_state(n_runs, dtype=np.uint64)
    rng = np.random.default_rng([seed, 1])
    states = [foldsim.reset(g, int(s))[0] for s in reset_seeds]
    events: list[list] = [[] for _ in range(n_runs)]
    while True:
        live = [i for i, s in enumerate(states) if not s.terminated]
        if not live:
            break
        obs = np.stack([foldsim.observe(states[i]) for i in live])
        actions = np.asarray(actor([states[i] for i in live], obs, rng))
        for i, a in zip(live, actions):
            states[i], ev = foldsim.step(states[i], a, p)
            events[i].append(ev)
    scores = [foldsim.score(e, p) for e in events]
    return EvalReport(
        scores=scores,
        mean=float(np.mean(scores)),
        std=float(np.std(scores)),
        n=n_runs,
        terminations=dict(sorted(Counter(s.termination_reason for s in states).items())),
        reasons=[s.termination_reason for s in states],
    )


# ---------------------------------------------------------------------------
# sweeps


def nested_subset(demos: Sequence[Demonstration], count: int, seed: int) -> list[Demonstration]:
    """First ``count`` demos of a seeded permutation, so smaller subsets nest in larger ones."""
    if count > len(demos):
        raise ValueError(f"requested {count} demos but only {len(demos)} available")
    perm = np.random.default_rng([seed, 3]).permutation(len(demos))
    return [demos[i] for i in perm[:count]]


def parse_counts(text: str) -> list[int]:
    """``"20:95:15"`` -> [20, 35, ..., 95] (inclusive stop); ``"20,50"`` -> [20, 50]."""
    if ":" in text:
        start, stop, stride = (int(v) for v in text.split(":"))
        if stride <= 0:
            raise ValueError("count stride must be positive")
        return list(range(start, stop + 1, stride))
    return [int(v) for v in text.split(",") if v]


@dataclass
class SweepCell:
    method: str
    count: int
    seed: int


def _run_cell(cell: SweepCell, win, lose, ref, tasks, garment, pref, base: TrainConfig,
              eval_runs: int) -> dict:
    subset = nested_subset(win, cell.count, cell.seed)
    cfg = replace(base, method=cell.method, seed=cell.seed,
                  loss_cfg=base.loss_cfg if base.method == cell.method else None)
    result = train_preference(cell.method, subset, lose, ref, cfg)
    report = evaluate(result.policy, tasks, garment, pref, eval_runs, seed=cell.seed)
    return {"method": cell.method, "pref": pref, "demos": cell.count, "mean": report.mean,
            "std": report.std, "n": report.n, "seed": cell.seed}


def sweep(methods: Sequence[str], demo_counts: Sequence[int], win: list[Demonstration],
          lose: list[Demonstration], ref: DiffusionPolicy, tasks: TaskSet, garment: str, pref: str,
          base: TrainConfig, eval_runs: int = 10, seeds: Sequence[int] = (0,), jobs: int = 1) -> list[dict]:
    """Train and evaluate every (method, count, seed) cell; rows come back in grid order."""
    for c in demo_counts:
        if c > len(win):
            raise ValueError(f"count {c} exceeds the {len(win)} available winning demos")
    cells = [SweepCell(m, c, s) for m in methods for c in demo_counts for s in seeds]
    args = (win, lose, ref, tasks, garment, pref, base, eval_runs)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_cell, cells, *[[a] * len(cells) for a in args]))
    rows = []
    for cell in cells:
        rows.append(_run_cell(cell, *args))
        log.info("sweep %s n=%d seed=%d -> %.3f", cell.method, cell.count, cell.seed, rows[-1]["mean"])
    return rows


RESULT_COLUMNS = ("method", "pref", "demos", "mean", "std", "n", "seed")


def write_results(rows: list[dict], table_path, plot_path=None) -> None:
    """Tab-separated results table plus a JSON series-per-method plot file."""
    with open(table_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, delimiter="\t", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in RESULT_COLUMNS})
    if plot_path is not None:
        series: dict[str, dict] = {}
        for r in rows:
            s = series.setdefault(r["method"], {})
            s.setdefault(r["demos"], []).append(r["mean"])
        plot = {
            m: {"demos": sorted(s), "mean": [float(np.mean(s[c])) for c in sorted(s)],
                "std_over_seeds": [float(np.std(s[c])) for c in sorted(s)]}
            for m, s in series.items()
        }
        Path(plot_path).write_text(json.dumps(plot, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Bayesian A/B


def _prob_greater(a1: float, b1: float, a2: float, b2: float) -> float:
    """P(X > Y) for X ~ Beta(a1, b1), Y ~ Beta(a2, b2) with integer ``a1``."""
    i = np.arange(int(a1))
    terms = betaln(a2 + i, b1 + b2) - np.log(b1 + i) - betaln(1 + i, b1) - betaln(a2, b2)
    return float(np.exp(terms).sum())


def successes(scores, threshold: float) -> tuple[int, int]:
    scores = np.asarray(scores, dtype=np.float64)
    return int((scores >= threshold).sum()), int(scores.size)


def bayes_ab(scores_a, scores_b, success_threshold: float = 0.75) -> float:
    """Posterior P(p_a > p_b) with independent Beta(1, 1) priors on the success rates.

    Uses the exact finite sum in both directions and returns their
    symmetrised combination, which is exactly 0.5 for identical inputs.
    """
    if len(scores_a) == 0 or len(scores_b) == 0:
        raise ValueError("both score lists must be non-empty")
    if not 0 < success_threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    sa, na = successes(scores_a, success_threshold)
    sb, nb = successes(scores_b, success_threshold)
    a1, b1 = 1 + sa, 1 + na - sa
    a2, b2 = 1 + sb, 1 + nb - sb
    p_ab = _prob_greater(a1, b1, a2, b2)
    p_ba = _prob_greater(a2, b2, a1, b1)
    return 0.5 + 0.5 * (p_ab - p_ba)


def bayes_ab_monte_carlo(scores_a, scores_b, success_threshold: float = 0.75,
                         draws: int = 1_000_000, seed: int = 0) -> float:
    sa, na = successes(scores_a, success_threshold)
    sb, nb = successes(scores_b, success_threshold)
    rng = np.random.default_rng(seed)
    pa = rng.beta(1 + sa, 1 + na - sa, size=draws)
    pb = rng.beta(1 + sb, 1 + nb - sb, size=draws)
    return float(np.mean(pa > pb))
