"""Demonstration generation, win/lose/reference role assignment and persistence.

Dataset files are JSON Lines, one demonstration per line::

    {"garment": str, "pref": str, "mode": "standard" | "takeover", "seed": int,
     "final_score": float, "steps": [{"obs": [float, ...], "action": [float, ...]}, ...]}

Each file ``X.jsonl`` has a sidecar ``X.jsonl.manifest.json`` holding the
format version, per ``pref/mode`` counts, episode seeds and the SHA-256 of
the data file.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import foldsim
from .foldsim import GarmentSpec, PreferenceSpec, TaskSet
from .prefloss import LOSE, WIN, PreferenceSample

FORMAT = "foldpref-demos"
VERSION = 1
PREF_CYCLE = ("pref_1", "pref_2", "pref_3")
MODES = ("standard", "takeover")
MAX_DISTURBANCE = 0.08
MIN_DISTURBANCE = 0.065


class DatasetError(ValueError):
    """Bad, corrupt or inconsistent dataset content."""


@dataclass
class Demonstration:
    garment: str
    pref: str
    mode: str
    seed: int
    steps: list[tuple[np.ndarray, np.ndarray]]
    final_score: float

    def to_record(self) -> dict:
        return {
            "garment": self.garment,
            "pref": self.pref,
            "mode": self.mode,
            "seed": self.seed,
            "final_score": self.final_score,
            "steps": [{"obs": o.tolist(), "action": a.tolist()} for o, a in self.steps],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Demonstration":
        steps = [(np.array(s["obs"], dtype=np.float64), np.array(s["action"], dtype=np.float64))
                 for s in rec["steps"]]
        return cls(rec["garment"], rec["pref"], rec["mode"], int(rec["seed"]), steps,
                   float(rec["final_score"]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Demonstration):
            return NotImplemented
        return self.to_record() == other.to_record()


@dataclass(frozen=True)
class RoleAssignment:
    target_pref: str
    winner_source: str
    loser_source: str
    reference_source: str


def cyclic_assignment(target_pref: str) -> RoleAssignment:
    """Winners from the target, losers from the next preference, reference from the last."""
    if target_pref not in PREF_CYCLE:
        raise ValueError(f"unknown preference {target_pref!r}; expected one of {PREF_CYCLE}")
    i = PREF_CYCLE.index(target_pref)
    return RoleAssignment(
        target_pref, target_pref, PREF_CYCLE[(i + 1) % 3], PREF_CYCLE[(i + 2) % 3]
    )


def disturb(state: foldsim.SimState, rng: np.random.Generator) -> foldsim.SimState:
    """Displace a random proper subset of keypoints by 0.065-0.08 each."""
    kp = state.keypoints.copy()
    n = kp.shape[0]
    count = int(rng.integers(1, n))
    chosen = rng.choice(n, size=count, replace=False)
    for i in chosen:
        radius = rng.uniform(MIN_DISTURBANCE, MAX_DISTURBANCE)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        d = radius * np.array([np.cos(angle), np.sin(angle)])
        # flip any component that would leave the workspace
        for ax in range(2):
            if not 0.0 <= kp[i, ax] + d[ax] <= 1.0:
                d[ax] = -d[ax]
        kp[i] += d
    return foldsim.SimState(state.garment, kp, state.origin, state.n_steps)


def _episode(garment: GarmentSpec, pref: PreferenceSpec, mode: str, noise_scale: float,
             ep_seed: int) -> Demonstration:
    rng = np.random.default_rng(ep_seed)
    state, _ = foldsim.reset(garment, rng.integers(2**63))
    if mode == "takeover":
        state = disturb(state, rng)
    ep = foldsim.run_episode(
        state, pref, lambda s, _obs: foldsim.expert_action(s, pref, noise_scale, rng)
    )
    return Demonstration(garment.name, pref.id, mode, ep_seed,
                         list(zip(ep.observations, ep.actions)), ep.score)


def generate_demos(garment: GarmentSpec, pref: PreferenceSpec, n: int, mode: str = "standard",
                   noise_scale: float = 0.005, seed: int = 0) -> list[Demonstration]:
    """Roll the scripted expert and keep only perfect-score episodes."""
    if n < 1:
        raise ValueError("need n >= 1 demonstrations")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    seeds = np.random.SeedSequence([seed, MODES.index(mode)]).generate_state(10 * n, dtype=np.uint64)
    kept: list[Demonstration] = []
    attempts = 0
    for s in seeds:
        attempts += 1
        demo = _episode(garment, pref, mode, noise_scale, int(s))
        if demo.final_score == 1.0 and len(demo.steps) == pref.n_steps:
            kept.append(demo)
            if len(kept) == n:
                return kept
    rate = 1.0 - len(kept) / attempts
    raise DatasetError(
        f"expert kept only {len(kept)}/{n} demos after {attempts} attempts "
        f"(failure rate {rate:.0%}); check noise_scale={noise_scale} against the pick/place radii"
    )


def compose_demos(garment: GarmentSpec, pref: PreferenceSpec, n_standard: int, n_takeover: int,
                  noise_scale: float = 0.005, seed: int = 0) -> list[Demonstration]:
    """Standard demos followed by takeover demos, e.g. 70 + 30 for a reference set."""
    demos = []
    if n_standard:
        demos += generate_demos(garment, pref, n_standard, "standard", noise_scale, seed)
    if n_takeover:
        demos += generate_demos(garment, pref, n_takeover, "takeover", noise_scale, seed)
    return demos


def reference_demos(tasks: TaskSet, garment: str, pref: str, n_total: int = 100,
                    takeover_fraction: float = 0.3, noise_scale: float = 0.005, seed: int = 0):
    n_take = int(round(n_total * takeover_fraction))
    return compose_demos(tasks.garment(garment), tasks.pref(garment, pref), n_total - n_take,
                         n_take, noise_scale, seed)


def preference_demos(tasks: TaskSet, garment: str, pref: str, n_shared: int = 40,
                     n_takeover: int = 20, noise_scale: float = 0.005, seed: int = 0):
    return compose_demos(tasks.garment(garment), tasks.pref(garment, pref), n_shared,
                         n_takeover, noise_scale, seed)


def make_pref_dataset(win_demos: list[Demonstration], lose_demos: list[Demonstration]) -> list[PreferenceSample]:
    """One labelled sample per (observation, action) step."""
    if not win_demos or not lose_demos:
        raise DatasetError("preference data needs both winning and losing demonstrations")
    samples = []
    dims = None
    for demos, label in ((win_demos, WIN), (lose_demos, LOSE)):
        for d in demos:
            for obs, act in d.steps:
                if dims is None:
                    dims = (obs.shape, act.shape)
                elif (obs.shape, act.shape) != dims:
                    raise DatasetError(
                        f"dimension mismatch: {(obs.shape, act.shape)} vs {dims} in {d.pref}/{d.seed}"
                    )
                samples.append(PreferenceSample(obs, act, label, d.pref))
    return samples


def stack_steps(demos: list[Demonstration]) -> tuple[np.ndarray, np.ndarray]:
    """(observations, actions) over every step of every demo."""
    obs = [o for d in demos for o, _ in d.steps]
    act = [a for d in demos for _, a in d.steps]
    if not obs:
        raise DatasetError("no demonstration steps")
    return np.stack(obs), np.stack(act)


# ---------------------------------------------------------------------------
# persistence


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_dataset(path: str | Path, demos: list[Demonstration], extra: dict | None = None) -> dict:
    """Write the JSONL file and its manifest; returns the manifest."""
    path = Path(path)
    lines = [json.dumps(d.to_record(), sort_keys=True) for d in demos]
    data = ("\n".join(lines) + "\n").encode() if lines else b""
    counts = Counter(f"{d.pref}/{d.mode}" for d in demos)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "records": len(demos),
        "counts": dict(sorted(counts.items())),
        "seeds": [d.seed for d in demos],
        "sha256": _digest(data),
    }
    if extra:
        manifest["extra"] = extra
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(path: str | Path) -> tuple[list[Demonstration], dict]:
    path = Path(path)
    try:
        manifest = json.loads(manifest_path(path).read_text())
    except FileNotFoundError:
        raise DatasetError(f"{path}: manifest {manifest_path(path).name} is missing") from None
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise DatasetError(
            f"{path}: unsupported dataset format {manifest.get('format')!r} "
            f"version {manifest.get('version')!r} (expected {FORMAT} v{VERSION})"
        )
    data = path.read_bytes()
    if _digest(data) != manifest["sha256"]:
        raise DatasetError(f"{path}: content digest does not match manifest (file corrupt or truncated)")
    demos = [Demonstration.from_record(json.loads(line)) for line in data.decode().splitlines() if line]
    counts = Counter(f"{d.pref}/{d.mode}" for d in demos)
    if len(demos) != manifest["records"] or dict(counts) != manifest["counts"]:
        raise DatasetError(f"{path}: record counts disagree with manifest")
    return demos, manifest
