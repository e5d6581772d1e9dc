"""Planar keypoint folding simulator with step-wise scoring.

A garment is a set of 2D keypoints in the unit square. A folding preference
is an ordered list of steps; each step gives every arm a keypoint to pick, a
place point (relative to the garment's reset origin) and the keypoint group
that is dragged rigidly when the place succeeds.

Task file schema (JSON)::

    {"version": 1,
     "garments": [
       {"name": str, "arms": 1 | 2,
        "keypoints": [[x, y], ...],              # canonical layout in [0, 1]^2
        "keypoint_names": [str, ...],            # optional
        "preferences": {
          "<pref id>": [                         # steps, in order
            [                                    # one entry per arm
              {"pick": int, "place": [x, y],
               "group": [int, ...],              # optional, defaults to [pick]
               "pick_weight": float,             # optional, see below
               "place_weight": float}            # optional
            ], ...]}}]}

Omitted weights default to equal steps, equal arms within a step, and a
0.55 / 0.45 pick / place split.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

R_PICK = 0.05
R_PLACE = 0.07
MAX_TRANSLATION = 0.05
MAX_JITTER = 0.01
PICK_SHARE = 0.55

COMPLETED = "completed"
OUT_OF_WORKSPACE = "out_of_workspace"
RUNNING = "none"


@dataclass(frozen=True)
class ArmTarget:
    pick: int
    place: tuple[float, float]
    group: tuple[int, ...]
    pick_weight: float
    place_weight: float


@dataclass(frozen=True)
class PreferenceSpec:
    id: str
    garment: str
    steps: tuple[tuple[ArmTarget, ...], ...]

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def total_weight(self) -> float:
        return sum(t.pick_weight + t.place_weight for step in self.steps for t in step)


@dataclass(frozen=True)
class GarmentSpec:
    name: str
    keypoints: np.ndarray
    arms: int
    n_steps: int
    keypoint_names: tuple[str, ...] = ()

    @property
    def n_keypoints(self) -> int:
        return self.keypoints.shape[0]

    @property
    def chunk_dim(self) -> int:
        return 4 * self.arms

    @property
    def obs_dim(self) -> int:
        return 2 * self.n_keypoints + self.n_steps


@dataclass
class TaskSet:
    garments: dict[str, GarmentSpec]
    preferences: dict[tuple[str, str], PreferenceSpec]

    def garment(self, name: str) -> GarmentSpec:
        try:
            return self.garments[name]
        except KeyError:
            raise KeyError(f"unknown garment {name!r}; known: {sorted(self.garments)}") from None

    def pref(self, garment: str, pref_id: str) -> PreferenceSpec:
        try:
            return self.preferences[(garment, pref_id)]
        except KeyError:
            raise KeyError(f"no preference {pref_id!r} for garment {garment!r}") from None

    def pref_ids(self, garment: str) -> list[str]:
        return sorted(p for g, p in self.preferences if g == garment)


def _parse_target(raw: dict, step_weight: float, n_arms: int, n_kp: int) -> ArmTarget:
    pick = int(raw["pick"])
    if not 0 <= pick < n_kp:
        raise ValueError(f"pick index {pick} out of range")
    group = tuple(int(g) for g in raw.get("group", [pick]))
    if pick not in group:
        group = (pick, *group)
    pair = step_weight / n_arms
    pw = float(raw.get("pick_weight", PICK_SHARE * pair))
    lw = float(raw.get("place_weight", (1.0 - PICK_SHARE) * pair))
    if not pw > lw:
        raise ValueError("pick weight must exceed place weight")
    place = tuple(float(v) for v in raw["place"])
    if len(place) != 2:
        raise ValueError("place target must be a 2D point")
    return ArmTarget(pick, place, group, pw, lw)


def parse_tasks(doc: dict) -> TaskSet:
    garments, prefs = {}, {}
    for g in doc["garments"]:
        kp = np.asarray(g["keypoints"], dtype=np.float64)
        if kp.ndim != 2 or kp.shape[1] != 2:
            raise ValueError(f"{g['name']}: keypoints must be a list of 2D points")
        if np.any(kp < 0) or np.any(kp > 1):
            raise ValueError(f"{g['name']}: keypoints must lie in the unit square")
        arms = int(g["arms"])
        if arms not in (1, 2):
            raise ValueError(f"{g['name']}: arms must be 1 or 2")
        n_steps = None
        for pid, raw_steps in g["preferences"].items():
            if n_steps is None:
                n_steps = len(raw_steps)
            elif len(raw_steps) != n_steps:
                raise ValueError(f"{g['name']}: all preferences must have the same step count")
            steps = []
            for raw_step in raw_steps:
                if len(raw_step) != arms:
                    raise ValueError(f"{g['name']}/{pid}: each step needs {arms} arm targets")
                steps.append(tuple(_parse_target(t, 1.0 / len(raw_steps), arms, kp.shape[0]) for t in raw_step))
            spec = PreferenceSpec(pid, g["name"], tuple(steps))
            for step in spec.steps:
                pairs = {round(t.pick_weight + t.place_weight, 12) for t in step}
                if len(pairs) != 1:
                    raise ValueError(f"{g['name']}/{pid}: arms in one step must carry equal weight")
            if abs(spec.total_weight() - 1.0) > 1e-9:
                raise ValueError(f"{g['name']}/{pid}: weights sum to {spec.total_weight()}, not 1")
            prefs[(g["name"], pid)] = spec
        garments[g["name"]] = GarmentSpec(
            g["name"], kp, arms, n_steps or 0, tuple(g.get("keypoint_names", ()))
        )
    return TaskSet(garments, prefs)


def load_tasks(path: str | Path | None = None) -> TaskSet:
    """Load a task file; ``None`` gives the built-in trousers/sleeves/tshirt set."""
    if path is None:
        text = resources.files("foldpref").joinpath("tasks.json").read_text()
    else:
        text = Path(path).read_text()
    return parse_tasks(json.loads(text))


# ---------------------------------------------------------------------------
# state and dynamics


@dataclass(frozen=True)
class SimState:
    garment: str
    keypoints: np.ndarray
    origin: np.ndarray
    n_steps: int
    step_index: int = 0
    terminated: bool = False
    termination_reason: str = RUNNING


@dataclass(frozen=True)
class ArmEvents:
    pick_ok: bool
    lift_ok: bool
    place_ok: bool


def observe(state: SimState) -> np.ndarray:
    """Flattened keypoints followed by a one-hot of the current step."""
    phase = np.zeros(state.n_steps)
    if state.step_index < state.n_steps:
        phase[state.step_index] = 1.0
    return np.concatenate([state.keypoints.ravel(), phase])


def reset(garment: GarmentSpec, seed) -> tuple[SimState, np.ndarray]:
    rng = np.random.default_rng(seed)
    shift = rng.uniform(-MAX_TRANSLATION, MAX_TRANSLATION, size=2)
    jitter = rng.uniform(-MAX_JITTER, MAX_JITTER, size=garment.keypoints.shape)
    kp = np.clip(garment.keypoints + shift + jitter, 0.0, 1.0)
    state = SimState(garment.name, kp, shift, garment.n_steps)
    return state, observe(state)


def _in_workspace(points: np.ndarray) -> bool:
    return bool(np.all(points >= 0.0) and np.all(points <= 1.0))


def step(state: SimState, action, pref: PreferenceSpec) -> tuple[SimState, list[ArmEvents]]:
    """Apply one pick-and-place per arm, judged against ``pref``'s current step."""
    if state.terminated:
        raise RuntimeError("episode already terminated")
    targets = pref.steps[state.step_index]
    action = np.asarray(action, dtype=np.float64).ravel()
    if action.size != 4 * len(targets):
        raise ValueError(f"expected a {4 * len(targets)}-dim action, got {action.size}")
    arms = action.reshape(len(targets), 2, 2)
    if not np.all(np.isfinite(action)) or not _in_workspace(arms):
        dead = [ArmEvents(False, False, False) for _ in targets]
        return replace(state, terminated=True, termination_reason=OUT_OF_WORKSPACE), dead

    kp = state.keypoints.copy()
    events = []
    moves = []
    for (pick_xy, place_xy), t in zip(arms, targets):
        pick_ok = bool(np.linalg.norm(pick_xy - state.keypoints[t.pick]) <= R_PICK)
        lift_ok = pick_ok
        goal = state.origin + np.asarray(t.place)
        place_ok = lift_ok and bool(np.linalg.norm(place_xy - goal) <= R_PLACE)
        events.append(ArmEvents(pick_ok, lift_ok, place_ok))
        if place_ok:
            moves.append((t.group, place_xy - pick_xy))
    for group, delta in moves:
        kp[list(group)] += delta

    nxt = state.step_index + 1
    if not _in_workspace(kp):
        return replace(state, keypoints=kp, step_index=nxt, terminated=True,
                       termination_reason=OUT_OF_WORKSPACE), events
    done = nxt >= state.n_steps
    return replace(state, keypoints=kp, step_index=nxt, terminated=done,
                   termination_reason=COMPLETED if done else RUNNING), events


def score(events: list[list[ArmEvents]], pref: PreferenceSpec) -> float:
    """Weighted sum of lift and place successes over the recorded steps."""
    if len(events) > pref.n_steps:
        raise ValueError("event log longer than the preference")
    total = 0.0
    for step_events, targets in zip(events, pref.steps):
        for ev, t in zip(step_events, targets):
            total += t.pick_weight * ev.lift_ok + t.place_weight * ev.place_ok
    return total


def _truncated_normal(rng: np.random.Generator, scale: float, size: int) -> np.ndarray:
    out = rng.standard_normal(size)
    bad = np.abs(out) > 2.0
    while np.any(bad):
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * scale


def expert_action(state: SimState, pref: PreferenceSpec, noise_scale: float = 0.0,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    if state.terminated:
        raise RuntimeError("episode already terminated")
    parts = []
    for t in pref.steps[state.step_index]:
        parts.append(state.keypoints[t.pick])
        parts.append(state.origin + np.asarray(t.place))
    action = np.concatenate(parts)
    if noise_scale > 0:
        if rng is None:
            raise ValueError("noisy expert needs a generator")
        action = action + _truncated_normal(rng, noise_scale, action.size)
    return action


# ---------------------------------------------------------------------------
# episodes


@dataclass
class Episode:
    observations: list[np.ndarray] = field(default_factory=list)
    actions: list[np.ndarray] = field(default_factory=list)
    events: list[list[ArmEvents]] = field(default_factory=list)
    score: float = 0.0
    termination_reason: str = RUNNING


def run_episode(state: SimState, pref: PreferenceSpec,
                act: Callable[[SimState, np.ndarray], np.ndarray]) -> Episode:
    """Roll ``act`` from ``state`` until termination and score the result."""
    ep = Episode()
    while not state.terminated:
        obs = observe(state)
        action = np.asarray(act(state, obs), dtype=np.float64)
        ep.observations.append(obs)
        ep.actions.append(action)
        state, ev = step(state, action, pref)
        ep.events.append(ev)
    ep.score = score(ep.events, pref)
    ep.termination_reason = state.termination_reason
    return ep
