"""Deterministic 2D point-mass tasks with exactly aliased observations.

Each family hides one latent factor ``z`` (fixed for the whole episode) from
the observation, while a scripted, locally committed expert acts on it:

* back_and_forth - which pad the block starts on; the block goes out and back.
* crossing_path  - the source pad; the block must end on the opposite pad.
* bimanual       - handoff direction through a centre pad.
* multi_goal     - which candidate object a brief cue selected.

The expert is a proportional controller over a short list of subgoals. The
same subgoal list doubles as a progress tracker that :func:`step` advances
for any actor, which is what ``phase`` records.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .rng import RngState, as_rng


class ConfigError(ValueError):
    """Invalid task configuration."""


class Family(str, Enum):
    BACK_AND_FORTH = "back_and_forth"
    CROSSING_PATH = "crossing_path"
    BIMANUAL = "bimanual"
    MULTI_GOAL = "multi_goal"


# table column order used by reports
FAMILY_ORDER = (Family.BACK_AND_FORTH, Family.CROSSING_PATH, Family.BIMANUAL, Family.MULTI_GOAL)
FAMILY_TITLES = {
    Family.BACK_AND_FORTH: "Back-and-Forth",
    Family.CROSSING_PATH: "Crossing-Path",
    Family.BIMANUAL: "Bimanual",
    Family.MULTI_GOAL: "Multi-Goal",
}

GAIN = 0.5
A_MAX = 0.08
RHO = 0.03
EXPERT_NOISE = 0.005
START_JITTER = 0.02
SETTLE_RADIUS = 0.01            # tight arrival for staging points, so intents dwell at one spot
# blocks that must travel start on a staging spot just outside their pad, on the
# line through the workspace center, so an untouched block never looks like one
# already delivered there while the carry legs still overlap
STAGE_OFFSET = 0.06
# the expert closes or opens the gripper only once this fraction of the goal
# radius away, leaving a step of slack for a policy that fires early
FIRE_FRACTION = 0.5


def _staged(p, center):
    d = np.subtract(p, center)
    q = np.asarray(p) + STAGE_OFFSET * d / np.linalg.norm(d)
    return (round(float(q[0]), 10), round(float(q[1]), 10))
ACTION_DIM_PER_EFFECTOR = 3

# subgoal kinds
MOVE, GRASP, RELEASE, WAIT, IDLE = "move", "grasp", "release", "wait", "idle"


@dataclass(frozen=True)
class Subgoal:
    kind: str
    effector: int = 0
    target: tuple[float, float] | None = None
    obj: int = -1
    steps: int = 0
    holding: tuple[int, ...] = ()  # expected grasp vector when the subgoal starts
    radius: float = 0.0            # arrival tolerance for moves; 0 means spec.goal_radius


@dataclass(frozen=True)
class TaskSpec:
    family: Family
    landmarks: tuple[tuple[float, float], ...]
    num_intents: int
    episode_len: int
    goal_radius: float = RHO
    cue_window: tuple[int, int] | None = None
    seed: int = 0
    name: str = ""
    instruction: int = 0
    homes: tuple[tuple[float, float], ...] = ()
    rests: tuple[tuple[float, float], ...] = ()
    object_starts: tuple[tuple[tuple[float, float], ...], ...] = ()  # indexed by z
    waypoint: tuple[float, float] | None = None
    dwell: int = 0
    gain: float = GAIN
    a_max: float = A_MAX
    noise: float = EXPERT_NOISE

    def __post_init__(self):
        if self.num_intents < 2:
            raise ConfigError("num_intents must be at least 2")
        if self.goal_radius <= 0:
            raise ConfigError("goal_radius must be positive")
        if self.episode_len < 1:
            raise ConfigError("episode_len must be positive")
        if (self.cue_window is not None) != (self.family == Family.MULTI_GOAL):
            raise ConfigError("cue_window is required for multi_goal and forbidden otherwise")
        if self.cue_window is not None:
            a, b = self.cue_window
            if not 0 <= a <= b < self.episode_len:
                raise ConfigError("cue_window outside the episode")
        pts = np.asarray(self.landmarks, dtype=float)
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                if np.linalg.norm(pts[i] - pts[j]) < 4 * self.goal_radius:
                    raise ConfigError("landmarks must be separated by at least 4 * goal_radius")

    @property
    def n_effectors(self) -> int:
        return len(self.homes)

    @property
    def n_objects(self) -> int:
        return len(self.object_starts[0])

    @property
    def action_dim(self) -> int:
        return ACTION_DIM_PER_EFFECTOR * self.n_effectors

    @property
    def obs_dim(self) -> int:
        return observation_layout(self)[-1][2]

    def to_dict(self) -> dict:
        return {
            "family": self.family.value, "landmarks": [list(p) for p in self.landmarks],
            "num_intents": self.num_intents, "episode_len": self.episode_len,
            "goal_radius": self.goal_radius,
            "cue_window": list(self.cue_window) if self.cue_window else None,
            "seed": self.seed, "name": self.name, "instruction": self.instruction,
            "homes": [list(p) for p in self.homes], "rests": [list(p) for p in self.rests],
            "object_starts": [[list(p) for p in objs] for objs in self.object_starts],
            "waypoint": list(self.waypoint) if self.waypoint else None,
            "dwell": self.dwell, "gain": self.gain, "a_max": self.a_max, "noise": self.noise,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        pt = lambda p: (float(p[0]), float(p[1]))  # noqa: E731
        return cls(
            family=Family(d["family"]), landmarks=tuple(pt(p) for p in d["landmarks"]),
            num_intents=int(d["num_intents"]), episode_len=int(d["episode_len"]),
            goal_radius=float(d["goal_radius"]),
            cue_window=tuple(d["cue_window"]) if d.get("cue_window") else None,
            seed=int(d["seed"]), name=d["name"], instruction=int(d["instruction"]),
            homes=tuple(pt(p) for p in d["homes"]), rests=tuple(pt(p) for p in d["rests"]),
            object_starts=tuple(tuple(pt(p) for p in objs) for objs in d["object_starts"]),
            waypoint=pt(d["waypoint"]) if d.get("waypoint") else None,
            dwell=int(d["dwell"]), gain=float(d["gain"]), a_max=float(d["a_max"]),
            noise=float(d["noise"]),
        )


_OVERRIDE_KEYS = {"pads", "n_goals", "episode_len", "goal_radius", "noise", "dwell"}


def make_task(family, seed=0, **overrides) -> TaskSpec:
    """Canonical layout for ``family``; ``overrides`` adjust the documented knobs.

    Recognised overrides: ``pads`` (crossing_path, 2 or 4), ``n_goals``
    (multi_goal, 2 or 3), ``episode_len``, ``goal_radius``, ``noise``, ``dwell``.
    """
    try:
        family = Family(family)
    except ValueError as exc:
        raise ConfigError(f"unknown family {family!r}") from exc
    unknown = set(overrides) - _OVERRIDE_KEYS
    if unknown:
        raise ConfigError(f"unknown task overrides: {sorted(unknown)}")
    seed = as_rng(seed).seed
    ov = dict(overrides)

    if family == Family.BACK_AND_FORTH:
        pads = ((0.2, 0.5), (0.8, 0.5))
        spec = TaskSpec(
            family, pads, 2, ov.pop("episode_len", 120), seed=seed,
            name="back_and_forth", instruction=0,
            homes=((0.5, 0.15),), rests=((0.5, 0.85),),
            object_starts=((pads[0],), (pads[1],)), dwell=ov.pop("dwell", 20),
        )
    elif family == Family.CROSSING_PATH:
        n = ov.pop("pads", 2)
        if n == 2:
            pads = ((0.2, 0.5), (0.8, 0.5))
            spec = TaskSpec(
                family, pads, 2, ov.pop("episode_len", 80), seed=seed,
                name="crossing_path", instruction=1,
                homes=((0.5, 0.15),), rests=((0.5, 0.85),),
                object_starts=tuple((_staged(p, (0.5, 0.5)),) for p in pads), waypoint=(0.5, 0.5),
                dwell=ov.pop("dwell", 8),
            )
        elif n == 4:
            pads = ((0.25, 0.3), (0.75, 0.3), (0.75, 0.75), (0.25, 0.75))
            spec = TaskSpec(
                family, pads, 4, ov.pop("episode_len", 80), seed=seed,
                name="crossing_path_4", instruction=2,
                homes=((0.5, 0.08),), rests=((0.5, 0.95),),
                object_starts=tuple((_staged(p, (0.5, 0.525)),) for p in pads), waypoint=(0.5, 0.525),
                dwell=ov.pop("dwell", 8),
            )
        else:
            raise ConfigError("crossing_path supports pads=2 or pads=4")
    elif family == Family.BIMANUAL:
        pads = ((0.1, 0.5), (0.5, 0.5), (0.9, 0.5))
        spec = TaskSpec(
            family, pads, 2, ov.pop("episode_len", 80), seed=seed,
            name="bimanual", instruction=3,
            homes=((0.1, 0.2), (0.9, 0.2)), rests=((0.1, 0.85), (0.9, 0.85)),
            object_starts=((_staged(pads[0], pads[1]),), (_staged(pads[2], pads[1]),)),
        )
    else:
        n = ov.pop("n_goals", 3)
        if n == 3:
            objs = ((0.2, 0.8), (0.5, 0.85), (0.8, 0.8))
        elif n == 2:
            objs = ((0.3, 0.8), (0.7, 0.8))
        else:
            raise ConfigError("multi_goal supports n_goals=2 or n_goals=3")
        spec = TaskSpec(
            family, ((0.85, 0.3),), n, ov.pop("episode_len", 80), cue_window=(0, 5),
            seed=seed, name=f"multi_goal_{n}", instruction=4 if n == 3 else 5,
            homes=((0.5, 0.1),), rests=((0.15, 0.15),),
            object_starts=tuple(objs for _ in range(n)), waypoint=(0.5, 0.5),
            dwell=ov.pop("dwell", 4),
        )
    ov.pop("pads", None)
    ov.pop("n_goals", None)
    ov.pop("dwell", None)
    return replace(spec, **ov) if ov else spec


# ---------------------------------------------------------------- scripts

@functools.lru_cache(maxsize=256)
def script(spec: TaskSpec, z: int) -> tuple[Subgoal, ...]:
    """The expert's subgoal list for intent ``z``; the last entry is always idle."""
    if not 0 <= z < spec.num_intents:
        raise ConfigError(f"intent {z} outside [0, {spec.num_intents})")
    L = spec.landmarks
    if spec.family == Family.BACK_AND_FORTH:
        a, b = L[z], L[1 - z]
        return (
            Subgoal(GRASP, 0, obj=0, holding=(-1,)),
            Subgoal(RELEASE, 0, b, obj=0, holding=(0,)),
            Subgoal(WAIT, 0, steps=spec.dwell, holding=(-1,)),
            Subgoal(GRASP, 0, obj=0, holding=(-1,)),
            Subgoal(RELEASE, 0, a, obj=0, holding=(0,)),
            Subgoal(MOVE, 0, spec.rests[0], holding=(-1,)),
            Subgoal(IDLE, holding=(-1,)),
        )
    if spec.family == Family.CROSSING_PATH:
        dest = L[crossing_destination(spec, z)]
        return (
            Subgoal(GRASP, 0, obj=0, holding=(-1,)),
            Subgoal(MOVE, 0, spec.waypoint, holding=(0,), radius=SETTLE_RADIUS),
            Subgoal(WAIT, 0, steps=spec.dwell, holding=(0,)),
            Subgoal(RELEASE, 0, dest, obj=0, holding=(0,)),
            Subgoal(MOVE, 0, spec.rests[0], holding=(-1,)),
            Subgoal(IDLE, holding=(-1,)),
        )
    if spec.family == Family.BIMANUAL:
        src, dst = (0, 1) if z == 0 else (1, 0)
        src_hold = (0, -1) if src == 0 else (-1, 0)
        dst_hold = (0, -1) if dst == 0 else (-1, 0)
        free = (-1, -1)
        return (
            Subgoal(GRASP, src, obj=0, holding=free),
            Subgoal(RELEASE, src, L[1], obj=0, holding=src_hold),
            Subgoal(MOVE, src, spec.homes[src], holding=free, radius=SETTLE_RADIUS),
            Subgoal(GRASP, dst, obj=0, holding=free),
            Subgoal(RELEASE, dst, L[2 if dst == 1 else 0], obj=0, holding=dst_hold),
            Subgoal(MOVE, dst, spec.rests[dst], holding=free),
            Subgoal(IDLE, holding=free),
        )
    return (
        Subgoal(MOVE, 0, spec.waypoint, holding=(-1,), radius=SETTLE_RADIUS),
        Subgoal(WAIT, 0, steps=spec.dwell, holding=(-1,)),
        Subgoal(GRASP, 0, obj=z, holding=(-1,)),
        Subgoal(RELEASE, 0, L[0], obj=z, holding=(z,)),
        Subgoal(MOVE, 0, spec.rests[0], holding=(-1,)),
        Subgoal(IDLE, holding=(-1,)),
    )


def crossing_destination(spec: TaskSpec, z: int) -> int:
    n = len(spec.landmarks)
    return (z + n // 2) % n


def final_destinations(spec: TaskSpec, z: int) -> np.ndarray:
    """Where every object must rest for the episode to count as a success."""
    dest = np.array(spec.object_starts[z], dtype=float)
    if spec.family == Family.BACK_AND_FORTH:
        return dest
    if spec.family == Family.CROSSING_PATH:
        dest[0] = spec.landmarks[crossing_destination(spec, z)]
    elif spec.family == Family.BIMANUAL:
        dest[0] = spec.landmarks[2 if z == 0 else 0]
    else:
        dest[z] = spec.landmarks[0]
    return dest


# ---------------------------------------------------------------- state

@dataclass
class WorldState:
    effectors: np.ndarray            # (n_eff, 2)
    objects: np.ndarray              # (n_obj, 2)
    grasp: np.ndarray                # (n_eff,) object index or -1
    z: int
    phase: int = 0
    step: int = 0
    timer: int = 0
    legs: int = 0                    # completed release subgoals
    extra: dict = field(default_factory=dict)

    def copy(self) -> "WorldState":
        return WorldState(self.effectors.copy(), self.objects.copy(), self.grasp.copy(),
                          self.z, self.phase, self.step, self.timer, self.legs, dict(self.extra))

    def holding(self) -> tuple[int, ...]:
        return tuple(int(g) for g in self.grasp)


def initial_state(spec: TaskSpec, z: int, rng: RngState | None = None) -> WorldState:
    eff = np.array(spec.homes, dtype=float)
    if rng is not None:
        eff = eff + rng.generator().uniform(-START_JITTER, START_JITTER, eff.shape)
    if not 0 <= z < spec.num_intents:
        raise ConfigError(f"intent {z} outside [0, {spec.num_intents})")
    return WorldState(
        effectors=eff, objects=np.array(spec.object_starts[z], dtype=float),
        grasp=-np.ones(spec.n_effectors, dtype=int), z=int(z),
    )


def _subgoal_done(sg: Subgoal, s: WorldState, spec: TaskSpec) -> bool:
    if sg.kind == MOVE:
        return bool(np.linalg.norm(s.effectors[sg.effector] - sg.target) <= (sg.radius or spec.goal_radius))
    if sg.kind == GRASP:
        return int(s.grasp[sg.effector]) == sg.obj
    if sg.kind == RELEASE:
        return (sg.obj not in s.grasp
                and bool(np.linalg.norm(s.objects[sg.obj] - sg.target) <= spec.goal_radius))
    if sg.kind == WAIT:
        return s.timer >= sg.steps
    return False


def _advance(s: WorldState, spec: TaskSpec) -> None:
    plan = script(spec, s.z)
    s.timer += 1
    while s.phase < len(plan) - 1 and _subgoal_done(plan[s.phase], s, spec):
        if plan[s.phase].kind == RELEASE:
            s.legs += 1
        s.phase += 1
        s.timer = 0


def step(state: WorldState, action, spec: TaskSpec) -> WorldState:
    """Integrate one action; returns a new state (the input is untouched).

    Per effector the action is (dx, dy, gripper). Displacements are clipped
    to ``[-a_max, a_max]``; gripper > 0.5 grasps an object within the goal
    radius of where the effector was when the command arrived, gripper < -0.5
    releases after the move.
    """
    a = np.asarray(action, dtype=float).reshape(spec.n_effectors, ACTION_DIM_PER_EFFECTOR)
    s = state.copy()
    delta = np.clip(a[:, :2], -spec.a_max, spec.a_max)
    grip = a[:, 2]
    before = s.effectors.copy()
    s.effectors = np.clip(s.effectors + delta, 0.0, 1.0)
    for e in range(spec.n_effectors):
        held = int(s.grasp[e])
        if held >= 0:
            s.objects[held] = s.effectors[e]
        if grip[e] > 0.5 and held < 0:
            taken = {int(g) for g in s.grasp if g >= 0}
            d = np.linalg.norm(s.objects - before[e], axis=1)
            for o in np.argsort(d, kind="stable"):
                if d[o] <= spec.goal_radius and int(o) not in taken:
                    s.grasp[e] = int(o)
                    s.objects[o] = s.effectors[e]
                    break
        elif grip[e] < -0.5 and held >= 0:
            s.grasp[e] = -1
    s.step += 1
    _advance(s, spec)
    return s


# ---------------------------------------------------------------- observation

def observation_layout(spec: TaskSpec) -> list[tuple[str, int, int]]:
    """Named field groups of the observation vector as (name, start, stop)."""
    out, i = [], 0
    for e in range(spec.n_effectors):
        out.append((f"effector{e}", i, i + 2))
        i += 2
    for o in range(spec.n_objects):
        out.append((f"object{o}", i, i + 3))   # position + carried flag
        i += 3
    for k in range(len(spec.landmarks)):
        out.append((f"landmark{k}", i, i + 2))
        i += 2
    if spec.cue_window is not None:
        out.append(("cue", i, i + spec.num_intents))
        i += spec.num_intents
    return out


def pose_slice(spec: TaskSpec) -> slice:
    return slice(0, 2 * spec.n_effectors)


def observe(state: WorldState, spec: TaskSpec) -> np.ndarray:
    """Masked projection of the state; never contains z, phase, or grasp owner."""
    parts = [state.effectors.reshape(-1)]
    carried = {int(g) for g in state.grasp if g >= 0}
    for o in range(spec.n_objects):
        parts.append(np.array([*state.objects[o], 1.0 if o in carried else 0.0]))
    parts.append(np.asarray(spec.landmarks, dtype=float).reshape(-1))
    if spec.cue_window is not None:
        cue = np.zeros(spec.num_intents)
        a, b = spec.cue_window
        if a <= state.step <= b:
            cue[state.z] = 1.0
        parts.append(cue)
    return np.concatenate(parts)


# ---------------------------------------------------------------- expert

def expert_action(state: WorldState, spec: TaskSpec) -> np.ndarray:
    """Noise-free scripted action for the current phase of ``state``."""
    plan = script(spec, state.z)
    sg = plan[min(state.phase, len(plan) - 1)]
    act = np.zeros((spec.n_effectors, ACTION_DIM_PER_EFFECTOR))
    # gripper is a level command: closed (+1) while holding, open (-1) otherwise,
    # switching on arrival at a grasp or release target
    act[:, 2] = np.where(state.grasp >= 0, 1.0, -1.0)
    if sg.kind in (MOVE, GRASP, RELEASE):
        pos = state.effectors[sg.effector]
        target = state.objects[sg.obj] if sg.kind == GRASP else np.asarray(sg.target)
        d = spec.gain * (target - pos)
        n = np.linalg.norm(d)
        if n > spec.a_max:
            d *= spec.a_max / n
        act[sg.effector, :2] = d
        if np.linalg.norm(target - pos) <= FIRE_FRACTION * spec.goal_radius:
            if sg.kind == GRASP:
                act[sg.effector, 2] = 1.0
            elif sg.kind == RELEASE:
                act[sg.effector, 2] = -1.0
    return act.reshape(-1)


def expert_chunk(state: WorldState, spec: TaskSpec, horizon: int) -> np.ndarray:
    """Noise-free expert continuation of length ``horizon`` from ``state``."""
    s = state
    out = np.zeros((horizon, spec.action_dim))
    for j in range(horizon):
        a = expert_action(s, spec)
        out[j] = a
        s = step(s, a, spec)
    return out


def twin_state(state: WorldState, spec: TaskSpec, z: int) -> WorldState:
    """The same physical state attributed to intent ``z`` at a plausible phase.

    Keeps the current phase index when that subgoal's expected grasp vector
    matches the state, otherwise picks the first phase that does.
    """
    s = state.copy()
    s.z = int(z)
    plan = script(spec, z)
    held = state.holding()
    if plan[min(state.phase, len(plan) - 1)].holding != held:
        for i, sg in enumerate(plan):
            if sg.holding == held:
                s.phase = i
                s.timer = 0
                break
    return s


# ---------------------------------------------------------------- windows / success

def in_window_mask(observations: np.ndarray, spec: TaskSpec) -> np.ndarray:
    """Per-step ambiguity-window membership recomputed from observations.

    Carrying families: an object is carried and sits at least 2 * goal_radius
    from every landmark. multi_goal: after the cue window and before the first
    step that shows a carried object (empty if nothing is ever grasped).
    """
    obs = np.atleast_2d(observations)
    layout = observation_layout(spec)
    objs = [(s, e) for name, s, e in layout if name.startswith("object")]
    carried = np.stack([obs[:, e - 1] > 0.5 for s, e in objs], axis=1)
    if spec.family == Family.MULTI_GOAL:
        mask = np.zeros(len(obs), dtype=bool)
        any_c = carried.any(axis=1)
        if not any_c.any():
            return mask
        first = int(np.argmax(any_c))
        mask[spec.cue_window[1] + 1:first] = True
        return mask
    lm = np.asarray(spec.landmarks)
    mask = np.zeros(len(obs), dtype=bool)
    for k, (s, _) in enumerate(objs):
        pos = obs[:, s:s + 2]
        far = (np.linalg.norm(pos[:, None, :] - lm[None], axis=2) >= 2 * spec.goal_radius).all(axis=1)
        mask |= carried[:, k] & far
    return mask


def mask_to_windows(mask: np.ndarray) -> list[tuple[int, int]]:
    out, start = [], None
    for t, m in enumerate(mask):
        if m and start is None:
            start = t
        elif not m and start is not None:
            out.append((start, t - 1))
            start = None
    if start is not None:
        out.append((start, len(mask) - 1))
    return out


def success(state: WorldState, spec: TaskSpec) -> bool:
    if (state.grasp >= 0).any():
        return False
    dest = final_destinations(spec, state.z)
    if (np.linalg.norm(state.objects - dest, axis=1) > spec.goal_radius).any():
        return False
    if spec.family == Family.BACK_AND_FORTH:
        return state.legs >= 2
    return True


def intent_label(spec: TaskSpec, z: int, phase: int) -> int:
    """Label used by the aliasing diagnostic: phase half for back_and_forth, z otherwise."""
    if spec.family == Family.BACK_AND_FORTH:
        return 0 if phase <= 1 else 1
    return z
