"""Language-conditioned tabletop world on the unit square.

A gripper moves in 2-D over a handful of coloured objects and three zones.
Five instruction templates (reach, grasp, place, release, push) are solved by
a scripted controller that takes long strides far from its goal and short
ones near it, which is what gives the learned policy easy and hard steps.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .seeding import derive_rng

DELTA_MAX = 0.08
GRASP_RADIUS = 0.05
FINE_RADIUS = 0.15
PUSH_DIST = 0.2
T_MAX = 64
DOCK_TOL = 0.02
CONTACT_RADIUS = 0.06
PUSH_STANDOFF = 0.09
MIN_OBJ_SEP = 0.15

N_COLORS = 6
N_ZONES = 3
MAX_OBJECTS = 4
OBJ_RANGE = (2, 4)

REACH, GRASP, PLACE, RELEASE, PUSH = range(5)
TEMPLATE_NAMES = ("reach", "grasp", "place", "release", "push")
DIRECTIONS = np.array([[-1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])  # left right up down
DIRECTION_NAMES = ("left", "right", "up", "down")

# token vocabulary: 0 pad | 5 templates | colours | zones | directions
PAD_TOKEN = 0
_TEMPLATE_BASE = 1
_COLOR_BASE = _TEMPLATE_BASE + 5
_ZONE_BASE = _COLOR_BASE + N_COLORS
_DIR_BASE = _ZONE_BASE + N_ZONES
VOCAB_SIZE = _DIR_BASE + len(DIRECTIONS)
L_INST = 3

# observation token layout
_F_GRIPPER, _F_OBJECT, _F_ZONE, _F_PAD = 0, 1, 2, 3
_F_X, _F_Y, _F_W, _F_H = 4, 5, 6, 7
_F_COLOR = 8
_F_ZONE_ID = _F_COLOR + N_COLORS
_F_HELD = _F_ZONE_ID + N_ZONES
_F_CLOSED = _F_HELD + 1
# offset from the gripper: raw, then divided by FINE_RADIUS and clipped to [-1, 1]
_F_DX, _F_DY, _F_NDX, _F_NDY = range(_F_CLOSED + 1, _F_CLOSED + 5)
D_RAW = _F_NDY + 1
L_OBS = 1 + MAX_OBJECTS + N_ZONES

SPLITS = "ABCD"
SPLIT_COLORS = {
    "A": (0, 1, 2, 3),
    "B": (2, 3, 4, 5),
    "C": (0, 1, 4, 5),
    "D": (0, 2, 4, 5),
}
# zone centres per layout; every zone is 0.2 x 0.2
SPLIT_ZONES = {
    "A": ((0.15, 0.2), (0.15, 0.5), (0.15, 0.8)),
    "B": ((0.85, 0.2), (0.85, 0.5), (0.85, 0.8)),
    "C": ((0.2, 0.85), (0.5, 0.85), (0.8, 0.85)),
    "D": ((0.2, 0.15), (0.5, 0.15), (0.8, 0.15)),
}
ZONE_HALF = 0.1


class UnsolvableTaskError(RuntimeError):
    pass


@dataclass
class ObjectState:
    pos: np.ndarray
    color: int
    held: bool = False


@dataclass
class Zone:
    zone_id: int
    center: tuple[float, float]
    half: float = ZONE_HALF

    def contains(self, p) -> bool:
        return abs(p[0] - self.center[0]) <= self.half and abs(p[1] - self.center[1]) <= self.half


@dataclass
class WorldState:
    gripper_pos: np.ndarray
    gripper_closed: bool
    objects: list[ObjectState]
    zones: list[Zone]
    split: str = "A"

    def copy(self) -> "WorldState":
        return WorldState(
            gripper_pos=self.gripper_pos.copy(),
            gripper_closed=self.gripper_closed,
            objects=[replace(o, pos=o.pos.copy()) for o in self.objects],
            zones=list(self.zones),
            split=self.split,
        )

    def held_index(self) -> int | None:
        for i, o in enumerate(self.objects):
            if o.held:
                return i
        return None

    def index_of_color(self, color: int) -> int:
        for i, o in enumerate(self.objects):
            if o.color == color:
                return i
        raise UnsolvableTaskError(f"no object of colour {color} in the world")


@dataclass(frozen=True)
class Instruction:
    template: int
    args: tuple[int, ...]

    @property
    def tokens(self) -> list[int]:
        toks = [_TEMPLATE_BASE + self.template]
        color = self.args[0]
        toks.append(_COLOR_BASE + color)
        if self.template == PLACE:
            toks.append(_ZONE_BASE + self.args[1])
        elif self.template == PUSH:
            toks.append(_DIR_BASE + self.args[1])
        toks += [PAD_TOKEN] * (L_INST - len(toks))
        return toks

    @property
    def color(self) -> int:
        return self.args[0]

    def describe(self) -> str:
        words = [TEMPLATE_NAMES[self.template], f"colour{self.args[0]}"]
        if self.template == PLACE:
            words.append(f"zone{self.args[1]}")
        elif self.template == PUSH:
            words.append(DIRECTION_NAMES[self.args[1]])
        return " ".join(words)


@dataclass
class Action7:
    pose: np.ndarray  # 6 floats; only dims 0-1 move the gripper
    gripper: int  # 1 closed, 0 open

    def clipped(self) -> "Action7":
        pose = np.asarray(self.pose, dtype=np.float64).copy()
        pose[:2] = np.clip(pose[:2], -DELTA_MAX, DELTA_MAX)
        return Action7(pose=pose, gripper=int(self.gripper))

    @classmethod
    def move(cls, delta, gripper: int) -> "Action7":
        pose = np.zeros(6)
        pose[:2] = delta
        return cls(pose=pose, gripper=int(gripper))


@dataclass
class TaskState:
    """Per-subtask bookkeeping: the instruction plus where the target started."""

    instruction: Instruction
    start_pos: np.ndarray

    @classmethod
    def begin(cls, state: WorldState, instruction: Instruction) -> "TaskState":
        idx = state.index_of_color(instruction.color)
        return cls(instruction=instruction, start_pos=state.objects[idx].pos.copy())


@dataclass
class Episode:
    instruction: Instruction
    obs: np.ndarray  # (T, L_OBS, D_RAW)
    pose: np.ndarray  # (T, 6)
    grip: np.ndarray  # (T,)
    split: str
    success: bool = True
    chain_pos: int = 0

    def __len__(self) -> int:
        return len(self.grip)

    def to_json(self) -> dict:
        return {
            "instr": {
                "template": self.instruction.template,
                "args": list(self.instruction.args),
                "tokens": self.instruction.tokens,
            },
            "steps": [
                {"obs": o.tolist(), "pose": p.tolist(), "grip": int(g)}
                for o, p, g in zip(self.obs, self.pose, self.grip)
            ],
            "split": self.split,
            "success": self.success,
            "chain_pos": self.chain_pos,
        }

    @classmethod
    def from_json(cls, rec: dict) -> "Episode":
        ins = rec["instr"]
        steps = rec["steps"]
        return cls(
            instruction=Instruction(int(ins["template"]), tuple(int(a) for a in ins["args"])),
            obs=np.array([s["obs"] for s in steps], dtype=np.float64),
            pose=np.array([s["pose"] for s in steps], dtype=np.float64),
            grip=np.array([s["grip"] for s in steps], dtype=np.int64),
            split=rec["split"],
            success=bool(rec.get("success", True)),
            chain_pos=int(rec.get("chain_pos", 0)),
        )


@dataclass
class TaskChain:
    initial: WorldState
    instructions: list[Instruction]

    def __post_init__(self):
        if len(self.instructions) != 5:
            raise ValueError(f"a task chain has exactly 5 subtasks, got {len(self.instructions)}")


# ---------------------------------------------------------------------------
# world construction


def random_world(rng: np.random.Generator, split: str) -> WorldState:
    colors = list(SPLIT_COLORS[split])
    k = int(rng.integers(OBJ_RANGE[0], OBJ_RANGE[1] + 1))
    chosen = rng.permutation(colors)[:k]
    positions: list[np.ndarray] = []
    while len(positions) < k:
        p = rng.uniform(0.12, 0.88, size=2)
        if all(np.linalg.norm(p - q) >= MIN_OBJ_SEP for q in positions):
            positions.append(p)
    objects = [ObjectState(pos=p, color=int(c)) for p, c in zip(positions, chosen)]
    zones = [Zone(i, c) for i, c in enumerate(SPLIT_ZONES[split])]
    return WorldState(
        gripper_pos=rng.uniform(0.1, 0.9, size=2),
        gripper_closed=False,
        objects=objects,
        zones=zones,
        split=split,
    )


def observe(state: WorldState) -> np.ndarray:
    """Structured observation tokens, shape (L_OBS, D_RAW)."""
    obs = np.zeros((L_OBS, D_RAW))
    held = state.held_index() is not None
    g = obs[0]
    g[_F_GRIPPER] = 1.0
    g[_F_X], g[_F_Y] = state.gripper_pos
    g[_F_HELD] = float(held)
    g[_F_CLOSED] = float(state.gripper_closed)
    for slot in range(MAX_OBJECTS):
        row = obs[1 + slot]
        if slot < len(state.objects):
            o = state.objects[slot]
            row[_F_OBJECT] = 1.0
            row[_F_X], row[_F_Y] = o.pos
            row[_F_COLOR + o.color] = 1.0
            row[_F_HELD] = float(o.held)
            _offset(row, o.pos, state.gripper_pos)
        else:
            row[_F_PAD] = 1.0
    for j, z in enumerate(state.zones):
        row = obs[1 + MAX_OBJECTS + j]
        row[_F_ZONE] = 1.0
        row[_F_X], row[_F_Y] = z.center
        row[_F_W] = row[_F_H] = z.half
        row[_F_ZONE_ID + z.zone_id] = 1.0
        _offset(row, z.center, state.gripper_pos)
    return obs


def _offset(row: np.ndarray, pos, gripper: np.ndarray) -> None:
    rel = np.asarray(pos, dtype=np.float64) - gripper
    row[_F_DX], row[_F_DY] = rel
    row[_F_NDX], row[_F_NDY] = np.clip(rel / FINE_RADIUS, -1.0, 1.0)


def _success(state: WorldState, task: TaskState, released_idx: int | None) -> bool:
    ins = task.instruction
    idx = state.index_of_color(ins.color)
    obj = state.objects[idx]
    if ins.template == REACH:
        return bool(np.linalg.norm(state.gripper_pos - obj.pos) < GRASP_RADIUS)
    if ins.template == GRASP:
        return obj.held
    if ins.template == PLACE:
        return released_idx == idx and state.zones[ins.args[1]].contains(obj.pos)
    if ins.template == RELEASE:
        return state.held_index() is None
    if ins.template == PUSH:
        return float((obj.pos - task.start_pos) @ DIRECTIONS[ins.args[1]]) >= PUSH_DIST
    raise ValueError(f"unknown template {ins.template}")


def _sweep_push(state: WorldState, old: np.ndarray) -> None:
    """A closed, empty gripper shoves objects lying ahead of its swept path."""
    move = state.gripper_pos - old
    length = float(np.linalg.norm(move))
    if length < 1e-12:
        return
    u = move / length
    for o in state.objects:
        rel = o.pos - old
        s = float(rel @ u)
        perp = rel - s * u
        p = float(np.linalg.norm(perp))
        if s <= 0.0 or p >= CONTACT_RADIUS:
            continue
        reach = math.sqrt(CONTACT_RADIUS**2 - p**2)
        if s < length + reach:
            o.pos = np.clip(old + u * (length + reach) + perp, 0.0, 1.0)


def step(state: WorldState, action: Action7, task: TaskState) -> tuple[WorldState, bool, bool]:
    """Apply one action. Returns (next state, done, success); done == success here,
    the T_max cut-off is the caller's job."""
    a = action.clipped()
    nxt = state.copy()
    released = None
    close = bool(a.gripper)
    held = nxt.held_index()
    if close and not nxt.gripper_closed and held is None:
        # grasp only on an open -> closed transition
        d = [np.linalg.norm(o.pos - nxt.gripper_pos) for o in nxt.objects]
        j = int(np.argmin(d))
        if d[j] < GRASP_RADIUS:
            nxt.objects[j].held = True
            nxt.objects[j].pos = nxt.gripper_pos.copy()
    elif not close and held is not None:
        nxt.objects[held].held = False
        released = held
    nxt.gripper_closed = close

    old = nxt.gripper_pos
    nxt.gripper_pos = np.clip(old + a.pose[:2], 0.0, 1.0)
    held = nxt.held_index()
    if held is not None:
        nxt.objects[held].pos = nxt.gripper_pos.copy()
    elif nxt.gripper_closed:
        _sweep_push(nxt, old)
    ok = _success(nxt, task, released)
    return nxt, ok, ok


# ---------------------------------------------------------------------------
# scripted expert


def _approach(g: np.ndarray, target: np.ndarray) -> np.ndarray:
    diff = target - g
    dist = float(np.linalg.norm(diff))
    if dist < 1e-12:
        return np.zeros(2)
    if dist > FINE_RADIUS:
        # long stride, but do not overshoot deep into the fine region
        length = min(DELTA_MAX, dist - FINE_RADIUS + DELTA_MAX / 4)
    else:
        length = min(DELTA_MAX / 4, dist)
    return diff / dist * length


def expert_action(state: WorldState, task: TaskState) -> Action7:
    ins = task.instruction
    g = state.gripper_pos
    idx = state.index_of_color(ins.color)
    obj = state.objects[idx]
    held = state.held_index()

    if ins.template == REACH:
        return Action7.move(_approach(g, obj.pos), 1 if held is not None else 0)

    if ins.template == GRASP:
        if held is not None and held != idx:
            return Action7.move(np.zeros(2), 0)
        if obj.held:
            return Action7.move(np.zeros(2), 1)
        if np.linalg.norm(obj.pos - g) < DOCK_TOL:
            if state.gripper_closed:
                return Action7.move(np.zeros(2), 0)
            return Action7.move(np.zeros(2), 1)
        return Action7.move(_approach(g, obj.pos), 0)

    if ins.template == PLACE:
        zone = state.zones[ins.args[1]]
        if not obj.held:
            if held is not None:
                return Action7.move(np.zeros(2), 0)
            if np.linalg.norm(obj.pos - g) < DOCK_TOL:
                return Action7.move(np.zeros(2), 0 if state.gripper_closed else 1)
            return Action7.move(_approach(g, obj.pos), 0)
        centre = np.asarray(zone.center)
        if np.linalg.norm(centre - g) < DOCK_TOL:
            return Action7.move(np.zeros(2), 0)
        return Action7.move(_approach(g, centre), 1)

    if ins.template == RELEASE:
        return Action7.move(np.zeros(2), 0)

    if ins.template == PUSH:
        d = DIRECTIONS[ins.args[1]]
        rel = obj.pos - g
        along = float(rel @ d)
        perp = rel - along * d
        if held is not None:
            return Action7.move(np.zeros(2), 0)
        if state.gripper_closed and 0.0 < along <= PUSH_STANDOFF + 0.03 and np.linalg.norm(perp) < DOCK_TOL:
            return Action7.move(d * DELTA_MAX + perp, 1)
        standoff = obj.pos - d * PUSH_STANDOFF
        if np.linalg.norm(standoff - g) < DOCK_TOL:
            return Action7.move(np.zeros(2), 1)
        return Action7.move(_approach(g, standoff), 0)

    raise UnsolvableTaskError(f"unknown template {ins.template}")


def rollout_expert(state: WorldState, task: TaskState, t_max: int = T_MAX):
    """Run the expert until success. Returns (obs list, actions, final state)."""
    obs, actions = [], []
    for _ in range(t_max):
        a = expert_action(state, task)
        obs.append(observe(state))
        actions.append(a)
        state, done, _ = step(state, a, task)
        if done:
            return obs, actions, state
    raise UnsolvableTaskError(f"expert failed '{task.instruction.describe()}' within {t_max} steps")


# ---------------------------------------------------------------------------
# chains


def _push_feasible(state: WorldState, idx: int, d: np.ndarray) -> bool:
    p = state.objects[idx].pos
    end = p + d * (PUSH_DIST + 0.1)
    start = p - d * PUSH_STANDOFF
    return bool(np.all((end > 0.04) & (end < 0.96)) and np.all((start > 0.02) & (start < 0.98)))


def _next_instruction(state: WorldState, rng: np.random.Generator) -> Instruction:
    held = state.held_index()
    if held is not None:
        color = state.objects[held].color
        if rng.random() < 0.7:
            return Instruction(PLACE, (color, int(rng.integers(N_ZONES))))
        return Instruction(RELEASE, (color,))
    while True:
        idx = int(rng.integers(len(state.objects)))
        color = state.objects[idx].color
        r = rng.random()
        if r < 0.3:
            return Instruction(REACH, (color,))
        if r < 0.7:
            return Instruction(GRASP, (color,))
        dirs = [k for k in range(len(DIRECTIONS)) if _push_feasible(state, idx, DIRECTIONS[k])]
        if dirs:
            return Instruction(PUSH, (color, int(rng.choice(dirs))))


def sample_chain(rng: np.random.Generator, split: str) -> tuple[TaskChain, list[Episode]]:
    """Draw a five-subtask chain the expert can finish, with its demonstrations."""
    while True:
        initial = random_world(rng, split)
        state = initial.copy()
        instructions: list[Instruction] = []
        episodes: list[Episode] = []
        try:
            for pos in range(5):
                ins = _next_instruction(state, rng)
                task = TaskState.begin(state, ins)
                obs, actions, state = rollout_expert(state, task)
                instructions.append(ins)
                episodes.append(
                    Episode(
                        instruction=ins,
                        obs=np.array(obs),
                        pose=np.array([a.pose for a in actions]),
                        grip=np.array([a.gripper for a in actions], dtype=np.int64),
                        split=split,
                        chain_pos=pos,
                    )
                )
        except UnsolvableTaskError:
            continue
        return TaskChain(initial, instructions), episodes


# ---------------------------------------------------------------------------
# dataset


@dataclass
class DatasetConfig:
    n_episodes: int = 2000
    splits: str = "ABCD"


def generate_dataset(config: DatasetConfig, seed: int) -> tuple[list[Episode], dict]:
    """Expert demonstrations, round-robin over splits, grouped in whole chains."""
    for s in config.splits:
        if s not in SPLITS:
            raise ValueError(f"unknown split '{s}'")
    episodes: list[Episode] = []
    k = 0
    while len(episodes) < config.n_episodes:
        split = config.splits[k % len(config.splits)]
        rng = derive_rng(seed, "dataset", k)
        _, eps = sample_chain(rng, split)
        episodes.extend(eps)
        k += 1
    episodes = episodes[: config.n_episodes]
    lengths = [len(e) for e in episodes]
    manifest = {
        "n_episodes": len(episodes),
        "mean_len": float(np.mean(lengths)),
        "seed": int(seed),
        "splits": config.splits,
    }
    return episodes, manifest


def write_dataset(episodes: Sequence[Episode], manifest: dict, out: str | Path) -> Path:
    """Write ``<out>.jsonl`` plus ``<out>.manifest.json``."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    path = out if out.suffix == ".jsonl" else out.with_suffix(".jsonl")
    with open(path, "w") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_json(), separators=(",", ":")))
            fh.write("\n")
    with open(manifest_path(path), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".manifest.json")


def read_dataset(path: str | Path) -> tuple[list[Episode], dict]:
    path = Path(path)
    with open(path) as fh:
        episodes = [Episode.from_json(json.loads(line)) for line in fh if line.strip()]
    mpath = manifest_path(path)
    manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
    return episodes, manifest


# ---------------------------------------------------------------------------
# chain evaluation


class ChainPolicy(Protocol):
    """What ``evaluate_chains`` needs from a controller.

    ``reset(rows)`` clears recurrent state for those batch rows; ``act``
    receives the rows still running and returns one action per row plus an
    optional per-row trace dict.
    """

    def start(self, batch: int) -> None: ...

    def reset(self, rows: np.ndarray) -> None: ...

    def act(
        self, rows: np.ndarray, instr_tokens: np.ndarray, obs: np.ndarray, t: np.ndarray
    ) -> tuple[list[Action7], list[dict] | None]: ...


class ExpertPolicy:
    """Oracle controller reading the true world state through ``evaluate_chains``."""

    needs_state = True

    def start(self, batch):
        pass

    def reset(self, rows):
        pass

    def act_on_states(self, states, tasks):
        return [expert_action(s, k) for s, k in zip(states, tasks)], None


class RandomPolicy:
    needs_state = False

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def start(self, batch):
        pass

    def reset(self, rows):
        pass

    def act(self, rows, instr_tokens, obs, t):
        acts = []
        for _ in rows:
            acts.append(Action7.move(self.rng.uniform(-DELTA_MAX, DELTA_MAX, 2), int(self.rng.integers(2))))
        return acts, None


def eval_chains(n_chains: int, seed: int, split: str = "D") -> list[TaskChain]:
    return [sample_chain(derive_rng(seed, "eval-chain", i), split)[0] for i in range(n_chains)]


@dataclass
class ChainResult:
    scores: np.ndarray  # per chain, 0..5
    step_logs: list[list[dict]] = field(default_factory=list)  # per chain, per step trace
    n_steps: int = 0

    @property
    def avg_len(self) -> float:
        return float(self.scores.mean()) if len(self.scores) else 0.0

    def success_rates(self) -> list[float]:
        return [float((self.scores >= k).mean()) for k in range(1, 6)]


def evaluate_chains(
    policy,
    chains: Sequence[TaskChain] | None = None,
    n_chains: int = 100,
    seed: int = 0,
    split: str = "D",
    t_max: int = T_MAX,
    keep_logs: bool = True,
) -> ChainResult:
    """Run every chain in lock-step; a chain stops at its first failed subtask.

    Each chain's policy state is reset at the start of every subtask.
    """
    if chains is None:
        chains = eval_chains(n_chains, seed, split)
    B = len(chains)
    states = [c.initial.copy() for c in chains]
    sub = np.zeros(B, dtype=np.int64)  # index of current subtask
    t = np.zeros(B, dtype=np.int64)
    alive = np.ones(B, dtype=bool)
    scores = np.zeros(B, dtype=np.int64)
    tasks: list[TaskState | None] = [None] * B
    logs: list[list[dict]] = [[] for _ in range(B)]
    policy.start(B)
    total_steps = 0

    def begin(rows):
        good = []
        for r in rows:
            try:
                tasks[r] = TaskState.begin(states[r], chains[r].instructions[sub[r]])
                good.append(r)
            except UnsolvableTaskError:
                alive[r] = False
        if good:
            policy.reset(np.array(good))

    begin(range(B))
    while alive.any():
        rows = np.flatnonzero(alive)
        if getattr(policy, "needs_state", False):
            actions, traces = policy.act_on_states([states[r] for r in rows], [tasks[r] for r in rows])
        else:
            instr = np.array([tasks[r].instruction.tokens for r in rows], dtype=np.int64)
            obs = np.stack([observe(states[r]) for r in rows])
            actions, traces = policy.act(rows, instr, obs, t[rows].copy())
        total_steps += len(rows)
        restart = []
        for k, r in enumerate(rows):
            states[r], done, _ = step(states[r], actions[k], tasks[r])
            if keep_logs and traces is not None:
                rec = dict(traces[k])
                rec["subtask"] = int(sub[r])
                logs[r].append(rec)
            t[r] += 1
            if done:
                scores[r] += 1
                sub[r] += 1
                t[r] = 0
                if sub[r] >= 5:
                    alive[r] = False
                else:
                    restart.append(r)
            elif t[r] >= t_max:
                alive[r] = False
        if restart:
            begin(restart)
    return ChainResult(scores=scores, step_logs=logs, n_steps=total_steps)
