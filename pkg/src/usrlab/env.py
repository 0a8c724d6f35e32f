"""Deterministic four-room gridworld with one-hot image observations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

FOUR_ROOM_13 = """\
#############
#.....#.....#
#.....#.....#
#...........#
#.....#.....#
#.....#.....#
##.######.###
#.....#.....#
#.....#.....#
#.....#.....#
#...........#
#.....#.....#
#############
"""

LAYOUTS = {"FourRoom13": FOUR_ROOM_13}

UP, DOWN, LEFT, RIGHT = range(4)
ACTIONS = (UP, DOWN, LEFT, RIGHT)
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))

N_GOALS = 64
N_TARGET = 16


class Position(NamedTuple):
    row: int
    col: int


@dataclass(frozen=True)
class Transition:
    goal: Position
    s_t: np.ndarray
    a_t: int
    s_next: np.ndarray
    r_t: float
    gamma_t: float
    done: bool = False
    goal_obs: np.ndarray | None = None


@dataclass(frozen=True)
class GoalSplit:
    source: list[Position]
    target: list[Position]
    seed: int


class EpisodeOver(RuntimeError):
    pass


def parse_layout(text: str) -> np.ndarray:
    """Boolean wall mask from a ``#``/``.`` map, one line per row."""
    rows = [line.rstrip("\n") for line in text.strip("\n").splitlines() if line.strip()]
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ValueError("ragged layout")
    bad = set("".join(rows)) - {"#", "."}
    if bad:
        raise ValueError(f"unexpected layout characters: {sorted(bad)}")
    return np.array([[ch == "#" for ch in r] for r in rows], dtype=bool)


class GridWorld:
    """Four-action grid MDP; the goal cell is absorbing and pays +1 on entry."""

    def __init__(self, walls: np.ndarray, gamma_base: float = 0.95, max_steps: int = 300, seed: int = 0):
        if not 0.0 < gamma_base < 1.0:
            raise ValueError(f"gamma_base must lie in (0, 1), got {gamma_base}")
        if max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {max_steps}")
        self.walls = np.asarray(walls, dtype=bool)
        self.height, self.width = self.walls.shape
        self.gamma_base = float(gamma_base)
        self.max_steps = int(max_steps)
        self.seed = seed
        self.rng = np.random.default_rng(seed)

        self.cells = [Position(r, c) for r in range(self.height) for c in range(self.width) if not self.walls[r, c]]
        self.index = {p: i for i, p in enumerate(self.cells)}
        self.obs_dim = self.height * self.width
        self._onehot = np.eye(self.obs_dim)
        self._onehot.setflags(write=False)

        self.goal = None
        self.pos = None
        self.t = 0
        self.done = True

    @classmethod
    def from_text(cls, text: str, **kwargs) -> GridWorld:
        return cls(parse_layout(text), **kwargs)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def is_navigable(self, p) -> bool:
        r, c = p
        return 0 <= r < self.height and 0 <= c < self.width and not self.walls[r, c]

    def _require_navigable(self, p, what: str) -> Position:
        if not self.is_navigable(p):
            raise ValueError(f"{what} {tuple(p)} is not a navigable cell")
        return Position(*p)

    def observe(self, p) -> np.ndarray:
        p = self._require_navigable(p, "cell")
        return self._onehot[p.row * self.width + p.col]

    def render_goal(self, g) -> np.ndarray:
        return self.observe(g)

    def position_of(self, obs: np.ndarray) -> Position:
        flat = int(np.argmax(obs))
        return Position(*divmod(flat, self.width))

    def move(self, p: Position, a: int) -> Position:
        """Deterministic successor cell ignoring goals and episode state."""
        dr, dc = MOVES[a]
        nxt = (p[0] + dr, p[1] + dc)
        return Position(*nxt) if self.is_navigable(nxt) else Position(*p)

    def reset(self, goal, start=None) -> np.ndarray:
        """Start an episode; ``start=None`` draws a random non-goal cell."""
        goal = self._require_navigable(goal, "goal")
        if start is None:
            choices = [p for p in self.cells if p != goal]
            start = choices[self.rng.integers(len(choices))]
        else:
            start = self._require_navigable(start, "start")
            if start == goal:
                raise ValueError("start must differ from goal")
        self.goal, self.pos = goal, start
        self.t = 0
        self.done = False
        return self.observe(start)

    def step(self, a: int) -> Transition:
        if self.done:
            raise EpisodeOver("step() called on a finished episode; call reset()")
        if a not in ACTIONS:
            raise ValueError(f"invalid action {a}")
        s_t = self.observe(self.pos)
        self.pos = self.move(self.pos, a)
        self.t += 1
        reached = self.pos == self.goal
        self.done = reached or self.t >= self.max_steps
        return Transition(
            goal=self.goal,
            s_t=s_t,
            a_t=int(a),
            s_next=self.observe(self.pos),
            r_t=1.0 if reached else 0.0,
            gamma_t=0.0 if reached else self.gamma_base,
            done=self.done,
            goal_obs=self.observe(self.goal),
        )

    def goal_pools(self) -> tuple[list[Position], list[Position]]:
        """Fixed 48/16 split of 64 evenly strided navigable cells.

        Goals are cells ``floor(i * n_cells / 64)`` of the row-major cell list;
        every fourth of them (``i % 4 == 2``) is held out as a target goal.
        """
        if self.n_cells < N_GOALS:
            raise ValueError(f"layout has only {self.n_cells} cells, need {N_GOALS}")
        goals = [self.cells[(i * self.n_cells) // N_GOALS] for i in range(N_GOALS)]
        source = [g for i, g in enumerate(goals) if i % 4 != 2]
        target = [g for i, g in enumerate(goals) if i % 4 == 2]
        return source, target

    def sample_source_goals(self, k: int, seed: int) -> GoalSplit:
        source, target = self.goal_pools()
        if not 1 <= k <= len(source):
            raise ValueError(f"k must lie in [1, {len(source)}], got {k}")
        picks = np.random.default_rng(seed).choice(len(source), size=k, replace=False)
        return GoalSplit([source[i] for i in sorted(picks)], list(target), seed)


def new_world(layout_id: str = "FourRoom13", gamma_base: float = 0.95, max_steps: int = 300, seed: int = 0) -> GridWorld:
    if layout_id not in LAYOUTS:
        raise ValueError(f"unknown layout {layout_id!r}; known: {sorted(LAYOUTS)}")
    return GridWorld(parse_layout(LAYOUTS[layout_id]), gamma_base=gamma_base, max_steps=max_steps, seed=seed)
