"""Exact tabular solutions used as ground truth for the learned quantities."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import ACTIONS, GridWorld, Position


@dataclass
class TabularMdp:
    """Deterministic MDP over the navigable cells of a world, for one goal."""

    cells: list[Position]
    transition: np.ndarray  # (n_states, 4) next-state indices
    terminal: np.ndarray  # (n_states,) bool
    gamma: float
    goal: Position | None = None

    @property
    def n_states(self) -> int:
        return len(self.cells)

    def goal_reward(self) -> np.ndarray:
        """r(s, a) = 1 when the move enters a terminal cell from a live one."""
        enters = self.terminal[self.transition]
        return np.where(self.terminal[:, None], 0.0, enters.astype(float))

    def continuation(self) -> np.ndarray:
        """gamma * 1[s' not terminal], zeroed for moves out of terminal cells."""
        cont = self.gamma * (~self.terminal[self.transition])
        cont[self.terminal] = 0.0
        return cont


@dataclass
class OracleSolution:
    goal: Position
    v_star: np.ndarray
    pi_star: np.ndarray
    psi_exact: np.ndarray


def extract_mdp(world: GridWorld, goal) -> TabularMdp:
    goal = Position(*goal)
    if not world.is_navigable(goal):
        raise ValueError(f"goal {tuple(goal)} is not navigable")
    n = world.n_cells
    nxt = np.empty((n, len(ACTIONS)), dtype=np.int64)
    for i, p in enumerate(world.cells):
        for a in ACTIONS:
            nxt[i, a] = world.index[world.move(p, a)]
    terminal = np.zeros(n, dtype=bool)
    g = world.index[goal]
    terminal[g] = True
    nxt[g, :] = g
    return TabularMdp(list(world.cells), nxt, terminal, world.gamma_base, goal)


def _as_reward_table(mdp: TabularMdp, reward) -> np.ndarray:
    if reward is None:
        return mdp.goal_reward()
    if callable(reward):
        table = np.zeros(mdp.transition.shape)
        for s in range(mdp.n_states):
            for a in range(mdp.transition.shape[1]):
                table[s, a] = reward(s, a, mdp.transition[s, a])
        return table
    return np.asarray(reward, dtype=float)


def q_values(mdp: TabularMdp, v: np.ndarray, reward=None) -> np.ndarray:
    r = _as_reward_table(mdp, reward)
    return r + mdp.continuation() * v[mdp.transition]


def value_iteration(mdp: TabularMdp, reward=None, tol: float = 1e-12, max_iter: int = 100_000):
    """Optimal values and greedy policy (ties go to the lowest action index).

    ``reward`` is an (n_states, 4) table, a callable ``r(s, a, s_next)`` or
    ``None`` for the goal-entry reward. Terminal states have value 0.
    """
    if not 0.0 <= mdp.gamma < 1.0:
        raise ValueError("value iteration needs 0 <= gamma < 1")
    if tol <= 0:
        raise ValueError("tol must be positive")
    r = _as_reward_table(mdp, reward)
    v = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        v_new = q_values(mdp, v, r).max(axis=1)
        v_new[mdp.terminal] = 0.0
        delta = np.max(np.abs(v_new - v))
        v = v_new
        if delta < tol:
            break
    pi = np.argmax(q_values(mdp, v, r), axis=1)
    return v, pi


def bellman_residual(mdp: TabularMdp, v: np.ndarray, reward=None) -> float:
    target = q_values(mdp, v, reward).max(axis=1)
    target[mdp.terminal] = 0.0
    return float(np.max(np.abs(target - v)))


def exact_successor_features(mdp: TabularMdp, policy: np.ndarray, feature_map: np.ndarray) -> np.ndarray:
    """Solve psi(s) = phi(s') + gamma 1[s' live] psi(s') under ``policy``.

    ``feature_map`` holds one feature row per state; terminal rows of the
    result are zero.
    """
    phi = np.asarray(feature_map, dtype=float)
    n = mdp.n_states
    rows = np.arange(n)
    nxt = mdp.transition[rows, np.asarray(policy)]
    live = ~mdp.terminal

    P = np.zeros((n, n))
    P[rows[live], nxt[live]] = 1.0
    cont = np.where(mdp.terminal[nxt], 0.0, mdp.gamma)
    A = np.eye(n) - cont[:, None] * P
    rhs = P @ phi
    psi = np.linalg.solve(A, rhs)
    psi[mdp.terminal] = 0.0
    return psi


def policy_evaluation(mdp: TabularMdp, policy: np.ndarray, reward=None, tol: float = 1e-13, max_iter: int = 100_000) -> np.ndarray:
    """Iterative evaluation of a deterministic policy; independent of the linear solve."""
    r = _as_reward_table(mdp, reward)
    rows = np.arange(mdp.n_states)
    pol = np.asarray(policy)
    r_pi = r[rows, pol]
    cont = mdp.continuation()[rows, pol]
    nxt = mdp.transition[rows, pol]
    v = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        v_new = r_pi + cont * v[nxt]
        delta = np.max(np.abs(v_new - v))
        v = v_new
        if delta < tol:
            break
    return v


def optimal_policy_distribution(mdp: TabularMdp, v_star: np.ndarray, temperature: float, reward=None) -> np.ndarray:
    """Per-state action distribution from one-step look-ahead values.

    Temperature 0 gives the greedy one-hot (lowest index on ties); larger
    temperatures soften toward uniform.
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    q = q_values(mdp, v_star, reward)
    n_actions = q.shape[1]
    if temperature == 0:
        out = np.zeros_like(q)
        out[np.arange(mdp.n_states), np.argmax(q, axis=1)] = 1.0
        return out
    if np.isinf(temperature):
        return np.full_like(q, 1.0 / n_actions)
    z = q / temperature
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def solve_goal(world: GridWorld, goal, feature_map: np.ndarray | None = None, tol: float = 1e-12) -> OracleSolution:
    """V*, pi* and exact successor features under pi* for one goal.

    ``feature_map`` defaults to one-hot cell indicators.
    """
    mdp = extract_mdp(world, goal)
    v, pi = value_iteration(mdp, tol=tol)
    phi = np.eye(mdp.n_states) if feature_map is None else feature_map
    psi = exact_successor_features(mdp, pi, phi)
    return OracleSolution(Position(*goal), v, pi, psi)


def write_solution_csv(solution: OracleSolution, world: GridWorld, path) -> None:
    path = Path(path)
    d = solution.psi_exact.shape[1]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row", "col", "v_star", "pi_star"] + [f"psi_{j}" for j in range(d)])
        for i, p in enumerate(world.cells):
            writer.writerow([p.row, p.col, repr(float(solution.v_star[i])), int(solution.pi_star[i])]
                            + [repr(float(x)) for x in solution.psi_exact[i]])
