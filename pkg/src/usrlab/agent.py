"""Two-phase training of the USR approximator.

Phase 1 fits the state-feature autoencoder on observations gathered by a
uniform-random policy. Phase 2 runs online actor-critic, one update per
environment step: goal weights by reward regression, successor features by
TD, and the policy by the advantage projected through the goal weights.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .env import GridWorld, Position, Transition
from .models import N_ACTIONS, UsrModel
from .nn import adam_step, log_softmax, sgd_step, softmax

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """A loss or gradient became non-finite during training."""


@dataclass
class TrainConfig:
    lr_w: float = 1e-3
    lr_psi: float = 1e-3
    lr_pi: float = 1e-4
    lr_phi: float = 1e-3
    phase1_samples: int = 5000
    phase1_epochs: int = 2000
    phase1_batch: int = 128
    max_env_steps: int = 500_000
    entropy_coef: float = 0.01
    eval_every: int = 1000
    seed: int = 0
    phi_indexing: str = "next"
    optimizer: str = "adam"
    convergence_window: int = 200
    convergence_success: float = 0.95
    stop_on_convergence: bool = True
    fused: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("lr_w", "lr_psi", "lr_pi", "lr_phi"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("phase1_samples", "phase1_epochs", "phase1_batch", "max_env_steps", "eval_every",
                     "convergence_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.entropy_coef < 0:
            raise ValueError("entropy_coef must be >= 0")
        if self.phi_indexing not in ("current", "next"):
            raise ValueError("phi_indexing must be 'current' or 'next'")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if not 0 < self.convergence_success <= 1:
            raise ValueError("convergence_success must lie in (0, 1]")


@dataclass
class EpisodeRecord:
    env_step: int
    goal: tuple[int, int]
    episode_return: float
    episode_length: int
    loss_w: float
    loss_psi: float
    advantage_mean: float


@dataclass
class TrainLog:
    episodes: list[EpisodeRecord] = field(default_factory=list)
    phase1_losses: list[float] = field(default_factory=list)
    env_steps: int = 0
    converged: bool = False

    CSV_HEADER = ("env_step", "goal_row", "goal_col", "episode_return", "episode_length",
                  "loss_w", "loss_psi", "advantage_mean")

    def returns(self) -> np.ndarray:
        return np.array([e.episode_return for e in self.episodes])

    def steps(self) -> np.ndarray:
        return np.array([e.env_step for e in self.episodes], dtype=np.int64)

    def write_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.CSV_HEADER)
            for e in self.episodes:
                writer.writerow([e.env_step, e.goal[0], e.goal[1], repr(e.episode_return), e.episode_length,
                                 repr(e.loss_w), repr(e.loss_psi), repr(e.advantage_mean)])

    def write_phase1_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "recon_mse"])
            for i, loss in enumerate(self.phase1_losses):
                writer.writerow([i, repr(loss)])


def _step_fn(config: TrainConfig):
    return adam_step if config.optimizer == "adam" else sgd_step


# ---------------------------------------------------------------------------
# phase 1


def collect_random_observations(world: GridWorld, n: int, rng: np.random.Generator) -> np.ndarray:
    """Cell indices visited by a uniform-random policy over random goals/starts."""
    flat = []
    while len(flat) < n:
        goal = world.cells[rng.integers(world.n_cells)]
        world.reset(goal)
        flat.append(world.pos.row * world.width + world.pos.col)
        while not world.done and len(flat) < n:
            world.step(int(rng.integers(N_ACTIONS)))
            flat.append(world.pos.row * world.width + world.pos.col)
    return np.array(flat[:n], dtype=np.int64)


def pretrain_phi(world: GridWorld, model: UsrModel, config: TrainConfig) -> TrainLog:
    """Fit the autoencoder by minibatch reconstruction, then freeze phi.

    Training runs over the distinct observations seen during exploration;
    raw visit counts are heavily skewed toward room centres and leave rare
    corner cells stuck on another cell's reconstruction.
    """
    if model.phi_frozen:
        raise ValueError("phi is already frozen")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    idx = collect_random_observations(world, config.phase1_samples, rng)
    data = np.eye(world.obs_dim)[np.unique(idx)]
    step = _step_fn(config)
    enc_state, dec_state = model.optim["phi"]
    log_ = TrainLog()

    def dataset_loss():
        recon = model.decoder.forward(model.encoder.forward(data))
        return float(np.mean((recon - data) ** 2))

    log_.phase1_losses.append(dataset_loss())
    n = len(data)
    for epoch in range(config.phase1_epochs):
        order = rng.permutation(n)
        for lo in range(0, n, config.phase1_batch):
            x = data[order[lo:lo + config.phase1_batch]]
            code = model.encoder.forward(x)
            recon = model.decoder.forward(code)
            d_recon = 2.0 * (recon - x) / x.size
            gdec, d_code = model.decoder.backward(d_recon)
            step(model.decoder.params, gdec, dec_state, config.lr_phi)
            genc, _ = model.encoder.backward(d_code, need_input_grad=False)
            step(model.encoder.params, genc, enc_state, config.lr_phi)
        log_.phase1_losses.append(dataset_loss())
    if not np.isfinite(log_.phase1_losses[-1]):
        raise DivergenceError("autoencoder loss became non-finite")
    model.freeze_phi()
    log.info("phase 1 done: recon mse %.3g -> %.3g", log_.phase1_losses[0], log_.phase1_losses[-1])
    return log_


def reconstruction_mse(world: GridWorld, model: UsrModel) -> float:
    """Mean per-pixel reconstruction error over every navigable observation."""
    obs = np.stack([world.observe(p) for p in world.cells])
    return model.reconstruct(obs)[1]


# ---------------------------------------------------------------------------
# phase 2


def act(model: UsrModel, s: np.ndarray, g: np.ndarray, rng: np.random.Generator) -> int:
    x = np.concatenate([np.asarray(s, dtype=float), np.asarray(g, dtype=float)])
    if x.shape != (2 * model.obs_dim,):
        model.trunk_forward(s, g)  # raises the shape error
    return sample_action(kernels.policy(model.trunk.params.values, model.policy_head.params.values, x,
                                        model.hidden, N_ACTIONS), rng)


def sample_action(policy: np.ndarray, rng: np.random.Generator) -> int:
    u = rng.random()
    a = int(np.searchsorted(np.cumsum(policy), u, side="right"))
    return min(a, len(policy) - 1)


def td_target(model: UsrModel, t: Transition, g: np.ndarray, phi_indexing: str = "next") -> np.ndarray:
    """phi + gamma_t * psi(s_next, g); computed as a constant (no gradient)."""
    phi_x = model.encode_phi(t.s_next if phi_indexing == "next" else t.s_t)
    if t.gamma_t == 0.0:
        return np.array(phi_x, dtype=float)
    psi_next = model.psi_head.forward(model.trunk_forward(t.s_next, g))
    return phi_x + t.gamma_t * psi_next


def update_w(model: UsrModel, t: Transition, g: np.ndarray, config: TrainConfig) -> float:
    """One optimizer step on L_w = (r_t - phi(s_next)^T w(g))^2; returns L_w."""
    phi_next = model.encode_phi(t.s_next)
    err = float(phi_next @ model.goal_weights(g)) - t.r_t
    loss = err * err
    _check_finite(loss, "L_w")
    grad, _ = model.w_net.backward(2.0 * err * phi_next, need_input_grad=False)
    _step_fn(config)(model.w_net.params, grad, model.optim["w"][0], config.lr_w)
    return loss


def update_psi(model: UsrModel, t: Transition, g: np.ndarray, config: TrainConfig) -> float:
    """One optimizer step on the TD loss toward a constant target; returns L_psi."""
    target = td_target(model, t, g, config.phi_indexing)
    diff = model.psi_head.forward(model.trunk_forward(t.s_t, g)) - target
    loss = float(diff @ diff)
    _check_finite(loss, "L_psi")
    step = _step_fn(config)
    trunk_state, head_state = model.optim["psi"]
    ghead, dh = model.psi_head.backward(2.0 * diff)
    step(model.psi_head.params, ghead, head_state, config.lr_psi)
    gtrunk, _ = model.trunk.backward(dh, need_input_grad=False)
    step(model.trunk.params, gtrunk, trunk_state, config.lr_psi)
    return loss


def update_policy(model: UsrModel, t: Transition, g: np.ndarray, advantage: float, config: TrainConfig):
    """One ascent step on A * log pi(a_t | s_t, g) + entropy_coef * H(pi)."""
    logits = model.policy_head.forward(model.trunk_forward(t.s_t, g))
    p = softmax(logits)
    logp = log_softmax(logits)
    # gradient of the negated objective w.r.t. the logits
    d_logits = advantage * p
    d_logits[t.a_t] -= advantage
    if config.entropy_coef:
        entropy = -float(p @ logp)
        d_logits += config.entropy_coef * p * (logp + entropy)
    if not np.any(d_logits):
        return
    step = _step_fn(config)
    trunk_state, head_state = model.optim["pi"]
    ghead, dh = model.policy_head.backward(d_logits)
    step(model.policy_head.params, ghead, head_state, config.lr_pi)
    gtrunk, _ = model.trunk.backward(dh, need_input_grad=False)
    step(model.trunk.params, gtrunk, trunk_state, config.lr_pi)


def update_step(model: UsrModel, t: Transition, config: TrainConfig, g: np.ndarray | None = None):
    """Goal weights, successor features, advantage, policy, in that order.

    The advantage uses the parameters left by the first two updates.
    Returns ``(L_w, L_psi, A_t)``.
    """
    if not model.phi_frozen:
        raise ValueError("phase-2 updates need frozen features")
    g = t.goal_obs if g is None else g
    if config.fused and config.optimizer == "adam":
        return _fused_update_step(model, t, g, config)
    loss_w = update_w(model, t, g, config)
    loss_psi = update_psi(model, t, g, config)
    advantage = advantage_of(model, t, g, config.phi_indexing)
    _check_finite(advantage, "advantage")
    update_policy(model, t, g, advantage, config)
    return loss_w, loss_psi, advantage


def _fused_update_step(model: UsrModel, t: Transition, g: np.ndarray, config: TrainConfig):
    """``update_step`` through the compiled kernel; same stages, same order."""
    g = np.asarray(g, dtype=float)
    s_t = np.asarray(t.s_t, dtype=float)
    s_next = np.asarray(t.s_next, dtype=float)
    if g.shape != (model.obs_dim,) or s_t.shape != g.shape or s_next.shape != g.shape:
        model.trunk_forward(s_t, g)  # raises the shape error
    (w_state,) = model.optim["w"]
    psi_trunk, psi_head = model.optim["psi"]
    pi_trunk, pi_head = model.optim["pi"]
    states = (w_state, psi_head, psi_trunk, pi_head, pi_trunk)
    steps = np.array([st.t for st in states], dtype=np.int64)
    out = np.zeros(3)
    phi_next = model.encode_phi(s_next)
    phi_x = phi_next if config.phi_indexing == "next" else model.encode_phi(s_t)
    kernels.fused_update(
        model.trunk.params.values, psi_trunk.m, psi_trunk.v, pi_trunk.m, pi_trunk.v,
        model.psi_head.params.values, psi_head.m, psi_head.v,
        model.policy_head.params.values, pi_head.m, pi_head.v,
        model.w_net.params.values, w_state.m, w_state.v,
        np.concatenate([s_t, g]), np.concatenate([s_next, g]), g, phi_next, phi_x,
        float(t.r_t), float(t.gamma_t), int(t.a_t), model.hidden, model.d, N_ACTIONS,
        config.lr_w, config.lr_psi, config.lr_pi, config.entropy_coef,
        w_state.beta1, w_state.beta2, w_state.eps, steps, out,
    )
    for st, n in zip(states, steps):
        st.t = int(n)
    for value, what in zip(out, ("L_w", "L_psi", "advantage")):
        _check_finite(value, what)
    return float(out[0]), float(out[1]), float(out[2])


def advantage_of(model: UsrModel, t: Transition, g: np.ndarray, phi_indexing: str = "next") -> float:
    """[phi + gamma_t psi(s_next, g) - psi(s_t, g)]^T w(g) at current parameters."""
    target = td_target(model, t, g, phi_indexing)
    psi = model.psi_head.forward(model.trunk_forward(t.s_t, g))
    return float((target - psi) @ model.goal_weights(g))


def _check_finite(x: float, what: str):
    if not np.isfinite(x):
        raise DivergenceError(f"{what} is not finite ({x})")


def train(
    world: GridWorld,
    model: UsrModel,
    goals: list[Position],
    config: TrainConfig,
    start_step: int = 0,
    on_episode=None,
) -> TrainLog:
    """Online actor-critic over episodes with goals drawn uniformly from ``goals``.

    Stops after ``config.max_env_steps`` steps (counted from ``start_step``)
    or, if ``stop_on_convergence``, once the trailing window of episodes
    reaches the success criterion.
    """
    if not model.phi_frozen:
        raise ValueError("run pretrain_phi first")
    if not goals:
        raise ValueError("need at least one goal")
    goal_rng, act_rng = (np.random.default_rng(s) for s in np.random.SeedSequence([config.seed, 2]).spawn(2))
    out = TrainLog(env_steps=start_step)
    budget_end = start_step + config.max_env_steps
    window = []
    env_step = start_step
    while env_step < budget_end:
        goal = goals[int(goal_rng.integers(len(goals)))]
        s = world.reset(goal)
        g = world.render_goal(goal)
        ret, length, lw, lp, adv = 0.0, 0, 0.0, 0.0, 0.0
        while not world.done and env_step < budget_end:
            a = act(model, s, g, act_rng)
            t = world.step(a)
            l_w, l_psi, a_t = update_step(model, t, config, g)
            env_step += 1
            length += 1
            ret += t.r_t
            lw += l_w
            lp += l_psi
            adv += a_t
            s = t.s_next
        rec = EpisodeRecord(env_step, tuple(goal), ret, length, lw / max(length, 1), lp / max(length, 1),
                            adv / max(length, 1))
        out.episodes.append(rec)
        if on_episode is not None:
            on_episode(rec)
        window.append(ret)
        if len(window) > config.convergence_window:
            window.pop(0)
        if (len(window) == config.convergence_window
                and np.mean(window) >= config.convergence_success):
            out.converged = True
            if config.stop_on_convergence:
                break
    out.env_steps = env_step
    return out


def transfer_init(trained: UsrModel) -> UsrModel:
    """Deep copy with fresh optimizer moments; phi stays frozen."""
    return trained.copy(with_optimizer=False)


# ---------------------------------------------------------------------------
# whole-state evaluation helpers


def _state_goal_batch(world: GridWorld, goal) -> tuple[np.ndarray, np.ndarray]:
    states = np.stack([world.observe(p) for p in world.cells])
    goals = np.repeat(world.render_goal(goal)[None, :], len(states), axis=0)
    return states, goals


def zero_shot_policy(model: UsrModel, world: GridWorld, goal) -> np.ndarray:
    """pi(. | s, g) for every navigable s, no parameter updates."""
    return usr_tables(model, world, goal)[1]


def usr_tables(model: UsrModel, world: GridWorld, goal) -> tuple[np.ndarray, np.ndarray]:
    """(psi, policy) evaluated at every navigable cell for ``goal``."""
    states, goals = _state_goal_batch(world, goal)
    out = model.usr_forward(states, goals)
    return out.psi, out.policy


def greedy_success(model: UsrModel, world: GridWorld, goals, horizon: int | None = None) -> float:
    """Fraction of (start, goal) pairs solved by the argmax policy within ``horizon`` steps."""
    horizon = world.max_steps if horizon is None else horizon
    solved, total = 0, 0
    for goal in goals:
        goal = Position(*goal)
        greedy = np.argmax(zero_shot_policy(model, world, goal), axis=1)
        for start in world.cells:
            if start == goal:
                continue
            total += 1
            pos = start
            for _ in range(horizon):
                pos = world.move(pos, int(greedy[world.index[pos]]))
                if pos == goal:
                    solved += 1
                    break
    return solved / max(total, 1)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
