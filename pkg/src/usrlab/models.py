"""Networks of the USR approximator.

* ``encoder``/``decoder`` -- autoencoder whose code is the state feature phi(s)
* ``trunk`` -- shared layers over the concatenated (state, goal) images
* ``psi_head`` -- successor features psi(s, g) on top of the trunk
* ``policy_head`` -- action logits of pi(. | s, g) on top of the trunk
* ``w_net`` -- goal weights w(g), so that r ~= phi(s')^T w(g)
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .nn import AdamState, Net, ShapeError, softmax

N_ACTIONS = 4
NET_NAMES = ("encoder", "decoder", "trunk", "psi_head", "policy_head", "w_net")


@dataclass
class UsrOutput:
    psi: np.ndarray
    policy_logits: np.ndarray
    policy: np.ndarray


class UsrModel:
    """Parameter bundle plus the forward maps built from it.

    With ``feature_mode="onehot"`` the features are the raw one-hot
    observation (``d == obs_dim``), no autoencoder is involved and phi is
    frozen from the start.
    """

    def __init__(
        self,
        obs_dim: int,
        d: int = 64,
        hidden: int = 128,
        ae_hidden: int = 128,
        seed: int = 0,
        feature_mode: str = "learned",
    ):
        if feature_mode not in ("learned", "onehot"):
            raise ValueError(f"unknown feature_mode {feature_mode!r}")
        if feature_mode == "onehot":
            d = obs_dim
        self.obs_dim = obs_dim
        self.d = d
        self.hidden = hidden
        self.ae_hidden = ae_hidden
        self.feature_mode = feature_mode
        self.seed = seed

        seeds = np.random.SeedSequence(seed).spawn(len(NET_NAMES))
        rngs = {name: np.random.default_rng(s) for name, s in zip(NET_NAMES, seeds)}
        self.encoder = Net([("affine", obs_dim, ae_hidden), ("tanh",), ("affine", ae_hidden, d)], rngs["encoder"])
        self.decoder = Net([("affine", d, ae_hidden), ("tanh",), ("affine", ae_hidden, obs_dim)], rngs["decoder"])
        self.trunk = Net(
            [("affine", 2 * obs_dim, hidden), ("relu",), ("affine", hidden, hidden), ("relu",)], rngs["trunk"]
        )
        self.psi_head = Net([("affine", hidden, d)], rngs["psi_head"])
        self.policy_head = Net([("affine", hidden, N_ACTIONS)], rngs["policy_head"])
        self.w_net = Net([("affine", obs_dim, d)], rngs["w_net"])
        # the phase-2 output layers start at zero: psi = 0, w = 0 and a uniform
        # policy, so no goal starts out with a spurious value or preference
        for net in (self.psi_head, self.policy_head, self.w_net):
            net.params.values[:] = 0.0
        # likewise the trunk's goal-image columns: a goal never trained on then
        # contributes nothing, and the trunk returns its goal-averaged prediction
        self.trunk.params.block("0.W")[:, obs_dim:] = 0.0

        self.phi_frozen = feature_mode == "onehot"
        self._phi_cache: dict[bytes, np.ndarray] = {}
        self.reset_optimizers()

    # -- bookkeeping ---------------------------------------------------------

    @property
    def nets(self) -> dict[str, Net]:
        return {name: getattr(self, name) for name in NET_NAMES}

    def reset_optimizers(self):
        """Fresh, zeroed Adam moments for every parameter group."""
        self.optim = {
            "phi": [AdamState.for_params(self.encoder.params), AdamState.for_params(self.decoder.params)],
            "w": [AdamState.for_params(self.w_net.params)],
            "psi": [AdamState.for_params(self.trunk.params), AdamState.for_params(self.psi_head.params)],
            "pi": [AdamState.for_params(self.trunk.params), AdamState.for_params(self.policy_head.params)],
        }

    def freeze_phi(self):
        self.phi_frozen = True
        self._phi_cache.clear()

    def unfreeze_phi(self):
        if self.feature_mode == "onehot":
            raise ValueError("one-hot features have no trainable parameters")
        self.phi_frozen = False
        self._phi_cache.clear()

    def param_hash(self, names=NET_NAMES) -> str:
        h = hashlib.sha256()
        for name in names:
            h.update(getattr(self, name).params.values.tobytes())
        return h.hexdigest()

    def copy(self, with_optimizer: bool = True) -> UsrModel:
        """Independent deep copy. Layer views are rebound, so no deepcopy."""
        other = UsrModel(self.obs_dim, self.d, self.hidden, self.ae_hidden, self.seed, self.feature_mode)
        for name, net in self.nets.items():
            getattr(other, name).set_values(net.params.values)
        other.phi_frozen = self.phi_frozen
        other._phi_cache = dict(self._phi_cache)
        if with_optimizer:
            other.optim = {k: [st.copy() for st in v] for k, v in self.optim.items()}
        return other

    def _check_obs(self, x: np.ndarray):
        if x.shape[-1] != self.obs_dim:
            raise ShapeError(f"observation has size {x.shape[-1]}, model expects {self.obs_dim}")

    # -- forward maps --------------------------------------------------------

    def encode_phi(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        self._check_obs(s)
        if self.feature_mode == "onehot":
            return s.copy()
        if self.phi_frozen and s.ndim == 1:
            key = s.tobytes()
            hit = self._phi_cache.get(key)
            if hit is None:
                hit = self.encoder.forward(s).copy()
                hit.setflags(write=False)
                self._phi_cache[key] = hit
            return hit
        return self.encoder.forward(s)

    def reconstruct(self, s: np.ndarray) -> tuple[np.ndarray, float]:
        s = np.asarray(s, dtype=float)
        self._check_obs(s)
        if self.feature_mode == "onehot":
            return s.copy(), 0.0
        s_hat = self.decoder.forward(self.encoder.forward(s))
        return s_hat, float(np.mean((s_hat - s) ** 2))

    def trunk_forward(self, s: np.ndarray, g: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        g = np.asarray(g, dtype=float)
        self._check_obs(s)
        self._check_obs(g)
        return self.trunk.forward(np.concatenate([s, g], axis=-1))

    def usr_forward(self, s: np.ndarray, g: np.ndarray) -> UsrOutput:
        h = self.trunk_forward(s, g)
        psi = self.psi_head.forward(h)
        logits = self.policy_head.forward(h)
        return UsrOutput(psi, logits, softmax(logits))

    def goal_weights(self, g: np.ndarray) -> np.ndarray:
        g = np.asarray(g, dtype=float)
        self._check_obs(g)
        return self.w_net.forward(g)

    def value(self, s: np.ndarray, g: np.ndarray) -> float:
        return float(self.usr_forward(s, g).psi @ self.goal_weights(g))
