"""Actor-critic trained inside the decoupled imagination.

The action-free branch is rolled ``window`` steps ahead of the controllable
present; future-state attention fuses that window into the controllable
features before the actor and critic see them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .diffcore import frozen, mlp, require, std_from_raw
from .worldmodel import Latent, WorldModel, noise_like


@dataclass
class ACConfig:
    horizon: int = 15
    window: int = 5  # 0 disables the roll-out: e = s
    gamma: float = 0.99
    lam: float = 0.95
    entropy: float = 1e-4
    actor_lr: float = 8e-5
    critic_lr: float = 8e-5
    hidden: int = 128
    attention_projection: bool = False

    def __post_init__(self):
        require(self.horizon >= 1, "horizon must be >= 1")
        require(self.window >= 0, "window must be >= 0")
        require(0 <= self.gamma <= 1 and 0 <= self.lam <= 1, "gamma, lambda in [0, 1]")


def future_attention(s: torch.Tensor, z: torch.Tensor):
    """e = softmax(s z^T) z + s for s [..., D] and a window z [..., tau, D]."""
    require(z.dim() >= 2 and z.shape[-2] >= 1, "future_attention: empty window")
    require(s.shape[-1] == z.shape[-1], "future_attention: width mismatch")
    scores = torch.einsum("...d,...td->...t", s, z)
    weights = torch.softmax(scores, -1)
    return torch.einsum("...t,...td->...d", weights, z) + s, weights


class FutureAttention(nn.Module):
    """Optional learned query/key maps around :func:`future_attention`."""

    def __init__(self, width: int, projection: bool = False):
        super().__init__()
        self.projection = projection
        self.query = nn.Linear(width, width, bias=False)
        self.key = nn.Linear(width, width, bias=False)
        with torch.no_grad():
            self.query.weight.copy_(torch.eye(width))
            self.key.weight.copy_(torch.eye(width))

    def forward(self, s: torch.Tensor, z: torch.Tensor):
        if not self.projection:
            return future_attention(s, z)
        scores = torch.einsum("...d,...td->...t", self.query(s), self.key(z))
        weights = torch.softmax(scores / math.sqrt(s.shape[-1]), -1)
        return torch.einsum("...t,...td->...d", weights, z) + s, weights


class Actor(nn.Module):
    """Tanh-squashed diagonal Gaussian policy."""

    def __init__(self, width: int, action_dim: int, hidden: int = 128):
        super().__init__()
        self.net = mlp(width, hidden, 2 * action_dim, layers=2)

    def forward(self, e: torch.Tensor, gen=None, explore: bool = True):
        """Returns (action, entropy of the pre-squash Gaussian)."""
        mean, raw = self.net(e).chunk(2, -1)
        std = std_from_raw(raw)
        pre = mean + std * noise_like(mean, gen) if explore else mean
        entropy = (0.5 * math.log(2 * math.pi * math.e) + torch.log(std)).sum(-1)
        return torch.tanh(pre), entropy


class Critic(nn.Module):
    def __init__(self, width: int, hidden: int = 128):
        super().__init__()
        self.net = mlp(width, hidden, 1, layers=2)

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        return self.net(e).squeeze(-1)


def lambda_returns(rewards, values, discounts, lam: float) -> torch.Tensor:
    """Backward recursion V_i = r_i + g_i ((1 - lam) v_{i+1} + lam V_{i+1}), V_last = v_last.

    Inputs share their leading (time) axis; the returned sequence has the same
    length, its last entry being the bootstrap value.
    """
    require(len(rewards) == len(values) == len(discounts),
            "lambda_returns: sequences must have equal length")
    out = [values[-1]]
    for i in range(len(rewards) - 2, -1, -1):
        out.append(rewards[i] + discounts[i] * ((1 - lam) * values[i + 1] + lam * out[-1]))
    return torch.stack(out[::-1])


@dataclass
class Trajectory:
    s: list  # L + 1 controllable prior states
    z: list  # max(L + tau, L + 1) free states
    e: torch.Tensor  # [L+1, N, D]
    attn: torch.Tensor | None  # [L+1, N, tau]
    actions: torch.Tensor  # [L+1, N, A]
    entropy: torch.Tensor  # [L+1, N]
    rewards: torch.Tensor  # [L+1, N]
    discounts: torch.Tensor  # [L+1, N]
    values: torch.Tensor  # [L+1, N]
    returns: torch.Tensor  # [L+1, N]; the last entry is the bootstrap value
    gate: torch.Tensor  # [N] gate used for the first free step


class Agent(nn.Module):
    """Actor, critic and attention groups plus the imagination/acting logic."""

    def __init__(self, wm: WorldModel, cfg: ACConfig, seed: int = 0):
        super().__init__()
        from .diffcore import group_seed, seeded

        self.cfg = cfg
        width = wm.cfg.feat
        A = wm.cfg.action_dim
        with seeded(group_seed(seed, "actor")):
            self.actor = Actor(width, A, cfg.hidden)
        with seeded(group_seed(seed, "critic")):
            self.critic = Critic(width, cfg.hidden)
        with seeded(group_seed(seed, "attention")):
            self.attention = FutureAttention(width, cfg.attention_projection)

    def groups(self) -> dict[str, nn.Module]:
        return {"actor": self.actor, "critic": self.critic, "attention": self.attention}

    def attend(self, s_feat: torch.Tensor, z_window: torch.Tensor | None):
        if self.cfg.window == 0 or z_window is None:
            return s_feat, None
        return self.attention(s_feat, z_window)

    def imagine(self, wm: WorldModel, start_s: Latent, start_z: Latent, gen=None,
                explore: bool = True) -> Trajectory:
        """Roll the free branch L+tau steps ahead, then act/predict for L+1 steps."""
        L, tau = self.cfg.horizon, self.cfg.window
        n_z = max(L + tau, L + 1)
        zero_a = start_s.sample.new_zeros(start_s.sample.shape[0], wm.cfg.action_dim)
        w, _ = wm.dependency_gate(start_s.sample, start_z.sample)
        zs = [start_z]
        for j in range(1, n_z):
            if j == 1:
                zs.append(wm.prior_step_free(zs[-1], zero_a, start_s.sample, w, gen))
            else:
                zs.append(wm.prior_step_free(zs[-1], zero_a, torch.zeros_like(start_s.sample),
                                             torch.zeros_like(w), gen))
        z_feats = torch.stack([z.feat for z in zs])  # [n_z, N, D]
        ss, es, attns, acts, ents = [start_s], [], [], [], []
        for i in range(L + 1):
            window = z_feats[i:i + tau].transpose(0, 1) if tau > 0 else None
            e, att = self.attend(ss[i].feat, window)
            a, ent = self.actor(e, gen, explore)
            es.append(e)
            attns.append(att)
            acts.append(a)
            ents.append(ent)
            if i < L:
                ss.append(wm.prior_step_controllable(ss[i], a, gen))
        s_feats = torch.stack([s.feat for s in ss])
        z_now = z_feats[:L + 1]
        rewards = wm.predict_reward(s_feats, z_now)
        discounts = self.cfg.gamma * wm.predict_discount(s_feats, z_now)
        e_all = torch.stack(es)
        values = self.critic(e_all)
        returns = lambda_returns(rewards, values, discounts, self.cfg.lam)
        return Trajectory(ss, zs, e_all, torch.stack(attns) if tau > 0 else None,
                          torch.stack(acts), torch.stack(ents), rewards, discounts,
                          values, returns, w)

    def actor_loss(self, traj: Trajectory) -> torch.Tensor:
        L = self.cfg.horizon
        objective = traj.returns[:L].sum(0) + self.cfg.entropy * traj.entropy[:L].sum(0)
        return -objective.mean()

    def critic_loss(self, traj: Trajectory) -> torch.Tensor:
        L = self.cfg.horizon
        v = self.critic(traj.e[:L].detach())
        return ((v - traj.returns[:L].detach()) ** 2).sum(0).mean()

    def behavior_losses(self, wm: WorldModel, start_s: Latent, start_z: Latent, gen=None):
        """Imagine with frozen world-model and critic weights; returns (traj, actor, critic)."""
        with frozen(wm, self.critic):
            traj = self.imagine(wm, start_s.detach(), start_z.detach(), gen)
            a_loss = self.actor_loss(traj)
        c_loss = self.critic_loss(traj)
        return traj, a_loss, c_loss

    # ------------------------------------------------------------------
    # deployment

    @torch.no_grad()
    def act(self, wm: WorldModel, s: Latent, z: Latent, gen=None, explore: bool = False):
        """Action from posteriors (s_t, z_t): gated first free step, then action-free roll-out."""
        tau = self.cfg.window
        if tau == 0:
            e = s.feat
        else:
            zero_a = s.sample.new_zeros(s.sample.shape[0], wm.cfg.action_dim)
            zs = [z]
            if tau > 1:
                w, _ = wm.dependency_gate(s.sample, z.sample)
                zs.append(wm.prior_step_free(z, zero_a, s.sample, w, gen))
            while len(zs) < tau:
                zs.append(wm.prior_step_free(zs[-1], zero_a, torch.zeros_like(s.sample),
                                             torch.zeros_like(zs[-1].sample[..., 0]), gen))
            e, _ = self.attend(s.feat, torch.stack([x.feat for x in zs], -2))
        a, _ = self.actor(e, gen, explore)
        return a.clamp(-1.0, 1.0)


class Filter:
    """Running posterior over a live episode (deployment-time state)."""

    def __init__(self, wm: WorldModel):
        self.wm = wm
        self.dtype = next(wm.parameters()).dtype
        self.state = wm.initial(1, self.dtype)
        self.prev_action = torch.zeros(1, wm.cfg.action_dim, dtype=self.dtype)

    @torch.no_grad()
    def update(self, image, gen=None) -> tuple[Latent, Latent]:
        img = torch.as_tensor(image, dtype=self.dtype).reshape(1, *image.shape[-3:])
        embed = self.wm.encoder(img)
        post_s, post_z, _, _ = self.wm.posterior_step(*self.state, embed, self.prev_action,
                                                      gen, free_action=False)
        self.state = (post_s, post_z)
        return post_s, post_z

    def record_action(self, action: torch.Tensor) -> None:
        self.prev_action = action.reshape(1, -1).to(self.dtype)
