"""Three-branch decoupled world model.

* action-conditioned branch: RSSM whose transition sees the action,
* action-free branch: RSSM whose transition is meant to ignore the action and
  optionally reads the controllable state through a binary dependency gate,
* static branch: a code pooled over the first ``context`` frames and decoded
  once per sequence.

The image is composed from the three branch outputs with a per-pixel softmax
over mask logits, so the masks always partition each pixel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .diffcore import (
    ConvDecoder,
    ConvEncoder,
    GRUCell,
    TrainingFailure,
    balanced_kl,
    gaussian_kl,
    mlp,
    require,
    sample_gaussian,
    std_from_raw,
)

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


@dataclass
class WMConfig:
    action_dim: int = 2
    image_size: int = 32
    cnn_depth: int = 8
    embed: int = 128
    deter: int = 128
    stoch: int = 32
    static_dim: int = 32
    hidden: int = 128
    context: int = 2
    alpha: float = 1.0  # action loss
    beta_s: float = 1.0  # KL, action-conditioned branch
    beta_z: float = 1.0  # KL, action-free branch
    lambda_s: float = 1.0
    lambda_z: float = 1.0
    var_margin: float = 1.0
    use_variance: bool = True
    kl_balance: float | None = 0.8  # None: plain KL gradient (finite-difference checks)
    free_nats: float = 1.0  # per-step KL budget without gradient
    free_branch_kl: bool = True  # False: reconstruction-only action-free branch
    free_action: bool = False  # True: carry the executed action through the action-free branch
    gate_threshold: float = 0.5
    gate_mode: str = "hard"  # hard | soft | open | closed
    gate_sparsity: float = 0.0
    reward_uses_z: bool = True
    decode_s_from_prior: bool = True
    static_mask_bias: float = 2.0  # initial logit favouring the static branch

    def __post_init__(self):
        for name in ("alpha", "beta_s", "beta_z", "lambda_s", "lambda_z", "var_margin",
                     "gate_sparsity", "free_nats"):
            require(getattr(self, name) >= 0, f"WMConfig.{name} must be >= 0")
        require(self.gate_mode in ("hard", "soft", "open", "closed"), "bad gate_mode")
        require(self.context >= 1, "context must be >= 1")
        require(self.kl_balance is None or 0 <= self.kl_balance <= 1, "kl_balance in [0, 1]")

    @property
    def feat(self) -> int:
        return self.deter + self.stoch


@dataclass
class Latent:
    """Deterministic state ``h`` plus a diagonal-Gaussian stochastic state."""

    h: torch.Tensor
    mean: torch.Tensor
    std: torch.Tensor
    sample: torch.Tensor

    @property
    def feat(self) -> torch.Tensor:
        return torch.cat([self.h, self.sample], -1)

    def detach(self) -> "Latent":
        return Latent(self.h.detach(), self.mean.detach(), self.std.detach(),
                      self.sample.detach())

    def reshape(self, *shape) -> "Latent":
        return Latent(*(t.reshape(*shape, t.shape[-1]) for t in
                        (self.h, self.mean, self.std, self.sample)))

    @staticmethod
    def stack(items: list["Latent"], dim: int = 1) -> "Latent":
        return Latent(*(torch.stack([getattr(x, k) for x in items], dim)
                        for k in ("h", "mean", "std", "sample")))

    def __getitem__(self, idx) -> "Latent":
        return Latent(self.h[idx], self.mean[idx], self.std[idx], self.sample[idx])


ControllableState = Latent
FreeState = Latent


@dataclass
class ReconBundle:
    rgb_s: torch.Tensor
    rgb_z: torch.Tensor
    rgb_b: torch.Tensor
    mask_s: torch.Tensor
    mask_z: torch.Tensor
    mask_b: torch.Tensor
    image: torch.Tensor


@dataclass
class Observed:
    """Filtering results over a [B, T] window."""

    post_s: Latent
    post_z: Latent
    prior_s: Latent
    prior_z: Latent
    gate: torch.Tensor  # [B, T] gate computed from (s_t, z_t)
    gate_prob: torch.Tensor
    var_s: torch.Tensor  # [B] sum over t of action-conditional variance
    var_z: torch.Tensor
    embed: torch.Tensor


@dataclass
class LossOut:
    total: torch.Tensor
    components: dict = field(default_factory=dict)
    observed: Observed | None = None
    recon: ReconBundle | None = None


def noise_like(t: torch.Tensor, gen: torch.Generator | None) -> torch.Tensor:
    """Unit-normal noise from ``gen``; zeros when ``gen`` is None (mean-mode)."""
    if gen is None:
        return torch.zeros_like(t)
    return torch.randn(t.shape, generator=gen, dtype=t.dtype)


class Branch(nn.Module):
    """One RSSM branch: recurrent cell, prior head, posterior head and image decoder."""

    def __init__(self, cfg: WMConfig, gru_in: int):
        super().__init__()
        self.gru = GRUCell(gru_in, cfg.deter)
        self.prior = mlp(cfg.deter, cfg.hidden, 2 * cfg.stoch)
        self.post = mlp(cfg.deter + cfg.embed + cfg.action_dim, cfg.hidden, 2 * cfg.stoch)
        self.decoder = ConvDecoder(cfg.feat, cfg.image_size, cfg.cnn_depth, out_ch=4)

    def prior_from(self, h: torch.Tensor, gen) -> Latent:
        mean, raw = self.prior(h).chunk(2, -1)
        std = std_from_raw(raw)
        return Latent(h, mean, std, sample_gaussian(mean, std, noise_like(mean, gen)))

    def post_from(self, h: torch.Tensor, embed: torch.Tensor, a_prev: torch.Tensor, gen) -> Latent:
        mean, raw = self.post(torch.cat([h, embed, a_prev], -1)).chunk(2, -1)
        std = std_from_raw(raw)
        return Latent(h, mean, std, sample_gaussian(mean, std, noise_like(mean, gen)))


class StaticBranch(nn.Module):
    def __init__(self, cfg: WMConfig):
        super().__init__()
        self.encoder = mlp(cfg.embed, cfg.hidden, cfg.static_dim)
        self.decoder = ConvDecoder(cfg.static_dim, cfg.image_size, cfg.cnn_depth, out_ch=4)
        if cfg.static_mask_bias:
            with torch.no_grad():
                self.decoder.out.bias[3] += cfg.static_mask_bias


class InverseCell(nn.Module):
    """Two-layer perceptron regressing the action between adjacent controllable states."""

    def __init__(self, cfg: WMConfig):
        super().__init__()
        self.net = mlp(2 * cfg.stoch, cfg.hidden, cfg.action_dim)

    def forward(self, s_prev: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.net(torch.cat([s_prev, s], -1)))


class WorldModel(nn.Module):
    GROUPS = ("shared_encoder", "action_cond_branch", "action_free_branch", "static_branch",
              "inverse_cell", "dependency_gate", "reward_head", "discount_head")

    def __init__(self, cfg: WMConfig, seed: int = 0):
        super().__init__()
        from .diffcore import group_seed, seeded

        self.cfg = cfg
        A, d = cfg.action_dim, cfg.stoch
        builders = {
            "shared_encoder": lambda: ConvEncoder(cfg.image_size, cfg.cnn_depth, cfg.embed),
            "action_cond_branch": lambda: Branch(cfg, d + A),
            "action_free_branch": lambda: Branch(cfg, d + A + d),
            "static_branch": lambda: StaticBranch(cfg),
            "inverse_cell": lambda: InverseCell(cfg),
            "dependency_gate": lambda: nn.Linear(2 * d, 1),
            "reward_head": lambda: mlp(2 * cfg.feat, cfg.hidden, 1),
            "discount_head": lambda: mlp(2 * cfg.feat, cfg.hidden, 1),
        }
        self.groups = nn.ModuleDict()
        for name in self.GROUPS:
            with seeded(group_seed(seed, name)):
                self.groups[name] = builders[name]()

    # convenient handles
    @property
    def encoder(self) -> ConvEncoder:
        return self.groups["shared_encoder"]

    @property
    def cond(self) -> Branch:
        return self.groups["action_cond_branch"]

    @property
    def free(self) -> Branch:
        return self.groups["action_free_branch"]

    @property
    def static(self) -> StaticBranch:
        return self.groups["static_branch"]

    # ------------------------------------------------------------------
    # transitions

    def initial(self, batch: int, dtype=torch.float32) -> tuple[Latent, Latent]:
        cfg = self.cfg

        def zero():
            return Latent(torch.zeros(batch, cfg.deter, dtype=dtype),
                          torch.zeros(batch, cfg.stoch, dtype=dtype),
                          torch.ones(batch, cfg.stoch, dtype=dtype),
                          torch.zeros(batch, cfg.stoch, dtype=dtype))

        return zero(), zero()

    def dependency_gate(self, s: torch.Tensor, z: torch.Tensor):
        """Binary gate ``w`` (straight-through sigmoid gradient) and its probability."""
        logit = self.groups["dependency_gate"](torch.cat([s, z], -1)).squeeze(-1)
        prob = torch.sigmoid(logit)
        mode = self.cfg.gate_mode
        if mode == "soft":
            return prob, prob
        if mode == "open":
            return torch.ones_like(prob), prob
        if mode == "closed":
            return torch.zeros_like(prob), prob
        hard = (prob >= self.cfg.gate_threshold).to(prob.dtype)
        return hard + (prob - prob.detach()), prob  # forward value exactly 0 or 1

    def prior_step_controllable(self, prev: Latent, action: torch.Tensor, gen=None) -> Latent:
        h = self.cond.gru(prev.h, torch.cat([prev.sample, action], -1))
        return self.cond.prior_from(h, gen)

    def prior_step_free(self, prev: Latent, a_input: torch.Tensor, s: torch.Tensor,
                        w: torch.Tensor, gen=None) -> Latent:
        h = self.free.gru(prev.h, torch.cat([prev.sample, a_input, w.unsqueeze(-1) * s], -1))
        return self.free.prior_from(h, gen)

    def posterior_step(self, prev_s: Latent, prev_z: Latent, embed: torch.Tensor,
                       a_prev: torch.Tensor, gen=None, free_action: bool | None = None):
        """One filtering step; returns (post_s, post_z, prior_s, prior_z).

        ``free_action`` feeds the executed action into the action-free transition;
        by default it receives zeros, as at deployment.
        """
        free_action = self.cfg.free_action if free_action is None else free_action
        w, _ = self.dependency_gate(prev_s.sample, prev_z.sample)
        prior_s = self.prior_step_controllable(prev_s, a_prev, gen)
        a_free = a_prev if free_action else torch.zeros_like(a_prev)
        prior_z = self.prior_step_free(prev_z, a_free, prev_s.sample, w, gen)
        post_s = self.cond.post_from(prior_s.h, embed, a_prev, gen)
        post_z = self.free.post_from(prior_z.h, embed, a_prev, gen)
        return post_s, post_z, prior_s, prior_z

    def observe(self, images: torch.Tensor, actions: torch.Tensor, gen=None,
                start: tuple[Latent, Latent] | None = None, free_action: bool | None = None,
                with_variance: bool | None = None) -> Observed:
        """Filter a [B, T] window. ``actions[:, t]`` is the action that led to ``images[:, t]``.

        With variance losses on, the action-free transition is also run under the
        hypothetical actions; the carried state is the one under zero action.
        """
        free_action = self.cfg.free_action if free_action is None else free_action
        B, T = images.shape[:2]
        require(actions.shape[:2] == (B, T), "observe: images/actions batch mismatch")
        with_variance = self.cfg.use_variance if with_variance is None else with_variance
        embed = self.encoder(images)
        prev_s, prev_z = start if start is not None else self.initial(B, images.dtype)
        rows: dict[str, list] = {k: [] for k in ("ps", "pz", "qs", "qz", "g", "gp", "vs", "vz")}
        w, _ = self.dependency_gate(prev_s.sample, prev_z.sample)
        for t in range(T):
            a = actions[:, t]
            a_free = a if free_action else torch.zeros_like(a)
            if with_variance:
                # replicate the transition over the hypothetical action sets
                h_s = self.cond.gru(prev_s.h.repeat(2, 1),
                                    torch.cat([prev_s.sample.repeat(2, 1),
                                               torch.cat([a, -a])], -1))
                prior_s = self.cond.prior_from(h_s, gen)
                ms = prior_s.mean.reshape(2, B, -1)
                rows["vs"].append(ms.var(0, unbiased=True).sum(-1))
                prior_s = prior_s[:B]
                zin = torch.cat([a_free, torch.zeros_like(a), -a_free]) if free_action else \
                    torch.cat([a_free, a, -a])
                ws = (w.unsqueeze(-1) * prev_s.sample).repeat(3, 1)
                h_z = self.free.gru(prev_z.h.repeat(3, 1),
                                    torch.cat([prev_z.sample.repeat(3, 1), zin, ws], -1))
                prior_z = self.free.prior_from(h_z, gen)
                mz = prior_z.mean.reshape(3, B, -1)
                rows["vz"].append(mz.var(0, unbiased=True).sum(-1))
                prior_z = prior_z[:B]
            else:
                prior_s = self.prior_step_controllable(prev_s, a, gen)
                prior_z = self.prior_step_free(prev_z, a_free, prev_s.sample, w, gen)
            post_s = self.cond.post_from(prior_s.h, embed[:, t], a, gen)
            post_z = self.free.post_from(prior_z.h, embed[:, t], a, gen)
            g, gp = self.dependency_gate(post_s.sample, post_z.sample)
            for k, v in (("ps", prior_s), ("pz", prior_z), ("qs", post_s), ("qz", post_z),
                         ("g", g), ("gp", gp)):
                rows[k].append(v)
            prev_s, prev_z, w = post_s, post_z, g
        zeros = images.new_zeros(B)
        return Observed(
            post_s=Latent.stack(rows["qs"]), post_z=Latent.stack(rows["qz"]),
            prior_s=Latent.stack(rows["ps"]), prior_z=Latent.stack(rows["pz"]),
            gate=torch.stack(rows["g"], 1), gate_prob=torch.stack(rows["gp"], 1),
            var_s=torch.stack(rows["vs"], 1).sum(1) if rows["vs"] else zeros,
            var_z=torch.stack(rows["vz"], 1).sum(1) if rows["vz"] else zeros,
            embed=embed,
        )

    @torch.no_grad()
    def open_loop(self, images: torch.Tensor, actions: torch.Tensor, context: int,
                  horizon: int) -> ReconBundle:
        """Filter ``context`` frames, then roll both priors ``horizon`` steps on the
        recorded actions. Returns the decoded bundle for all context + horizon frames."""
        B, T = images.shape[:2]
        require(context >= self.cfg.context, f"open_loop: context must be >= {self.cfg.context}")
        require(context + horizon <= T, f"open_loop: context + horizon = {context + horizon} "
                                        f"exceeds the {T} available frames")
        obs = self.observe(images[:, :context], actions[:, :context], None,
                           with_variance=False)
        s_feats = [obs.prior_s.feat if self.cfg.decode_s_from_prior else obs.post_s.feat]
        z_feats = [obs.post_z.feat]
        s, z = obs.post_s[:, -1], obs.post_z[:, -1]
        for t in range(context, context + horizon):
            a = actions[:, t]
            a_free = a if self.cfg.free_action else torch.zeros_like(a)
            w, _ = self.dependency_gate(s.sample, z.sample)
            s, z = self.prior_step_controllable(s, a), self.prior_step_free(z, a_free, s.sample, w)
            s_feats.append(s.feat.unsqueeze(1))
            z_feats.append(z.feat.unsqueeze(1))
        static_out = self.decode_static(self.static_code(images)).unsqueeze(1)
        return self.decode_composite(torch.cat(s_feats, 1), torch.cat(z_feats, 1), static_out)

    # ------------------------------------------------------------------
    # heads

    def static_code(self, frames: torch.Tensor) -> torch.Tensor:
        """Mean-pooled static code of ``frames`` [..., K, H, W, 3] (K >= context)."""
        require(frames.shape[-4] >= self.cfg.context,
                f"static_code needs {self.cfg.context} frames, got {frames.shape[-4]}")
        frames = frames[..., :self.cfg.context, :, :, :]
        return self.static.encoder(self.encoder(frames)).mean(-2)

    def decode_static(self, code: torch.Tensor) -> torch.Tensor:
        return self.static.decoder(code)

    def decode_composite(self, s_feat: torch.Tensor, z_feat: torch.Tensor,
                         static_out: torch.Tensor) -> ReconBundle:
        """Compose the image from branch outputs; ``static_out`` broadcasts over time."""
        out_s = self.cond.decoder(s_feat)
        out_z = self.free.decoder(z_feat)
        return compose(out_s, out_z, static_out.expand_as(out_s))

    def inverse_action(self, s_prev: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        return self.groups["inverse_cell"](s_prev, s)

    def _head_input(self, s_feat: torch.Tensor, z_feat: torch.Tensor) -> torch.Tensor:
        if not self.cfg.reward_uses_z:
            z_feat = torch.zeros_like(z_feat)
        return torch.cat([s_feat, z_feat], -1)

    def predict_reward(self, s_feat, z_feat) -> torch.Tensor:
        return self.groups["reward_head"](self._head_input(s_feat, z_feat)).squeeze(-1)

    def discount_logit(self, s_feat, z_feat) -> torch.Tensor:
        return self.groups["discount_head"](self._head_input(s_feat, z_feat)).squeeze(-1)

    def predict_discount(self, s_feat, z_feat) -> torch.Tensor:
        return torch.sigmoid(self.discount_logit(s_feat, z_feat))

    # ------------------------------------------------------------------
    # losses

    def base_loss(self, images, actions, rewards, dones, gen=None) -> LossOut:
        """Per-window sum over time of the data terms and both KLs, averaged over the batch."""
        cfg = self.cfg
        B, T = images.shape[:2]
        require(T >= cfg.context + 2, f"base_loss needs T >= {cfg.context + 2}")
        obs = self.observe(images, actions, gen)
        static_out = self.decode_static(self.static_code(images)).unsqueeze(1)
        s_dec = obs.prior_s.feat if cfg.decode_s_from_prior else obs.post_s.feat
        recon = self.decode_composite(s_dec, obs.post_z.feat, static_out)
        n_pix = images[0, 0].numel()
        image_nll = (0.5 * ((recon.image - images) ** 2).flatten(2).sum(-1)
                     + HALF_LOG_2PI * n_pix)
        a_hat = self.inverse_action(obs.post_s.sample[:, :-1], obs.post_s.sample[:, 1:])
        action_l2 = ((a_hat - actions[:, 1:]) ** 2).sum(-1)
        r_hat = self.predict_reward(obs.post_s.feat, obs.post_z.feat)
        reward_nll = 0.5 * (r_hat - rewards) ** 2 + HALF_LOG_2PI
        disc_nll = F.binary_cross_entropy_with_logits(
            self.discount_logit(obs.post_s.feat, obs.post_z.feat), 1.0 - dones,
            reduction="none")
        post_s, prior_s = obs.post_s, obs.prior_s
        kl_s = self._kl(post_s, prior_s)
        kl_z = self._kl(obs.post_z, obs.prior_z)
        parts = {
            "image": image_nll.sum(1).mean(),
            "action": cfg.alpha * action_l2.sum(1).mean(),
            "reward": reward_nll.sum(1).mean(),
            "discount": disc_nll.sum(1).mean(),
            "kl_s": cfg.beta_s * kl_s.sum(1).mean(),
            "kl_z": (cfg.beta_z * kl_z.sum(1).mean() if cfg.free_branch_kl
                     else kl_z.sum(1).mean().detach() * 0),
        }
        if cfg.gate_sparsity:
            parts["gate_sparsity"] = cfg.gate_sparsity * obs.gate_prob.sum(1).mean()
        check_components(parts)
        total = sum(parts.values())
        comps = {k: float(v.detach()) for k, v in parts.items()}
        comps["kl_s_raw"] = float(gaussian_kl(post_s.mean, post_s.std, prior_s.mean,
                                              prior_s.std).sum(1).mean().detach())
        comps["kl_z_raw"] = float(kl_z.sum(1).mean().detach())
        comps["image_sse"] = float((image_nll - HALF_LOG_2PI * n_pix).sum(1).mean().detach())
        return LossOut(total, comps, obs, recon)

    def _kl(self, post: Latent, prior: Latent) -> torch.Tensor:
        free = self.cfg.free_nats
        if self.cfg.kl_balance is None:
            return gaussian_kl(post.mean, post.std, prior.mean, prior.std).clamp(min=free)
        return balanced_kl((post.mean, post.std), (prior.mean, prior.std), self.cfg.kl_balance,
                           free)

    def variance_terms(self, obs: Observed, T: int) -> dict[str, torch.Tensor]:
        cfg = self.cfg
        L_s, L_z = obs.var_s.mean(), obs.var_z.mean()
        return {
            "L_s": L_s,
            "L_z": L_z,
            "var_s_hinge": cfg.lambda_s * F.relu(cfg.var_margin - L_s / T),
            "var_z_pen": cfg.lambda_z * L_z / T,
        }

    def total_loss(self, images, actions, rewards, dones, gen=None) -> LossOut:
        out = self.base_loss(images, actions, rewards, dones, gen)
        T = images.shape[1]
        total = out.total
        if self.cfg.use_variance:
            terms = self.variance_terms(out.observed, T)
            check_components(terms)
            total = total + terms["var_s_hinge"] + terms["var_z_pen"]
            out.components.update({k: float(v.detach()) for k, v in terms.items()})
        out.components["base"] = float(out.total.detach())
        out.components["total"] = float(total.detach())
        out.total = total
        return out


def compose(out_s: torch.Tensor, out_z: torch.Tensor, out_b: torch.Tensor) -> ReconBundle:
    """Softmax the three mask logits (channel 3) and blend the RGB channels."""
    ls, lz, lb = out_s[..., 3:4], out_z[..., 3:4], out_b[..., 3:4]
    top = torch.maximum(torch.maximum(ls, lz), lb).detach()
    es, ez, eb = torch.exp(ls - top), torch.exp(lz - top), torch.exp(lb - top)
    norm = es + ez + eb
    ms, mz = es / norm, ez / norm
    mb = eb / norm
    rgb_s, rgb_z, rgb_b = out_s[..., :3], out_z[..., :3], out_b[..., :3]
    image = ms * rgb_s + mz * rgb_z + mb * rgb_b
    return ReconBundle(rgb_s, rgb_z, rgb_b, ms, mz, mb, image)


def variance(samples: torch.Tensor) -> torch.Tensor:
    """Unbiased variance over axis 0 summed over the remaining axes."""
    require(samples.shape[0] >= 2, "variance needs at least two outcomes")
    return samples.var(0, unbiased=True).sum()


def check_components(parts: dict[str, torch.Tensor]) -> None:
    for k, v in parts.items():
        if not bool(torch.isfinite(v).all()):
            raise TrainingFailure(k, {n: float(x.detach()) for n, x in parts.items()})
