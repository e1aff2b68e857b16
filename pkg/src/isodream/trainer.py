"""Outer training loop: replay, world-model and behavior updates, interaction, checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import env as E
from .behavior import ACConfig, Agent, Filter
from .diffcore import (
    GROUP_NAMES,
    ContractViolation,
    TrainingFailure,
    check_group_partition,
    decode_params,
    encode_params,
    require,
)
from .worldmodel import WMConfig, WorldModel

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    total_steps: int = 50_000
    prefill: int = 1_000
    train_every: int = 1  # env steps per update once prefilled
    batch: int = 8
    seq_len: int = 16
    capacity: int = 100_000
    model_lr: float = 1e-3
    grad_clip: float = 100.0
    eval_every: int = 10_000
    eval_episodes: int = 3
    checkpoint_every: int = 10_000
    behavior: bool = True
    seed: int = 0

    def __post_init__(self):
        require(self.prefill >= self.seq_len, "prefill must be >= sequence length")
        require(self.train_every >= 1 and self.batch >= 1, "bad update schedule")


# ---------------------------------------------------------------------------
# Replay


class ReplayBuffer:
    """Episode store with uniform sampling over windows inside single episodes."""

    def __init__(self, capacity: int = 100_000, seq_len: int = 16, directory=None):
        self.capacity = capacity
        self.seq_len = seq_len
        self.episodes: deque[E.Episode] = deque()
        self.steps = 0
        self.directory = Path(directory) if directory else None
        self._saved = 0

    def __len__(self) -> int:
        return self.steps

    def add(self, ep: E.Episode) -> None:
        self.episodes.append(ep)
        self.steps += len(ep)
        while self.steps > self.capacity:
            self.steps -= len(self.episodes.popleft())
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            E.save_episode(self.directory / f"ep{self._saved:06d}.isodep", ep)
        self._saved += 1

    def windows(self) -> list[tuple[int, int]]:
        return [(i, t) for i, ep in enumerate(self.episodes)
                for t in range(len(ep) - self.seq_len + 1)]

    def sample(self, batch: int, rng: np.random.Generator) -> dict[str, torch.Tensor]:
        counts = np.array([max(len(ep) - self.seq_len + 1, 0) for ep in self.episodes])
        require(counts.sum() > 0, "replay buffer holds no full window")
        flat = rng.integers(0, counts.sum(), size=batch)
        edges = np.cumsum(counts)
        out: dict[str, list] = {k: [] for k in ("image", "action", "reward", "done")}
        for f in flat:
            i = int(np.searchsorted(edges, f, side="right"))
            t = int(f - (edges[i - 1] if i else 0))
            ep = self.episodes[i]
            sl = slice(t, t + self.seq_len)
            out["image"].append(ep.images[sl])
            out["action"].append(ep.actions[sl])
            out["reward"].append(ep.rewards[sl])
            out["done"].append(ep.dones[sl].astype(np.float32))
        return {k: torch.from_numpy(np.stack(v)) for k, v in out.items()}


# ---------------------------------------------------------------------------
# Metrics


@dataclass
class MetricsRecord:
    step: int
    env_steps: int
    losses: dict = field(default_factory=dict)
    actor_loss: float | None = None
    critic_loss: float | None = None
    episode_return: float | None = None
    gate_open_rate: float | None = None
    iou_agent_s: float | None = None
    iou_ball_z: float | None = None
    wall_clock: float = 0.0

    def to_json(self, extra: dict | None = None) -> str:
        d = asdict(self)
        d.pop("wall_clock")  # kept out of the stream so runs compare byte-for-byte
        d.update(extra or {})
        return json.dumps(d, sort_keys=True)


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Checkpoints


def all_groups(wm: WorldModel, agent: Agent) -> dict[str, nn.Module]:
    groups = {name: wm.groups[name] for name in WorldModel.GROUPS}
    groups.update(agent.groups())
    check_group_partition(groups)
    require(tuple(groups) == GROUP_NAMES, "parameter groups out of order")
    return groups


def save_checkpoint(path, wm: WorldModel, agent: Agent, meta: dict | None = None) -> str:
    """Write the ISODPAR1 container plus a ``.manifest.json`` with its SHA-256."""
    path = Path(path)
    groups = all_groups(wm, agent)
    blob = encode_params({g: m.state_dict() for g, m in groups.items()})
    path.write_bytes(blob)
    digest = hashlib.sha256(blob).hexdigest()
    manifest = {"sha256": digest, "groups": list(groups), **(meta or {})}
    Path(str(path) + ".manifest.json").write_text(json.dumps(manifest, sort_keys=True))
    return digest


def load_checkpoint(path, wm: WorldModel, agent: Agent, groups=None) -> list[str]:
    """Restore ``groups`` (default: all) from ``path``; other groups are left untouched.

    Everything is parsed and validated before any parameter is written.
    """
    path = Path(path)
    blob = path.read_bytes()
    mpath = Path(str(path) + ".manifest.json")
    if mpath.exists():
        manifest = json.loads(mpath.read_text())
        if manifest.get("sha256") != hashlib.sha256(blob).hexdigest():
            raise ContractViolation(f"{path}: SHA-256 does not match manifest; refusing load")
    tensors = decode_params(blob)
    targets = all_groups(wm, agent)
    wanted = list(GROUP_NAMES) if groups is None else list(groups)
    for g in wanted:
        if g not in GROUP_NAMES:
            raise ContractViolation(f"unknown parameter group {g!r}")
        if g not in tensors:
            raise ContractViolation(f"checkpoint {path} lacks parameter group {g!r}")
        own = targets[g].state_dict()
        if set(own) != set(tensors[g]):
            raise ContractViolation(f"group {g!r}: tensor names differ from checkpoint")
        for k, v in tensors[g].items():
            if tuple(own[k].shape) != tuple(v.shape):
                raise ContractViolation(f"group {g!r}: shape mismatch for {k}")
    for g in wanted:
        targets[g].load_state_dict({k: v.to(targets[g].state_dict()[k].dtype)
                                    for k, v in tensors[g].items()})
    return wanted


# ---------------------------------------------------------------------------
# Trainer


def rollout(cfg: E.EnvConfig, seed: int, policy=None, mode: str = "random") -> E.Episode:
    """One full episode; ``policy=None`` draws uniform actions from a stream seeded by ``seed``."""
    state, obs = E.reset(cfg, seed)
    rng = np.random.default_rng(seed + 7919)
    rows = ([], [], [], [])
    for _ in range(cfg.episode_length):
        a = rng.uniform(-1, 1, size=2) if policy is None else policy(obs)
        res = E.step(cfg, state, a)
        state, obs = res.state, res.obs
        for lst, v in zip(rows, (obs, np.clip(a, -1, 1), res.reward, res.done)):
            lst.append(v)
    return E.stack_episode(*rows, config_hash=cfg.digest(), meta={"seed": seed, "mode": mode})



def make_optimizer(params, lr: float):
    return torch.optim.Adam(params, lr=lr, eps=1e-5)


class Trainer:
    def __init__(self, env_cfg: E.EnvConfig, wm_cfg: WMConfig, ac_cfg: ACConfig,
                 train_cfg: TrainConfig, outdir=None):
        self.env_cfg = env_cfg
        self.wm_cfg = wm_cfg
        self.ac_cfg = ac_cfg
        self.cfg = train_cfg
        seed = train_cfg.seed
        self.wm = WorldModel(wm_cfg, seed)
        self.agent = Agent(self.wm, ac_cfg, seed)
        self.model_opt = make_optimizer(self.wm.parameters(), train_cfg.model_lr)
        self.actor_opt = make_optimizer(
            list(self.agent.actor.parameters()) + list(self.agent.attention.parameters()),
            ac_cfg.actor_lr)
        self.critic_opt = make_optimizer(self.agent.critic.parameters(), ac_cfg.critic_lr)
        self.gen = torch.Generator().manual_seed(seed)
        self.rng = np.random.default_rng(seed)
        self.outdir = Path(outdir) if outdir else None
        self.buffer = ReplayBuffer(train_cfg.capacity, train_cfg.seq_len,
                                   self.outdir / "episodes" if self.outdir else None)
        self.tags: dict = {}  # copied into every metrics row and checkpoint manifest
        self.manifest_extra: dict = {}  # checkpoint manifests only
        self.updates = 0
        self.env_steps = 0
        self.episodes_run = 0

    # ------------------------------------------------------------------

    def groups(self) -> dict[str, nn.Module]:
        return all_groups(self.wm, self.agent)

    def _policy(self, mode: str):
        if mode == "random":
            return None
        filt = Filter(self.wm)
        gen = self.gen if mode == "explore" else None

        def policy(obs):
            s, z = filt.update(obs.image, gen)
            a = self.agent.act(self.wm, s, z, gen, explore=(mode == "explore"))
            filt.record_action(a)
            return a.reshape(-1).numpy().astype(np.float64)

        return policy

    def run_episode(self, mode: str, seed: int, env_cfg: E.EnvConfig | None = None) -> E.Episode:
        return rollout(env_cfg or self.env_cfg, seed, self._policy(mode), mode)

    def collect_episode(self, mode: str = "explore") -> float:
        seed = self.cfg.seed * 100_003 + self.episodes_run
        ep = self.run_episode(mode, seed)
        self.episodes_run += 1
        self.buffer.add(ep)
        self.env_steps += len(ep)
        return ep.total_return

    # ------------------------------------------------------------------

    def _step_opt(self, opt, loss, params) -> float:
        opt.zero_grad(set_to_none=True)
        loss.backward()
        norm = torch.nn.utils.clip_grad_norm_(params, self.cfg.grad_clip)
        opt.step()
        return float(norm)

    def train_step(self, batch: dict[str, torch.Tensor]) -> MetricsRecord:
        wm, agent = self.wm, self.agent
        out = wm.total_loss(batch["image"], batch["action"], batch["reward"], batch["done"],
                            self.gen)
        comps = dict(out.components)
        comps["model_grad_norm"] = self._step_opt(self.model_opt, out.total,
                                                  list(wm.parameters()))
        rec = MetricsRecord(step=self.updates, env_steps=self.env_steps, losses=comps,
                            gate_open_rate=float(out.observed.gate.detach().mean()))
        if self.cfg.behavior:
            obs = out.observed
            start_s = obs.post_s.reshape(-1).detach()
            start_z = obs.post_z.reshape(-1).detach()
            traj, a_loss, c_loss = agent.behavior_losses(wm, start_s, start_z, self.gen)
            actor_params = list(agent.actor.parameters()) + list(agent.attention.parameters())
            self._step_opt(self.actor_opt, a_loss, actor_params)
            self._step_opt(self.critic_opt, c_loss, list(agent.critic.parameters()))
            rec.actor_loss = float(a_loss.detach())
            rec.critic_loss = float(c_loss.detach())
            for k in (actor_params + list(agent.critic.parameters()) + list(wm.parameters())):
                k.grad = None
        self.updates += 1
        return rec

    # ------------------------------------------------------------------

    def evaluate(self, n_episodes: int = 10, eval_seed: int = 10_000,
                 env_cfg: E.EnvConfig | None = None) -> tuple[float, float]:
        """Mean and population std of returns over eval-mode episodes."""
        rets = [self.run_episode("eval", eval_seed + i, env_cfg).total_return
                for i in range(n_episodes)]
        return float(np.mean(rets)), float(np.std(rets))

    def train(self, metrics_path=None, timing_path=None, checkpoint_dir=None,
              progress=None) -> list[MetricsRecord]:
        """Algorithm loop: random prefill, then alternate collection and updates."""
        cfg = self.cfg
        records: list[MetricsRecord] = []
        mf = open(metrics_path, "w") if metrics_path else None
        tf = open(timing_path, "w") if timing_path else None
        t0 = time.perf_counter()
        try:
            while self.env_steps < min(cfg.prefill, cfg.total_steps):
                self.collect_episode("random")
            due = 0.0
            last_return = None
            while self.env_steps < cfg.total_steps or (due >= 1 and cfg.total_steps > 0):
                due += self.env_cfg.episode_length / cfg.train_every
                while due >= 1:
                    batch = self.buffer.sample(cfg.batch, self.rng)
                    try:
                        rec = self.train_step(batch)
                    except TrainingFailure as exc:
                        log.error("NaN halt at update %d: %s %s", self.updates,
                                  exc.component, exc.components)
                        raise
                    rec.episode_return = last_return
                    rec.wall_clock = time.perf_counter() - t0
                    last_return = None
                    records.append(rec)
                    if mf:
                        mf.write(rec.to_json(self.tags) + "\n")
                    if tf:
                        tf.write(json.dumps({"step": rec.step, "wall": rec.wall_clock}) + "\n")
                    due -= 1
                    if checkpoint_dir and cfg.checkpoint_every and \
                            self.updates % cfg.checkpoint_every == 0:
                        save_checkpoint(Path(checkpoint_dir) / f"ckpt_{self.updates:07d}.isodpar",
                                        self.wm, self.agent, {**self.tags, **self.manifest_extra,
                                         "step": self.updates})
                    if progress:
                        progress(rec)
                if self.env_steps >= cfg.total_steps:
                    break
                last_return = self.collect_episode("explore")
        finally:
            if mf:
                mf.close()
            if tf:
                tf.close()
        return records


# ---------------------------------------------------------------------------
# Disentanglement


def iou(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = pred.astype(bool), target.astype(bool)
    union = np.logical_or(pred, target).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, target).sum() / union)


@torch.no_grad()
def episode_masks(wm: WorldModel, ep: E.Episode, chunk: int = 50):
    """Filter a whole episode and return (mask_s, mask_z, gate) per frame."""
    images = torch.from_numpy(ep.images).unsqueeze(0)
    actions = torch.from_numpy(ep.actions).unsqueeze(0)
    obs = wm.observe(images, actions, gen=None, with_variance=False)
    static_out = wm.decode_static(wm.static_code(images)).unsqueeze(1)
    s_feat = obs.prior_s.feat if wm.cfg.decode_s_from_prior else obs.post_s.feat
    ms, mz = [], []
    T = images.shape[1]
    for t0 in range(0, T, chunk):
        sl = slice(t0, t0 + chunk)
        rec = wm.decode_composite(s_feat[:, sl], obs.post_z.feat[:, sl], static_out)
        ms.append(rec.mask_s[0, ..., 0])
        mz.append(rec.mask_z[0, ..., 0])
    return torch.cat(ms).numpy(), torch.cat(mz).numpy(), obs.gate[0].numpy()


@dataclass
class Disentanglement:
    iou_agent_s: float
    iou_ball_z: float
    collapse: bool
    recon_sse: float
    sprite_sse: float


def binarize(mask_s, mask_z, mode: str = "threshold"):
    """Hard branch masks: ``threshold`` keeps pixels with M >= 0.5; ``argmax`` keeps
    pixels where the branch mask is (jointly) the largest of the three."""
    if mode == "threshold":
        return mask_s >= 0.5, mask_z >= 0.5
    require(mode == "argmax", f"unknown binarization {mode!r}")
    mask_b = 1.0 - mask_s - mask_z
    top = np.maximum(np.maximum(mask_s, mask_z), mask_b) - 1e-6
    return mask_s >= top, mask_z >= top


def mask_ious(mask_s, mask_z, agent_masks, ball_masks, skip: int = 2, mode: str = "threshold"):
    """Frame-averaged IoU of the s-mask with the agent and the z-mask with the balls."""
    bs, bz = binarize(np.asarray(mask_s), np.asarray(mask_z), mode)
    ia = [iou(bs[t], agent_masks[t]) for t in range(skip, len(bs))]
    ib = [iou(bz[t], ball_masks[t]) for t in range(skip, len(bz))]
    return float(np.mean(ia)), float(np.mean(ib))


def sprite_sse(ep: E.Episode, skip: int = 2) -> float:
    """Per-frame squared error of predicting the bare background (the sprite energy)."""
    err = ((ep.images[skip:] - E.background()) ** 2).reshape(len(ep) - skip, -1).sum(-1)
    return float(err.mean())


def disentanglement_metrics(wm: WorldModel, episodes: list[E.Episode], skip: int = 2,
                            mode: str = "threshold", recon_fraction: float = 0.5
                            ) -> Disentanglement:
    """Mask IoUs against the oracle masks and the training-collapse signature.

    ``collapse`` fires when the action-free mask misses the balls (IoU < 0.05)
    although reconstruction is good, i.e. the per-frame SSE is below
    ``recon_fraction`` of the sprite energy, so the balls must be drawn elsewhere.
    """
    ia, ib, sse, energy = [], [], [], []
    for ep in episodes:
        ms, mz, _ = episode_masks(wm, ep)
        a, b = mask_ious(ms, mz, ep.agent_masks, ep.ball_masks, skip, mode)
        ia.append(a)
        ib.append(b)
        sse.append(reconstruction_sse(wm, ep, skip))
        energy.append(sprite_sse(ep, skip))
    iou_a, iou_b = float(np.mean(ia)), float(np.mean(ib))
    err, ref = float(np.mean(sse)), float(np.mean(energy))
    return Disentanglement(iou_a, iou_b, iou_b < 0.05 and err < recon_fraction * ref, err, ref)


@torch.no_grad()
def reconstruction_sse(wm: WorldModel, ep: E.Episode, skip: int = 2) -> float:
    images = torch.from_numpy(ep.images).unsqueeze(0)
    actions = torch.from_numpy(ep.actions).unsqueeze(0)
    obs = wm.observe(images, actions, gen=None, with_variance=False)
    static_out = wm.decode_static(wm.static_code(images)).unsqueeze(1)
    s_feat = obs.prior_s.feat if wm.cfg.decode_s_from_prior else obs.post_s.feat
    rec = wm.decode_composite(s_feat, obs.post_z.feat, static_out)
    err = ((rec.image - images) ** 2).flatten(2).sum(-1)[0, skip:]
    return float(err.mean())


@torch.no_grad()
def _gate_sequence(wm: WorldModel, ep: E.Episode) -> np.ndarray:
    images = torch.from_numpy(ep.images).unsqueeze(0)
    actions = torch.from_numpy(ep.actions).unsqueeze(0)
    return wm.observe(images, actions, gen=None, with_variance=False).gate[0].numpy()


def gate_scores(wm: WorldModel, episodes: list[E.Episode], skip: int = 2):
    """Precision/recall of ``w_t = 1`` against the deflection event of step t -> t+1.

    The event of that step is the collision flag stored with frame t+1.
    """
    tp = fp = fn = 0
    for ep in episodes:
        w = _gate_sequence(wm, ep)[skip:-1] > 0.5
        y = ep.collisions[skip + 1:].astype(bool)
        tp += int((w & y).sum())
        fp += int((w & ~y).sum())
        fn += int((~w & y).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall, {"tp": tp, "fp": fp, "fn": fn}
