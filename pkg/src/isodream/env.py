"""Bouncer: a 32x32 pixel arena with a controllable agent and noncontrollable balls.

The agent (green disk) moves by ``action * dt`` per step and is rewarded for
rightward progress. Balls (red disks) travel at constant speed, reflect off the
walls and get pushed away whenever the agent comes within ``agent_radius +
ball_radius`` of them; that push is the sparse dependency of the balls on the
agent and costs a collision penalty.

Rendering uses integer fixed-point arithmetic so that the same state yields the
same image bit-for-bit on every platform.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .diffcore import ContractViolation, require

IMAGE_SIZE = 32
FIX = 256  # sub-pixel resolution of the fixed-point render rule
CHECKER_CELL = 4
CHECKER_COLORS = ((0.30, 0.30, 0.30), (0.45, 0.45, 0.45))
EPISODE_MAGIC = b"ISODEP1"


@dataclass(frozen=True)
class EnvConfig:
    arena: float = 1.0
    agent_radius: float = 0.06
    n_balls: int = 2
    ball_radius: float = 0.06
    ball_speed: float = 0.03
    dt: float = 0.05
    collision_penalty: float = 1.0
    lateral_penalty: float = 1.0
    episode_length: int = 200
    agent_color: tuple = (0.1, 0.9, 0.1)
    ball_color: tuple = (0.9, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        require(self.agent_radius < 0.25 and self.ball_radius < 0.25, "radii must be < 0.25")
        require(0 <= self.ball_speed < 0.1, "ball speed must be < 0.1")
        require(self.dt > 0, "dt must be positive")
        require(self.n_balls >= 0 and self.episode_length >= 1, "bad counts")
        object.__setattr__(self, "agent_color", tuple(float(c) for c in self.agent_color))
        object.__setattr__(self, "ball_color", tuple(float(c) for c in self.ball_color))

    @property
    def deflect_radius(self) -> float:
        return self.agent_radius + self.ball_radius

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class EnvState:
    agent_pos: tuple
    agent_vel: tuple
    ball_pos: tuple  # tuple of (x, y)
    ball_vel: tuple
    t: int
    seed: int


@dataclass
class Observation:
    image: np.ndarray  # [32, 32, 3] float32
    agent_mask: np.ndarray  # [32, 32] bool
    ball_mask: np.ndarray
    collision: bool = False


@dataclass
class StepResult:
    state: EnvState
    obs: Observation
    reward: float
    done: bool


def reset(config: EnvConfig, seed: int | None = None) -> tuple[EnvState, Observation]:
    """Agent at (0.1, 0.5); balls uniformly placed away from it with random headings."""
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    agent = (0.1, 0.5)
    lo, hi = config.ball_radius, config.arena - config.ball_radius
    pos, vel = [], []
    for _ in range(config.n_balls):
        while True:
            p = rng.uniform(lo, hi, size=2)
            if np.hypot(p[0] - agent[0], p[1] - agent[1]) > 2 * config.deflect_radius:
                break
        theta = rng.uniform(0.0, 2 * np.pi)
        pos.append((float(p[0]), float(p[1])))
        vel.append((config.ball_speed * float(np.cos(theta)),
                    config.ball_speed * float(np.sin(theta))))
    state = EnvState(agent, (0.0, 0.0), tuple(pos), tuple(vel), 0, seed)
    return state, observe(config, state, collision=False)


def _advance(config: EnvConfig, state: EnvState, action) -> tuple[EnvState, bool, np.ndarray]:
    a = np.clip(np.asarray(action, dtype=np.float64).reshape(2), -1.0, 1.0)
    ra = config.agent_radius
    ax = min(max(state.agent_pos[0] + a[0] * config.dt, ra), config.arena - ra)
    ay = min(max(state.agent_pos[1] + a[1] * config.dt, ra), config.arena - ra)
    lo, hi = config.ball_radius, config.arena - config.ball_radius
    new_pos, new_vel, hit = [], [], False
    for (x, y), (vx, vy) in zip(state.ball_pos, state.ball_vel):
        x, y = x + vx, y + vy
        if x < lo:
            x, vx = 2 * lo - x, -vx
        elif x > hi:
            x, vx = 2 * hi - x, -vx
        if y < lo:
            y, vy = 2 * lo - y, -vy
        elif y > hi:
            y, vy = 2 * hi - y, -vy
        dx, dy = x - ax, y - ay
        dist = float(np.hypot(dx, dy))
        if dist < config.deflect_radius:
            hit = True
            if dist == 0.0:
                dx, dy, dist = 1.0, 0.0, 1.0
            vx, vy = config.ball_speed * dx / dist, config.ball_speed * dy / dist
        new_pos.append((float(x), float(y)))
        new_vel.append((float(vx), float(vy)))
    nxt = EnvState((float(ax), float(ay)), (float(a[0]), float(a[1])),
                   tuple(new_pos), tuple(new_vel), state.t + 1, state.seed)
    return nxt, hit, a


def step(config: EnvConfig, state: EnvState, action) -> StepResult:
    """Advance one step: r = max(v_x, 0) dt - xi1 [collision] - xi2 |a_y| dt."""
    if state.t >= config.episode_length:
        raise ContractViolation("step called on a finished episode")
    nxt, hit, a = _advance(config, state, action)
    reward = (max(a[0], 0.0) * config.dt - config.collision_penalty * float(hit)
              - config.lateral_penalty * abs(a[1]) * config.dt)
    done = nxt.t == config.episode_length
    return StepResult(nxt, observe(config, nxt, collision=hit), float(reward), done)


def ground_truth_event(config: EnvConfig, state: EnvState, action) -> bool:
    """True iff stepping ``state`` with ``action`` deflects a ball."""
    return _advance(config, state, action)[1]


# ---------------------------------------------------------------------------
# Rendering


def _fixed(v: float) -> int:
    return int(round(v * IMAGE_SIZE * FIX))


_CENTERS = (2 * np.arange(IMAGE_SIZE, dtype=np.int64) + 1) * (FIX // 2)


def disk_mask(center, radius: float) -> np.ndarray:
    """Pixels whose centre lies within ``radius`` of ``center`` (integer arithmetic).

    Row index grows with y, column index with x.
    """
    cx, cy, r = _fixed(center[0]), _fixed(center[1]), _fixed(radius)
    dx = (_CENTERS - cx) ** 2
    dy = (_CENTERS - cy) ** 2
    return (dy[:, None] + dx[None, :]) <= r * r


_CHECKER = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), np.float32)
for _i in range(IMAGE_SIZE):
    for _j in range(IMAGE_SIZE):
        _CHECKER[_i, _j] = CHECKER_COLORS[((_i // CHECKER_CELL) + (_j // CHECKER_CELL)) % 2]


def background() -> np.ndarray:
    return _CHECKER.copy()


def masks(config: EnvConfig, state: EnvState) -> tuple[np.ndarray, np.ndarray]:
    agent = disk_mask(state.agent_pos, config.agent_radius)
    balls = np.zeros_like(agent)
    for p in state.ball_pos:
        balls |= disk_mask(p, config.ball_radius)
    return agent, balls & ~agent


def render(config: EnvConfig, state: EnvState) -> np.ndarray:
    return observe(config, state, collision=False).image


def observe(config: EnvConfig, state: EnvState, collision: bool) -> Observation:
    agent, balls = masks(config, state)
    img = background()
    img[balls] = np.asarray(config.ball_color, np.float32)
    img[agent] = np.asarray(config.agent_color, np.float32)
    return Observation(img, agent, balls, bool(collision))


def variant(config: EnvConfig) -> EnvConfig:
    """Same dynamics, recoloured agent sprite (transfer target domain)."""
    return replace(config, agent_color=(0.15, 0.35, 0.95))


# ---------------------------------------------------------------------------
# Episodes


@dataclass
class Episode:
    """Stored transitions t = 1..T: obs_t, the action that led to it, reward, flags."""

    images: np.ndarray  # [T, 32, 32, 3] float32
    actions: np.ndarray  # [T, 2] float32, action a_{t-1}
    rewards: np.ndarray  # [T] float32
    dones: np.ndarray  # [T] uint8
    collisions: np.ndarray  # [T] uint8
    agent_masks: np.ndarray  # [T, 32, 32] uint8
    ball_masks: np.ndarray
    config_hash: str = ""
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def total_return(self) -> float:
        return float(self.rewards.astype(np.float64).sum())


def stack_episode(obs: list[Observation], actions, rewards, dones, config_hash="", meta=None):
    return Episode(
        images=np.stack([o.image for o in obs]).astype(np.float32),
        actions=np.asarray(actions, np.float32).reshape(len(obs), 2),
        rewards=np.asarray(rewards, np.float32),
        dones=np.asarray(dones, np.uint8),
        collisions=np.asarray([o.collision for o in obs], np.uint8),
        agent_masks=np.stack([o.agent_mask for o in obs]).astype(np.uint8),
        ball_masks=np.stack([o.ball_mask for o in obs]).astype(np.uint8),
        config_hash=config_hash,
        meta=dict(meta or {}),
    )


def save_episode(path, ep: Episode) -> None:
    """ISODEP1: magic, u64 header length, JSON header, then frame-major arrays."""
    header = {
        "T": len(ep),
        "shapes": {"image": list(ep.images.shape[1:]), "action": [2], "mask": [IMAGE_SIZE] * 2},
        "config_hash": ep.config_hash,
        "meta": ep.meta,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(EPISODE_MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        f.write(ep.images.astype("<f4").tobytes())
        f.write(ep.actions.astype("<f4").tobytes())
        f.write(ep.rewards.astype("<f4").tobytes())
        f.write(ep.dones.astype(np.uint8).tobytes())
        f.write(ep.collisions.astype(np.uint8).tobytes())
        f.write(ep.agent_masks.astype(np.uint8).tobytes())
        f.write(ep.ball_masks.astype(np.uint8).tobytes())


def load_episode(path) -> Episode:
    blob = Path(path).read_bytes()
    m = len(EPISODE_MAGIC)
    if blob[:m] != EPISODE_MAGIC:
        raise ContractViolation(f"{path}: not an ISODEP1 file")
    (n,) = struct.unpack("<Q", blob[m:m + 8])
    header = json.loads(blob[m + 8:m + 8 + n].decode("utf-8"))
    T = header["T"]
    h, w, c = header["shapes"]["image"]
    off = m + 8 + n

    def take(dtype, count, shape):
        nonlocal off
        size = np.dtype(dtype).itemsize * count
        if off + size > len(blob):
            raise ContractViolation(f"{path}: truncated episode file")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off).reshape(shape)
        off += size
        return arr.copy()

    images = take("<f4", T * h * w * c, (T, h, w, c)).astype(np.float32)
    actions = take("<f4", T * 2, (T, 2)).astype(np.float32)
    rewards = take("<f4", T, (T,)).astype(np.float32)
    dones = take(np.uint8, T, (T,))
    collisions = take(np.uint8, T, (T,))
    agent_masks = take(np.uint8, T * h * w, (T, h, w))
    ball_masks = take(np.uint8, T * h * w, (T, h, w))
    return Episode(images, actions, rewards, dones, collisions, agent_masks, ball_masks,
                   header.get("config_hash", ""), header.get("meta", {}))
