"""Differentiable building blocks shared by the world model and the agent.

Reverse-mode accumulation is delegated to torch autograd; everything the model
needs on top of it (GRU step, diagonal Gaussians, conv encoder/decoder,
parameter groups, the ISODPAR1 container and a finite-difference checker)
lives here.
"""
from __future__ import annotations

import contextlib
import json
import math
import struct
import zlib
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

MIN_STD = 0.1

GROUP_NAMES = (
    "shared_encoder",
    "action_cond_branch",
    "action_free_branch",
    "static_branch",
    "inverse_cell",
    "dependency_gate",
    "reward_head",
    "discount_head",
    "actor",
    "critic",
    "attention",
)

PARAM_MAGIC = b"ISODPAR1"


class ContractViolation(ValueError):
    """Raised when an operation is called outside its documented domain."""


class TrainingFailure(RuntimeError):
    """A loss component became non-finite."""

    def __init__(self, component: str, components: Mapping[str, float] | None = None):
        self.component = component
        self.components = dict(components or {})
        super().__init__(f"non-finite loss component: {component}")


def require(cond: bool, msg: str) -> None:
    if not cond:
        raise ContractViolation(msg)


# ---------------------------------------------------------------------------
# GRU


class GRUCell(nn.Module):
    """Gated recurrent cell with the reset gate applied before the candidate projection.

    r = sigmoid(W_r [x, h]), u = sigmoid(W_u [x, h]), c = tanh(W_c [x, r*h]),
    h' = (1 - u) * h + u * c.
    """

    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.gates = nn.Linear(input_size + hidden_size, 2 * hidden_size)
        self.cand = nn.Linear(input_size + hidden_size, hidden_size)

    def forward(self, h: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        return gru_step(h, x, self)


def gru_step(h: torch.Tensor, x: torch.Tensor, params: GRUCell) -> torch.Tensor:
    require(h.shape[-1] == params.hidden_size,
            f"gru_step: hidden width {h.shape[-1]} != {params.hidden_size}")
    require(x.shape[-1] == params.input_size,
            f"gru_step: input width {x.shape[-1]} != {params.input_size}")
    require(h.shape[:-1] == x.shape[:-1], "gru_step: batch shapes of h and x differ")
    xh = torch.cat([x, h], -1)
    reset, update = torch.sigmoid(params.gates(xh)).chunk(2, -1)
    cand = torch.tanh(params.cand(torch.cat([x, reset * h], -1)))
    return (1 - update) * h + update * cand


# ---------------------------------------------------------------------------
# Diagonal Gaussians


def std_from_raw(raw: torch.Tensor) -> torch.Tensor:
    return F.softplus(raw) + MIN_STD


def sample_gaussian(mean: torch.Tensor, std: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """Reparameterised draw; ``noise`` is supplied by the caller and gets no gradient."""
    require(mean.shape == std.shape == noise.shape, "sample_gaussian: shape mismatch")
    require(not bool((std <= 0).any()), "sample_gaussian: std must be strictly positive")
    return mean + std * noise.detach()


def gaussian_kl(mean_q, std_q, mean_p, std_p) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    require(not bool((std_q <= 0).any() or (std_p <= 0).any()),
            "gaussian_kl: std must be strictly positive")
    var_ratio = (std_q / std_p) ** 2
    mahal = ((mean_q - mean_p) / std_p) ** 2
    return 0.5 * (var_ratio + mahal - 1 - torch.log(var_ratio)).sum(-1)


def balanced_kl(post: tuple, prior: tuple, balance: float = 0.8,
                free: float = 0.0) -> torch.Tensor:
    """KL value with ``balance`` of the gradient routed to the prior side.

    Each side is clamped from below at ``free`` nats, so KL under that budget
    carries no gradient.
    """
    mq, sq = post
    mp, sp = prior
    to_prior = gaussian_kl(mq.detach(), sq.detach(), mp, sp).clamp(min=free)
    to_post = gaussian_kl(mq, sq, mp.detach(), sp.detach()).clamp(min=free)
    return balance * to_prior + (1 - balance) * to_post


# ---------------------------------------------------------------------------
# Images


class ConvEncoder(nn.Module):
    """Three stride-2 conv stages followed by a dense projection."""

    def __init__(self, size: int = 32, depth: int = 16, out_dim: int = 128, in_ch: int = 3):
        super().__init__()
        require(size % 8 == 0, "ConvEncoder: size must be a multiple of 8")
        self.size = size
        self.in_ch = in_ch
        chans = [in_ch, depth, 2 * depth, 4 * depth]
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 4, stride=2, padding=1) for i in range(3))
        self.proj = nn.Linear(4 * depth * (size // 8) ** 2, out_dim)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        # image: [..., H, W, C] in [0, 1]
        require(tuple(image.shape[-3:]) == (self.size, self.size, self.in_ch),
                f"conv_encode: expected [...,{self.size},{self.size},{self.in_ch}], "
                f"got {tuple(image.shape)}")
        lead = image.shape[:-3]
        x = (image.reshape(-1, *image.shape[-3:]) - 0.5).permute(0, 3, 1, 2)  # centre pixels
        for conv in self.convs:
            x = F.elu(conv(x))
        return F.elu(self.proj(x.flatten(1))).reshape(*lead, -1)


class ConvDecoder(nn.Module):
    """Dense projection followed by three 2x upsampling stages.

    The first two stages are 3x3 convolutions to four times the target channels
    followed by a pixel shuffle; the last is a 2x2 stride-2 transposed
    convolution. Both are much cheaper on CPU than 4x4 transposed convolutions.
    """

    def __init__(self, in_dim: int, size: int = 32, depth: int = 16, out_ch: int = 4):
        super().__init__()
        require(size % 8 == 0, "ConvDecoder: size must be a multiple of 8")
        self.size = size
        self.in_dim = in_dim
        self.depth = depth
        self.out_ch = out_ch
        self.proj = nn.Linear(in_dim, 4 * depth * (size // 8) ** 2)
        self.convs = nn.ModuleList([
            nn.Conv2d(4 * depth, 4 * 2 * depth, 3, padding=1),
            nn.Conv2d(2 * depth, 4 * depth, 3, padding=1),
        ])
        self.out = nn.ConvTranspose2d(depth, out_ch, 2, stride=2)
        with torch.no_grad():  # colour channels start at mid-grey, matching the centred input
            self.out.bias[:3] = 0.5

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        require(feat.shape[-1] == self.in_dim,
                f"conv_decode: feature width {feat.shape[-1]} != {self.in_dim}")
        lead = feat.shape[:-1]
        s = self.size // 8
        x = self.proj(feat.reshape(-1, self.in_dim)).reshape(-1, 4 * self.depth, s, s)
        for conv in self.convs:
            x = F.elu(F.pixel_shuffle(conv(x).contiguous(), 2))
        x = self.out(x)
        return x.permute(0, 2, 3, 1).reshape(*lead, self.size, self.size, self.out_ch)


def mlp(in_dim: int, hidden: int, out_dim: int, layers: int = 1) -> nn.Sequential:
    mods: list[nn.Module] = []
    d = in_dim
    for _ in range(layers):
        mods += [nn.Linear(d, hidden), nn.ELU()]
        d = hidden
    mods.append(nn.Linear(d, out_dim))
    return nn.Sequential(*mods)


# ---------------------------------------------------------------------------
# Parameter groups


def group_seed(seed: int, name: str) -> int:
    return (seed * 1_000_003 + zlib.crc32(name.encode())) % (2**63)


@contextlib.contextmanager
def seeded(seed: int):
    """Scope torch's default generator to ``seed`` (module construction only)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


@contextlib.contextmanager
def frozen(*modules: nn.Module):
    """Temporarily stop gradient accumulation into ``modules``' parameters."""
    params = [p for m in modules for p in m.parameters()]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad_(f)


def named_tensors(groups: Mapping[str, nn.Module]) -> dict[str, dict[str, torch.Tensor]]:
    return {g: dict(m.state_dict()) for g, m in groups.items()}


def check_group_partition(groups: Mapping[str, nn.Module]) -> None:
    seen: dict[int, str] = {}
    for name, mod in groups.items():
        require(name in GROUP_NAMES, f"unknown parameter group {name!r}")
        for p in mod.parameters():
            require(id(p) not in seen, f"tensor shared by groups {seen.get(id(p))} and {name}")
            seen[id(p)] = name


# ---------------------------------------------------------------------------
# ISODPAR1 container


def encode_params(tensors: Mapping[str, Mapping[str, torch.Tensor]]) -> bytes:
    header = {g: {k: list(v.shape) for k, v in ts.items()} for g, ts in tensors.items()}
    head = json.dumps(header, separators=(",", ":")).encode("utf-8")
    chunks = [PARAM_MAGIC, struct.pack("<Q", len(head)), head]
    for g, ts in tensors.items():
        for v in ts.values():
            chunks.append(v.detach().cpu().numpy().astype("<f4").tobytes())
    return b"".join(chunks)


def decode_params(blob: bytes) -> dict[str, dict[str, torch.Tensor]]:
    if len(blob) < 16 or blob[:8] != PARAM_MAGIC:
        raise ContractViolation("not an ISODPAR1 container")
    (n,) = struct.unpack("<Q", blob[8:16])
    if 16 + n > len(blob):
        raise ContractViolation("ISODPAR1 header truncated")
    header = json.loads(blob[16:16 + n].decode("utf-8"))
    offset = 16 + n
    out: dict[str, dict[str, torch.Tensor]] = {}
    for g, shapes in header.items():
        out[g] = {}
        for k, shape in shapes.items():
            count = int(np.prod(shape)) if shape else 1
            end = offset + 4 * count
            if end > len(blob):
                raise ContractViolation(f"ISODPAR1 data truncated in {g}/{k}")
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            out[g][k] = torch.from_numpy(arr.astype(np.float32).reshape(shape))
            offset = end
    if offset != len(blob):
        raise ContractViolation("ISODPAR1 has trailing bytes")
    return out


# ---------------------------------------------------------------------------
# Finite-difference verification


@dataclass
class GradReport:
    max_rel_err: float
    checked: int
    worst: str = ""


def _rel(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def check_gradients(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    step: float = 1e-5,
    floor: float = 1e-6,
    projection_seed: int = 0,
) -> float:
    """Worst per-coordinate relative error between autograd and central differences.

    ``fn`` is evaluated in float64; non-scalar outputs are reduced with a fixed
    random projection.
    """
    xs = [x.detach().double().clone().requires_grad_(True) for x in inputs]
    out = fn(*xs)
    proj = None
    if out.numel() != 1:
        g = torch.Generator().manual_seed(projection_seed)
        proj = torch.randn(out.shape, generator=g, dtype=torch.float64)

    def scalar(*args):
        o = fn(*args)
        return (o * proj).sum() if proj is not None else o.sum()

    grads = torch.autograd.grad(scalar(*xs), xs, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for x, g in zip(xs, grads):
            g = torch.zeros_like(x) if g is None else g.reshape(x.shape)
            flat = x.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                fp = scalar(*xs).item()
                flat[i] = orig - step
                fm = scalar(*xs).item()
                flat[i] = orig
                num = (fp - fm) / (2 * step)
                worst = max(worst, _rel(g.reshape(-1)[i].item(), num, floor))
    return worst


def check_module_gradients(
    loss_fn: Callable[[], torch.Tensor],
    groups: Mapping[str, nn.Module],
    coords_per_group: int = 6,
    step: float = 1e-5,
    floor: float = 1e-6,
    seed: int = 0,
) -> dict[str, GradReport]:
    """Per-group FD check of a scalar loss over module parameters (float64 modules).

    Checks ``coords_per_group`` coordinates per group (largest-gradient ones first,
    then random ones) plus one random directional derivative per group.
    """
    params = {g: [p for p in m.parameters()] for g, m in groups.items()}
    for ps in params.values():
        for p in ps:
            p.grad = None
    loss = loss_fn()
    loss.backward()
    rng = np.random.default_rng(seed)
    reports: dict[str, GradReport] = {}

    def evaluate() -> float:
        with torch.no_grad():
            return loss_fn().item()

    for g, ps in params.items():
        if not ps:
            reports[g] = GradReport(0.0, 0)
            continue
        flat_grad = torch.cat([
            (p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1) for p in ps])
        sizes = [p.numel() for p in ps]
        offsets = np.cumsum([0] + sizes)
        top = torch.topk(flat_grad.abs(), min(coords_per_group // 2, flat_grad.numel())).indices
        rand = rng.choice(flat_grad.numel(), size=min(coords_per_group - len(top),
                                                      flat_grad.numel()), replace=False)
        idxs = sorted(set(top.tolist()) | set(int(i) for i in rand))
        worst, where = 0.0, ""
        for idx in idxs:
            k = int(np.searchsorted(offsets, idx, side="right") - 1)
            p = ps[k]
            j = idx - offsets[k]
            with torch.no_grad():
                flat = p.view(-1)
                orig = flat[j].item()
                flat[j] = orig + step
                fp = evaluate()
                flat[j] = orig - step
                fm = evaluate()
                flat[j] = orig
            err = _rel(flat_grad[idx].item(), (fp - fm) / (2 * step), floor)
            if err > worst:
                worst, where = err, f"coord {idx}"
        # directional derivative along a random unit direction
        direction = [torch.from_numpy(rng.standard_normal(p.shape)).to(p) for p in ps]
        norm = math.sqrt(sum(float((d ** 2).sum()) for d in direction))
        direction = [d / norm for d in direction]
        analytic = sum(float((d * (p.grad if p.grad is not None else 0)).sum())
                       for d, p in zip(direction, ps))
        with torch.no_grad():
            for p, d in zip(ps, direction):
                p.add_(step * d)
            fp = evaluate()
            for p, d in zip(ps, direction):
                p.sub_(2 * step * d)
            fm = evaluate()
            for p, d in zip(ps, direction):
                p.add_(step * d)
        err = _rel(analytic, (fp - fm) / (2 * step), floor)
        if err > worst:
            worst, where = err, "direction"
        reports[g] = GradReport(worst, len(idxs) + 1, where)
    return reports


def assert_finite(name: str, value: torch.Tensor, components: Mapping[str, float] | None = None):
    if not bool(torch.isfinite(value).all()):
        raise TrainingFailure(name, components)


def iter_params(modules: Iterable[nn.Module]):
    for m in modules:
        yield from m.parameters()
