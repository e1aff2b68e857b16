"""Training experiments behind the learning-trend acceptance checks.

Each experiment is a plain function returning a JSON-friendly dict. Results are
cached under a results directory keyed by the experiment's parameters, so the
acceptance suite can re-read runs that take minutes to hours.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import env as E
from .behavior import ACConfig, Agent
from .diffcore import group_seed
from .trainer import (
    ReplayBuffer,
    TrainConfig,
    Trainer,
    disentanglement_metrics,
    gate_scores,
    load_checkpoint,
    make_optimizer,
    rollout,
    save_checkpoint,
)
from .worldmodel import WMConfig, WorldModel

log = logging.getLogger(__name__)

RESULTS_ENV = "ISODREAM_RESULTS"


def results_dir() -> Path:
    default = Path(__file__).resolve().parents[2] / "acceptance_results"
    return Path(os.environ.get(RESULTS_ENV, default))


def _key(name: str, params: dict) -> str:
    blob = json.dumps({"name": name, **params}, sort_keys=True, default=str).encode()
    return f"{name}-{hashlib.sha256(blob).hexdigest()[:12]}"


def cached(name: str, params: dict, fn, refresh: bool = False) -> dict:
    """Return the stored result for (name, params) or compute and store it."""
    path = results_dir() / f"{_key(name, params)}.json"
    if path.exists() and not refresh:
        return json.loads(path.read_text())
    t0 = time.perf_counter()
    out = fn()
    out = {"name": name, "params": params, "runtime_s": time.perf_counter() - t0, **out}
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(out, indent=1, sort_keys=True, default=float))
    tmp.replace(path)
    return out


# ---------------------------------------------------------------------------
# Corpora


def random_episodes(n: int, seed: int, env_cfg: E.EnvConfig | None = None) -> list[E.Episode]:
    """``n`` uniform-random-policy episodes with seeds derived from ``seed``."""
    env_cfg = env_cfg or E.EnvConfig()
    return [rollout(env_cfg, seed * 1_000 + i) for i in range(n)]


def fixed_batches(episodes, n_batches: int, batch: int, seq_len: int, seed: int):
    buf = ReplayBuffer(10**9, seq_len)
    for ep in episodes:
        buf.add(ep)
    rng = np.random.default_rng(seed)
    return [buf.sample(batch, rng) for _ in range(n_batches)]


# ---------------------------------------------------------------------------
# World-model fitting


@dataclass
class FitConfig:
    updates: int = 5_000
    batch: int = 8
    seq_len: int = 16
    lr: float = 1e-3
    grad_clip: float = 100.0
    eval_every: int = 500
    eval_batches: int = 4


@torch.no_grad()
def eval_losses(wm: WorldModel, batches) -> dict[str, float]:
    """Mean loss components over fixed batches in mean mode (no latent noise)."""
    acc: dict[str, list] = {}
    for b in batches:
        out = wm.total_loss(b["image"], b["action"], b["reward"], b["done"], gen=None)
        for k, v in out.components.items():
            acc.setdefault(k, []).append(v)
    return {k: float(np.mean(v)) for k, v in acc.items()}


def fit_world_model(wm: WorldModel, train_eps, eval_batches, fit: FitConfig, seed: int,
                    progress=None) -> list[dict]:
    """Adam updates on windows of ``train_eps``; returns the periodic eval history."""
    buf = ReplayBuffer(10**9, fit.seq_len)
    for ep in train_eps:
        buf.add(ep)
    rng = np.random.default_rng(group_seed(seed, "fit"))
    gen = torch.Generator().manual_seed(seed)
    opt = make_optimizer(wm.parameters(), fit.lr)
    params = list(wm.parameters())
    history = [{"update": 0, **eval_losses(wm, eval_batches)}]
    for u in range(1, fit.updates + 1):
        b = buf.sample(fit.batch, rng)
        out = wm.total_loss(b["image"], b["action"], b["reward"], b["done"], gen)
        opt.zero_grad(set_to_none=True)
        out.total.backward()
        torch.nn.utils.clip_grad_norm_(params, fit.grad_clip)
        opt.step()
        if u % fit.eval_every == 0 or u == fit.updates:
            row = {"update": u, "train_total": out.components["total"],
                   **eval_losses(wm, eval_batches)}
            history.append(row)
            if progress:
                progress(row)
    return history


# ---------------------------------------------------------------------------
# Experiments


@dataclass
class CorpusSpec:
    train_episodes: int = 200
    heldout_episodes: int = 10
    corpus_seed: int = 1
    heldout_seed: int = 2


def world_model_run(seed: int, wm_cfg: WMConfig, fit: FitConfig, corpus: CorpusSpec,
                    checkpoint: Path | None = None, progress=None) -> dict:
    """Fit on the fixed corpus, then score reconstruction, masks and the gate."""
    train_eps = random_episodes(corpus.train_episodes, corpus.corpus_seed)
    held = random_episodes(corpus.heldout_episodes, corpus.heldout_seed)
    batches = fixed_batches(held, fit.eval_batches, fit.batch, fit.seq_len, seed=123)
    wm = WorldModel(wm_cfg, seed)
    history = fit_world_model(wm, train_eps, batches, fit, seed, progress)
    del train_eps
    dis = disentanglement_metrics(wm, held)
    precision, recall, counts = gate_scores(wm, held)
    if checkpoint is not None:
        checkpoint.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(checkpoint, wm, Agent(wm, ACConfig(), seed), {"seed": seed})
    return {
        "history": history,
        "image_nll_0": history[0]["image"],
        "image_nll_final": history[-1]["image"],
        "image_sse_0": history[0]["image_sse"],
        "image_sse_final": history[-1]["image_sse"],
        "iou_agent_s": dis.iou_agent_s,
        "iou_ball_z": dis.iou_ball_z,
        "collapse": dis.collapse,
        "recon_sse": dis.recon_sse,
        "gate_precision": precision,
        "gate_recall": recall,
        "gate_counts": counts,
    }


def transfer_run(seed: int, source_ckpt: Path, load: bool, wm_cfg: WMConfig, fit: FitConfig,
                 n_episodes: int = 50) -> dict:
    """Train on the recoloured variant, optionally starting from the source action-free branch."""
    target = E.variant(E.EnvConfig())
    train_eps = random_episodes(n_episodes, 11, target)
    held = random_episodes(5, 12, target)
    batches = fixed_batches(held, fit.eval_batches, fit.batch, fit.seq_len, seed=321)
    wm = WorldModel(wm_cfg, seed)
    if load:
        load_checkpoint(source_ckpt, wm, Agent(wm, ACConfig(), seed), ["action_free_branch"])
    history = fit_world_model(wm, train_eps, batches, fit, seed)
    return {"history": history, "final_total": history[-1]["total"],
            "final_base": history[-1]["base"], "final_image": history[-1]["image"]}


def behavior_run(seed: int, window: int, env_steps: int, train_every: int,
                 eval_episodes: int = 10, progress=None) -> dict:
    """Full interaction loop followed by eval-mode episodes."""
    tcfg = TrainConfig(total_steps=env_steps, train_every=train_every, seed=seed,
                       checkpoint_every=0)
    tr = Trainer(E.EnvConfig(), WMConfig(), ACConfig(window=window), tcfg)
    records = tr.train(progress=progress)
    returns = [r.episode_return for r in records if r.episode_return is not None]
    mean, std = tr.evaluate(eval_episodes)
    return {"eval_mean": mean, "eval_std": std, "updates": tr.updates,
            "train_returns": returns}


# ---------------------------------------------------------------------------
# Acceptance runs (cached)

SEEDS = (0, 1, 2)
TRANSFER_UPDATES = 500
BEHAVIOR_STEPS = 50_000
BEHAVIOR_TRAIN_EVERY = 8


def _wm_ckpt(seed: int) -> Path:
    return results_dir() / f"world_model_seed{seed}.isodpar"


def run_world_model(seed: int, variance: bool = True, refresh: bool = False,
                    progress=None) -> dict:
    """Criterion-4 training on the fixed corpus, with or without the variance losses."""
    wm_cfg, fit, corpus = WMConfig(use_variance=variance), FitConfig(), CorpusSpec()
    params = {"seed": seed, "wm": asdict(wm_cfg), "fit": asdict(fit), "corpus": asdict(corpus)}
    ckpt = _wm_ckpt(seed) if variance else None
    return cached("world_model", params,
                  lambda: world_model_run(seed, wm_cfg, fit, corpus, ckpt, progress), refresh)


def run_transfer(seed: int, load: bool, refresh: bool = False) -> dict:
    """Variant-environment training from scratch or from the source action-free branch."""
    source = run_world_model(seed)  # make sure the source checkpoint exists
    wm_cfg, fit = WMConfig(), FitConfig(updates=TRANSFER_UPDATES, eval_every=100)
    params = {"seed": seed, "load": load, "source": source["params"], "wm": asdict(wm_cfg),
              "fit": asdict(fit)}
    return cached("transfer", params,
                  lambda: transfer_run(seed, _wm_ckpt(seed), load, wm_cfg, fit), refresh)


def run_behavior(seed: int, window: int, refresh: bool = False, progress=None) -> dict:
    params = {"seed": seed, "window": window, "env_steps": BEHAVIOR_STEPS,
              "train_every": BEHAVIOR_TRAIN_EVERY, "wm": asdict(WMConfig()),
              "ac": asdict(ACConfig(window=window)),
              "train": asdict(TrainConfig(total_steps=BEHAVIOR_STEPS,
                                          train_every=BEHAVIOR_TRAIN_EVERY, seed=seed,
                                          checkpoint_every=0))}
    return cached("behavior", params,
                  lambda: behavior_run(seed, window, BEHAVIOR_STEPS, BEHAVIOR_TRAIN_EVERY,
                                       progress=progress), refresh)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m isodream.experiments",
                                description="populate the acceptance-run cache")
    p.add_argument("kind", choices=["world_model", "ablation", "transfer", "behavior"])
    p.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--refresh", action="store_true")
    args = p.parse_args(argv)
    torch.set_num_threads(int(os.environ.get("ISODREAM_THREADS", "1")))
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    for seed in args.seeds:
        if args.kind in ("world_model", "ablation"):
            out = run_world_model(seed, args.kind == "world_model", args.refresh,
                                  progress=lambda row: log.info("%s", row))
            log.info("seed %d: %s", seed, {k: v for k, v in out.items() if k != "history"})
        elif args.kind == "transfer":
            for load in (True, False):
                out = run_transfer(seed, load, args.refresh)
                log.info("seed %d load %s: final total %.3f", seed, load, out["final_total"])
        else:
            out = run_behavior(seed, args.window, args.refresh,
                               progress=lambda r: r.step % 500 == 0 and log.info(
                                   "update %d env %d return %s", r.step, r.env_steps,
                                   r.episode_return))
            log.info("seed %d window %d: %.3f +- %.3f", seed, args.window, out["eval_mean"],
                     out["eval_std"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
