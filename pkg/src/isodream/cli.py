"""Command-line entry points: train | eval | predict | transfer | gradcheck | selftest.

Exit codes: 0 success, 1 verification or runtime failure, 2 configuration or
usage error, 3 training halted on a non-finite loss.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import env as E
from . import verify
from .behavior import ACConfig
from .diffcore import GROUP_NAMES, ContractViolation, TrainingFailure
from .trainer import TrainConfig, Trainer, config_hash, load_checkpoint, rollout, save_checkpoint
from .worldmodel import WMConfig

log = logging.getLogger("isodream")

EXIT_FAIL, EXIT_CONFIG, EXIT_NAN = 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    env: E.EnvConfig = field(default_factory=E.EnvConfig)
    wm: WMConfig = field(default_factory=WMConfig)
    ac: ACConfig = field(default_factory=ACConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    SECTIONS = {"env": E.EnvConfig, "wm": WMConfig, "ac": ACConfig, "train": TrainConfig}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(cls.SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        parts = {}
        for name, typ in cls.SECTIONS.items():
            sec = d.get(name, {})
            if not isinstance(sec, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            bad = set(sec) - {f.name for f in fields(typ)}
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            try:
                parts[name] = typ(**sec)
            except (ContractViolation, TypeError) as exc:
                raise ConfigError(f"invalid {name!r} config: {exc}") from exc
        return cls(**parts)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in self.SECTIONS}

    def digest(self) -> str:
        return config_hash(self.to_dict())


def read_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(data)


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def checkpoint_config(path: str, fallback: str | None) -> RunConfig:
    """Run config stored in a checkpoint's manifest, else ``--config``/defaults."""
    manifest = Path(path + ".manifest.json")
    if fallback is None and manifest.exists():
        meta = json.loads(manifest.read_text())
        if "run_config" in meta:
            return RunConfig.from_dict(meta["run_config"])
    return read_config(fallback)


def restore(path: str, rc: RunConfig) -> Trainer:
    tr = Trainer(rc.env, rc.wm, rc.ac, rc.train)
    if not Path(path).exists():
        raise ConfigError(f"checkpoint {path} not found")
    load_checkpoint(path, tr.wm, tr.agent)
    return tr


# ---------------------------------------------------------------------------
# Images


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio for images in [0, 1]; +inf for identical inputs."""
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return math.inf if mse == 0 else 10 * math.log10(1.0 / mse)


def write_ppm(path: Path, image: np.ndarray, comment: str = "") -> None:
    """Binary PPM (P6) from an [H, W, 3] float image in [0, 1]."""
    img = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    h, w = img.shape[:2]
    header = "P6\n" + "".join(f"# {line}\n" for line in comment.splitlines()) + f"{w} {h}\n255\n"
    path.write_bytes(header.encode() + img.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ContractViolation(f"{path}: not a P6 file")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data[pos + 1:pos + 1 + w * h * 3], np.uint8).reshape(h, w, 3)


GRID_ROWS = ("ground_truth", "composite", "rgb_s", "mask_s", "rgb_z", "mask_z", "rgb_b")


# ---------------------------------------------------------------------------
# Commands


def cmd_train(args) -> int:
    rc = read_config(args.config)
    if args.steps is not None:
        rc.train = replace(rc.train, total_steps=args.steps)
    if args.seed is not None:
        rc.train = replace(rc.train, seed=args.seed)
    if args.load_groups and not args.load:
        raise ConfigError("--load-groups requires --load")
    groups = args.load_groups.split(",") if args.load_groups else None
    bad = [g for g in groups or [] if g not in GROUP_NAMES]
    if bad:
        raise ConfigError(f"unknown parameter groups {bad}; choose from {list(GROUP_NAMES)}")
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    digest, seed = rc.digest(), rc.train.seed
    tags = {"config_hash": digest, "seed": seed}
    write_json(out / "config.json", {**tags, "run_config": rc.to_dict()})

    tr = Trainer(rc.env, rc.wm, rc.ac, rc.train, outdir=out)
    tr.tags = tags
    tr.manifest_extra = {"run_config": rc.to_dict()}
    if args.load:
        loaded = load_checkpoint(args.load, tr.wm, tr.agent, groups)
        log.info("loaded %s from %s", loaded, args.load)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    try:
        tr.train(out / "metrics.jsonl", out / "timing.jsonl", ckpt_dir,
                 progress=lambda r: log.debug("step %d total %.3f", r.step, r.losses["total"]))
    except TrainingFailure as exc:
        write_json(out / "failure.json", {**tags, "step": tr.updates, "component": exc.component,
                                          "components": exc.components})
        print(f"training halted: non-finite {exc.component} loss at update {tr.updates}",
              file=sys.stderr)
        return EXIT_NAN
    save_checkpoint(out / "final.isodpar", tr.wm, tr.agent,
                    {**tags, **tr.manifest_extra, "step": tr.updates})
    summary = {**tags, "updates": tr.updates, "env_steps": tr.env_steps}
    if rc.train.total_steps > 0 and rc.train.eval_episodes > 0:
        mean, std = tr.evaluate(rc.train.eval_episodes)
        summary.update(eval_mean=mean, eval_std=std, eval_episodes=rc.train.eval_episodes)
    write_json(out / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    rc = checkpoint_config(args.checkpoint, args.config)
    tr = restore(args.checkpoint, rc)
    mean, std = tr.evaluate(args.episodes, args.eval_seed)
    print(f"return {mean:.4f} ± {std:.4f} over {args.episodes} episodes")
    if args.outdir:
        out = Path(args.outdir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "eval.json", {"config_hash": rc.digest(), "seed": rc.train.seed,
                                       "mean": mean, "std": std, "episodes": args.episodes,
                                       "eval_seed": args.eval_seed})
    return 0


def cmd_predict(args) -> int:
    rc = checkpoint_config(args.checkpoint, args.config)
    T = rc.env.episode_length
    if args.context < rc.wm.context:
        raise ConfigError(f"--context must be >= {rc.wm.context}")
    if args.horizon < 0 or args.context + args.horizon > T:
        raise ConfigError(f"context {args.context} + horizon {args.horizon} exceeds the "
                          f"episode length {T}")
    tr = restore(args.checkpoint, rc)
    ep = rollout(rc.env, args.episode_seed)
    dtype = next(tr.wm.parameters()).dtype
    images = torch.from_numpy(ep.images).to(dtype).unsqueeze(0)
    actions = torch.from_numpy(ep.actions).to(dtype).unsqueeze(0)
    rec = tr.wm.open_loop(images, actions, args.context, args.horizon)
    n = args.context + args.horizon
    rows = {
        "ground_truth": ep.images[:n],
        "composite": rec.image[0].numpy(),
        "rgb_s": rec.rgb_s[0].numpy(),
        "mask_s": rec.mask_s[0].expand(-1, -1, -1, 3).numpy(),
        "rgb_z": rec.rgb_z[0].numpy(),
        "mask_z": rec.mask_z[0].expand(-1, -1, -1, 3).numpy(),
        "rgb_b": rec.rgb_b[0].expand(n, -1, -1, -1).numpy(),
    }
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    tags = {"config_hash": rc.digest(), "seed": rc.train.seed}
    comment = f"config_hash={tags['config_hash']} seed={tags['seed']} " \
              f"episode_seed={args.episode_seed} context={args.context} horizon={args.horizon}"
    strips = {k: np.concatenate(list(v), axis=1) for k, v in rows.items()}
    for k in GRID_ROWS:
        write_ppm(out / f"{k}.ppm", strips[k], comment)
    write_ppm(out / "grid.ppm", np.concatenate([strips[k] for k in GRID_ROWS], 0),
              comment + "\nrows: " + " ".join(GRID_ROWS))
    with open(out / "psnr.jsonl", "w") as f:
        for t in range(n):
            value = psnr(rows["composite"][t], rows["ground_truth"][t])
            f.write(json.dumps({**tags, "frame": t,
                                "phase": "context" if t < args.context else "predicted",
                                "psnr": None if math.isinf(value) else value},
                               sort_keys=True) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    report = verify.gradcheck_suite()
    failed = [k for k, v in report.items() if not v < args.tol]
    for k, v in report.items():
        print(f"{'FAIL' if k in failed else 'ok  '} {k:36s} rel err {v:.2e}")
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return 0


def cmd_selftest(args) -> int:
    mutate = args.mutate or os.environ.get("ISODREAM_SELFTEST_MUTATE") or None
    results = verify.selftest_suite(mutate)
    failed = [k for k, (ok, _) in results.items() if not ok]
    for k, (ok, detail) in results.items():
        print(f"{'ok  ' if ok else 'FAIL'} {k:16s} {detail}")
    if failed:
        print(f"selftest failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isodream", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def train_args(sp, transfer=False):
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--steps", type=int, help="total environment steps")
        sp.add_argument("--outdir", required=True)
        sp.add_argument("--load", required=transfer, help="checkpoint to restore groups from")
        sp.add_argument("--load-groups", default="action_free_branch" if transfer else None,
                        help="comma-separated parameter groups (default: all)")
        sp.set_defaults(fn=cmd_train)

    train_args(sub.add_parser("train", help="run the training loop"))
    train_args(sub.add_parser("transfer", help="train after restoring groups from a checkpoint"),
               transfer=True)

    sp = sub.add_parser("eval", help="mean and std of eval-mode returns")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--episodes", type=int, default=10)
    sp.add_argument("--eval-seed", type=int, default=10_000)
    sp.add_argument("--config")
    sp.add_argument("--outdir")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("predict", help="open-loop prediction grid and per-frame PSNR")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--context", type=int, default=5)
    sp.add_argument("--horizon", type=int, default=45)
    sp.add_argument("--episode-seed", type=int, default=20_000)
    sp.add_argument("--config")
    sp.add_argument("--outdir", required=True)
    sp.set_defaults(fn=cmd_predict)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    sp.add_argument("--tol", type=float, default=verify.TOLERANCE)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("selftest", help="oracle checks of returns, attention, variance, gate")
    sp.add_argument("--mutate", choices=sorted(verify.MUTATIONS), help=argparse.SUPPRESS)
    sp.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("ISODREAM_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
