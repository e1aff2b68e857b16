"""Verification suites run by ``isodream gradcheck`` and ``isodream selftest``.

``gradcheck_suite`` compares autograd against central differences in float64 for
the primitives and the composite model computations. ``selftest_suite`` checks
lambda-returns, attention, the variance estimator and the dependency gate
against independent oracles; ``mutate`` swaps in a deliberately broken
implementation so CI can confirm that the suite catches it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import behavior, worldmodel
from .diffcore import (
    ConvEncoder,
    GRUCell,
    check_gradients,
    check_module_gradients,
    gaussian_kl,
    sample_gaussian,
    seeded,
)
from .worldmodel import Latent, WMConfig, WorldModel

TOLERANCE = 1e-4
D64 = torch.float64


def micro_model(seed: int = 0, **kw) -> WorldModel:
    """8x8 float64 world model with a soft gate and plain, unclamped KL, so the loss is smooth."""
    base = dict(image_size=8, cnn_depth=2, embed=6, deter=5, stoch=3, static_dim=3, hidden=6,
                gate_mode="soft", kl_balance=None, free_nats=0.0)
    base.update(kw)
    return WorldModel(WMConfig(**base), seed).double()


def micro_batch(B: int = 1, T: int = 4, size: int = 8, seed: int = 0) -> dict[str, torch.Tensor]:
    g = torch.Generator().manual_seed(seed)
    return {
        "images": torch.rand(B, T, size, size, 3, generator=g, dtype=D64),
        "actions": torch.rand(B, T, 2, generator=g, dtype=D64) * 2 - 1,
        "rewards": torch.randn(B, T, generator=g, dtype=D64),
        "dones": (torch.rand(B, T, generator=g) > 0.7).to(D64),
    }


def _randn(*shape, seed):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=D64)


def _latent(wm: WorldModel, B: int, seed: int) -> Latent:
    c = wm.cfg
    return Latent(_randn(B, c.deter, seed=seed), _randn(B, c.stoch, seed=seed + 1),
                  _randn(B, c.stoch, seed=seed + 2).abs() + 0.2, _randn(B, c.stoch, seed=seed + 3))


def gradcheck_suite() -> dict[str, float]:
    """Worst relative error per checked computation."""
    out: dict[str, float] = {}
    with seeded(0):
        lin = torch.nn.Linear(4, 3).double()
        gru = GRUCell(3, 4).double()
        enc = ConvEncoder(8, 2, 5).double()
    out["affine"] = check_gradients(lin, [_randn(2, 4, seed=1)])
    out["convolution"] = check_gradients(enc, [torch.rand(1, 8, 8, 3, dtype=D64)])
    out["softmax"] = check_gradients(lambda x: torch.softmax(x, -1), [_randn(3, 4, seed=2)])
    out["sigmoid"] = check_gradients(torch.sigmoid, [_randn(5, seed=3)])
    out["tanh"] = check_gradients(torch.tanh, [_randn(5, seed=4)])
    out["gru_cell"] = check_gradients(gru, [_randn(2, 4, seed=5), _randn(2, 3, seed=6)])
    out["gaussian_sample"] = check_gradients(
        lambda m, s: sample_gaussian(m, s, _randn(2, 3, seed=7)),
        [_randn(2, 3, seed=8), _randn(2, 3, seed=9).abs() + 0.1])
    out["gaussian_kl"] = check_gradients(
        gaussian_kl, [_randn(2, 3, seed=10), _randn(2, 3, seed=11).abs() + 0.2,
                      _randn(2, 3, seed=12), _randn(2, 3, seed=13).abs() + 0.2])
    out["attention"] = check_gradients(lambda s, z: behavior.future_attention(s, z)[0],
                                       [_randn(2, 4, seed=14), _randn(2, 3, 4, seed=15)])

    wm = micro_model()
    prev_s, prev_z = _latent(wm, 2, 20), _latent(wm, 2, 30)

    def posterior(h_s, h_z, embed, a):
        gen = torch.Generator().manual_seed(0)
        ps = Latent(h_s, prev_s.mean, prev_s.std, prev_s.sample)
        pz = Latent(h_z, prev_z.mean, prev_z.std, prev_z.sample)
        qs, qz, _, _ = wm.posterior_step(ps, pz, embed, a, gen)
        return torch.cat([qs.sample, qz.sample, qs.h, qz.h], -1)

    out["posterior_step"] = check_gradients(
        posterior, [prev_s.h, prev_z.h, _randn(2, wm.cfg.embed, seed=40), _randn(2, 2, seed=41)])

    def gated_free_prior(h_z, z, s):
        gen = torch.Generator().manual_seed(1)
        prev = Latent(h_z, prev_z.mean, prev_z.std, z)
        w, _ = wm.dependency_gate(s, z)
        nxt = wm.prior_step_free(prev, torch.zeros(2, 2, dtype=D64), s, w, gen)
        return torch.cat([nxt.sample, nxt.h], -1)

    out["gated_free_prior"] = check_gradients(
        gated_free_prior, [prev_z.h, prev_z.sample, prev_s.sample])

    batch = micro_batch()
    reports = check_module_gradients(lambda: wm.total_loss(**batch).total,
                                     {g: wm.groups[g] for g in wm.GROUPS}, coords_per_group=6)
    for g, r in reports.items():
        out[f"total_loss/{g}"] = r.max_rel_err
    return out


# ---------------------------------------------------------------------------
# Oracle self-test


def brute_lambda_returns(r, v, g, lam):
    """Explicit mixture of n-step returns; the horizon's tail weight goes to the longest."""
    n = len(r)
    out = np.empty(n)
    out[-1] = v[-1]
    for i in range(n - 1):
        k_max = n - 1 - i
        total = 0.0
        for k in range(1, k_max + 1):
            ret, disc = 0.0, 1.0
            for j in range(k):
                ret += disc * r[i + j]
                disc *= g[i + j]
            ret += disc * v[i + k]
            weight = (1 - lam) * lam ** (k - 1) if k < k_max else lam ** (k_max - 1)
            total += weight * ret
        out[i] = total
    return out


def _attention_oracle(s, z):
    scores = z @ s
    w = np.exp(scores - scores.max())
    w /= w.sum()
    return w @ z + s


@dataclass
class Impl:
    lambda_returns: Callable
    future_attention: Callable
    variance: Callable
    gate: Callable  # (model, s, z) -> (w, prob)


def _broken_lambda(rewards, values, discounts, lam):
    out = behavior.lambda_returns(rewards, values, discounts, lam)
    return out + 1e-3 * torch.arange(len(out), dtype=out.dtype).reshape(-1, *[1] * (out.dim() - 1))


MUTATIONS: dict[str, Callable[[Impl], Impl]] = {
    "lambda_returns": lambda i: Impl(_broken_lambda, i.future_attention, i.variance, i.gate),
    "attention": lambda i: Impl(i.lambda_returns,
                                lambda s, z: (behavior.future_attention(s, z)[0] - s, None),
                                i.variance, i.gate),
    "variance": lambda i: Impl(i.lambda_returns, i.future_attention,
                               lambda x: x.var(0, unbiased=False).sum(), i.gate),
    "gate": lambda i: Impl(i.lambda_returns, i.future_attention, i.variance,
                           lambda wm, s, z: (wm.dependency_gate(s, z)[1],
                                             wm.dependency_gate(s, z)[1])),
}


def selftest_suite(mutate: str | None = None) -> dict[str, tuple[bool, str]]:
    impl = Impl(behavior.lambda_returns, behavior.future_attention, worldmodel.variance,
                lambda wm, s, z: wm.dependency_gate(s, z))
    if mutate is not None:
        impl = MUTATIONS[mutate](impl)
    results: dict[str, tuple[bool, str]] = {}
    rng = np.random.default_rng(0)

    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 17))
        r, v = rng.normal(size=n), rng.normal(size=n)
        g, lam = rng.uniform(0, 1, size=n), float(rng.uniform(0, 1))
        got = impl.lambda_returns(*(torch.tensor(x, dtype=D64) for x in (r, v, g)), lam)
        worst = max(worst, float(np.abs(got.numpy() - brute_lambda_returns(r, v, g, lam)).max()))
    results["lambda_returns"] = (worst < 1e-6, f"max abs err {worst:.2e}")

    worst = 0.0
    for _ in range(100):
        d, tau = int(rng.integers(1, 9)), int(rng.integers(1, 7))
        s, z = rng.normal(size=d), rng.normal(size=(tau, d))
        got, _ = impl.future_attention(torch.tensor(s), torch.tensor(z))
        worst = max(worst, float(np.abs(got.numpy() - _attention_oracle(s, z)).max()))
    results["attention"] = (worst < 1e-6, f"max abs err {worst:.2e}")

    pairs = [([1.0, 3.0], 2.0), ([1.0, 2.0, 3.0], 1.0)]
    vals = [float(impl.variance(torch.tensor(x, dtype=D64).reshape(-1, 1))) for x, _ in pairs]
    results["variance"] = (all(v == want for v, (_, want) in zip(vals, pairs)),
                           f"got {vals}, want [2.0, 1.0]")

    # gate: zero weights, so the logit is the bias; w = 1 exactly when sigmoid >= 0.5
    wm = micro_model(gate_mode="hard")
    lin = wm.groups["dependency_gate"]
    probe = torch.zeros(1, wm.cfg.stoch, dtype=D64)
    ok, detail = True, []
    for logit, want in ((0.0, 1.0), (-1e-9, 0.0), (3.0, 1.0), (-3.0, 0.0)):
        with torch.no_grad():
            lin.weight.zero_()
            lin.bias.fill_(logit)
        w = float(impl.gate(wm, probe, probe)[0].detach())
        ok &= w == want
        detail.append(f"logit {logit:+g} -> {w:g}")
    results["gate"] = (ok, "; ".join(detail))
    return results


def gradcheck_passes(report: dict[str, float], tol: float = TOLERANCE) -> bool:
    return all(v < tol for v in report.values())
