import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from isodream.behavior import ACConfig, Agent, Filter, future_attention, lambda_returns
from isodream.diffcore import ContractViolation
from isodream.worldmodel import Latent
from conftest import tiny_model

D64 = torch.float64


def _agent(L=3, tau=2, seed=0, **kw):
    wm = tiny_model(seed)
    agent = Agent(wm, ACConfig(horizon=L, window=tau, hidden=8, **kw), seed).double()
    return wm, agent


def _start(wm, B=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    c = wm.cfg

    def lat():
        return Latent(torch.randn(B, c.deter, generator=g, dtype=D64),
                      torch.randn(B, c.stoch, generator=g, dtype=D64),
                      torch.rand(B, c.stoch, generator=g, dtype=D64) + 0.1,
                      torch.randn(B, c.stoch, generator=g, dtype=D64))

    return lat(), lat()


# -- attention ---------------------------------------------------------------


def test_attention_single_key():
    e, w = future_attention(torch.tensor([1.0, 0.0]), torch.tensor([[0.0, 1.0]]))
    assert w.tolist() == [1.0]
    assert e.tolist() == [1.0, 1.0]


def test_attention_identical_rows():
    u = torch.tensor([0.3, -1.2, 2.0])
    for s in (torch.zeros(3), torch.tensor([5.0, 1.0, -4.0])):
        e, _ = future_attention(s, u.repeat(4, 1))
        assert torch.allclose(e, u + s, atol=1e-6)


def test_attention_matches_independent_recomputation():
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = rng.normal(size=7)
        z = rng.normal(size=(5, 7))
        scores = z @ s
        w = np.exp(scores - scores.max())
        w /= w.sum()
        want = w @ z + s
        got, _ = future_attention(torch.tensor(s), torch.tensor(z))
        assert np.abs(got.numpy() - want).max() < 1e-6


def test_attention_empty_window():
    with pytest.raises(ContractViolation):
        future_attention(torch.zeros(3), torch.zeros(0, 3))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_attention_weights_and_equivariance(tau, seed):
    g = torch.Generator().manual_seed(seed)
    s = torch.randn(2, 4, generator=g, dtype=D64) * 3
    z = torch.randn(2, tau, 4, generator=g, dtype=D64) * 3
    e, w = future_attention(s, z)
    assert torch.all(w >= 0)
    assert torch.allclose(w.sum(-1), torch.ones(2, dtype=D64), atol=1e-6)
    perm = torch.randperm(tau, generator=g)
    e2, w2 = future_attention(s, z[:, perm])
    assert torch.allclose(w2, w[:, perm], atol=1e-12)
    assert torch.allclose(e2, e, atol=1e-10)


# -- lambda returns ----------------------------------------------------------


def _brute_lambda(r, v, g, lam):
    """Explicit mixture of n-step returns; the last index is the bootstrap."""
    N = len(r)
    out = np.zeros(N)
    out[-1] = v[-1]
    for i in range(N - 1):
        H = N - 1 - i

        def nstep(n):
            total, disc = 0.0, 1.0
            for k in range(n):
                total += disc * r[i + k]
                disc *= g[i + k]
            return total + disc * v[i + n]

        mix = sum((1 - lam) * lam ** (n - 1) * nstep(n) for n in range(1, H))
        out[i] = mix + lam ** (H - 1) * nstep(H)
    return out


def test_lambda_zero_is_td():
    r, v, g = torch.rand(6), torch.rand(6), torch.rand(6)
    V = lambda_returns(r, v, g, 0.0)
    assert torch.allclose(V[:-1], r[:-1] + g[:-1] * v[1:])


def test_lambda_one_hand_recursion():
    r = torch.tensor([1.0, 1.0, 1.0, 0.0])
    v = torch.tensor([0.0, 0.0, 0.0, 10.0])
    V = lambda_returns(r, v, torch.full((4,), 0.9), 1.0)
    assert torch.allclose(V, torch.tensor([10.0, 10.0, 10.0, 10.0]))


def test_lambda_matches_bruteforce():
    rng = np.random.default_rng(0)
    for _ in range(100):
        N = int(rng.integers(2, 17))
        r, v = rng.normal(size=N), rng.normal(size=N)
        g = 0.99 * rng.uniform(0, 1, N)
        got = lambda_returns(*(torch.tensor(x) for x in (r, v, g)), 0.95).numpy()
        assert np.abs(got - _brute_lambda(r, v, g, 0.95)).max() < 1e-6


def test_lambda_length_mismatch():
    with pytest.raises(ContractViolation):
        lambda_returns(torch.zeros(3), torch.zeros(4), torch.zeros(3), 0.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 16), st.integers(0, 10_000), st.floats(0, 1), st.floats(0, 3))
def test_lambda_monotone_in_rewards(N, seed, lam, bump):
    g = torch.Generator().manual_seed(seed)
    r, v = torch.randn(N, generator=g, dtype=D64), torch.randn(N, generator=g, dtype=D64)
    disc = torch.rand(N, generator=g, dtype=D64) * 0.99
    i = int(torch.randint(0, N - 1, (1,), generator=g))
    base = lambda_returns(r, v, disc, lam)
    r2 = r.clone()
    r2[i] += bump
    bumped = lambda_returns(r2, v, disc, lam)
    assert torch.all(bumped[:i + 1] >= base[:i + 1] - 1e-12)
    assert torch.equal(bumped[i + 1:], base[i + 1:])


# -- imagination -------------------------------------------------------------


@pytest.mark.parametrize("L,tau", [(1, 1), (3, 2), (4, 5), (15, 5), (2, 1)])
def test_imagine_lengths(L, tau):
    wm, agent = _agent(L, tau)
    s, z = _start(wm)
    traj = agent.imagine(wm, s, z, gen=None, explore=False)
    assert len(traj.z) == L + tau
    assert len(traj.s) == L + 1
    assert traj.e.shape[0] == traj.actions.shape[0] == L + 1
    assert traj.attn.shape == (L + 1, 3, tau)
    assert torch.allclose(traj.attn.sum(-1), torch.ones(L + 1, 3, dtype=D64))


def test_imagine_no_rollout_uses_state():
    wm, agent = _agent(3, 0)
    s, z = _start(wm)
    traj = agent.imagine(wm, s, z, gen=None, explore=False)
    assert traj.attn is None
    assert torch.equal(traj.e, torch.stack([x.feat for x in traj.s]))


def test_imagine_gate_closed_isolates_free_path():
    wm, agent = _agent(3, 2)
    with torch.no_grad():
        wm.groups["dependency_gate"].weight.zero_()
        wm.groups["dependency_gate"].bias.fill_(-20.0)
    s, z = _start(wm)
    s2 = Latent(s.h, s.mean, s.std, s.sample + 3.0)
    a = agent.imagine(wm, s, z, gen=None, explore=False)
    b = agent.imagine(wm, s2, z, gen=None, explore=False)
    for x, y in zip(a.z, b.z):
        assert torch.equal(x.h, y.h) and torch.equal(x.sample, y.sample)


def test_imagine_gate_open_uses_state():
    wm, agent = _agent(3, 2)
    wm.cfg.gate_mode = "open"
    s, z = _start(wm)
    s2 = Latent(s.h, s.mean, s.std, s.sample + 3.0)
    a = agent.imagine(wm, s, z, gen=None, explore=False)
    b = agent.imagine(wm, s2, z, gen=None, explore=False)
    assert not torch.equal(a.z[1].h, b.z[1].h)


def test_imagine_pure_without_noise():
    wm, agent = _agent(4, 3)
    s, z = _start(wm)
    a = agent.imagine(wm, s, z, gen=None, explore=False)
    b = agent.imagine(wm, s, z, gen=None, explore=False)
    for k in ("e", "actions", "rewards", "values", "returns"):
        assert torch.equal(getattr(a, k), getattr(b, k))


def test_imagine_seeded_noise_reproducible():
    wm, agent = _agent(4, 3)
    s, z = _start(wm)
    a = agent.imagine(wm, s, z, gen=torch.Generator().manual_seed(3))
    b = agent.imagine(wm, s, z, gen=torch.Generator().manual_seed(3))
    assert torch.equal(a.returns, b.returns)


# -- losses ------------------------------------------------------------------


def test_critic_loss_hand_recomputation():
    wm, agent = _agent(3, 2)
    s, z = _start(wm)
    traj = agent.imagine(wm, s, z, gen=None, explore=False)
    traj.rewards = torch.ones_like(traj.rewards)
    traj.returns = torch.full_like(traj.returns, 2.5)
    v = agent.critic(traj.e[:3].detach())
    want = ((v - 2.5) ** 2).sum(0).mean()
    assert agent.critic_loss(traj).item() == pytest.approx(want.item(), abs=1e-12)


def test_actor_gradient_zero_without_action_influence():
    wm, agent = _agent(3, 2, entropy=0.0)
    d, A = wm.cfg.stoch, wm.cfg.action_dim
    with torch.no_grad():
        for lin in (wm.cond.gru.gates, wm.cond.gru.cand):
            lin.weight[:, d:d + A] = 0
    s, z = _start(wm)
    _, a_loss, _ = agent.behavior_losses(wm, s, z, gen=torch.Generator().manual_seed(0))
    a_loss.backward()
    for p in agent.actor.parameters():
        assert p.grad is None or torch.all(p.grad == 0)


def test_gradient_flow_audit():
    wm, agent = _agent(3, 2)
    s, z = _start(wm)
    traj, a_loss, c_loss = agent.behavior_losses(wm, s, z, gen=torch.Generator().manual_seed(0))
    a_loss.backward(retain_graph=True)
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in agent.actor.parameters())
    for p in list(agent.critic.parameters()) + list(wm.parameters()):
        assert p.grad is None
    for p in agent.actor.parameters():
        p.grad = None
    c_loss.backward()
    assert all(p.grad is not None for p in agent.critic.parameters())
    for p in list(agent.actor.parameters()) + list(wm.parameters()):
        assert p.grad is None


def test_critic_targets_are_stopped():
    wm, agent = _agent(3, 2)
    s, z = _start(wm)
    traj = agent.imagine(wm, s, z, gen=None, explore=False)
    loss = agent.critic_loss(traj)
    grads = torch.autograd.grad(loss, list(agent.actor.parameters()), allow_unused=True)
    assert all(g is None for g in grads)


# -- acting ------------------------------------------------------------------


def test_act_deterministic_and_bounded():
    wm, agent = _agent(3, 5)
    s, z = _start(wm, B=10_000)
    with torch.no_grad():
        for p in agent.actor.parameters():
            p.mul_(50)  # push the policy into saturation
    a1 = agent.act(wm, s, z, explore=False)
    a2 = agent.act(wm, s, z, explore=False)
    assert torch.equal(a1, a2)
    assert a1.abs().max() <= 1
    a3 = agent.act(wm, s, z, gen=torch.Generator().manual_seed(0), explore=True)
    assert a3.abs().max() <= 1


def test_act_window_one_uses_current_state():
    wm, agent = _agent(3, 1)
    s, z = _start(wm, B=2)
    e, _ = future_attention(s.feat, z.feat.unsqueeze(-2))
    want, _ = agent.actor(e, None, explore=False)
    assert torch.allclose(agent.act(wm, s, z, explore=False), want.clamp(-1, 1))


def test_filter_tracks_posterior():
    wm, agent = _agent(3, 2)
    filt = Filter(wm)
    img = np.random.default_rng(0).random((8, 8, 3))
    s, z = filt.update(torch.tensor(img))
    assert s.sample.shape == (1, wm.cfg.stoch)
    filt.record_action(torch.tensor([0.5, -0.5]))
    assert filt.prev_action.shape == (1, 2)
