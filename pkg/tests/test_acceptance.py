"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Lines are also collected into an "acceptance criteria" section of the
terminal summary.
"""

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor

import mpmath
import numpy as np
import pytest
import sympy as sp
from scipy import stats

from impactq.config import RunConfig
from impactq.env import CartPoleEnv, CartPoleState, PhysicsParams, accelerations
from impactq.evaluate import evaluate, random_baseline
from impactq.imagination import imagine_coop1, imagine_coop2, imagine_idle, imagine_marginal
from impactq.impact import ImpactParams, Tier, coordination_coefficient, impact_factor, select_tier
from impactq.qnet import NafNetwork, NetworkParams
from impactq.replay import (
    Experience,
    ReplayMemory,
    TerParams,
    macro_batch_size,
    sampling_probabilities,
    temporal_priority,
)
from impactq.trainer import Agent, Trainer, UpdateStats, train


# 1 ----------------------------------------------------------------------------

def _symbolic_accelerations():
    th, thd, f, g, mp_, mc, l = sp.symbols("theta theta_dot f g m_p m_c l", real=True)
    bracket = (-f - mp_ * l * thd**2 * sp.sin(th)) / (mp_ + mc)
    th_dd = (g * sp.sin(th) - sp.cos(th) * bracket) / (l * (sp.Rational(4, 3) - mp_ * sp.cos(th) ** 2 / (mp_ + mc)))
    s_dd = (f + mp_ * l * (thd**2 * sp.sin(th) - th_dd * sp.cos(th))) / (mp_ + mc)
    args = (th, thd, f, g, mp_, mc, l)
    return sp.lambdify(args, th_dd, "mpmath"), sp.lambdify(args, s_dd, "mpmath")


def test_criterion_1_dynamics_oracle(report):
    p = PhysicsParams()
    th_fn, s_fn = _symbolic_accelerations()
    rng = np.random.default_rng(2024)
    th = rng.uniform(-0.21, 0.21, 1000)
    thd = rng.uniform(-3, 3, 1000)
    f = rng.uniform(-10, 10, 1000)
    t0 = time.perf_counter()
    got = [accelerations(a, b, c, p) for a, b, c in zip(th, thd, f)]
    elapsed = time.perf_counter() - t0
    worst = 0.0
    with mpmath.workdps(40):
        consts = [mpmath.mpf(v) for v in (p.g, p.m_pole, p.m_cart, p.l)]
        for (a, b, c), (gt, gs) in zip(zip(th, thd, f), got):
            et = th_fn(mpmath.mpf(a), mpmath.mpf(b), mpmath.mpf(c), *consts)
            es = s_fn(mpmath.mpf(a), mpmath.mpf(b), mpmath.mpf(c), *consts)
            worst = max(worst, float(abs((gt - et) / et)), float(abs((gs - es) / es)))
    report(1, worst < 1e-12 and elapsed < 1.0, f"max rel err {worst:.2e}, runtime {elapsed:.3f}s")


# 2 ----------------------------------------------------------------------------

def _memory(k_cs):
    mem = ReplayMemory(len(k_cs))
    for k in k_cs:
        mem.push(Experience(np.zeros(4), np.zeros(2), 0.0, np.zeros(4), int(k), 0.0, False))
    return mem


def test_criterion_2_ter_distribution(report):
    t0 = time.perf_counter()
    k_now = 100
    ages = np.array([0, 1, 1, 2, 2, 3, 3, 4, 5, 6])
    mem = _memory(k_now - ages)
    probs = sampling_probabilities(temporal_priority(k_now, mem.k_c[:10]))
    params = TerParams(macro_batch=10, mini_batch=1)
    rng = np.random.default_rng(7)
    draws = 100_000
    counts = np.zeros(10)
    for _ in range(draws):
        counts[mem.sample_indices(params, 0.0, k_now, rng)[0]] += 1
    p_stage2 = stats.chisquare(counts, probs * draws).pvalue

    mem = _memory(np.arange(1, 201))
    params = TerParams(macro_batch=256, mini_batch=80)
    hits = np.zeros(200)
    for _ in range(draws):
        hits[mem.sample_indices(params, 1.0, 200, rng)] += 1
    p_uniform = stats.chisquare(hits).pvalue
    elapsed = time.perf_counter() - t0
    report(2, p_stage2 > 0.01 and p_uniform > 0.01 and elapsed < 10.0,
           f"stage-2 p={p_stage2:.3f}, eps=1 uniform p={p_uniform:.3f}, runtime {elapsed:.1f}s")


# 3 ----------------------------------------------------------------------------

def test_criterion_3_macro_batch_schedule(report):
    got = [macro_batch_size(256, 80, e) for e in (0.0, 0.25, 0.5, 0.75, 1.0)]
    report(3, got == [256, 212, 168, 124, 80], f"B_k = {got}")


# 4 ----------------------------------------------------------------------------

def test_criterion_4_imagination_matches_env(report):
    env = CartPoleEnv()
    rng = np.random.default_rng(11)
    mismatches = 0
    for _ in range(1000):
        x = rng.uniform([-2.4, -3, -0.21, -3], [2.4, 3, 0.21, 3])
        u = rng.uniform(-10, 10, 2).tolist()
        i = int(rng.integers(2))
        j = 1 - i
        cases = [
            (imagine_marginal, [u[0], 0.0] if i == 0 else [0.0, u[1]]),
            (imagine_idle, [0.0, u[1]] if i == 0 else [u[0], 0.0]),
            (imagine_coop1, [u[j], u[j]]),
            (imagine_coop2, [u[i], u[i]]),
        ]
        for fn, sub in cases:
            im = fn(x, u, env, i)
            ref = CartPoleEnv()
            ref.start(CartPoleState.from_array(x))
            res = ref.step(sub)
            same = (np.array_equal(im.x_next, res.state.as_array()) and im.r == res.rewards[i]
                    and im.terminal == res.failed)
            mismatches += not same
    report(4, mismatches == 0, f"{mismatches} mismatches over 4000 imagined transitions")


# 5 ----------------------------------------------------------------------------

def test_criterion_5_impact_algebra(report):
    P = ImpactParams()
    rng = np.random.default_rng(5)
    worst_sum = worst_scale = 0.0
    for _ in range(1000):
        u = rng.uniform(-10, 10, int(rng.integers(2, 6))).tolist()
        lam = [impact_factor(i, u) for i in range(len(u))]
        worst_sum = max(worst_sum, abs(math.fsum(lam) - 1.0))
        c = float(rng.uniform(0.01, 100)) * (1 if rng.random() < 0.5 else -1)
        scaled = [c * v for v in u]
        worst_scale = max(worst_scale, max(abs(impact_factor(i, scaled) - lam[i]) for i in range(len(u))))

    def table(lam, psi):
        if lam > P.lambda_high:
            return Tier.HIGH, P.alpha, False
        if lam >= P.lambda_low:
            return (Tier.MID_CONFLICT, P.sigma, True) if psi < 0 else (Tier.MID_COOP, P.alpha, False)
        return Tier.LOW, P.beta, False

    lams = sorted({i / 1000 for i in range(1001)} | {P.lambda_low, P.lambda_high,
                                                     math.nextafter(P.lambda_low, 0), math.nextafter(P.lambda_high, 1)})
    bad = [(lam, psi) for lam in lams for psi in (-1, 0, 1) if select_tier(lam, psi, P) != table(lam, psi)]
    boundary = [select_tier(v, -1, P)[0] for v in (P.lambda_low, P.lambda_high)]
    psi_ok = coordination_coefficient(0, [2.0, -3.0]) == -1 and coordination_coefficient(0, [2.0, 3.0]) == 1
    ok = worst_sum < 1e-12 and worst_scale < 1e-12 and not bad and psi_ok and boundary == [Tier.MID_CONFLICT] * 2
    report(5, ok, f"sum err {worst_sum:.1e}, scale err {worst_scale:.1e}, "
                  f"{len(bad)} tier mismatches over {len(lams) * 3} cases")


# 6 ----------------------------------------------------------------------------

def test_criterion_6_naf_shape_and_gradients(report):
    cfg = NetworkParams()
    net = NafNetwork(cfg, rng=np.random.default_rng(6))
    rng = np.random.default_rng(60)
    xs = rng.uniform([-2.4, -2, -0.21, -2], [2.4, 2, 0.21, 2], size=(100, 4))
    res = 1e-3 * cfg.u_max
    grid = np.arange(-cfg.u_max, cfg.u_max + res / 2, res)
    shape_bad = 0
    for x in xs:
        q = net.q_value(np.repeat(x[None], grid.size, 0), grid)
        mu, v = float(net.mu(x)), float(net.value(x))
        concave = np.all(np.diff(q, 2) <= 1e-12)
        vertex_ok = abs(grid[np.argmax(q)] - np.clip(mu, -cfg.u_max, cfg.u_max)) <= res
        top_ok = q.max() <= v + 1e-12 and float(net.q_value(x, mu)) == v
        greedy_ok = abs(net.greedy_control(x) - grid[np.argmax(q)]) <= res
        shape_bad += not (concave and vertex_ok and top_ok and greedy_ok)

    small = NetworkParams(hidden=(5, 4, 3), dropout=0.0)
    fd_net = NafNetwork(small, rng=np.random.default_rng(3))
    fx = rng.uniform(-1, 1, size=(6, 4))
    fu = rng.uniform(-5, 5, 6)
    fy = fd_net.q_value(fx, fu) + np.array([0.2, -0.4, 1.5, -3.0, 0.7, 0.1])
    _, grads = fd_net.loss_and_grads(fx, fu, fy, None)
    h, worst = 1e-6, 0.0
    for p, g in zip(fd_net.params, grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp, _ = fd_net.loss_and_grads(fx, fu, fy, None)
            p[idx] = old - h
            lm, _ = fd_net.loss_and_grads(fx, fu, fy, None)
            p[idx] = old
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-6))
    report(6, shape_bad == 0 and worst < 1e-4,
           f"{shape_bad}/100 states violate the quadratic shape, max FD rel err {worst:.2e}")


# 7 ----------------------------------------------------------------------------

SCALED = {"train.episodes": 300, "train.max_steps": 500, "train.checkpoint_every": 0}
SEEDS = (0, 1, 2)


def _scaled_run(seed, out):
    cfg = RunConfig().with_overrides({**SCALED, "seed": seed})
    res = train(cfg, out)
    tail = res.episodes[-50:]
    return (float(np.mean([m.length for m in tail])), float(np.mean([m.returns[1] for m in tail])), str(res.output_dir))


@pytest.mark.slow
def test_criterion_7_scaled_learning(report, tmp_path):
    cfg = RunConfig().with_overrides(SCALED)
    base = random_baseline(cfg, episodes=2000, seed=12345)
    jobs = min(len(SEEDS), os.cpu_count() or 1)
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        runs = list(pool.map(_scaled_run, SEEDS, [tmp_path / f"seed_{s}" for s in SEEDS]))
    mean_len = float(np.mean([r[0] for r in runs]))
    mean_r2 = float(np.mean([r[1] for r in runs]))
    greedy = []
    for _, _, out in runs:
        nets = [NafNetwork.load(p) for p in sorted((tmp_path / out / "checkpoints" / "final").glob("agent_*.ckpt"))]
        greedy.append(evaluate(nets, cfg, 20, seed=99).mean_length)
    ratio = mean_len / base.mean_length
    detail = (f"final-50 length {mean_len:.1f} vs random {base.mean_length:.1f} (x{ratio:.2f}, need 3); "
              f"agent-2 return {mean_r2:.1f} vs random {base.mean_return[1]:.1f}; "
              f"per seed {[round(r[0], 1) for r in runs]}; greedy eval lengths {[round(g, 1) for g in greedy]}")
    report(7, ratio >= 3.0 and mean_r2 > base.mean_return[1], detail)


# 8 ----------------------------------------------------------------------------

def test_criterion_8_determinism(report, tmp_path):
    cfg = RunConfig().with_overrides({"train.episodes": 5, "seed": 3})
    t0 = time.perf_counter()
    train(cfg, tmp_path / "a")
    train(cfg, tmp_path / "b")
    elapsed = time.perf_counter() - t0
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    b = (tmp_path / "b" / "metrics.csv").read_bytes()
    report(8, a == b and len(a.splitlines()) == 6 and elapsed < 60,
           f"metrics identical={a == b}, runtime {elapsed:.1f}s")


# 9 ----------------------------------------------------------------------------

def test_criterion_9_update_accounting(report, monkeypatch):
    cfg = RunConfig().with_overrides({"train.episodes": 20, "seed": 9})
    tr = Trainer(cfg)
    net_updates = [0] * len(tr.agents)
    step_failures = 0
    real_learn = Agent.learn

    def learn(self, model, k_now):
        nonlocal step_failures
        before = net_updates[self.index]
        stats_ = real_learn(self, model, k_now)
        done = net_updates[self.index] - before
        expected = stats_.sampled + stats_.marginal + 3 * stats_.coordination
        tiers = stats_.high + stats_.mid_coop + stats_.mid_conflict + stats_.low
        step_failures += not (done == expected == stats_.updates and tiers == stats_.sampled
                              and stats_.coordination <= stats_.mid_conflict)
        return stats_

    monkeypatch.setattr(Agent, "learn", learn)
    for a in tr.agents:
        real_update = a.net.update

        def update(x, u, y, lr, rng=None, per_sample=False, _real=real_update, _i=a.index):
            net_updates[_i] += len(y)
            return _real(x, u, y, lr, rng=rng, per_sample=per_sample)

        a.net.update = update
    totals = [UpdateStats() for _ in tr.agents]
    for _ in range(20):
        m = tr.run_episode()
        for t, s in zip(totals, m.stats):
            t.add(s)
    ok = step_failures == 0 and [t.updates for t in totals] == net_updates and all(t.reconciles() for t in totals)
    summary = "; ".join(f"agent {i + 1}: {t.updates} = {t.sampled} + {t.marginal} + 3*{t.coordination}"
                        for i, t in enumerate(totals))
    report(9, ok, f"{step_failures} per-step mismatches; {summary}")
