"""Acceptance gate: twelve checks, one printed verdict line each.

Every test prints `acceptance NN <name>: PASS|FAIL (<evidence>)` outside
pytest's capture, so the verdict lines land in piped logs even when the
suite is green. Checks 08-11 execute the shipped experiment configs with
temporary output directories; the resulting reports embed their resolved
configuration, so any number printed here is reproducible from the repo.
"""
import math
import time
from itertools import product
from pathlib import Path

import numpy as np
import pytest

from gridplan import numerics as nm
from gridplan.config import load_config, parse_config_text
from gridplan.experiments import make_env, open_grid, run_suite
from gridplan.gridworld import RewardConfig, compute_reward
from gridplan.numerics import LstmCellParams, Tensor, backward
from gridplan.planners import astar, bfs, dijkstra
from gridplan.policy import ExplorationSchedule
from gridplan.qnet import QNetConfig, QNetParams, forward
from gridplan.replay import ReplayBuffer, Transition
from gridplan.trainer import run_training

from helpers import fd_gradient, rel_error, relaxation_distances

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def verdict(capsys, num, name, ok, detail):
    line = f"acceptance {num:02d} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    with capsys.disabled():
        print(line)
    assert ok, line


# -- 01: gradients match central finite differences ---------------------------


def rand_tensor(rng, *shape, away_from_zero=False):
    data = rng.uniform(-1.0, 1.0, shape)
    if away_from_zero:
        data = np.sign(data) * (0.1 + 0.9 * np.abs(data))
    return Tensor(data, requires_grad=True)


def layer_cases(rng):
    """(name, output-producing callable, tensors to check) per layer op."""
    a23, b23 = rand_tensor(rng, 2, 3), rand_tensor(rng, 2, 3)
    b3 = rand_tensor(rng, 3)
    m34 = rand_tensor(rng, 3, 4)
    x24 = rand_tensor(rng, 2, 4)
    x34 = rand_tensor(rng, 3, 4)
    x26 = rand_tensor(rng, 2, 6)
    x234 = rand_tensor(rng, 2, 3, 4)
    x45 = rand_tensor(rng, 4, 5)
    img = rand_tensor(rng, 2, 3, 4, 4)
    ker = rand_tensor(rng, 5, 3)
    tseq = rand_tensor(rng, 2, 5, 3)
    relu_in = rand_tensor(rng, 2, 3, away_from_zero=True)
    lstm = LstmCellParams(3, 4, rng)
    lx, lh, lc = (rand_tensor(rng, 2, 3), rand_tensor(rng, 2, 4),
                  rand_tensor(rng, 2, 4))
    q = rand_tensor(rng, 2, 3, 4)
    k, v = rand_tensor(rng, 2, 5, 4), rand_tensor(rng, 2, 5, 4)
    wo = rand_tensor(rng, 4, 4)
    return [
        ("add", lambda: a23 + b3, [a23, b3]),
        ("sub", lambda: a23 - b23, [a23, b23]),
        ("mul", lambda: a23 * b3, [a23, b3]),
        ("matmul", lambda: nm.matmul(a23, m34), [a23, m34]),
        ("sigmoid", lambda: nm.sigmoid(a23), [a23]),
        ("tanh", lambda: nm.tanh(a23), [a23]),
        ("relu", lambda: nm.relu(relu_in), [relu_in]),
        ("softmax", lambda: nm.softmax(x24, axis=-1), [x24]),
        ("tsum", lambda: nm.tsum(x34, axis=0), [x34]),
        ("tmean", lambda: nm.tmean(x34, axis=1), [x34]),
        ("reshape", lambda: nm.reshape(x26, (3, 4)), [x26]),
        ("transpose", lambda: nm.transpose(x234, (2, 0, 1)), [x234]),
        ("concat", lambda: nm.concat([a23, x24], axis=1), [a23, x24]),
        ("stack", lambda: nm.stack([a23, b23], axis=0), [a23, b23]),
        ("getitem", lambda: x45[1:3, ::2], [x45]),
        ("conv1x1", lambda: nm.conv1x1(img, ker), [img, ker]),
        ("downsample", lambda: nm.downsample(tseq, 2), [tseq]),
        ("lstm_cell", lambda: nm.concat(list(nm.lstm_cell(lx, lh, lc, lstm)),
                                        axis=1),
         [lstm.w, lstm.b, lx, lh, lc]),
        ("attention", lambda: nm.multi_head_attention(q, k, v, heads=2,
                                                      w_out=wo),
         [q, k, v, wo]),
    ]


def projection_loss(make_out, rng):
    out = make_out()
    proj = Tensor(rng.normal(size=out.data.shape))

    def loss():
        return nm.tsum(make_out() * proj)
    return loss


def max_grad_error(loss_fn, tensors):
    nm.zero_grads(tensors)
    backward(loss_fn())
    worst = 0.0
    for t in tensors:
        fd = fd_gradient(lambda: loss_fn().item(), t.data)
        worst = max(worst, rel_error(t.grad, fd))
    return worst


def test_criterion_01_gradient_suite(capsys):
    t0 = time.monotonic()
    worst, worst_name = 0.0, ""
    for instance in range(20):
        rng = np.random.default_rng(1000 + instance)
        for name, make_out, tensors in layer_cases(rng):
            err = max_grad_error(projection_loss(make_out, rng), tensors)
            if err > worst:
                worst, worst_name = err, name

    qcfg = QNetConfig(height=4, width=4, hidden_size=6, heads=2, seq_len=3,
                      embed_channels=2, downsample=2)
    for instance in range(20):
        rng = np.random.default_rng(2000 + instance)
        params = QNetParams(qcfg, rng)
        for t in (params.value_w2, params.advantage_w2, params.weight_w2):
            t.data[...] = rng.uniform(-0.5, 0.5, t.data.shape)
        obs = rng.random((1, qcfg.seq_len, qcfg.in_channels, 4, 4))
        names = sorted(params.named())
        picks = {names[instance % len(names)],
                 names[(instance + len(names) // 2) % len(names)]}

        def qnet_loss():
            q_vals, _ = forward(params, obs)
            return nm.tsum(q_vals * q_vals)

        for pick in picks:
            tensor = params.named()[pick]
            err = max_grad_error(qnet_loss, [tensor])
            if err > worst:
                worst, worst_name = err, f"qnet.{pick}"
    elapsed = time.monotonic() - t0
    verdict(capsys, 1, "gradient-suite",
            worst < 1e-4 and elapsed < 60.0,
            f"max rel err {worst:.2e} at {worst_name}, {elapsed:.1f}s")


# -- 02: grid planners are cost-equal and oracle-optimal -----------------------


def planner_costs(occ, start, goal):
    return [astar(occ, start, goal).cost, dijkstra(occ, start, goal).cost,
            bfs(occ, start, goal).cost]


def test_criterion_02_planner_optimality(capsys):
    t0 = time.monotonic()
    checked, bad = 0, 0

    for bits in range(512):  # every 3x3 occupancy pattern, all free pairs
        occ = np.array([(bits >> i) & 1 for i in range(9)],
                       dtype=bool).reshape(3, 3)
        free = [(x, y) for y in range(3) for x in range(3) if not occ[y, x]]
        dists = {c: relaxation_distances(occ, c) for c in free}
        for s, g in product(free, free):
            if s == g:
                continue
            expect = dists[s][g[1], g[0]]
            expect = math.inf if math.isinf(expect) else expect
            if any(c != expect for c in planner_costs(occ, s, g)):
                bad += 1
            checked += 1

    rng = np.random.default_rng(7)
    for bits in range(65536):  # every 4x4 pattern, one sampled free pair
        occ = np.array([(bits >> i) & 1 for i in range(16)],
                       dtype=bool).reshape(4, 4)
        free = [(x, y) for y in range(4) for x in range(4) if not occ[y, x]]
        if len(free) < 2:
            continue
        s, g = (free[i] for i in rng.choice(len(free), size=2, replace=False))
        expect = relaxation_distances(occ, s)[g[1], g[0]]
        if any(c != expect for c in planner_costs(occ, s, g)):
            bad += 1
        checked += 1

    for trial in range(500):  # random 20x20 maps
        rng = np.random.default_rng(10_000 + trial)
        occ = rng.random((20, 20)) < 0.3
        free = [(x, y) for y in range(20) for x in range(20) if not occ[y, x]]
        s, g = (free[i] for i in rng.choice(len(free), size=2, replace=False))
        expect = relaxation_distances(occ, s)[g[1], g[0]]
        if any(c != expect for c in planner_costs(occ, s, g)):
            bad += 1
        checked += 1

    elapsed = time.monotonic() - t0
    verdict(capsys, 2, "planner-optimality",
            bad == 0 and elapsed < 60.0,
            f"{checked} instances, {bad} discrepancies, {elapsed:.1f}s")


# -- 03: exploration schedule closed forms ------------------------------------


def test_criterion_03_schedule_exactness(capsys):
    mp = pytest.importorskip("mpmath")
    mp.mp.dps = 60
    sched = ExplorationSchedule(eps_min=0.1, eps_max=0.9, decay_rate=1e-4,
                                temp_initial=1.0, temp_decay=0.99,
                                temp_floor=0.05)
    worst = 0.0
    for t in (0, 1, 10 ** 3, 10 ** 6):
        eps_ref = mp.mpf("0.1") + mp.mpf("0.8") * mp.e ** (-mp.mpf("1e-4") * t)
        temp_ref = max(mp.mpf("0.05"), mp.mpf("0.99") ** t)
        worst = max(worst,
                    abs(sched.epsilon_at(t) - float(eps_ref)),
                    abs(sched.temperature_at(t) - float(temp_ref)))
    verdict(capsys, 3, "schedule-exactness", worst < 1e-12,
            f"max abs err {worst:.2e} over t in {{0, 1, 1e3, 1e6}}")


# -- 04: replay sampling follows priorities -----------------------------------


def make_transition(rng, reward=0.0, action=0):
    frames = (rng.random((2, 4, 4, 4)) > 0.5).astype(np.uint8)
    return Transition(frames=frames, action=action, reward=reward,
                      next_frame=frames[-1], done=False,
                      h_t=rng.random(4), h_next=rng.random(4))


def test_criterion_04_per_statistics(capsys):
    stats = pytest.importorskip("scipy.stats")
    rng = np.random.default_rng(11)
    buf = ReplayBuffer(capacity=16)
    ids = [buf.push(make_transition(rng), td_error=0.2 * (i + 1))
           for i in range(16)]
    draws = 100_000
    counts = np.zeros(16)
    for _ in range(draws // 4):
        _, picked, _ = buf.sample(4, beta=0.4, rng=rng)
        for pid in picked:
            counts[ids.index(pid)] += 1
    probs = buf.priorities / buf.priorities.sum()
    expected = probs * draws
    sigma = np.sqrt(draws * probs * (1.0 - probs))
    pulls = np.abs(counts - expected) / sigma
    chi2 = stats.chisquare(counts, expected)
    ok = bool(pulls.max() < 3.0 and chi2.pvalue > 0.01)
    verdict(capsys, 4, "per-statistics", ok,
            f"max pull {pulls.max():.2f} sigma, chi2 p {chi2.pvalue:.3f}")


# -- 05: reward hand cases -----------------------------------------------------


def test_criterion_05_reward_cases(capsys):
    cfg = RewardConfig()  # weights 0.4 / 0.3 / 0.3, eta 1, beta 0.5
    straight = ((1, 0), (1, 0), (1, 0))
    cases = [
        # one step of clean progress: 0.4 * 1 + step bonus 0.2
        (dict(d_prev=5, d_now=4, collided=False, reached_goal=False,
              a_t=(1, 0), a_tm1=(1, 0), a_tm2=(1, 0)), 0.6),
        # collision while standing still: 0.3 * (-5.0) = -1.5
        (dict(d_prev=4, d_now=4, collided=True, reached_goal=False,
              a_t=(0, 0), a_tm1=(0, 0), a_tm2=(0, 0), moved=False), -1.5),
        # goal step: progress + bonus + 200
        (dict(d_prev=1, d_now=0, collided=False, reached_goal=True,
              a_t=(1, 0), a_tm1=(1, 0), a_tm2=(1, 0)), 200.6),
        # right-angle turn: jerk (1,-1), penalty 0.3 * 0.5 * sqrt(2)
        (dict(d_prev=5, d_now=4, collided=False, reached_goal=False,
              a_t=(1, 0), a_tm1=(0, 1), a_tm2=(0, 1)),
         0.6 - 0.15 * math.sqrt(2.0)),
        # reversal while losing ground: jerk (-2,0)
        (dict(d_prev=4, d_now=5, collided=False, reached_goal=False,
              a_t=(-1, 0), a_tm1=(1, 0), a_tm2=(1, 0)),
         -0.4 + 0.2 - 0.15 * 2.0),
        # blocked diagonal jerk with collision, no move bonus
        (dict(d_prev=3, d_now=3, collided=True, reached_goal=False,
              a_t=(0, 0), a_tm1=(0, 1), a_tm2=(1, 0), moved=False),
         -1.5 - 0.15 * math.hypot(-1, -1)),
    ]
    del straight
    worst = max(abs(compute_reward(cfg=cfg, **kw) - expected)
                for kw, expected in cases)
    verdict(capsys, 5, "reward-cases", worst < 1e-12,
            f"{len(cases)} hand cases, max abs err {worst:.2e}")


# -- 06: weighted dueling identity ---------------------------------------------


def test_criterion_06_dueling_identity(capsys):
    qcfg = QNetConfig(height=5, width=5, hidden_size=8, heads=2, seq_len=4,
                      embed_channels=3, downsample=2)
    rng = np.random.default_rng(21)
    params = QNetParams(qcfg, rng)
    for t in (params.value_w2, params.advantage_w2, params.weight_w2):
        t.data[...] = rng.uniform(-0.5, 0.5, t.data.shape)
    obs = rng.random((100, qcfg.seq_len, qcfg.in_channels, 5, 5))
    q, diag = forward(params, obs)
    value = diag["value"].data
    weights = diag["weights"].data
    adv = diag["advantage"].data
    identity_err = np.abs(q.data - value - weights * adv).max()
    weight_sum_err = np.abs(weights.sum(axis=-1) - 1.0).max()
    ok = bool(identity_err == 0.0 and weight_sum_err < 1e-12)
    verdict(capsys, 6, "dueling-identity", ok,
            f"100 states, identity err {identity_err:.1e}, "
            f"weight sum err {weight_sum_err:.1e}")


# -- 07: training determinism ---------------------------------------------------


DETERM_INI = """
[experiment]
mode = train
[map]
family = open
width = 6
height = 6
[network]
hidden_size = 8
heads = 2
embed_channels = 3
seq_len = 4
downsample = 2
[train]
total_steps = 10000
warmup_steps = 200
batch_size = 16
train_every = 4
sync_period = 100
optimizer = adam
reward_scale = 0.005
[replay]
capacity = 4000
"""


def run_once():
    cfg = parse_config_text(DETERM_INI)
    grid_map = open_grid(6, 6)
    qcfg = QNetConfig(height=6, width=6, hidden_size=8, heads=2, seq_len=4,
                      embed_channels=3, downsample=2)
    params = QNetParams(qcfg, np.random.default_rng(5))
    result = run_training(make_env(grid_map, cfg), params, cfg.train,
                          schedule=cfg.exploration)
    return result.log_csv()


def test_criterion_07_determinism(capsys):
    t0 = time.monotonic()
    first = run_once()
    second = run_once()
    elapsed = time.monotonic() - t0
    ok = first == second and len(first) > 0
    verdict(capsys, 7, "determinism", ok,
            f"10k-step log, {len(first)} bytes, byte-identical: "
            f"{first == second}, {elapsed:.0f}s")


# -- 08: learnability on a small static map ------------------------------------


def test_criterion_08_learnability(capsys, tmp_path):
    t0 = time.monotonic()
    cfg = load_config(CONFIGS / "train_small.ini",
                      overrides={"experiment.output_dir": str(tmp_path)})
    report = run_suite(cfg)
    elapsed = time.monotonic() - t0
    runs = {key: info for key, info in report["training"].items()}
    srs = {key: info["best_sr"] for key, info in runs.items()}
    steps = {key: info["env_steps"] for key, info in runs.items()}
    ok = (len(runs) == 3
          and all(sr >= 0.90 for sr in srs.values())
          and all(n <= 20_000 for n in steps.values()))
    detail = ", ".join(f"s{info['seed']}: SR {info['best_sr']:.3f} "
                       f"@{info['env_steps']} steps"
                       for info in runs.values())
    verdict(capsys, 8, "learnability", ok, f"{detail}, {elapsed:.0f}s")


# -- 09: ablation ordering -------------------------------------------------------


APPROX_TOL = 0.05  # slack for the approximately-ordered middle of the ranking


def test_criterion_09_ablation_ordering(capsys, tmp_path):
    t0 = time.monotonic()
    cfg = load_config(CONFIGS / "ablation.ini",
                      overrides={"experiment.output_dir": str(tmp_path)})
    report = run_suite(cfg)
    elapsed = time.monotonic() - t0
    sr = {v: report["summaries"][v]["mean_sr"]
          for v in ("full", "A1", "A2", "A3")}
    ok = (sr["full"] > sr["A1"] and sr["full"] > sr["A2"]
          and sr["full"] > sr["A3"]
          and sr["A1"] >= sr["A2"] - APPROX_TOL
          and sr["A2"] >= sr["A3"] - APPROX_TOL)
    detail = (f"full {sr['full']:.3f} > A1 {sr['A1']:.3f} "
              f">~ A2 {sr['A2']:.3f} >~ A3 {sr['A3']:.3f}, {elapsed:.0f}s")
    verdict(capsys, 9, "ablation-ordering", ok, detail)


# -- 10 and 11 share one density-sweep report -----------------------------------


@pytest.fixture(scope="module")
def sweep_report(tmp_path_factory):
    outdir = tmp_path_factory.mktemp("sweep")
    cfg = load_config(CONFIGS / "density_sweep.ini",
                      overrides={"experiment.output_dir": str(outdir)})
    t0 = time.monotonic()
    report = run_suite(cfg)
    report["_elapsed"] = time.monotonic() - t0
    return report


def test_criterion_10_dynamic_trend(capsys, sweep_report):
    sr = {label: s["mean_sr"]
          for label, s in sweep_report["summaries"].items()}
    ok = (sr["qagent@d15"] > sr["astar@d15"]
          and sr["qagent@d15"] > sr["rrt@d15"]
          and sr["adaptive_astar@d15"] > sr["astar@d15"])
    detail = (f"qagent {sr['qagent@d15']:.3f} > astar {sr['astar@d15']:.3f}, "
              f"qagent > rrt {sr['rrt@d15']:.3f}, "
              f"adaptive {sr['adaptive_astar@d15']:.3f} > astar, "
              f"{sweep_report['_elapsed']:.0f}s")
    verdict(capsys, 10, "dynamic-trend", ok, detail)


def test_criterion_11_density_monotonicity(capsys, sweep_report):
    tags = ("d05", "d15", "d25", "d35")
    algos = sorted({label.split("@")[0]
                    for label in sweep_report["summaries"]})
    violations = []
    for algo in algos:
        cells = [sweep_report["summaries"][f"{algo}@{tag}"] for tag in tags]
        for lo, hi in zip(cells, cells[1:]):
            slack = max(lo.get("sr_std", 0.0), hi.get("sr_std", 0.0))
            if hi["mean_sr"] > lo["mean_sr"] + slack + 1e-12:
                violations.append(
                    f"{algo}: {lo['mean_sr']:.3f} -> {hi['mean_sr']:.3f} "
                    f"(slack {slack:.3f})")
    trend = "; ".join(
        f"{algo} " + "->".join(
            f"{sweep_report['summaries'][f'{algo}@{tag}']['mean_sr']:.2f}"
            for tag in tags)
        for algo in algos)
    verdict(capsys, 11, "density-monotonicity", not violations,
            trend if not violations else "; ".join(violations))


# -- 12: classical path-quality trend --------------------------------------------


def test_criterion_12_path_quality(capsys, tmp_path):
    t0 = time.monotonic()
    cfg = load_config(CONFIGS / "static_suite.ini",
                      overrides={"experiment.output_dir": str(tmp_path)})
    report = run_suite(cfg)
    elapsed = time.monotonic() - t0
    ratio = {algo: report["summaries"][algo]["mean_ratio"]
             for algo in ("astar", "dijkstra", "bfs", "rrt", "rrt_star")}
    ok = (ratio["astar"] == 1.0 and ratio["dijkstra"] == 1.0
          and ratio["bfs"] == 1.0
          and ratio["rrt"] > 1.3 and ratio["rrt_star"] > 1.3)
    detail = (f"grid planners {ratio['astar']}/{ratio['dijkstra']}/"
              f"{ratio['bfs']}, rrt {ratio['rrt']:.3f}, "
              f"rrt_star {ratio['rrt_star']:.3f}, {elapsed:.0f}s")
    verdict(capsys, 12, "path-quality", ok, detail)
