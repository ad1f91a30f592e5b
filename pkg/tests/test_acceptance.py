"""Acceptance suite: one or more tests per criterion, summarized as PASS/FAIL lines.

The desk-scale comparison (criteria 8 and 9) trains nine policies and takes
roughly ten minutes on one core; deselect it with ``-m "not slow"``.
"""

import csv
import itertools
import json
import math
import shutil
import time

import numpy as np
import pytest

from rsclvla.analysis import cknna, dump_embeddings, linear_cka
from rsclvla.cli import main
from rsclvla.config import TrainConfig
from rsclvla.contrastive import lambda_schedule, rscl_loss, soft_dtw_batch, soft_weights
from rsclvla.flowmatch import euler_integrate, interpolate, sample_timestep
from rsclvla.synthenv import generate_dataset, write_dataset
from rsclvla.tensor import Tensor
from rsclvla.trainer import evaluate_state, init_state, train

criterion = pytest.mark.criterion


def _measured(record, text):
    record("measured", text)


# ---------------------------------------------------------------- 1


@criterion(1, "gradient oracle: fm / rscl / total vs finite differences, 5 seeds, B=4")
def test_gradient_oracle(tmp_path, record_property):
    out = tmp_path / "gc.csv"
    t0 = time.perf_counter()
    code = main(["gradcheck", "--seed", "0", "--n-seeds", "5", "--batch", "4", "--coords", "8", "--out", str(out)])
    elapsed = time.perf_counter() - t0
    rows = list(csv.DictReader(out.open()))
    worst = max(float(r["max_rel_err"]) for r in rows)
    _measured(record_property, f"max rel err {worst:.2e}, {elapsed:.0f} s")
    assert code == 0
    assert sorted({(int(r["seed"]), r["loss"]) for r in rows}) == sorted(
        itertools.product(range(5), ("fm", "rscl", "total"))
    )
    assert worst < 1e-4
    assert elapsed < 60


# ---------------------------------------------------------------- 2


@criterion(2, "soft-weight suite")
def test_soft_weight_suite():
    rng = np.random.default_rng(0)
    for _ in range(200):
        b, d = rng.integers(1, 12), rng.integers(1, 5)
        q, beta = rng.normal(size=(b, d)) * rng.uniform(0.1, 10), rng.uniform(0.05, 5)
        w = soft_weights(q, beta)
        assert np.abs(w.sum(axis=1) - 1).max() <= 1e-9
        assert (np.diag(w) == w.max(axis=1)).all()
        c = rng.uniform(0.1, 10)
        np.testing.assert_allclose(soft_weights(c * q, c * beta), w, atol=1e-12)
    np.testing.assert_allclose(soft_weights(np.ones((5, 3)), 1.0), np.full((5, 5), 0.2), atol=1e-12)
    np.testing.assert_allclose(soft_weights(np.array([[0.0], [1.0]]), 1.0)[0], [0.73106, 0.26894], atol=1e-5)


# ---------------------------------------------------------------- 3


def _vanilla_infonce(z, za, tau):
    total = 0.0
    for i in range(len(z)):
        sims = [
            sum(a * b for a, b in zip(z[i], v)) / math.sqrt(sum(a * a for a in z[i]) * sum(b * b for b in v)) / tau
            for v in za
        ]
        total += -sims[i] + math.log(sum(math.exp(s) for s in sims))
    return total


@criterion(3, "identity weights reduce the loss to vanilla InfoNCE")
def test_infonce_reduction():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        b, d = rng.integers(1, 9), rng.integers(2, 17)
        z, za, tau = rng.normal(size=(b, d)), rng.normal(size=(b, d)), rng.uniform(0.1, 2.0)
        got = rscl_loss(Tensor(z), Tensor(za), np.eye(b), tau).item()
        worst = max(worst, abs(got - _vanilla_infonce(z.tolist(), za.tolist(), tau)))
    assert worst <= 1e-9


# ---------------------------------------------------------------- 4


def _alignment_paths(la, lb):
    """Every monotone alignment from (0, 0) to (la-1, lb-1), by depth-first enumeration."""
    paths, stack = [], [[(0, 0)]]
    while stack:
        path = stack.pop()
        i, j = path[-1]
        if (i, j) == (la - 1, lb - 1):
            paths.append(path)
            continue
        for ni, nj in ((i + 1, j), (i, j + 1), (i + 1, j + 1)):
            if ni < la and nj < lb:
                stack.append(path + [(ni, nj)])
    return paths


@criterion(4, "soft-DTW against brute-force alignments")
def test_soft_dtw_oracle():
    worst = 0.0
    for la, lb in itertools.product(range(1, 6), repeat=2):
        a = np.array(list(itertools.product((0.0, 1.0, 2.0), repeat=la)))
        b = np.array(list(itertools.product((0.0, 1.0, 2.0), repeat=lb)))
        pa, pb = np.repeat(a, len(b), axis=0), np.tile(b, (len(a), 1))
        cost = (pa[:, :, None] - pb[:, None, :]) ** 2
        exact = np.full(len(pa), np.inf)
        for path in _alignment_paths(la, lb):
            ii, jj = zip(*path)
            exact = np.minimum(exact, cost[:, list(ii), list(jj)].sum(axis=1))
        worst = max(worst, np.abs(soft_dtw_batch(pa[..., None], pb[..., None], 1e-6) - exact).max())
        assert (soft_dtw_batch(pa[..., None], pb[..., None], 10.0) <= exact + 1e-12).all()
    assert worst <= 1e-3


# ---------------------------------------------------------------- 5


@criterion(5, "flow-matching suite")
def test_flow_matching_suite(record_property):
    rng = np.random.default_rng(2)
    a, eps = rng.normal(size=(3, 8, 3)), rng.normal(size=(3, 8, 3))
    assert np.array_equal(interpolate(a, eps, np.zeros(3)).a_s, eps)
    assert np.array_equal(interpolate(a, eps, np.ones(3)).a_s, a)
    s = sample_timestep(np.random.default_rng(3), size=100_000)
    _measured(record_property, f"timestep mean {s.mean():.4f}")
    assert s.min() >= 0.0 and s.max() <= 0.999
    assert abs(s.mean() - 0.3996) <= 0.005
    out = euler_integrate(lambda x, t: x - a, a.shape, 1, np.random.default_rng(4))
    np.testing.assert_allclose(out, a, atol=1e-12)


# ---------------------------------------------------------------- 6


@criterion(6, "lambda schedule endpoints")
def test_lambda_endpoints():
    for mx in (2, 1000, 3000):
        assert lambda_schedule(0, mx) == pytest.approx(1.0, abs=1e-12)
        assert lambda_schedule(mx, mx) == pytest.approx(0.0, abs=1e-12)
        assert lambda_schedule(mx // 2, mx) == pytest.approx(0.5, abs=1e-12)


# ---------------------------------------------------------------- 7


@criterion(7, "alignment-metric suite")
def test_alignment_metric_suite(record_property):
    rng = np.random.default_rng(5)
    x = rng.normal(size=(200, 8))
    assert abs(linear_cka(x, x) - 1) <= 1e-9
    assert abs(cknna(x, x, 10) - 1) <= 1e-9
    rot, _ = np.linalg.qr(rng.normal(size=(8, 8)))
    y = np.tanh(x[:, :4]) + 0.1 * rng.normal(size=(200, 4))
    assert abs(linear_cka(x @ rot, y) - linear_cka(x, y)) <= 1e-9
    assert abs(cknna(x @ rot, y, 10) - cknna(x, y, 10)) <= 1e-9
    g1, g2 = rng.normal(size=(500, 8)), rng.normal(size=(500, 8))
    cka, ck = linear_cka(g1, g2), cknna(g1, g2, 10)
    _measured(record_property, f"independent CKA {cka:.3f}, CKNNA {ck:.3f}")
    assert cka < 0.1 and ck < 0.2


# ---------------------------------------------------------------- 8 and 9

SEEDS = (0, 1, 2)
EPISODES = 200
ARMS = {
    "fm": {"supervision": "none"},
    "rscl": {"supervision": "proprio_state"},
    "cl": {"supervision": "one_hot", "lambda_schedule": "off"},
}


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    base = TrainConfig(dataset=str(root / "demos.jsonl"), max_steps=3000, eval_every=0, checkpoint_every=0)
    t0 = time.perf_counter()
    ds = generate_dataset(200, base.env, base.data_seed)
    write_dataset(ds, base.dataset)
    results = {}
    for seed in SEEDS:
        for arm, kw in ARMS.items():
            cfg = base.replace(train_seed=seed, out_dir=str(root / f"{arm}{seed}"), **kw)
            results[arm, seed] = evaluate_state(train(cfg, ds).state, cfg, ds, episodes=EPISODES)
        cfg = base.replace(train_seed=seed)
        dump = dump_embeddings(init_state(cfg).params, cfg.model, ds, cfg.analysis_window, cfg.analysis_per_task)
        results["init", seed] = {"cknna_proprio": cknna(dump.x, dump.q, cfg.cknna_k)}
    elapsed = time.perf_counter() - t0
    print("\ndesk-scale results:")
    for key, val in results.items():
        print(" ", key, json.dumps(val))
    return results, elapsed


def _table(results, metric, arms):
    return "; ".join(f"{a} " + "/".join(f"{results[a, s][metric]:.3f}" for s in SEEDS) for a in arms)


@pytest.mark.slow
@criterion(8, "desk-scale success: RS-CL >= FM-only on mean, >= vanilla CL on 2 of 3 seeds")
def test_desk_scale_success(desk, record_property):
    results, elapsed = desk
    _measured(record_property, _table(results, "success_rate", ("fm", "rscl", "cl")) + f"; {elapsed / 60:.1f} min")
    succ = {a: np.array([results[a, s]["success_rate"] for s in SEEDS]) for a in ARMS}
    assert elapsed < 3600
    assert succ["rscl"].mean() >= succ["fm"].mean()
    assert (succ["rscl"] >= succ["cl"]).sum() >= 2


@pytest.mark.slow
@criterion(9, "desk-scale CKNNA: RS-CL above random-init and FM-only on every seed")
def test_desk_scale_alignment(desk, record_property):
    results, _ = desk
    _measured(record_property, _table(results, "cknna_proprio", ("init", "fm", "rscl")))
    for s in SEEDS:
        ck = results["rscl", s]["cknna_proprio"]
        assert ck > results["init", s]["cknna_proprio"]
        assert ck > results["fm", s]["cknna_proprio"]


# ---------------------------------------------------------------- 10


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    path = tmp_path_factory.mktemp("det") / "demos.jsonl"
    ds = generate_dataset(8, seed=11)
    write_dataset(ds, path)
    return path


def _small_cfg(data, out, **kw):
    base = dict(dataset=str(data), out_dir=str(out), max_steps=6, batch_size=4, checkpoint_every=2,
                eval_every=3, eval_episodes=2, dec_hidden=32, warmup_steps=2, analysis_per_task=2)
    return TrainConfig(**{**base, **kw})


@criterion(10, "determinism: identical runs and resume are bit-identical")
def test_identical_runs_bit_identical(small_data, tmp_path):
    train(_small_cfg(small_data, tmp_path / "a"))
    train(_small_cfg(small_data, tmp_path / "b"))
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@criterion(10, "determinism: identical runs and resume are bit-identical")
def test_resume_bit_identical(small_data, tmp_path):
    full = tmp_path / "full"
    train(_small_cfg(small_data, full))
    # a run killed after step 5: the step-4 checkpoint survives, the log runs past it
    part = tmp_path / "part"
    part.mkdir()
    shutil.copy(full / "ckpt_000004.json", part)
    lines = (full / "metrics.jsonl").read_text().splitlines(keepends=True)
    (part / "metrics.jsonl").write_text("".join(ln for ln in lines if json.loads(ln)["step"] <= 5))
    train(_small_cfg(small_data, part, resume_from=str(part / "ckpt_000004.json")))
    for name in ("ckpt_000006.json", "metrics.jsonl"):
        assert (part / name).read_bytes() == (full / name).read_bytes()
