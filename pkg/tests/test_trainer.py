import json
import math
import shutil

import numpy as np
import pytest

from rsclvla import tensor as T
from rsclvla import trainer as tr
from rsclvla.config import TrainConfig
from rsclvla.synthenv import Dataset, EnvConfig, generate_dataset, write_dataset
from rsclvla.trainer import (
    TrainingError,
    assemble_batch,
    compute_losses,
    draw,
    init_state,
    lambda_at,
    load_checkpoint,
    lr_at,
    prepare,
    total_loss,
    train,
    train_step,
)


@pytest.fixture(scope="module")
def ds():
    return generate_dataset(12, EnvConfig(), 0)


@pytest.fixture(scope="module")
def data(ds):
    return prepare(ds, 8)


@pytest.fixture()
def dataset_file(ds, tmp_path):
    path = tmp_path / "demos.jsonl"
    write_dataset(ds, path)
    return str(path)


def _grads(params, loss):
    for p in params.values():
        p.grad = None
    T.backward(loss)
    return {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}


def _batch_and_draws(cfg, data, seed=0):
    rng = np.random.default_rng(seed)
    return assemble_batch(data, cfg.batch_size, rng), draw(cfg, cfg.batch_size, rng, rng)


# ---------------------------------------------------------------- batches


def test_batch_fields_and_determinism(data):
    a = assemble_batch(data, 1, np.random.default_rng(3))
    b = assemble_batch(data, 1, np.random.default_rng(3))
    assert set(a) == {"index", "views", "task_id", "q", "chunk", "next_action"}
    for k in a:
        assert np.array_equal(a[k], b[k])
    assert a["views"].shape == (1, 2, 16) and a["chunk"].shape == (1, 8, 3)
    assert np.array_equal(a["next_action"], a["chunk"][:, 0])


def test_chunk_at_final_step_repeats_last_action(ds, data):
    last = len(ds.trajectories[0]) - 1
    row = int(np.flatnonzero((data.index == [0, last]).all(axis=1))[0])
    assert np.array_equal(data.chunk[row], np.repeat(data.chunk[row][:1], 8, axis=0))


def test_prepared_proprio_is_centred(data):
    np.testing.assert_allclose(data.q.mean(axis=0), 0.0, atol=1e-12)


def test_empty_dataset_rejected(ds):
    empty = Dataset([], ds.proprio_mean, ds.proprio_std, 0)
    with pytest.raises(TrainingError, match="empty"):
        prepare(empty, 8)


# ---------------------------------------------------------------- objective


def test_gradient_additivity(data):
    cfg = TrainConfig(batch_size=6)
    st = init_state(cfg)
    batch, d = _batch_and_draws(cfg, data)
    lam = 0.37
    g_fm = _grads(st.params, compute_losses(st.params, batch, d, cfg)[0])
    g_cl = _grads(st.params, compute_losses(st.params, batch, d, cfg)[1])
    g_tot = _grads(st.params, total_loss(*compute_losses(st.params, batch, d, cfg), lam))
    for n in st.params:
        np.testing.assert_allclose(g_tot[n], g_fm[n] + lam * g_cl[n], atol=1e-9, rtol=0)


def test_contrastive_loss_never_reaches_decoder(data):
    cfg = TrainConfig(batch_size=6)
    st = init_state(cfg)
    batch, d = _batch_and_draws(cfg, data)
    g = _grads(st.params, compute_losses(st.params, batch, d, cfg)[1])
    dec = [n for n in g if n.startswith("decoder.")]
    assert dec and all(not g[n].any() for n in dec)
    assert any(g[n].any() for n in g if n.startswith("backbone."))


def test_frozen_backbone_restricts_contrastive_gradients(data):
    cfg = TrainConfig(batch_size=6, freeze_backbone=True)
    st = init_state(cfg)
    batch, d = _batch_and_draws(cfg, data)
    g = _grads(st.params, compute_losses(st.params, batch, d, cfg)[1])
    for n, v in g.items():
        if n.startswith(("adapter.", "projector.")):
            continue
        assert not v.any(), n
    assert g["adapter.u"].any() and g["projector.l2.W"].any()


def test_contrastive_backbone_switch(data):
    cfg = TrainConfig(batch_size=6, rscl_backbone_grad=False)
    st = init_state(cfg)
    batch, d = _batch_and_draws(cfg, data)
    g = _grads(st.params, compute_losses(st.params, batch, d, cfg)[1])
    assert all(not v.any() for n, v in g.items() if n.startswith("backbone."))
    g_fm = _grads(st.params, compute_losses(st.params, batch, d, cfg)[0])
    assert any(v.any() for n, v in g_fm.items() if n.startswith("backbone."))


def test_frozen_backbone_bit_identical_after_training(data):
    cfg = TrainConfig(batch_size=8, freeze_backbone=True, max_steps=5)
    st = init_state(cfg)
    before = {n: p.data.copy() for n, p in st.params.items()}
    for _ in range(5):
        train_step(st, data, cfg)
    for n, p in st.params.items():
        same = np.array_equal(p.data, before[n])
        assert same == n.startswith("backbone."), n


def test_zero_lambda_matches_flow_matching_only_update(data):
    a = TrainConfig(batch_size=8, lambda0=0.0)
    b = TrainConfig(batch_size=8, supervision="none")
    sa, sb = init_state(a), init_state(b)
    ma, mb = train_step(sa, data, a), train_step(sb, data, b)
    assert ma["loss_fm"] == mb["loss_fm"]
    for n in sa.params:
        assert np.array_equal(sa.params[n].data, sb.params[n].data), n


def test_duplicate_positives_give_plain_infonce_of_self(data):
    cfg = TrainConfig(batch_size=6, supervision="one_hot", augmentation="none")
    st = init_state(cfg)
    batch, d = _batch_and_draws(cfg, data)
    loss = compute_losses(st.params, batch, d, cfg)[1].item()
    seq = tr.backbone_forward(st.params, batch["views"], batch["task_id"], cfg.model)
    _, w = tr.adapter_forward(st.params, seq, cfg.model)
    z = tr.project(st.params, w).data
    zn = z / np.linalg.norm(z, axis=1, keepdims=True)
    logits = zn @ zn.T / cfg.tau
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    assert loss == pytest.approx(float((lse - np.diag(logits)).mean()), abs=1e-12)
    # positives are the most similar candidates, so the loss sits below log B
    assert loss < math.log(6)


def test_supervision_none_has_no_contrastive_loss(data):
    cfg = TrainConfig(batch_size=4, supervision="none")
    st = init_state(cfg)
    batch, d = _batch_and_draws(cfg, data)
    assert compute_losses(st.params, batch, d, cfg)[1] is None


@pytest.mark.parametrize(
    "kw",
    [
        dict(supervision="next_action"),
        dict(supervision="action_sequence_dtw"),
        dict(augmentation="token_cutoff"),
        dict(augmentation="feature_cutoff"),
        dict(cutoff_stage="embedding"),
        dict(adapter_mixing="tokenwise"),
    ],
)
def test_variants_train_finitely(data, kw):
    cfg = TrainConfig(batch_size=6, **kw)
    st = init_state(cfg)
    for _ in range(2):
        m = train_step(st, data, cfg)
    assert all(math.isfinite(v) for v in m.values())


# ---------------------------------------------------------------- schedules


def test_lambda_non_increasing_and_endpoints():
    cfg = TrainConfig(max_steps=100)
    vals = [lambda_at(cfg, s) for s in range(101)]
    assert vals[0] == 1.0 and vals[-1] == pytest.approx(0.0, abs=1e-15)
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert lambda_at(cfg.replace(lambda_schedule="off", lambda0=0.3), 50) == 0.3


def test_learning_rate_warmup_and_decay():
    cfg = TrainConfig(max_steps=1000, warmup_steps=100, lr=1e-3)
    assert lr_at(cfg, 0) == pytest.approx(1e-5)
    assert lr_at(cfg, 99) == pytest.approx(1e-3)
    assert lr_at(cfg, 100) == pytest.approx(1e-3)
    assert lr_at(cfg, 1000) == pytest.approx(0.0, abs=1e-18)
    assert lr_at(cfg.replace(lr_schedule="constant"), 700) == 1e-3


# ---------------------------------------------------------------- loop, checkpoints


def _cfg(dataset_file, out, **kw):
    base = dict(dataset=dataset_file, out_dir=str(out), batch_size=8, max_steps=6,
                checkpoint_every=3, eval_every=0)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_steps_writes_initial_checkpoint_only(dataset_file, tmp_path):
    res = train(_cfg(dataset_file, tmp_path / "r", max_steps=0))
    assert res.checkpoint.name == "ckpt_000000.json"
    assert sorted(p.name for p in (tmp_path / "r").iterdir()) == ["ckpt_000000.json", "metrics.jsonl"]
    assert res.metrics.read_text() == ""


def test_metrics_schema(dataset_file, tmp_path):
    res = train(_cfg(dataset_file, tmp_path / "r"))
    recs = [json.loads(ln) for ln in res.metrics.read_text().splitlines()]
    assert [r["step"] for r in recs] == [1, 2, 3, 4, 5, 6]
    assert set(recs[0]) == {"step", "loss_fm", "loss_rscl", "lambda", "total", "grad_norm"}
    assert sorted(p.name for p in (tmp_path / "r").glob("ckpt_*")) == [
        "ckpt_000000.json", "ckpt_000003.json", "ckpt_000006.json"]


def test_eval_records_in_metrics(dataset_file, tmp_path):
    res = train(_cfg(dataset_file, tmp_path / "r", max_steps=2, eval_every=2, eval_episodes=3,
                     analysis_per_task=3))
    recs = [json.loads(ln) for ln in res.metrics.read_text().splitlines()]
    ev = [r for r in recs if "success_rate" in r]
    assert len(ev) == 1 and set(ev[0]) == {"step", "success_rate", "cknna_proprio"}


def test_runs_bit_identical(dataset_file, tmp_path):
    a = train(_cfg(dataset_file, tmp_path / "a"))
    b = train(_cfg(dataset_file, tmp_path / "b"))
    assert a.metrics.read_bytes() == b.metrics.read_bytes()
    for step in (0, 3, 6):
        name = f"ckpt_{step:06d}.json"
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_resume_matches_uninterrupted_run(dataset_file, tmp_path):
    full = train(_cfg(dataset_file, tmp_path / "full"))
    # simulate a run killed after step 4: its step-3 checkpoint and a longer metrics log survive
    part = tmp_path / "part"
    part.mkdir()
    shutil.copy(tmp_path / "full" / "ckpt_000003.json", part)
    lines = full.metrics.read_text().splitlines(keepends=True)
    (part / "metrics.jsonl").write_text("".join(lines[:4]))
    resumed = train(_cfg(dataset_file, part, resume_from=str(part / "ckpt_000003.json")))
    assert resumed.metrics.read_bytes() == full.metrics.read_bytes()
    assert resumed.checkpoint.read_bytes() == full.checkpoint.read_bytes()


def test_resume_rejects_changed_config(dataset_file, tmp_path):
    train(_cfg(dataset_file, tmp_path / "r", max_steps=3))
    with pytest.raises(TrainingError, match="tau"):
        train(_cfg(dataset_file, tmp_path / "r", tau=0.5, resume_from=str(tmp_path / "r" / "ckpt_000003.json")))


def test_checkpoint_round_trip(dataset_file, tmp_path):
    res = train(_cfg(dataset_file, tmp_path / "r", max_steps=2))
    ck = load_checkpoint(res.checkpoint)
    assert ck.step == 2 and ck.train_config.max_steps == 2
    for n, p in res.state.params.items():
        assert np.array_equal(ck.params[n].data, p.data)
    with pytest.raises(TrainingError):
        bad = tmp_path / "bad.json"
        bad.write_text('{"format": "other"}')
        load_checkpoint(bad)


def test_non_finite_loss_aborts_with_dump(dataset_file, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise T.NonFiniteError("overflow")

    monkeypatch.setattr(tr, "compute_losses", boom)
    with pytest.raises(tr.NonFiniteLossError) as info:
        train(_cfg(dataset_file, tmp_path / "r"))
    dump = json.loads((tmp_path / "r" / "nonfinite_dump.json").read_text())
    assert dump["step"] == 0 and len(dump["batch_index"]) == 8
    assert info.value.batch_index == dump["batch_index"]
