import json

import numpy as np
import pytest

from conftest import numeric_grad, rel_err
from vtrigger import models, training
from vtrigger.errors import DataError, NumericError
from vtrigger.training import AdamState, EarlyStopping, Example, TrainConfig


# --- Adam ----------------------------------------------------------------------

def test_adam_zero_grad_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    training.adam_step(p, {"w": np.zeros(2)}, AdamState(lr=0.1))
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_bounded_by_lr(rng):
    p = {"w": rng.normal(size=50)}
    before = p["w"].copy()
    training.adam_step(p, {"w": rng.normal(scale=1e3, size=50)}, AdamState(lr=1e-3))
    step = np.abs(p["w"] - before)
    assert np.all(step <= 1e-3 + 1e-15)
    # first bias-corrected step is lr * g / (|g| + eps): essentially lr for large gradients
    np.testing.assert_allclose(step, 1e-3, rtol=1e-9)


def test_adam_matches_reference_recursion(rng):
    # hand-rolled bias-corrected recursion
    w = rng.normal(size=4)
    p = {"w": w.copy()}
    st = AdamState(lr=0.01)
    m = v = np.zeros(4)
    for t in range(1, 6):
        g = rng.normal(size=4)
        training.adam_step(p, {"w": g.copy()}, st)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p["w"], w, rtol=1e-12)


def test_adam_deterministic(rng):
    grads = [{"w": rng.normal(size=3)} for _ in range(4)]
    out = []
    for _ in range(2):
        p, st = {"w": np.ones(3)}, AdamState(lr=0.05)
        for g in grads:
            training.adam_step(p, {"w": g["w"].copy()}, st)
        out.append(p["w"])
    np.testing.assert_array_equal(out[0], out[1])


def test_adam_nan_names_tensor():
    p = {"enc.0.ff.W1": np.zeros(2)}
    with pytest.raises(NumericError, match="enc.0.ff.W1"):
        training.adam_step(p, {"enc.0.ff.W1": np.array([0.0, np.nan])}, AdamState())
    np.testing.assert_array_equal(p["enc.0.ff.W1"], 0.0)


# --- early stopping ------------------------------------------------------------------

def test_early_stopping_patience_eight():
    es = EarlyStopping(8)
    losses = [3.0, 2.0] + [2.0] * 20
    stopped = None
    for e, v in enumerate(losses, start=1):
        if es.update(v):
            stopped = e
            break
    assert stopped == 10
    assert es.best_epoch == 2 and es.best_loss == 2.0


def test_early_stopping_monotone_never_stops():
    es = EarlyStopping(8)
    assert not any(es.update(10.0 - e) for e in range(50))
    assert es.best_epoch == 50


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="ctc+mtl")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    assert TrainConfig().batch_size == 32 and TrainConfig().patience_epochs == 8


# --- batching ------------------------------------------------------------------------------

def test_mixed_batch_disc_fraction_is_binomial():
    am = [Example(np.zeros((1, 1)), labels=np.array([1])) for _ in range(300)]
    disc = [Example(np.zeros((1, 1)), trigger=1) for _ in range(100)]
    rng = np.random.default_rng(0)
    n = 10_000
    counts = np.array([sum(ex.recipe == "disc" for ex in training.sample_mixed_batch(am, disc, rng, 1))
                       for _ in range(n)])
    p = 100 / 400
    assert abs(counts.sum() - n * p) <= 3 * np.sqrt(n * p * (1 - p))


def test_mixed_batch_without_replacement():
    am = [Example(np.zeros((1, 1)), labels=np.array([1]), id=str(i)) for i in range(40)]
    batch = training.sample_mixed_batch(am, [], np.random.default_rng(1), 32)
    assert len({ex.id for ex in batch}) == 32
    with pytest.raises(DataError):
        training.sample_mixed_batch([], [], np.random.default_rng(1))


def test_epoch_batches_cover_pool_once():
    batches = training.epoch_batches(list(range(70)), 32, np.random.default_rng(0))
    assert [len(b) for b in batches] == [32, 32, 6]
    assert sorted(sum(batches, [])) == list(range(70))


# --- gradients through the whole model ----------------------------------------------------

def _micro(arch="tf-encoder", seed=0):
    cfg = models.EncoderConfig(n_layers=2, d_model=8, n_heads=2, d_head=4, d_ff=16, input_dim=6, n_outputs=5)
    return models.build_model(arch, cfg, mtl=True, seed=seed)


def _check_all_grads(m, batch, use_decoder):
    _, g = training.batch_loss(m, batch, use_decoder=use_decoder)

    def f():
        return training.batch_loss(m, batch, use_decoder=use_decoder, grads=False)[0]

    for name, p in m.params.items():
        assert rel_err(g[name], numeric_grad(f, p)) <= 1e-5, name


def test_full_gradient_ctc_decoder_and_head(rng):
    m = _micro(seed=1)
    batch = [Example(rng.normal(size=(5, 6)), labels=np.array([1, 3, 3])),
             Example(rng.normal(size=(3, 6)), labels=np.array([2])),
             Example(rng.normal(size=(4, 6)), trigger=1),
             Example(rng.normal(size=(2, 6)), trigger=0)]
    _check_all_grads(m, batch, use_decoder=True)


def test_full_gradient_bilstm(rng):
    cfg = models.BiLstmConfig(n_layers=2, units_per_direction=3, input_dim=6, n_outputs=5)
    m = models.build_model("bilstm", cfg, mtl=True, seed=2)
    batch = [Example(rng.normal(size=(5, 6)), labels=np.array([4, 1])),
             Example(rng.normal(size=(3, 6)), trigger=1)]
    _check_all_grads(m, batch, use_decoder=False)


def test_batch_loss_is_mean_of_examples(rng):
    m = _micro(seed=3)
    batch = [Example(rng.normal(size=(6, 6)), labels=np.array([1, 2])),
             Example(rng.normal(size=(4, 6)), trigger=0)]
    loss, g = training.batch_loss(m, batch)
    singles = [training.example_loss(m, ex) for ex in batch]
    assert loss == pytest.approx(np.mean([b.total for b, _ in singles]), abs=1e-12)
    for k in g:
        np.testing.assert_allclose(g[k], (singles[0][1][k] + singles[1][1][k]) / 2, atol=1e-12)


def test_disc_only_batch_leaves_decoder_untouched(rng):
    m = _micro()
    _, g = training.batch_loss(m, [Example(rng.normal(size=(4, 6)), trigger=1)])
    assert all(np.all(v == 0) for k, v in g.items() if k.startswith("dec."))
    assert np.any(g["mtl.W"] != 0)


def test_example_breakdown_components(rng):
    m = _micro()
    br, _ = training.example_loss(m, Example(rng.normal(size=(6, 6)), labels=np.array([1, 2])))
    assert br.ctc is not None and br.ce is not None and br.disc is None
    assert br.total == pytest.approx(br.ctc + br.ce)
    br, _ = training.example_loss(m, Example(rng.normal(size=(6, 6)), labels=np.array([1, 2])),
                                  use_decoder=False)
    assert br.ce is None and br.total == br.ctc


# --- the training loop ---------------------------------------------------------------------

def _toy_sets(rng, n=24):
    def ex(i):
        labs = rng.integers(1, 5, size=2)
        x = rng.normal(scale=0.3, size=(8, 6))
        x[:4, labs[0]] += 2.0
        x[4:, labs[1]] += 2.0
        return Example(x, labels=labs, id=f"u{i}")
    return [ex(i) for i in range(n)], [ex(i) for i in range(n, n + 8)]


def test_train_reduces_validation_loss(rng):
    tr, va = _toy_sets(rng)
    m = _micro("sa-encoder")
    start = training.dataset_loss(m, va, use_decoder=False)
    best, log = training.train(m, tr, va, TrainConfig(lr=1e-2, max_epochs=15, batch_size=8))
    assert log.meta["best_val_loss"] < start
    assert training.dataset_loss(best, va, use_decoder=False) == pytest.approx(log.meta["best_val_loss"])


def test_train_log_reproducible(rng, tmp_path):
    tr, va = _toy_sets(rng)
    logs = []
    for _ in range(2):
        _, log = training.train(_micro("sa-encoder"), tr, va, TrainConfig(lr=1e-2, max_epochs=3, batch_size=8))
        logs.append([{k: r[k] for k in ("epoch", "train_loss", "val_loss")} for r in log.epochs])
    assert logs[0] == logs[1]
    log.write(tmp_path / "log.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2, 3]


def test_train_respects_max_epochs(rng):
    tr, va = _toy_sets(rng, 8)
    _, log = training.train(_micro("sa-encoder"), tr, va, TrainConfig(lr=1e-3, max_epochs=2))
    assert len(log.epochs) == 2 and not log.meta["early_stopped"]


def test_train_skips_infeasible(rng):
    tr, va = _toy_sets(rng, 8)
    tr.append(Example(rng.normal(size=(2, 6)), labels=np.array([1, 2, 3])))
    _, log = training.train(_micro("sa-encoder"), tr, va, TrainConfig(lr=1e-3, max_epochs=1))
    assert log.meta["skipped_infeasible"] == 1 and log.meta["n_train"] == 8


def test_train_empty_set_is_a_data_error(rng):
    _, va = _toy_sets(rng, 4)
    with pytest.raises(DataError):
        training.train(_micro("sa-encoder"), [], va, TrainConfig(max_epochs=1))


def test_train_mode_needs_matching_model(rng):
    tr, va = _toy_sets(rng, 4)
    with pytest.raises(ValueError, match="decoder"):
        training.train(_micro("sa-encoder"), tr, va, TrainConfig(mode="ctc+dec", max_epochs=1))
