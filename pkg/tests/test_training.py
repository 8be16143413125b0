import os

import numpy as np
import numpy.testing as npt
import pytest

from ltnn.config import TrainConfig, model_config_from_train
from ltnn.data import load_batch
from ltnn.losses import NonFiniteLossError
from ltnn.model import LtnnModel
from ltnn.tensor import Tensor
from ltnn.training import Adam, NonFiniteGradError, Trainer

from reference import adam_step_ref


def _param(values):
    t = Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)
    return t


def _train_cfg(**kw):
    base = dict(epochs=1, batch_size=4, seed=3, checkpoint_interval=0)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# the optimizer
# ---------------------------------------------------------------------------


def test_adam_first_step_matches_reference(rng):
    p = _param(rng.normal(size=(3, 2)))
    g = rng.normal(size=(3, 2))
    p.grad = g.copy()
    before = p.data.copy()
    opt = Adam(lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8)
    opt.update("p", p)
    expected, _, _, _ = adam_step_ref(before, g, lr=2e-4, b1=0.5, b2=0.999, eps=1e-8)
    npt.assert_allclose(p.data, expected, rtol=1e-15)


def test_adam_first_step_is_signed_lr():
    # at t=1 bias correction collapses the update to lr * g/(|g| + eps)
    p = _param([1.0, -1.0])
    p.grad = np.array([3.0, -0.25])
    opt = Adam(lr=1e-3)
    opt.update("p", p)
    npt.assert_allclose(p.data, [1.0 - 1e-3, -1.0 + 1e-3], rtol=1e-7)


def test_adam_second_step_matches_reference(rng):
    p = _param(rng.normal(size=4))
    opt = Adam(lr=1e-3, beta1=0.9, beta2=0.99, eps=1e-8)
    g1, g2 = rng.normal(size=4), rng.normal(size=4)
    ref = p.data.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    for t, g in ((1, g1), (2, g2)):
        p.grad = g.copy()
        opt.update("p", p)
        m = 0.9 * m + 0.1 * g
        v = 0.99 * v + 0.01 * g * g
        ref -= 1e-3 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.99**t)) + 1e-8)
    npt.assert_allclose(p.data, ref, rtol=1e-14)


def test_adam_skips_parameters_without_gradient():
    p = _param([1.0, 2.0])
    opt = Adam()
    opt.update("p", p)
    npt.assert_array_equal(p.data, [1.0, 2.0])
    assert "p" not in opt.m  # no state allocated for untouched parameters


def test_adam_identical_gradients_identical_updates(rng):
    g = rng.normal(size=5)
    a, b = _param(np.zeros(5)), _param(np.zeros(5))
    a.grad, b.grad = g.copy(), g.copy()
    opt = Adam()
    opt.update("a", a)
    opt.update("b", b)
    npt.assert_array_equal(a.data, b.data)


def test_adam_aborts_on_nonfinite_gradient():
    p = _param([1.0])
    p.grad = np.array([np.nan])
    with pytest.raises(NonFiniteGradError) as ei:
        Adam().update("enc.w", p)
    assert ei.value.parameter == "enc.w"
    npt.assert_array_equal(p.data, [1.0])  # nothing moved


def test_adam_gradient_clipping():
    a, b = _param([0.0]), _param([0.0])
    a.grad = np.array([100.0])
    b.grad = np.array([1.0])
    opt = Adam(lr=1e-3)
    opt.update("a", a, grad_clip=1.0)
    opt.update("b", b, grad_clip=0.0)
    npt.assert_allclose(a.data, b.data, rtol=1e-12)


def test_adam_state_round_trip(rng):
    opt = Adam(lr=1e-3)
    p = _param(rng.normal(size=3))
    for _ in range(3):
        p.grad = rng.normal(size=3)
        opt.update("p", p)
    records = {k: v.copy() for k, v in opt.state_records().items()}

    fresh = Adam(lr=1e-3)
    fresh.load_state_records(records)
    q = _param(p.data.copy())
    g = rng.normal(size=3)
    p.grad = g.copy()
    q.grad = g.copy()
    opt.update("p", p)
    fresh.update("p", q)
    npt.assert_array_equal(p.data, q.data)


# ---------------------------------------------------------------------------
# single steps
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_setup(small_train):
    cfg = _train_cfg(debug_checks=True)
    model_cfg = model_config_from_train(cfg, small_train.image_size, small_train.n_conditions)
    model = LtnnModel(model_cfg, seed=cfg.seed)
    trainer = Trainer(model, small_train, cfg)
    batch = load_batch(small_train, [0, 1], model.np_dtype)
    return model, trainer, batch


def test_train_step_returns_finite_breakdown(small_setup):
    model, trainer, batch = small_setup
    bd = trainer.train_step(batch, 0)
    for v in (bd.adv_d, bd.adv_g, bd.recon, bd.smooth, bd.consist, bd.total):
        assert np.isfinite(v)
    assert bd.total > 0


def test_train_step_touches_only_selected_bank_entries(small_train):
    cfg = _train_cfg()
    model_cfg = model_config_from_train(cfg, small_train.image_size, small_train.n_conditions)
    model = LtnnModel(model_cfg, seed=1)
    trainer = Trainer(model, small_train, cfg)
    batch = load_batch(small_train, [0, 2], model.np_dtype)

    k = 1
    before = {n: t.data.copy() for n, t in model.named_parameters().items()}
    trainer.train_step(batch, k)
    after = model.named_parameters()
    for name in before:
        selected = name.startswith((f"ctu.{k}.", f"cdu.{k}."))
        other_bank = (name.startswith("ctu.") or name.startswith("cdu.")) and not selected
        if other_bank:
            npt.assert_array_equal(after[name].data, before[name], err_msg=name)
        elif selected or name.startswith(("enc.", "dec.", "disc.")) or name == "rgb_balance":
            assert not np.array_equal(after[name].data, before[name]), name


def test_train_step_aborts_on_poisoned_parameters(small_train):
    cfg = _train_cfg()
    model_cfg = model_config_from_train(cfg, small_train.image_size, small_train.n_conditions)
    model = LtnnModel(model_cfg, seed=2)
    trainer = Trainer(model, small_train, cfg)
    batch = load_batch(small_train, [0], model.np_dtype)
    model.encoder[0].w.data[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteLossError):
        trainer.train_step(batch, 0)


def test_total_steps_arithmetic(small_train):
    cfg = _train_cfg(epochs=2, batch_size=2)
    model_cfg = model_config_from_train(cfg, small_train.image_size, small_train.n_conditions)
    model = LtnnModel(model_cfg, seed=0)
    # 4 samples / batch 2 -> 2 batches; x 2 conditions x 2 epochs = 8
    assert Trainer(model, small_train, cfg).total_steps() == 2 * 2 * 2
    capped = _train_cfg(epochs=2, batch_size=2, max_steps=5)
    assert Trainer(model, small_train, capped).total_steps() == 5


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


def _run(out_dir, small_train, **cfg_kw):
    cfg = _train_cfg(**cfg_kw)
    model_cfg = model_config_from_train(cfg, small_train.image_size, small_train.n_conditions)
    model = LtnnModel(model_cfg, seed=cfg.seed)
    trainer = Trainer(model, small_train, cfg, out_dir=out_dir)
    trainer.run()
    return model, trainer


def test_run_writes_complete_csv(tmp_path, small_train):
    _, trainer = _run(str(tmp_path), small_train, epochs=2, batch_size=2)
    lines = open(tmp_path / "loss.csv").read().strip().splitlines()
    assert lines[0] == "step,adv_d,adv_g,recon,smooth,consist,total"
    assert len(lines) == 1 + trainer.total_steps()
    steps = [int(row.split(",")[0]) for row in lines[1:]]
    assert steps == list(range(1, trainer.total_steps() + 1))
    assert os.path.exists(tmp_path / "final.ltnn")


def test_identical_seeds_identical_csv(tmp_path, small_train):
    _run(str(tmp_path / "a"), small_train, epochs=1, batch_size=2, seed=7)
    _run(str(tmp_path / "b"), small_train, epochs=1, batch_size=2, seed=7)
    a = open(tmp_path / "a" / "loss.csv").read()
    b = open(tmp_path / "b" / "loss.csv").read()
    assert a == b


def test_different_seed_changes_losses(tmp_path, small_train):
    _run(str(tmp_path / "a"), small_train, epochs=1, batch_size=2, seed=7)
    _run(str(tmp_path / "b"), small_train, epochs=1, batch_size=2, seed=8)
    assert open(tmp_path / "a" / "loss.csv").read() != open(tmp_path / "b" / "loss.csv").read()


def test_resumed_run_is_bit_identical_to_uninterrupted(tmp_path, small_train):
    # one uninterrupted run...
    full_model, _ = _run(str(tmp_path / "full"), small_train, epochs=2, batch_size=2, seed=5)

    # ...versus the same schedule split across a checkpoint boundary
    half_dir = str(tmp_path / "half")
    _run(half_dir, small_train, epochs=2, batch_size=2, seed=5, max_steps=3)

    model, extra = LtnnModel.load(os.path.join(half_dir, "final.ltnn"))
    cfg = _train_cfg(epochs=2, batch_size=2, seed=5)
    trainer = Trainer(model, small_train, cfg, out_dir=half_dir)
    trainer.restore(extra)
    assert trainer.step == 3
    trainer.run()

    a = full_model.named_parameters()
    b = model.named_parameters()
    for name in a:
        npt.assert_array_equal(a[name].data, b[name].data, err_msg=name)
    full_csv = open(tmp_path / "full" / "loss.csv").read()
    half_csv = open(tmp_path / "half" / "loss.csv").read()
    assert half_csv == full_csv


def test_interval_checkpoints_appear(tmp_path, small_train):
    _run(str(tmp_path), small_train, epochs=1, batch_size=2, checkpoint_interval=2)
    # 4 steps total with interval 2: one mid-run checkpoint (the final step's
    # file is final.ltnn, not a duplicate interval file)
    assert os.path.exists(tmp_path / "ckpt_000002.ltnn")
    assert not os.path.exists(tmp_path / "ckpt_000004.ltnn")
    assert os.path.exists(tmp_path / "final.ltnn")


def test_pure_regression_objective_descends(tmp_path, small_train):
    # with the adversarial and consistency terms switched off this is plain
    # regression; over a short run the reconstruction loss must trend down
    _, trainer = _run(
        str(tmp_path),
        small_train,
        epochs=8,
        batch_size=4,
        w_adv=0.0,
        w_consist=0.0,
        seed=2,
    )
    rows = open(tmp_path / "loss.csv").read().strip().splitlines()[1:]
    recon = np.array([float(r.split(",")[3]) for r in rows])
    third = len(recon) // 3
    assert recon[-third:].mean() < recon[:third].mean()
