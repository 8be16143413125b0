import numpy as np
import numpy.testing as npt
import pytest

from ltnn.checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from ltnn.config import ModelConfig
from ltnn.model import Arch, LtnnModel, conv_cost, count_params_flops
from ltnn.tensor import Tensor, channel_scale, mul, no_grad

CFG = ModelConfig(image_size=64, n_conditions=3)

REDUCED = Arch(
    encoder_widths=(8, 8),
    encoder_strides=(2, 1),
    decoder_widths=(8,),
    decoder_upsample=(False,),
    disc_widths=(8, 8),
    cond_disc_layer=1,
)


def _image(rng, n=2, size=64):
    return Tensor(rng.uniform(size=(n, 3, size, size)))


def test_latent_map_is_128x8x8_for_64px_input(rng):
    model = LtnnModel(CFG, seed=0)
    latent = model.encode(_image(rng))
    assert latent.shape == (2, 128, 8, 8)


def test_generator_output_shape_matches_input(rng):
    model = LtnnModel(CFG, seed=0)
    out = model.generate(_image(rng), 0)
    assert out.shape == (2, 3, 64, 64)
    assert out.dtype == np.float64


def test_discriminator_output_is_probability(rng):
    model = LtnnModel(CFG, seed=0)
    d = model.discriminate(_image(rng), 1)
    assert d.shape == (2, 1, 1, 1)
    assert np.all((d.data > 0) & (d.data < 1))


def test_same_seed_same_parameters():
    a = LtnnModel(CFG, seed=7)
    b = LtnnModel(CFG, seed=7)
    for name, t in a.named_parameters().items():
        npt.assert_array_equal(t.data, b.named_parameters()[name].data)


def test_different_seed_different_parameters():
    a = LtnnModel(CFG, seed=7)
    b = LtnnModel(CFG, seed=8)
    diffs = sum(
        not np.array_equal(t.data, b.named_parameters()[name].data)
        for name, t in a.named_parameters().items()
        if t.data.size > 1  # betas/biases start at constants either way
    )
    assert diffs > 0


def test_conditioning_swap_keeps_other_components():
    # the baseline must differ from the bank model only in the conditioning
    # parameters, so ablations compare like with like
    ctu = LtnnModel(CFG, seed=3)
    concat = LtnnModel(
        ModelConfig(image_size=64, n_conditions=3, conditioning="ch-concat"), seed=3
    )
    a, b = ctu.named_parameters(), concat.named_parameters()
    shared = [n for n in a if not n.startswith("ctu.")]
    for name in shared:
        if name in b:
            npt.assert_array_equal(a[name].data, b[name].data, err_msg=name)
    assert any(n.startswith("concat") for n in b)


def test_selected_bank_entry_is_the_only_one_in_the_graph(rng):
    model = LtnnModel(CFG, seed=0)
    k = 1
    out = model.generate(_image(rng), k)
    (out * out).sum().backward()
    for j in range(CFG.n_conditions):
        for unit in model.ctu[j]:
            for name, t in unit.named(f"ctu.{j}"):
                if j == k:
                    assert t.grad is not None, name
                else:
                    assert t.grad is None, name
    # the shared pieces always participate
    assert model.encoder[0].w.grad is not None
    assert model.rgb_balance.grad is not None


def test_cdu_entry_selection_mirrors_generator(rng):
    model = LtnnModel(CFG, seed=0)
    k = 2
    d = model.discriminate(_image(rng), k)
    d.sum().backward()
    for j in range(CFG.n_conditions):
        for name, t in model.cdu[j].named(f"cdu.{j}"):
            if j == k:
                assert t.grad is not None, name
            else:
                assert t.grad is None, name
    assert model.disc_head.w.grad is not None


def test_refinement_map_lies_strictly_inside_unit_interval(rng):
    model = LtnnModel(CFG, seed=0)
    with no_grad():
        for _ in range(10):
            latent = Tensor(rng.normal(size=(1, 128, 8, 8)))
            _, refine = model.decode(latent)
            assert np.all(refine.data > 0.0) and np.all(refine.data < 1.0)


def test_emitted_image_recomposes_from_heads_bit_identically(rng):
    model = LtnnModel(CFG, seed=0)
    x = _image(rng)
    with no_grad():
        latent = model.condition(model.encode(x), 0)
        value, refine = model.decode(latent)
        direct = model.assemble(value, refine)
        recomposed = channel_scale(mul(value, refine), model.rgb_balance)
    npt.assert_array_equal(direct.data, recomposed.data)


def test_rgb_balance_scales_channels_exactly(rng):
    model = LtnnModel(CFG, seed=0)
    x = _image(rng)
    with no_grad():
        base = model.generate(x, 0).data.copy()
        model.rgb_balance.data = model.rgb_balance.data * np.array([2.0, 1.0, 1.0])
        scaled = model.generate(x, 0).data
    npt.assert_array_equal(scaled[:, 0], base[:, 0] * 2.0)
    npt.assert_array_equal(scaled[:, 1:], base[:, 1:])


def test_task_division_can_be_disabled(rng):
    cfg = ModelConfig(image_size=64, n_conditions=3, use_task_division=False)
    model = LtnnModel(cfg, seed=0)
    value, refine = model.decode(Tensor(rng.normal(size=(1, 128, 8, 8))))
    assert refine is None
    with no_grad():
        out = model.generate(_image(rng, n=1), 0)
    assert out.shape == (1, 3, 64, 64)


def test_weights_are_resolution_independent(rng):
    # conv stacks carry no spatial dimensions: the same seed yields the same
    # parameters at any image size, and a 128px model maps 128 -> 128
    m64 = LtnnModel(ModelConfig(image_size=64, n_conditions=3), seed=5)
    m128 = LtnnModel(ModelConfig(image_size=128, n_conditions=3), seed=5)
    p64, p128 = m64.named_parameters(), m128.named_parameters()
    assert p64.keys() == p128.keys()
    for name in p64:
        npt.assert_array_equal(p64[name].data, p128[name].data, err_msg=name)
    with no_grad():
        out = m128.generate(_image(rng, n=1, size=128), 0)
    assert out.shape == (1, 3, 128, 128)
    assert m128.latent_hw == 16


def test_concat_baseline_shares_weights_across_conditions(rng):
    cfg = ModelConfig(image_size=64, n_conditions=3, conditioning="ch-concat")
    model = LtnnModel(cfg, seed=0)
    x = _image(rng, n=1)
    for k in range(cfg.n_conditions):
        model.concat_unit.w.zero_grad()
        out = model.generate(x, k)
        (out * out).sum().backward()
        assert model.concat_unit.w.grad is not None, f"k={k}"


def test_concat_baseline_condition_changes_output(rng):
    cfg = ModelConfig(image_size=64, n_conditions=3, conditioning="ch-concat")
    model = LtnnModel(cfg, seed=0)
    x = _image(rng, n=1)
    with no_grad():
        outs = [model.generate(x, k).data.copy() for k in range(3)]
    assert not np.array_equal(outs[0], outs[1])
    assert not np.array_equal(outs[1], outs[2])


def test_input_validation():
    model = LtnnModel(CFG, seed=0)
    with pytest.raises(IndexError):
        model.condition(Tensor(np.zeros((1, 128, 8, 8))), 3)
    with pytest.raises(ValueError) as ei:
        model.encode(Tensor(np.zeros((1, 3, 32, 32))))
    assert "(1, 3, 32, 32)" in str(ei.value)
    with pytest.raises(ValueError):
        LtnnModel(ModelConfig(image_size=60, n_conditions=3), seed=0)


def test_reduced_architecture_end_to_end(rng):
    cfg = ModelConfig(image_size=8, n_conditions=2)
    model = LtnnModel(cfg, seed=1, arch=REDUCED)
    x = Tensor(rng.uniform(size=(1, 3, 8, 8)))
    out = model.generate(x, 0)
    assert out.shape == (1, 3, 8, 8)
    d = model.discriminate(out, 1)
    assert d.shape == (1, 1, 1, 1)


# ---------------------------------------------------------------------------
# cost accounting
# ---------------------------------------------------------------------------


def test_single_conv_cost_closed_form():
    assert conv_cost(1, 1, 3, 8, 8) == (10, 576)


def test_conv_cost_formula(rng):
    # params = cout*(cin*k^2 + 1), MACs = params-without-bias * output pixels
    params, macs = conv_cost(16, 32, 3, 10, 12)
    assert params == 32 * 16 * 9 + 32
    assert macs == 32 * 16 * 9 * 10 * 12


def test_inference_params_strictly_below_training_params():
    report = count_params_flops(ModelConfig())
    assert report.params_inference < report.params_train
    assert report.flops_per_image == 2 * report.macs_per_image
    assert report.layers


def test_inference_excludes_unselected_bank_entries():
    # going from 9 conditions to 2 sheds training parameters but leaves the
    # single-path inference cost untouched
    wide = count_params_flops(ModelConfig(image_size=64, n_conditions=9))
    narrow = count_params_flops(ModelConfig(image_size=64, n_conditions=2))
    assert wide.params_train > narrow.params_train
    assert wide.params_inference == narrow.params_inference
    assert wide.macs_per_image == narrow.macs_per_image


def test_cost_table_mentions_every_scope():
    text = count_params_flops(ModelConfig()).table()
    for scope in ("generator", "conditioning", "discriminator"):
        assert scope in text


def test_param_count_matches_live_model():
    cfg = ModelConfig(image_size=64, n_conditions=3)
    report = count_params_flops(cfg)
    live = sum(t.data.size for t in LtnnModel(cfg, seed=0).named_parameters().values())
    assert report.params_train == live


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    model = LtnnModel(CFG, seed=9)
    # make values non-trivial
    model.rgb_balance.data = rng.normal(size=3)
    path = tmp_path / "model.ltnn"
    model.save(str(path), extra={"trainer.step": np.array(41, dtype=np.int64)})
    loaded, extra = LtnnModel.load(str(path))
    assert loaded.config == model.config
    for name, t in model.named_parameters().items():
        npt.assert_array_equal(t.data, loaded.named_parameters()[name].data, err_msg=name)
    assert extra["trainer.step"] == 41


def test_checkpoint_rejects_wrong_magic(tmp_path):
    path = tmp_path / "bad.ltnn"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CheckpointError):
        read_checkpoint(str(path))


def test_checkpoint_rejects_truncation(tmp_path):
    model = LtnnModel(CFG, seed=0)
    path = tmp_path / "model.ltnn"
    model.save(str(path))
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError):
        read_checkpoint(str(path))


def test_checkpoint_missing_parameter_is_detected(tmp_path):
    model = LtnnModel(CFG, seed=0)
    records = [(n, t.data) for n, t in model.named_parameters().items()]
    path = tmp_path / "partial.ltnn"
    from ltnn.config import config_text

    write_checkpoint(str(path), config_text(model.config), records[:-1])
    with pytest.raises(CheckpointError) as ei:
        LtnnModel.load(str(path))
    assert "missing" in str(ei.value)


def test_checkpoint_shape_mismatch_is_detected(tmp_path):
    model = LtnnModel(CFG, seed=0)
    records = {n: t.data for n, t in model.named_parameters().items()}
    records["rgb_balance"] = np.ones(4)
    from ltnn.config import config_text

    path = tmp_path / "mismatch.ltnn"
    write_checkpoint(str(path), config_text(model.config), list(records.items()))
    with pytest.raises(CheckpointError):
        LtnnModel.load(str(path))
