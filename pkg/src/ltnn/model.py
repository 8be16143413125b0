"""Fully-convolutional conditional generator and discriminator.

The generator is an encoder/decoder pair with a bank of per-condition latent
mappings between them: selecting condition k routes the latent through that
condition's two small convolutions (with their own trainable Swish betas)
while every other bank entry stays out of the graph entirely. The decoder
splits into a linear "value" head and a sigmoid "refinement" head whose
product, scaled by three trainable per-channel gains, is the emitted image.

The discriminator mirrors the encoder and swaps one mid-stack layer for a
per-condition bank of its own, so real/fake decisions are condition-aware.

A channel-concatenation baseline (one-hot condition planes appended to the
latent, one shared conv back down) is available via ``conditioning`` in the
config; it shares the encoder, decoder and discriminator so comparisons
isolate the conditioning mechanism.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from .config import ModelConfig, build_config, config_text
from .tensor import (
    Tensor,
    bilinear_upsample,
    channel_scale,
    concat_channels,
    conv2d,
    conv2d_transpose,
    global_avg_pool,
    mul,
    sigmoid,
    swish,
)

ENCODER_WIDTHS = (32, 64, 128, 128)
ENCODER_STRIDES = (2, 2, 2, 1)
DECODER_WIDTHS = (128, 64, 32)
DECODER_UPSAMPLE = (True, True, False)
DISCRIMINATOR_WIDTHS = (32, 64, 128, 128)
CONDITIONAL_DISC_LAYER = 2  # third conv layer carries the per-condition weights
KERNEL = 3
HEAD_KERNEL = 4
INIT_STD = 0.02


@dataclass(frozen=True)
class Arch:
    """Layer geometry. The default matches the standard model; tests shrink it
    to make finite-difference checks of the whole generator affordable.

    Custom geometries are an in-memory affair: checkpoints always rebuild with
    the default architecture, so only default-``Arch`` models round-trip.
    """

    encoder_widths: tuple = ENCODER_WIDTHS
    encoder_strides: tuple = ENCODER_STRIDES
    decoder_widths: tuple = DECODER_WIDTHS
    decoder_upsample: tuple = DECODER_UPSAMPLE
    disc_widths: tuple = DISCRIMINATOR_WIDTHS
    cond_disc_layer: int = CONDITIONAL_DISC_LAYER
    kernel: int = KERNEL
    head_kernel: int = HEAD_KERNEL

    def downsample_factor(self):
        f = 1
        for s in self.encoder_strides:
            f *= s
        return f


class ConvUnit:
    """One conv layer's parameters: weights, bias and optional Swish beta."""

    __slots__ = ("w", "b", "beta")

    def __init__(self, w, b, beta=None):
        self.w = w
        self.b = b
        self.beta = beta

    def named(self, prefix):
        out = [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]
        if self.beta is not None:
            out.append((f"{prefix}.beta", self.beta))
        return out


def _unit(rng, cin, cout, k, dtype, with_beta=True, transpose=False):
    shape = (cin, cout, k, k) if transpose else (cout, cin, k, k)
    w = Tensor(rng.normal(0.0, INIT_STD, shape).astype(dtype), requires_grad=True)
    b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    beta = Tensor(np.ones(1, dtype=dtype), requires_grad=True) if with_beta else None
    return ConvUnit(w, b, beta)


class LtnnModel:
    def __init__(self, config: ModelConfig, seed=0, arch: Arch | None = None):
        if arch is None:
            config.validate()
            arch = Arch()
        factor = arch.downsample_factor()
        if config.image_size % factor:
            raise ValueError(
                f"image_size {config.image_size} is not divisible by the "
                f"encoder downsample factor {factor}"
            )
        self.config = config
        self.arch = arch
        self.seed = int(seed)
        dtype = np.float32 if config.dtype == "float32" else np.float64
        self.np_dtype = dtype
        self.latent_hw = config.image_size // factor
        self.latent_channels = arch.encoder_widths[-1]
        k_all = config.n_conditions

        # independent init streams so swapping the conditioning mechanism
        # leaves encoder/decoder/discriminator draws untouched
        rng_enc = np.random.default_rng([self.seed, 0])
        rng_cond = np.random.default_rng([self.seed, 1])
        rng_dec = np.random.default_rng([self.seed, 2])
        rng_disc = np.random.default_rng([self.seed, 3])

        cin = config.image_channels
        self.encoder = []
        for cout in arch.encoder_widths:
            self.encoder.append(_unit(rng_enc, cin, cout, arch.kernel, dtype))
            cin = cout

        cl = self.latent_channels
        self.ctu = None
        self.concat_unit = None
        if config.conditioning == "ctu":
            self.ctu = [
                [_unit(rng_cond, cl, cl, arch.kernel, dtype) for _ in range(2)]
                for _ in range(k_all)
            ]
        else:
            self.concat_unit = _unit(rng_cond, cl + k_all, cl, arch.kernel, dtype)

        self.decoder = []
        cin = cl
        for cout in arch.decoder_widths:
            self.decoder.append(_unit(rng_dec, cin, cout, arch.kernel, dtype))
            cin = cout
        self.value_head = _unit(rng_dec, cin, config.image_channels, arch.head_kernel,
                                dtype, with_beta=False, transpose=True)
        self.refine_head = _unit(rng_dec, cin, config.image_channels, arch.head_kernel,
                                 dtype, with_beta=False, transpose=True)
        self.rgb_balance = Tensor(np.ones(config.image_channels, dtype=dtype), requires_grad=True)

        self.disc = []
        self.cdu = None
        cin = config.image_channels
        for i, cout in enumerate(arch.disc_widths):
            if i == arch.cond_disc_layer and config.use_cdu:
                self.cdu = [_unit(rng_disc, cin, cout, arch.kernel, dtype) for _ in range(k_all)]
                self.disc.append(None)
            else:
                self.disc.append(_unit(rng_disc, cin, cout, arch.kernel, dtype))
            cin = cout
        self.disc_head = _unit(rng_disc, cin, 1, 1, dtype, with_beta=False)

        self._names = dict(self._iter_named())

    # -- parameter bookkeeping ---------------------------------------------

    def _iter_named(self):
        for i, u in enumerate(self.encoder):
            yield from u.named(f"enc.{i}")
        if self.ctu is not None:
            for k, units in enumerate(self.ctu):
                for j, u in enumerate(units):
                    yield from u.named(f"ctu.{k}.{j}")
        if self.concat_unit is not None:
            yield from self.concat_unit.named("concat")
        for i, u in enumerate(self.decoder):
            yield from u.named(f"dec.{i}")
        yield from self.value_head.named("dec.value")
        yield from self.refine_head.named("dec.refine")
        yield ("rgb_balance", self.rgb_balance)
        for i, u in enumerate(self.disc):
            if u is not None:
                yield from u.named(f"disc.{i}")
        if self.cdu is not None:
            for k, u in enumerate(self.cdu):
                yield from u.named(f"cdu.{k}")
        yield from self.disc_head.named("disc.head")

    def named_parameters(self):
        return dict(self._names)

    def generator_parameters(self, k):
        """Everything the generator phase updates for condition k."""
        out = {}
        for i, u in enumerate(self.encoder):
            out.update(u.named(f"enc.{i}"))
        if self.ctu is not None:
            for j, u in enumerate(self.ctu[k]):
                out.update(u.named(f"ctu.{k}.{j}"))
        else:
            out.update(self.concat_unit.named("concat"))
        for i, u in enumerate(self.decoder):
            out.update(u.named(f"dec.{i}"))
        out.update(self.value_head.named("dec.value"))
        out.update(self.refine_head.named("dec.refine"))
        out["rgb_balance"] = self.rgb_balance
        return out

    def discriminator_parameters(self, k):
        """Everything the discriminator phase updates for condition k."""
        out = {}
        for i, u in enumerate(self.disc):
            if u is not None:
                out.update(u.named(f"disc.{i}"))
        if self.cdu is not None:
            out.update(self.cdu[k].named(f"cdu.{k}"))
        out.update(self.disc_head.named("disc.head"))
        return out

    # -- forward passes ------------------------------------------------------

    def _check_image(self, x, who):
        n = self.config.image_size
        if x.data.ndim != 4 or x.data.shape[1] != self.config.image_channels or x.data.shape[2:] != (n, n):
            raise ValueError(
                f"{who}: expected (B, {self.config.image_channels}, {n}, {n}) input, got {x.data.shape}"
            )

    def _check_condition(self, k):
        if not 0 <= k < self.config.n_conditions:
            raise IndexError(f"condition index {k} out of range [0, {self.config.n_conditions})")

    def encode(self, x):
        self._check_image(x, "encode")
        h = x
        pad = self.arch.kernel // 2
        for u, stride in zip(self.encoder, self.arch.encoder_strides):
            h = swish(conv2d(h, u.w, u.b, stride=stride, padding=pad), u.beta)
        return h

    def ctu_apply(self, latent, k):
        self._check_condition(k)
        if self.ctu is None:
            raise RuntimeError("model was built with ch-concat conditioning; no per-condition bank")
        h = latent
        pad = self.arch.kernel // 2
        for u in self.ctu[k]:
            h = swish(conv2d(h, u.w, u.b, stride=1, padding=pad), u.beta)
        return h

    def concat_baseline_apply(self, latent, k):
        self._check_condition(k)
        if self.concat_unit is None:
            raise RuntimeError("model was built with ctu conditioning; no concat baseline")
        b, _, h, w = latent.data.shape
        planes = np.zeros((b, self.config.n_conditions, h, w), dtype=latent.data.dtype)
        planes[:, k] = 1.0
        joined = concat_channels([latent, Tensor(planes)])
        u = self.concat_unit
        return swish(conv2d(joined, u.w, u.b, stride=1, padding=self.arch.kernel // 2), u.beta)

    def condition(self, latent, k):
        if self.ctu is not None:
            return self.ctu_apply(latent, k)
        return self.concat_baseline_apply(latent, k)

    def decode(self, latent):
        h = latent
        pad = self.arch.kernel // 2
        for u, up in zip(self.decoder, self.arch.decoder_upsample):
            h = swish(conv2d(h, u.w, u.b, stride=1, padding=pad), u.beta)
            if up:
                h = bilinear_upsample(h, 2)
        value = conv2d_transpose(h, self.value_head.w, self.value_head.b, stride=2, padding=1)
        if not self.config.use_task_division:
            return value, None
        refine = sigmoid(conv2d_transpose(h, self.refine_head.w, self.refine_head.b, stride=2, padding=1))
        return value, refine

    def assemble(self, value, refine):
        core = mul(value, refine) if refine is not None else value
        return channel_scale(core, self.rgb_balance)

    def generate(self, x, k):
        latent = self.encode(x)
        transformed = self.condition(latent, k)
        value, refine = self.decode(transformed)
        return self.assemble(value, refine)

    def discriminate(self, img, k):
        self._check_image(img, "discriminate")
        self._check_condition(k)
        h = img
        pad = self.arch.kernel // 2
        for i in range(len(self.arch.disc_widths)):
            u = self.cdu[k] if (i == self.arch.cond_disc_layer and self.cdu is not None) else self.disc[i]
            h = swish(conv2d(h, u.w, u.b, stride=2, padding=pad), u.beta)
        h = global_avg_pool(h)
        h = conv2d(h, self.disc_head.w, self.disc_head.b, stride=1, padding=0)
        return sigmoid(h)

    # -- persistence ---------------------------------------------------------

    def save(self, path, extra=None):
        records = [(name, t.data) for name, t in self._names.items()]
        if extra:
            records.extend((name, np.asarray(arr)) for name, arr in extra.items())
        ckpt.write_checkpoint(path, config_text(self.config), records)

    @classmethod
    def load(cls, path):
        """Rebuild a model from a checkpoint; returns (model, extra_records)."""
        cfg_text, records = ckpt.read_checkpoint(path)
        from .config import parse_kv_text

        cfg = build_config(ModelConfig, overrides=parse_kv_text(cfg_text))
        model = cls(cfg, seed=0)
        extra = {}
        for name, arr in records.items():
            if name in model._names:
                param = model._names[name]
                if param.data.shape != arr.shape:
                    raise ckpt.CheckpointError(
                        f"record {name!r} shape {arr.shape} does not match model {param.data.shape}"
                    )
                param.data = arr.astype(param.data.dtype, copy=True)
            else:
                extra[name] = arr
        missing = [n for n in model._names if n not in records]
        if missing:
            raise ckpt.CheckpointError(f"checkpoint is missing parameters: {missing[:4]}")
        return model, extra


# ---------------------------------------------------------------------------
# cost accounting


def conv_cost(cin, cout, k, out_h, out_w, bias=True):
    """Parameter count and multiply-accumulates of one conv layer."""
    params = cout * cin * k * k + (cout if bias else 0)
    macs = cout * cin * k * k * out_h * out_w
    return params, macs


@dataclass
class LayerCost:
    name: str
    scope: str  # generator / conditioning / discriminator
    params: int
    macs: int


@dataclass
class CostReport:
    params_train: int
    params_inference: int
    macs_per_image: int
    flops_per_image: int
    layers: list = field(default_factory=list)
    note: str = "MACs counted for one generated image; 1 MAC = 2 FLOPs; activations excluded"

    def table(self):
        lines = [f"{'layer':<18} {'scope':<14} {'params':>10} {'MACs':>12}"]
        for lc in self.layers:
            lines.append(f"{lc.name:<18} {lc.scope:<14} {lc.params:>10} {lc.macs:>12}")
        lines.append("")
        lines.append(f"trainable parameters: {self.params_train}")
        lines.append(f"inference parameters: {self.params_inference}")
        lines.append(f"inference MACs/image: {self.macs_per_image}")
        lines.append(f"inference FLOPs/image: {self.flops_per_image}  ({self.note})")
        return "\n".join(lines)


def count_params_flops(config: ModelConfig):
    """Closed-form parameter/MAC accounting for a model configuration.

    Inference cost covers one generated image: encoder, the selected
    condition's latent mapping, decoder, heads and recomposition. Training
    additionally owns every other bank entry and the discriminator.
    """
    config.validate()
    k_all = config.n_conditions
    layers = []
    hw = config.image_size
    cl = ENCODER_WIDTHS[-1]

    infer = 0
    macs = 0

    cin = config.image_channels
    for i, (cout, stride) in enumerate(zip(ENCODER_WIDTHS, ENCODER_STRIDES)):
        hw = hw // stride
        p, m = conv_cost(cin, cout, KERNEL, hw, hw)
        p += 1  # swish beta
        layers.append(LayerCost(f"enc.{i}", "generator", p, m))
        infer += p
        macs += m
        cin = cout

    latent_hw = hw
    if config.conditioning == "ctu":
        p_one = 0
        m_one = 0
        for _ in range(2):
            p, m = conv_cost(cl, cl, KERNEL, latent_hw, latent_hw)
            p_one += p + 1
            m_one += m
        layers.append(LayerCost("ctu[k]", "conditioning", p_one, m_one))
        bank_extra = (k_all - 1) * p_one
        layers.append(LayerCost(f"ctu bank ({k_all - 1} more)", "conditioning", bank_extra, 0))
    else:
        p_one, m_one = conv_cost(cl + k_all, cl, KERNEL, latent_hw, latent_hw)
        p_one += 1
        layers.append(LayerCost("concat", "conditioning", p_one, m_one))
        bank_extra = 0
    infer += p_one
    macs += m_one

    cin = cl
    for i, (cout, up) in enumerate(zip(DECODER_WIDTHS, DECODER_UPSAMPLE)):
        p, m = conv_cost(cin, cout, KERNEL, hw, hw)
        p += 1
        layers.append(LayerCost(f"dec.{i}", "generator", p, m))
        infer += p
        macs += m
        if up:
            hw *= 2
            # separable bilinear: two taps per output element per axis
            m_up = 2 * cout * hw * (hw // 2) + 2 * cout * hw * hw
            layers.append(LayerCost(f"dec.{i}.up", "generator", 0, m_up))
            macs += m_up
        cin = cout

    for name in ("value", "refine"):
        p = cin * config.image_channels * HEAD_KERNEL * HEAD_KERNEL + config.image_channels
        m = cin * config.image_channels * HEAD_KERNEL * HEAD_KERNEL * hw * hw
        layers.append(LayerCost(f"dec.{name}", "generator", p, m))
        infer += p
        macs += m
    out_hw = hw * 2

    # value * refine, then per-channel gain
    p = config.image_channels
    m = 2 * config.image_channels * out_hw * out_hw
    layers.append(LayerCost("assemble", "generator", p, m))
    infer += p
    macs += m

    train = infer + bank_extra
    cin = config.image_channels
    d_hw = config.image_size
    for i, cout in enumerate(DISCRIMINATOR_WIDTHS):
        d_hw //= 2
        p, m = conv_cost(cin, cout, KERNEL, d_hw, d_hw)
        p += 1
        if i == CONDITIONAL_DISC_LAYER and config.use_cdu:
            layers.append(LayerCost(f"cdu bank ({k_all})", "discriminator", p * k_all, 0))
            train += p * k_all
        else:
            layers.append(LayerCost(f"disc.{i}", "discriminator", p, 0))
            train += p
        cin = cout
    p, _ = conv_cost(cin, 1, 1, 1, 1)
    layers.append(LayerCost("disc.head", "discriminator", p, 0))
    train += p

    if not config.use_task_division:
        # refine head exists in the accounting only when the decoder is split
        drop = next(lc for lc in layers if lc.name == "dec.refine")
        layers.remove(drop)
        infer -= drop.params
        train -= drop.params
        macs -= drop.macs
        asm = next(lc for lc in layers if lc.name == "assemble")
        macs -= asm.macs // 2
        asm.macs //= 2

    return CostReport(
        params_train=train,
        params_inference=infer,
        macs_per_image=macs,
        flops_per_image=2 * macs,
        layers=layers,
    )
