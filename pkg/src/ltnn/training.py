"""Alternating two-phase training with selective per-condition updates.

One step handles one (batch, condition k) pair: the generator phase forwards
x through encoder, condition-k latent mapping and decoder, scores the result
with the condition-k discriminator, and applies ADAM to the encoder, decoder,
RGB gains and the selected bank entry only; the discriminator phase then
scores real targets against the detached prediction and updates the shared
discriminator trunk plus its condition-k bank entry. Bank entries for other
conditions are never part of either graph, so their gradients do not exist,
let alone their updates.

The loop iterates epochs x batches x conditions, emits one CSV row per step,
and checkpoints (parameters + ADAM moments + step counter) so a resumed run
is bit-identical to an uninterrupted one.
"""

from __future__ import annotations

import math
import os

import numpy as np

from . import losses
from .data import epoch_order, load_batch
from .losses import CSV_COLUMNS, LossBreakdown, LossWeights
from .tensor import no_grad


class NonFiniteGradError(RuntimeError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient for parameter {name!r}; aborting")
        self.parameter = name


class Adam:
    """ADAM with bias correction; one (m, v, t) state per parameter name."""

    def __init__(self, lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {}

    def update(self, name, param, grad_clip=0.0):
        g = param.grad
        if g is None:
            return
        if not np.isfinite(g).all():
            raise NonFiniteGradError(name)
        if grad_clip > 0.0:
            g = np.clip(g, -grad_clip, grad_clip)
        if name not in self.m:
            self.m[name] = np.zeros_like(param.data)
            self.v[name] = np.zeros_like(param.data)
            self.t[name] = 0
        self.t[name] += 1
        t = self.t[name]
        m = self.m[name]
        v = self.v[name]
        m *= self.beta1
        m += (1.0 - self.beta1) * g
        v *= self.beta2
        v += (1.0 - self.beta2) * (g * g)
        m_hat = m / (1.0 - self.beta1**t)
        v_hat = v / (1.0 - self.beta2**t)
        param.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_records(self):
        out = {}
        for name in self.m:
            out[f"adam.{name}.m"] = self.m[name]
            out[f"adam.{name}.v"] = self.v[name]
            out[f"adam.{name}.t"] = np.asarray(self.t[name], dtype=np.int64)
        return out

    def load_state_records(self, records):
        for key, arr in records.items():
            if not key.startswith("adam."):
                continue
            name, field = key[5:].rsplit(".", 1)
            if field == "m":
                self.m[name] = arr.copy()
            elif field == "v":
                self.v[name] = arr.copy()
            elif field == "t":
                self.t[name] = int(arr)


def _format_row(step, bd):
    vals = (bd.adv_d, bd.adv_g, bd.recon, bd.smooth, bd.consist, bd.total)
    return str(step) + "," + ",".join(f"{v:.17g}" for v in vals)


class Trainer:
    def __init__(self, model, dataset, cfg, out_dir=None):
        cfg.validate()
        self.model = model
        self.dataset = dataset
        self.cfg = cfg
        self.out_dir = out_dir
        self.weights = LossWeights(
            adv=cfg.w_adv, recon=cfg.w_recon, smooth=cfg.w_smooth, consist=cfg.w_consist
        )
        self.adam = Adam(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        self.step = 0
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)

    # -- one update pair ----------------------------------------------------

    def train_step(self, batch, k):
        model = self.model
        cfg = self.cfg
        y_k = batch.targets[k]
        snapshot = self._bank_snapshot(k) if cfg.debug_checks else None

        gen_params = model.generator_parameters(k)
        for p in gen_params.values():
            p.zero_grad()

        latent = model.encode(batch.x)
        transformed = model.condition(latent, k)
        value, refine = model.decode(transformed)
        y_hat = model.assemble(value, refine)
        d_fake = model.discriminate(y_hat, k)
        adv_g = losses.loss_adv_g(d_fake)
        recon = losses.loss_recon(y_hat, y_k)
        smooth = losses.loss_smooth(y_hat)
        with no_grad():
            latent_target = model.encode(y_k)
        consist = losses.loss_consist(transformed, latent_target)
        # validates finiteness before any parameter moves
        losses.loss_total(adv_g.data, recon.data, smooth.data, consist.data, self.weights)
        total = losses.combine(adv_g, recon, smooth, consist, self.weights)
        total.backward()
        for name, p in gen_params.items():
            self.adam.update(name, p, cfg.grad_clip)

        disc_params = model.discriminator_parameters(k)
        for p in disc_params.values():
            p.zero_grad()
        d_real = model.discriminate(y_k, k)
        d_fake_detached = model.discriminate(y_hat.detach(), k)
        adv_d = losses.loss_adv_d(d_real, d_fake_detached)
        breakdown = losses.loss_total(
            adv_g.data, recon.data, smooth.data, consist.data, self.weights, adv_d=adv_d.data
        )
        adv_d.backward()
        for name, p in disc_params.items():
            self.adam.update(name, p, cfg.grad_clip)

        if snapshot is not None:
            self._check_banks(snapshot, k)
        return breakdown

    def _bank_snapshot(self, k):
        snap = {}
        for name, p in self.model.named_parameters().items():
            if (name.startswith("ctu.") or name.startswith("cdu.")) and not name.startswith(
                (f"ctu.{k}.", f"cdu.{k}.")
            ):
                snap[name] = p.data.copy()
        return snap

    def _check_banks(self, snapshot, k):
        params = self.model.named_parameters()
        for name, before in snapshot.items():
            if not np.array_equal(params[name].data, before):
                raise AssertionError(f"bank entry {name!r} changed during a step on condition {k}")

    # -- the loop -------------------------------------------------------------

    def total_steps(self):
        n = len(self.dataset)
        bs = min(self.cfg.batch_size, n)
        n_batches = math.ceil(n / bs)
        total = self.cfg.epochs * n_batches * self.dataset.n_conditions
        if self.cfg.max_steps > 0:
            total = min(total, self.cfg.max_steps)
        return total

    def run(self, log_every=0):
        ds = self.dataset
        cfg = self.cfg
        n = len(ds)
        n_cond = ds.n_conditions
        bs = min(cfg.batch_size, n)
        n_batches = math.ceil(n / bs)
        steps_per_epoch = n_batches * n_cond
        total = self.total_steps()

        csv_fh = None
        if self.out_dir:
            csv_path = os.path.join(self.out_dir, "loss.csv")
            fresh = self.step == 0 or not os.path.exists(csv_path)
            csv_fh = open(csv_path, "w" if fresh else "a")
            if fresh:
                csv_fh.write(",".join(CSV_COLUMNS) + "\n")

        last_epoch = -1
        last_batch = -1
        order = None
        batch = None
        try:
            while self.step < total:
                epoch = self.step // steps_per_epoch
                within = self.step % steps_per_epoch
                batch_idx = within // n_cond
                k = within % n_cond
                if epoch != last_epoch:
                    order = epoch_order(n, cfg.seed, epoch)
                    last_epoch = epoch
                    last_batch = -1
                if batch_idx != last_batch:
                    idx = order[batch_idx * bs : (batch_idx + 1) * bs]
                    batch = load_batch(ds, idx, self.model.np_dtype)
                    last_batch = batch_idx
                bd = self.train_step(batch, k)
                self.step += 1
                if csv_fh:
                    csv_fh.write(_format_row(self.step, bd) + "\n")
                if log_every and self.step % log_every == 0:
                    print(
                        f"step {self.step}/{total} total={bd.total:.4f} recon={bd.recon:.4f} "
                        f"adv_g={bd.adv_g:.4f} adv_d={bd.adv_d:.4f}",
                        flush=True,
                    )
                if (
                    self.out_dir
                    and cfg.checkpoint_interval > 0
                    and self.step % cfg.checkpoint_interval == 0
                    and self.step < total
                ):
                    self.save_checkpoint(os.path.join(self.out_dir, f"ckpt_{self.step:06d}.ltnn"))
        finally:
            if csv_fh:
                csv_fh.close()
        if self.out_dir:
            self.save_checkpoint(os.path.join(self.out_dir, "final.ltnn"))

    # -- persistence ----------------------------------------------------------

    def save_checkpoint(self, path):
        extra = self.adam.state_records()
        extra["trainer.step"] = np.asarray(self.step, dtype=np.int64)
        self.model.save(path, extra=extra)

    def restore(self, extra_records):
        """Adopt ADAM state and step counter from a loaded checkpoint."""
        self.adam.load_state_records(extra_records)
        if "trainer.step" in extra_records:
            self.step = int(extra_records["trainer.step"])
