"""One-off calibration for the acceptance thresholds (criteria 5 and 6)."""

import os
import shutil
import time

import numpy as np

from ltnn.config import DatasetConfig, TrainConfig, model_config_from_train
from ltnn.data import Dataset, generate_dataset, load_batch
from ltnn.evaluation import evaluate
from ltnn.losses import loss_consist
from ltnn.model import LtnnModel
from ltnn.tensor import no_grad
from ltnn.training import Trainer

ROOT = "/tmp/ltnn_calibration"
shutil.rmtree(ROOT, ignore_errors=True)
os.makedirs(ROOT)

ds_cfg = DatasetConfig(n_objects=8, image_size=64, n_conditions=3, seed=5)
train_path, test_path = generate_dataset(ds_cfg, os.path.join(ROOT, "data"))
train_ds, test_ds = Dataset(train_path), Dataset(test_path)
print(f"dataset: {len(train_ds)} train / {len(test_ds)} test objects", flush=True)


def run(tag, steps, **kw):
    cfg = TrainConfig(epochs=10**6, max_steps=steps, batch_size=8, seed=0,
                      checkpoint_interval=0, **kw)
    mcfg = model_config_from_train(cfg, train_ds.image_size, train_ds.n_conditions)
    model = LtnnModel(mcfg, seed=cfg.seed)
    trainer = Trainer(model, train_ds, cfg, out_dir=os.path.join(ROOT, tag))
    t0 = time.time()
    trainer.run()
    dt = time.time() - t0
    print(f"[{tag}] {steps} steps in {dt:.1f}s ({dt/steps*1000:.0f} ms/step)", flush=True)
    return model


def posthoc_consist(model):
    vals = []
    batch = load_batch(train_ds, np.arange(len(train_ds)), model.np_dtype)
    with no_grad():
        latent = model.encode(batch.x)
        for k in range(train_ds.n_conditions):
            lhat = model.condition(latent, k)
            ltgt = model.encode(batch.targets[k])
            vals.append(loss_consist(lhat, ltgt).item())
    return float(np.mean(vals))


# criterion 5: 2000-step overfit
model5 = run("overfit", 2000)
rep = evaluate(model5, train_ds, label="seen")
print(f"[overfit] train L1 {rep.aggregate['l1'].mean:.5f} "
      f"L1m {rep.aggregate['l1_masked'].mean:.5f} "
      f"SSIM {rep.aggregate['ssim'].mean:.5f}", flush=True)

# criterion 6: matched 300-step budgets
model_ctu = run("ctu300", 300)
model_cat = run("cat300", 300, conditioning="ch-concat")
model_k0 = run("k0_300", 300, w_consist=0.0)

for tag, m in (("ctu300", model_ctu), ("cat300", model_cat)):
    r = evaluate(m, test_ds, label="unseen")
    print(f"[{tag}] test L1 {r.aggregate['l1'].mean:.5f} "
          f"SSIM {r.aggregate['ssim'].mean:.5f}", flush=True)

c_on = posthoc_consist(model_ctu)
c_off = posthoc_consist(model_k0)
print(f"[consist] enabled {c_on:.4f} vs kappa=0 {c_off:.4f} ratio {c_off/c_on:.2f}", flush=True)
print("calibration done", flush=True)
