"""Image metrics and test-set evaluation reports.

Predictions are clamped to [0,1] before any metric. SSIM follows the standard
recipe: luminance only, 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
dynamic range 1, valid windows (no padding). Aggregation always runs in
canonical (object_id, condition) order so shuffling a dataset cannot change
any reported number.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .data import load_batch
from .tensor import no_grad

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

LUMA = (0.299, 0.587, 0.114)


def clamp01(arr):
    return np.clip(arr, 0.0, 1.0)


def metric_l1(y_hat, y):
    """Mean absolute error over all pixels and channels."""
    y_hat = np.asarray(y_hat)
    y = np.asarray(y)
    if y_hat.shape != y.shape:
        raise ValueError(f"metric_l1: shapes differ: {y_hat.shape} vs {y.shape}")
    return metric_l1_masked(y_hat, y, np.ones(y.shape[-2:], dtype=bool))


def metric_l1_masked(y_hat, y, mask):
    """Mean absolute error over foreground pixels only (all channels)."""
    y_hat = np.asarray(y_hat)
    y = np.asarray(y)
    if y_hat.shape != y.shape:
        raise ValueError(f"metric_l1_masked: shapes differ: {y_hat.shape} vs {y.shape}")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("metric_l1_masked: mask selects no pixels")
    return float(np.abs(y_hat - y)[..., mask].mean())


def luminance(img):
    """(3,H,W) -> (H,W) using the 0.299/0.587/0.114 weighting."""
    return LUMA[0] * img[0] + LUMA[1] * img[1] + LUMA[2] * img[2]


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    half = (size - 1) / 2.0
    g = np.exp(-((np.arange(size) - half) ** 2) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _window_stats(img, win):
    n = win.shape[0]
    h, w = img.shape
    sh, sw = img.strides
    views = as_strided(img, shape=(h - n + 1, w - n + 1, n, n), strides=(sh, sw, sh, sw))
    return np.tensordot(views, win, axes=([2, 3], [0, 1]))


def metric_ssim(y_hat, y):
    """Mean local SSIM between the luminance images, dynamic range 1."""
    y_hat = np.asarray(y_hat)
    y = np.asarray(y)
    if y_hat.shape != y.shape:
        raise ValueError(f"metric_ssim: shapes differ: {y_hat.shape} vs {y.shape}")
    a = luminance(y_hat)
    b = luminance(y)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"metric_ssim: image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = _gaussian_window().astype(a.dtype)
    mu_a = _window_stats(a, win)
    mu_b = _window_stats(b, win)
    var_a = _window_stats(a * a, win) - mu_a * mu_a
    var_b = _window_stats(b * b, win) - mu_b * mu_b
    cov = _window_stats(a * b, win) - mu_a * mu_b
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


# ---------------------------------------------------------------------------
# dataset-level evaluation


@dataclass
class MetricStats:
    mean: float
    std: float

    def __str__(self):
        return f"{self.mean:.4f}±{self.std:.4f}"


@dataclass
class MetricReport:
    label: str
    n_samples: int
    per_condition: dict = field(default_factory=dict)  # k -> {"l1"|"l1_masked"|"ssim": MetricStats}
    aggregate: dict = field(default_factory=dict)
    per_sample: list = field(default_factory=list)  # (object_id, k, l1, l1m, ssim)

    def text(self):
        lines = [f"split: {self.label} ({self.n_samples} samples)"]
        header = f"{'condition':<12} {'L1':>16} {'L1_masked':>16} {'SSIM':>16}"
        lines.append(header)
        for k in sorted(self.per_condition):
            row = self.per_condition[k]
            lines.append(
                f"k={k:<10} {str(row['l1']):>16} {str(row['l1_masked']):>16} {str(row['ssim']):>16}"
            )
        agg = self.aggregate
        lines.append(
            f"{'aggregate':<12} {str(agg['l1']):>16} {str(agg['l1_masked']):>16} {str(agg['ssim']):>16}"
        )
        return "\n".join(lines)


def _stats(values):
    arr = np.asarray(values, dtype=np.float64)
    return MetricStats(mean=float(arr.mean()), std=float(arr.std()))


def evaluate(model, dataset, label="test", out_dir=None, grid_rows=6, eval_batch=16):
    """Run the generator over a dataset split and compute per-condition metrics.

    Returns a MetricReport; if out_dir is given, also writes report_{label}.txt,
    report_{label}.csv, per_sample_{label}.csv and a PNG grid of
    (input, prediction, target) triples.
    """
    cfg = model.config
    if (
        cfg.image_size != dataset.image_size
        or cfg.n_conditions != dataset.n_conditions
        or cfg.image_channels != dataset.channels
    ):
        raise ValueError(
            "evaluate: checkpoint/dataset mismatch: model expects "
            f"size={cfg.image_size} channels={cfg.image_channels} conditions={cfg.n_conditions}, "
            f"dataset has size={dataset.image_size} channels={dataset.channels} "
            f"conditions={dataset.n_conditions}"
        )
    n = len(dataset)
    rows = []
    preds_for_grid = {}
    for start in range(0, n, eval_batch):
        idx = np.arange(start, min(start + eval_batch, n))
        batch = load_batch(dataset, idx, model.np_dtype)
        for k in range(dataset.n_conditions):
            with no_grad():
                y_hat = model.generate(batch.x, k).data
            y_hat = clamp01(y_hat)
            y = batch.targets[k].data
            for bi, sample_i in enumerate(idx):
                oid = int(dataset.object_ids[sample_i])
                mask = dataset.masks[sample_i, k]
                rows.append(
                    (
                        oid,
                        k,
                        metric_l1(y_hat[bi], y[bi]),
                        metric_l1_masked(y_hat[bi], y[bi], mask),
                        metric_ssim(y_hat[bi], y[bi]),
                    )
                )
                if sample_i < grid_rows:
                    preds_for_grid[(sample_i, k)] = y_hat[bi]

    rows.sort(key=lambda r: (r[0], r[1]))
    report = MetricReport(label=label, n_samples=n, per_sample=rows)
    by_k = {}
    for oid, k, l1, l1m, ssim in rows:
        by_k.setdefault(k, []).append((l1, l1m, ssim))
    for k, vals in sorted(by_k.items()):
        arr = np.asarray(vals)
        report.per_condition[k] = {
            "l1": _stats(arr[:, 0]),
            "l1_masked": _stats(arr[:, 1]),
            "ssim": _stats(arr[:, 2]),
        }
    all_vals = np.asarray([(l1, l1m, s) for _, _, l1, l1m, s in rows])
    report.aggregate = {
        "l1": _stats(all_vals[:, 0]),
        "l1_masked": _stats(all_vals[:, 1]),
        "ssim": _stats(all_vals[:, 2]),
    }

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write_report(report, dataset, preds_for_grid, out_dir, grid_rows)
    return report


def _write_report(report, dataset, preds, out_dir, grid_rows):
    from .images import make_grid, save_png, to_u8

    label = report.label
    with open(os.path.join(out_dir, f"report_{label}.txt"), "w") as fh:
        fh.write(report.text() + "\n")
    with open(os.path.join(out_dir, f"report_{label}.csv"), "w") as fh:
        fh.write("condition,l1_mean,l1_std,l1_masked_mean,l1_masked_std,ssim_mean,ssim_std\n")
        for k in sorted(report.per_condition):
            r = report.per_condition[k]
            fh.write(
                f"{k},{r['l1'].mean:.17g},{r['l1'].std:.17g},"
                f"{r['l1_masked'].mean:.17g},{r['l1_masked'].std:.17g},"
                f"{r['ssim'].mean:.17g},{r['ssim'].std:.17g}\n"
            )
        a = report.aggregate
        fh.write(
            f"all,{a['l1'].mean:.17g},{a['l1'].std:.17g},"
            f"{a['l1_masked'].mean:.17g},{a['l1_masked'].std:.17g},"
            f"{a['ssim'].mean:.17g},{a['ssim'].std:.17g}\n"
        )
    with open(os.path.join(out_dir, f"per_sample_{label}.csv"), "w") as fh:
        fh.write("object_id,condition,l1,l1_masked,ssim\n")
        for oid, k, l1, l1m, s in report.per_sample:
            fh.write(f"{oid},{k},{l1:.17g},{l1m:.17g},{s:.17g}\n")

    rows = []
    for i in range(min(grid_rows, len(dataset))):
        row = [dataset.images[i, 0]]
        for k in range(dataset.n_conditions):
            row.append(to_u8(preds[(i, k)]))
            row.append(dataset.images[i, 1 + k])
        rows.append(row)
    if rows:
        save_png(os.path.join(out_dir, f"grid_{label}.png"), make_grid(rows))
