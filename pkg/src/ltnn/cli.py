"""Command-line entry point.

Subcommands: gen-data, train, eval, synth, cost. Every command accepts
``--config FILE`` (flat key=value text) plus ``--key=value`` overrides, with
precedence CLI > file > defaults; unknown keys are errors. Exit codes:
0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import re
import sys

import numpy as np

from .config import (
    ConfigError,
    DatasetConfig,
    ModelConfig,
    TrainConfig,
    build_config,
    config_text,
    model_config_from_train,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse would sys.exit(2) on bad usage; route it to exit code 1 instead
    def error(self, message):
        raise UsageError(message)


_OVERRIDE_RE = re.compile(r"^--([A-Za-z0-9_]+)=(.*)$")


def _split_overrides(rest):
    overrides = {}
    for token in rest:
        m = _OVERRIDE_RE.match(token)
        if not m:
            raise UsageError(f"unrecognized argument {token!r} (expected --key=value)")
        overrides[m.group(1)] = m.group(2)
    return overrides


def _echo_config(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(config_text(cfg))


def _cmd_gen_data(args, overrides):
    from .data import generate_dataset

    cfg = build_config(DatasetConfig, args.config, overrides)
    train_path, test_path = generate_dataset(cfg, args.out, export_png=args.export_png)
    _echo_config(cfg, args.out)
    print(f"wrote {train_path}")
    print(f"wrote {test_path}")
    return 0


def _cmd_train(args, overrides):
    from .data import Dataset
    from .model import LtnnModel
    from .training import Trainer

    cfg = build_config(TrainConfig, args.config, overrides)
    dataset = Dataset(os.path.join(args.data, "train.ltnd"))
    if args.resume:
        model, extra = LtnnModel.load(args.resume)
        trainer = Trainer(model, dataset, cfg, out_dir=args.out)
        trainer.restore(extra)
    else:
        model_cfg = model_config_from_train(cfg, dataset.image_size, dataset.n_conditions,
                                            dataset.channels)
        model = LtnnModel(model_cfg, seed=cfg.seed)
        trainer = Trainer(model, dataset, cfg, out_dir=args.out)
    _echo_config(cfg, args.out)
    trainer.run(log_every=args.log_every)
    print(f"finished at step {trainer.step}; checkpoint {os.path.join(args.out, 'final.ltnn')}")
    return 0


def _cmd_eval(args, overrides):
    from .data import Dataset
    from .evaluation import evaluate
    from .model import LtnnModel

    if overrides:
        raise UsageError(f"eval takes no config overrides, got {sorted(overrides)}")
    model, _ = LtnnModel.load(args.ckpt)
    for label, fname in (("seen", "train.ltnd"), ("unseen", "test.ltnd")):
        path = os.path.join(args.data, fname)
        if not os.path.exists(path):
            continue
        report = evaluate(model, Dataset(path), label=label, out_dir=args.out)
        print(report.text())
        print()
    _echo_config(model.config, args.out)
    return 0


def _cmd_synth(args, overrides):
    from .images import load_png, make_grid, save_png, to_u8
    from .model import LtnnModel
    from .tensor import Tensor, no_grad

    if overrides:
        raise UsageError(f"synth takes no config overrides, got {sorted(overrides)}")
    model, _ = LtnnModel.load(args.ckpt)
    k_all = model.config.n_conditions
    if args.condition == "all":
        conditions = list(range(k_all))
    else:
        try:
            k = int(args.condition)
        except ValueError:
            raise UsageError(f"--condition must be an integer or 'all', got {args.condition!r}")
        if not 0 <= k < k_all:
            raise UsageError(f"--condition {k} out of range [0, {k_all})")
        conditions = [k]
    img = load_png(args.input)
    x = Tensor(img[None].astype(model.np_dtype) / 255.0)
    row = [img]
    for k in conditions:
        with no_grad():
            y_hat = model.generate(x, k).data[0]
        row.append(to_u8(np.clip(y_hat, 0.0, 1.0)))
    save_png(args.out, make_grid([row]))
    print(f"wrote {args.out} ({len(row)} tiles)")
    return 0


def _cmd_cost(args, overrides):
    from .model import count_params_flops

    cfg = build_config(ModelConfig, args.config, overrides)
    print(count_params_flops(cfg).table())
    return 0


def build_parser():
    parser = _Parser(prog="ltnn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a procedural multi-view dataset")
    p.add_argument("--config", "-c", default=None)
    p.add_argument("--out", "-o", required=True)
    p.add_argument("--export-png", action="store_true")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", "-c", default=None)
    p.add_argument("--data", "-d", required=True, help="directory containing train.ltnd")
    p.add_argument("--out", "-o", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on both splits")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", "-d", required=True)
    p.add_argument("--out", "-o", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("synth", help="synthesize view(s) for one input image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="input PNG at the checkpoint's resolution")
    p.add_argument("--condition", default="all", help="condition index or 'all'")
    p.add_argument("--out", "-o", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("cost", help="print parameter/FLOP accounting")
    p.add_argument("--config", "-c", default=None)
    p.set_defaults(func=_cmd_cost)

    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
        overrides = _split_overrides(rest)
        return args.func(args, overrides)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures: bad files, aborted training, ...
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
