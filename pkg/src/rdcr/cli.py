"""``rdcr`` command-line front end.

Exit codes: 0 success, 1 check failed (gradcheck), 2 config error,
3 numeric divergence, 4 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .autodiff import NonFiniteError
from .config import ConfigError
from .experiment import build_dataset, run_experiment, schedule_table, train_config
from .gradcheck import run_gradcheck, tiny_problem
from .metrics import pseudo_confusion
from .noise import empirical_transition, write_label_sidecar
from .training import evaluate, load_checkpoint, pseudo_labels

log = logging.getLogger("rdcr")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4


def _overrides(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        out.update(cfgmod.parse_config(f"{k} = {v}"))
    return out


def load(spec: str, scale=None, sets=None) -> dict:
    """Resolve ``spec`` (a config file or a preset name) plus overrides."""
    path = Path(spec)
    if path.is_file():
        if scale:
            raise ConfigError("--scale applies to preset names, not config files")
        over = cfgmod.load_config(path)
    elif spec in cfgmod.PRESETS:
        over = cfgmod.preset(spec, scale)
    else:
        raise ConfigError(f"{spec!r} is neither a config file nor a preset "
                          f"({', '.join(cfgmod.PRESETS)})")
    over.update(_overrides(sets))
    return cfgmod.resolve(over)


def _add_config(p, required=True):
    p.add_argument("--config", required=required, help="config file or preset name")
    p.add_argument("--scale", choices=["tiny"], help="desk-scale variant of a preset")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")


def cmd_corrupt(args) -> int:
    cfg = load(args.config, args.scale, args.set)
    out = Path(args.out or cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    ds, _ = build_dataset(cfg)
    write_label_sidecar(out / "labels.bin", ds)
    T = np.asarray(empirical_transition(ds))
    lines = ["true," + ",".join(f"obs_{j}" for j in range(ds.K))]
    lines += [f"{k}," + ",".join(repr(float(v)) for v in row) for k, row in enumerate(T)]
    (out / "transition-audit.csv").write_text("\n".join(lines) + "\n")
    print(f"corrupted fraction {ds.corrupted_fraction():.4f} over {ds.N} samples; wrote {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load(args.config, args.scale, args.set)
    if args.out:
        cfg["output.dir"] = args.out

    def report(rec):
        log.info("epoch %3d lr %.4f loss %.4f val %.2f student %.2f teacher %.2f pseudo %.2f",
                 rec.epoch, rec.lr, rec.loss_total, rec.val_acc, rec.test_acc_student,
                 rec.test_acc_teacher, rec.pseudo_acc)

    res = run_experiment(cfg, cfg["output.dir"], report)
    last = res.training.log[-1] if res.training.log else None
    if last is not None:
        print(f"final test accuracy: student {last.test_acc_student!r} teacher {last.test_acc_teacher!r}"
              f" swa {last.test_acc_swa!r}")
    print(f"wrote {cfg['output.dir']}")
    return EXIT_OK


def _split(cfg, split):
    ds, test = build_dataset(cfg)
    if split == "test":
        return test.images, test.labels, ds
    idx = ds.train_index_set if split == "train" else ds.validation_index_set
    return ds.images[idx], ds.audit_true_labels()[idx], ds


def cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    cfg = load(args.dataset)
    x, y, _ = _split(cfg, args.split)
    print(f"{args.split} accuracy: {evaluate(params, x, y)!r}")
    return EXIT_OK


def cmd_confusion(args) -> int:
    params = load_checkpoint(args.checkpoint)
    cfg = load(args.dataset)
    x, y, ds = _split(cfg, args.split)
    cm = pseudo_confusion(pseudo_labels(params, x)[0], y, ds.K)
    text = cm.to_csv(args.out)
    if args.out is None:
        sys.stdout.write(text)
    print(f"diagonal mean: {cm.diagonal_mean()!r}", file=sys.stderr)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.preset != "tiny":
        raise ConfigError(f"unknown gradcheck preset {args.preset!r}")
    rep = run_gradcheck(tiny_problem(seed=args.seed))
    for t in rep.tensors:
        print(f"{t.name:24s} {t.size:6d} entries  max rel err {t.max_error:.3e}"
              + (f"  ({t.refined} re-measured at a finer step)" if t.refined else ""))
    verdict = "PASS" if rep.passed else "FAIL"
    print(f"{verdict}: {rep.checked} parameters, worst {rep.worst:.3e} (tolerance {rep.tolerance:g}),"
          f" {rep.seconds:.1f} s")
    return EXIT_OK if rep.passed else EXIT_FAILED


def cmd_schedule(args) -> int:
    cfg = load(args.config, args.scale, args.set)
    rows = schedule_table(cfg)
    tc = train_config(cfg)
    print(f"# clip_threshold = {tc.clip_threshold!r}")
    if args.dump:
        print("epoch,lr,w_s,w_c,w_r")
        for r in rows:
            print(",".join([str(r[0])] + [repr(float(v)) for v in r[1:]]))
    else:
        for j, col in enumerate(("lr", "w_s", "w_c", "w_r"), 1):
            print(f"{col}: first {rows[0][j]!r} last {rows[-1][j]!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rdcr", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corrupt", help="write the noisy label sidecar and transition audit")
    _add_config(p)
    p.add_argument("--out", help="output directory (default: output.dir)")
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("train", help="run training and write metrics and checkpoints")
    _add_config(p)
    p.add_argument("--out", help="output directory (default: output.dir)")
    p.set_defaults(func=cmd_train)

    for name, fn, helptext in (("eval", cmd_eval, "accuracy of a checkpoint"),
                               ("confusion", cmd_confusion, "pseudo-label confusion ratios as CSV")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--dataset", required=True, help="config file or preset describing the data")
        p.add_argument("--split", choices=["test", "train", "validation"],
                       default="test" if name == "eval" else "train")
        if name == "confusion":
            p.add_argument("--out", help="CSV path (default: stdout)")
        p.set_defaults(func=fn)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    p.add_argument("--preset", default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("schedule", help="per-epoch lr and loss weights")
    _add_config(p)
    p.add_argument("--dump", action="store_true", help="print the full per-epoch table")
    p.set_defaults(func=cmd_schedule)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except NonFiniteError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:  # ConfigError and invalid dataset/model specs
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
