"""Command-line entry point: ``python -m hardattn <subcommand>``.

Results go to stdout between ``--- begin <name> ---`` / ``--- end <name> ---``
delimiters as CSV; subcommands with ``--out`` also write files (figures,
CSVs, EIG maps) into that directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .data import load_dataset, write_dataset
from .evaluate import POLICIES, EvalReport, evaluate_policy
from .model import HardAttentionModel, load_model
from .tensor.checkpoint import CheckpointError


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=args.seed),
                                  data=dataclasses.replace(cfg.data, seed=cfg.data.seed))
    if getattr(args, "P", None) is not None:
        cfg = dataclasses.replace(cfg, policy=dataclasses.replace(cfg.policy, P=args.P))
    return cfg


def _block(name: str, rows) -> None:
    print(f"--- begin {name} ---")
    for row in rows:
        print(",".join(str(v) for v in row))
    print(f"--- end {name} ---")


def _report_rows(rep: EvalReport):
    yield ("policy", "t", "accuracy", "entropy", "area")
    for t in range(rep.T):
        yield (rep.policy, t, f"{rep.accuracy[t]:.6f}", f"{rep.entropy[t]:.6f}", f"{rep.area[t]:.6f}")


def cmd_train(args) -> int:
    from .training import prepare_run_dir, resume, train_phase

    cfg = _config(args)
    run_dir = prepare_run_dir(args.run or f"seed{cfg.train.seed}", cfg)
    model = HardAttentionModel(cfg.model, cfg.train.seed)
    opt = None
    ckpt = args.resume
    if ckpt is None and args.phase > 1:
        ckpt = run_dir / f"phase{args.phase - 1}.npz"
        if not ckpt.exists():
            _log(f"phase {args.phase} needs a phase-{args.phase - 1} checkpoint (missing {ckpt})")
            return 2
    if ckpt is not None:
        opt, _ = resume(model, ckpt, args.phase, cfg.train)
    data = load_dataset(cfg.data)
    result = train_phase(model, data, cfg.train, args.phase, run_dir=run_dir, optimizer=opt, log=_log)
    rows = [("epoch", "phase", "train_loss", "val_loss")]
    rows += [(r["epoch"], r["phase"], f"{r['train_loss']:.6f}", f"{r['val_loss']:.6f}") for r in result.history]
    _block("train", rows)
    print(f"checkpoint: {result.checkpoint}")
    return 0


def _eval_reports(args, cfg):
    model, _ = load_model(args.checkpoint)
    data = load_dataset(cfg.data)
    split = data.split(args.split)
    reports = [evaluate_policy(model, p, split, cfg.policy, seed=cfg.train.seed,
                               num_classes=data.num_classes) for p in args.policy]
    return model, split, reports


def cmd_eval(args) -> int:
    cfg = _config(args)
    model, split, reports = _eval_reports(args, cfg)
    for rep in reports:
        _block(f"eval {rep.policy}", _report_rows(rep))
    if args.out:
        from .export import export_artifacts
        paths = export_artifacts(reports, args.out, model.grid, images=split.x)
        print(f"wrote {len(paths)} files to {args.out}")
    return 0


def cmd_export(args) -> int:
    from .export import export_artifacts

    cfg = _config(args)
    model, split, reports = _eval_reports(args, cfg)
    paths = export_artifacts(reports, args.out, model.grid, images=split.x, num_examples=args.examples)
    _block("export", [("file",)] + [(str(p),) for p in paths])
    return 0


def cmd_cnn_bound(args) -> int:
    from .cnn import cnn_accuracy, save_cnn, train_cnn_bound

    cfg = _config(args)
    data = load_dataset(cfg.data)
    res = train_cnn_bound(data.train, data.val, data.num_classes, cfg.train, epochs=args.epochs, log=_log)
    acc = cnn_accuracy(res.model, data.test)
    if args.out:
        save_cnn(res.model, args.out, meta=dict(seed=cfg.train.seed))
    _block("cnn-bound", [("split", "accuracy"), ("val", f"{res.accuracy:.6f}"), ("test", f"{acc:.6f}")])
    return 0


def cmd_masked_eval(args) -> int:
    from .cnn import load_cnn, masked_cnn_eval

    cfg = _config(args)
    model, split, reports = _eval_reports(args, cfg)
    cnn = load_cnn(args.cnn)
    accs = masked_cnn_eval(cnn, {r.policy: r.traces for r in reports}, split, model.grid)
    rows = [("policy", "t", "masked_cnn_accuracy")]
    for name, acc in accs.items():
        rows += [(name, t, f"{a:.6f}") for t, a in enumerate(acc)]
    _block("masked-eval", rows)
    return 0


def cmd_gen_data(args) -> int:
    from .data import generate_synthetic

    cfg = _config(args)
    spec = dataclasses.replace(cfg.data, source="synthetic", seed=args.seed)
    paths = write_dataset(generate_synthetic(spec), args.out)
    _block("gen-data", [("file", "bytes")] + [(str(p), p.stat().st_size) for p in paths])
    return 0


def cmd_experiment(args) -> int:
    from .experiment import median_over_seeds, run_experiment

    cfg = _config(args)
    root = Path(args.out) if args.out else None
    results = run_experiment(cfg, range(args.seeds), root, cnn_epochs=args.cnn_epochs, log=_log)
    rows = [("quantity", "t", "median")]
    for key in ("eig", "random", "eig_gaussian"):
        med = median_over_seeds([getattr(r, key).accuracy for r in results])
        rows += [(f"{key}_accuracy", t, f"{v:.6f}") for t, v in enumerate(med)]
    rows.append(("cnn_accuracy", "", f"{np.median([r.cnn_accuracy for r in results]):.6f}"))
    _block("experiment", rows)
    if root:
        (root / "summaries.json").write_text(json.dumps([r.summary() for r in results], indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hardattn", description="Probabilistic hard-attention classifier")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="key = value config file")
        if seed:
            sp.add_argument("--seed", type=int)
        return sp

    sp = common(sub.add_parser("train", help="run one training phase"))
    sp.add_argument("--phase", type=int, choices=(1, 2, 3), required=True)
    sp.add_argument("--resume", type=Path, help="checkpoint to start from")
    sp.add_argument("--run", help="run directory name under $HARDATTN_RUN_ROOT")
    sp.set_defaults(fn=cmd_train)

    for name, fn, help_ in (("eval", cmd_eval, "evaluate glimpse policies"),
                            ("export", cmd_export, "evaluate and write all artifacts"),
                            ("masked-eval", cmd_masked_eval, "score policy traces with a full-image CNN")):
        sp = common(sub.add_parser(name, help=help_))
        sp.add_argument("--checkpoint", type=Path, required=True)
        sp.add_argument("--policy", nargs="+", choices=POLICIES, default=list(POLICIES))
        sp.add_argument("--P", type=int, help="EIG sample budget")
        sp.add_argument("--split", default="test", choices=("train", "val", "test"))
        if name == "eval":
            sp.add_argument("--out", help="directory for figures and CSVs")
        if name == "export":
            sp.add_argument("--out", required=True)
            sp.add_argument("--examples", type=int, default=4)
        if name == "masked-eval":
            sp.add_argument("--cnn", type=Path, required=True)
        sp.set_defaults(fn=fn)

    sp = common(sub.add_parser("cnn-bound", help="train the full-image CNN"))
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--out", type=Path)
    sp.set_defaults(fn=cmd_cnn_bound)

    sp = common(sub.add_parser("gen-data", help="write the synthetic dataset as CIFAR-binary files"), seed=False)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(fn=cmd_gen_data)

    sp = common(sub.add_parser("experiment", help="multi-seed comparison"), seed=False)
    sp.add_argument("--seeds", type=int, default=5)
    sp.add_argument("--cnn-epochs", type=int, default=10)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        _log(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
