"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure (message names the stage),
2 invalid configuration (message names the field path).
"""
from __future__ import annotations

import argparse
import contextlib
import copy
import csv
import json
import os
import sys
from pathlib import Path

from .budget import budget, delta_checks, paper_profile
from .config import RunConfig, dump_config, load_config
from .diagnostics import consecutive_manager_cosine, emit_reports, manager_weight_stats
from .errors import ConfigError
from .experiment import build, evaluate_heldout, gradcheck_run, retrieval_recall, train
from .trainer import load_checkpoint, restore

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        super().__init__(f"{stage}: {type(cause).__name__}: {cause}")


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except (ConfigError, StageError):
        raise
    except Exception as exc:  # noqa: BLE001 - reported with the stage name
        raise StageError(name, exc) from exc


def thread_limit():
    """Cap BLAS/OpenMP pools at MT_THREADS when set."""
    raw = os.environ.get("MT_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MT_THREADS must be an integer, got {raw!r}", "MT_THREADS") from None
    if n < 1:
        raise ConfigError("MT_THREADS must be >= 1", "MT_THREADS")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "steps", None) is not None:
        overrides += [f"trainer.steps={args.steps}"]
        if args.steps > 0:
            overrides += [f"optim.total_steps={args.steps}"]
    return load_config(args.config, overrides, seed=args.seed, out_dir=args.out)


def _echo(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))


def _load_weights(exp, path) -> None:
    ck = load_checkpoint(path)
    restore(exp.model, ck)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    _echo(cfg, out)
    with stage("build"):
        exp = build(cfg)
    resume = None
    if args.resume:
        with stage("resume"):
            resume = load_checkpoint(args.resume)
    with stage("train"):
        result = train(exp, out, resume)
    with stage("evaluate"):
        ev = evaluate_heldout(exp)
    summary = {"steps": result.checkpoint.step, "heldout_itm_acc": ev.itm_acc,
               "heldout_loss_itm": ev.loss_itm, "heldout_loss_mlm": ev.loss_mlm}
    _write_json(out / "eval.json", summary)
    print(f"trained {result.checkpoint.step} steps -> {out}")
    print(f"held-out ITM accuracy {ev.itm_acc:.4f}, MLM loss {ev.loss_mlm:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    with stage("build"):
        exp = build(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint_final.bin"
    with stage("load checkpoint"):
        _load_weights(exp, ckpt)
    with stage("evaluate"):
        ev = evaluate_heldout(exp)
        rec = retrieval_recall(exp)
    result = {"itm_acc": ev.itm_acc, "loss_itm": ev.loss_itm, "loss_mlm": ev.loss_mlm,
              "pairs": ev.pairs, **rec}
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "eval.json", result)
    for k in sorted(result):
        print(f"{k}: {result[k]}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    if args.batch < 2:
        raise ConfigError("gradcheck needs a batch of at least 2", "--batch")
    with stage("build"):
        cfg.data.train_size = max(cfg.data.train_size, args.batch)
        exp = build(cfg)
        if args.checkpoint:
            _load_weights(exp, args.checkpoint)
    with stage("gradcheck"):
        report = gradcheck_run(exp, args.batch, args.coords, args.h, args.jitter, args.mask_ratio)
    for c in report.worst(args.show):
        print(f"  {c.name:60s} coords={c.coords:3d} rel={c.max_rel_error:.3e} "
              f"dir={c.directional_rel_error:.3e}")
    ok = report.passed(args.tol)
    print(f"checked {len(report.checks)} tensors; max relative error {report.max_rel_error:.3e} "
          f"({'PASS' if ok else 'FAIL'} at tol {args.tol:g})")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_inspect(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    with stage("build"):
        exp = build(cfg)
    if args.checkpoint:
        with stage("load checkpoint"):
            _load_weights(exp, args.checkpoint)
    with stage("inspect"):
        reports = [manager_weight_stats(exp.model, exp.heldout_batches)]
        if cfg.model.crossmodal.layers >= 2:
            reports.append(consecutive_manager_cosine(exp.model, exp.heldout_batches))
        summary = emit_reports(reports, out)
    print(f"wrote {', '.join(summary['files'])} to {out}")
    return EXIT_OK


def cmd_budget(args) -> int:
    if args.profile == "paper":
        cfg_model = paper_profile()
        for text in args.set or []:
            key, _, value = text.partition("=")
            if not key.startswith("model.crossmodal."):
                raise ConfigError("paper profile accepts only model.crossmodal.* overrides", key)
            probe = load_config(overrides=[text])
            attr = key.split(".")[-1]
            setattr(cfg_model.crossmodal, attr, getattr(probe.model.crossmodal, attr))
        cfg_model.validate()
        text_len, vision_len = args.text_len or 50, args.vision_len or 577
        out = Path(args.out or "runs/budget")
    else:
        cfg = _config(args)
        cfg_model = cfg.model
        text_len = args.text_len or cfg_model.encoder.max_len
        vision_len = args.vision_len or cfg_model.encoder.vision_len
        out = Path(cfg.out_dir)
    with stage("budget"):
        rep = budget(cfg_model, text_len, vision_len)
        emit_reports([rep], out)
    d = rep.as_dict()["components"]
    print(f"{'component':20s} {'params':>14s} {'flops':>18s}")
    for name, row in d.items():
        print(f"{name:20s} {row['params']:14,d} {row['flops']:18,d}")
    ok = True
    if args.profile == "paper":
        checks = delta_checks(cfg_model, text_len, vision_len)
        for c in checks:
            print(c.line())
        ok = all(c.passed for c in checks)
    return EXIT_OK if ok else EXIT_RUNTIME


def _cell_name(manager: str, layers: int, experts: int) -> str:
    return f"{manager}_L{layers}_N{experts}"


def cmd_compare(args) -> int:
    base = _config(args)
    out = Path(base.out_dir)
    managers = args.managers.split(",")
    layer_opts = [int(x) for x in args.layers.split(",")] if args.layers else [base.model.crossmodal.layers]
    expert_opts = [int(x) for x in args.experts.split(",")] if args.experts else [base.model.crossmodal.n_experts]
    rows = []
    for manager in managers:
        for layers in layer_opts:
            for experts in expert_opts:
                cfg = copy.deepcopy(base)
                cm = cfg.model.crossmodal
                cm.layers, cm.n_experts = layers, experts
                if manager == "BT":
                    cm.bt_reference = True
                else:
                    cm.manager, cm.bt_reference = manager, False
                name = _cell_name(manager, layers, experts)
                try:
                    cfg.validate()
                except ConfigError as exc:
                    raise ConfigError(str(exc), f"compare[{name}]") from None
                cfg.out_dir = str(out / name)
                _echo(cfg, Path(cfg.out_dir))
                with stage(f"compare {name}"):
                    exp = build(cfg)
                    train(exp, cfg.out_dir)
                    ev = evaluate_heldout(exp)
                rows.append({"manager": manager, "layers": layers, "n_experts": experts,
                             "itm_acc": ev.itm_acc, "loss_mlm": ev.loss_mlm,
                             "params": exp.model.num_parameters()})
                print(f"{name:24s} itm_acc={ev.itm_acc:.4f} loss_mlm={ev.loss_mlm:.4f}")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["manager", "layers", "n_experts", "itm_acc",
                                           "loss_mlm", "params"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "itm_acc": repr(r["itm_acc"]), "loss_mlm": repr(r["loss_mlm"])})
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser, steps: bool = False) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted override, repeatable (e.g. model.crossmodal.layers=2)")
    p.add_argument("--seed", type=int, help="unsigned 64-bit run seed")
    p.add_argument("--out", help="output directory")
    if steps:
        p.add_argument("--steps", type=int, help="training steps (also the schedule length)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="managertower",
                                     description="Toy vision-language tower with layer managers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on synthetic pairs, write metrics and checkpoints")
    _common(p, steps=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="held-out ITM accuracy and retrieval recall")
    _common(p)
    p.add_argument("--checkpoint", help="defaults to OUT/checkpoint_final.bin")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference sweep over all parameters")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--coords", type=int, default=6, help="sampled coordinates per tensor")
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--jitter", type=float, default=0.05,
                   help="parameter noise that moves the check off symmetric init points")
    p.add_argument("--mask-ratio", type=float, default=0.3)
    p.add_argument("--show", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="manager weight and similarity reports")
    _common(p)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("budget", help="parameter and FLOP budget")
    _common(p)
    p.add_argument("--profile", choices=["config", "paper"], default="config")
    p.add_argument("--text-len", type=int)
    p.add_argument("--vision-len", type=int)
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("compare", help="train and evaluate a manager x layers x experts matrix")
    _common(p, steps=True)
    p.add_argument("--managers", default="SAE,SAUE,AAUE,BT")
    p.add_argument("--layers", help="comma-separated cross-modal depths")
    p.add_argument("--experts", help="comma-separated expert counts")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with thread_limit():
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"runtime error in {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
