"""``mpi-tune`` command line.

Exit codes: 0 success, 1 usage error, 2 malformed input file, 3 numerical
failure.  Every command writes a ``manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import config as C
from . import experiment as X
from .detector import DetectorConfig
from .errors import ContractError, FormatError, NumericalError
from .gradcheck import SUITES, TOLERANCE, run_suite
from .metrics import to_markdown
from .peft import GROUPS, count_learnable
from .train import load_checkpoint, save_checkpoint

EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERICAL = 1, 2, 3
FINETUNE_METHODS = X.PEFT_METHODS


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def _checksums(paths) -> dict:
    return {str(p): X.sha256_file(p) for p in sorted(set(map(str, paths))) if Path(p).is_file()}


def write_manifest(path, command: str, cfg: dict, inputs, outputs, started: float) -> Path:
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": C.config_hash(cfg),
        "seed": cfg["run"]["seed"],
        "inputs": _checksums(inputs),
        "outputs": _checksums(outputs),
        "timing": {"seconds": round(time.perf_counter() - started, 3)},
    }
    return X.write_json(path, manifest)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _config(args) -> dict:
    overrides: dict = {"run": {"seed": getattr(args, "seed", None)}}
    for section, key, attr in (("peft", "M", "M"), ("finetune", "epochs", "epochs"),
                               ("finetune", "lr", "lr"), ("pretrain", "epochs", "pretrain_epochs"),
                               ("pretrain", "lr", "pretrain_lr")):
        if getattr(args, attr, None) is not None:
            overrides.setdefault(section, {})[key] = getattr(args, attr)
    return C.load_config(args.config, overrides)


def cmd_datagen(args, cfg) -> tuple:
    packs = X.make_packs(cfg)
    paths = X.write_packs(packs, args.out)
    for split, p in paths.items():
        print(f"{split}: {len(packs[split])} scenes -> {p}")
    return [], list(paths.values()), Path(args.out) / "manifest.json"


def cmd_pretrain(args, cfg) -> tuple:
    pack_path = Path(args.packs) / "pretrain.spk"
    pack = X.read_pack(args.packs, "pretrain")
    _, result, ckpt = X.pretrain(cfg, pack)
    out = Path(args.out)
    save_checkpoint(ckpt, out)
    curve = X.write_text(out.with_suffix(".loss.csv"), X.loss_curve_csv(result))
    print(f"final epoch loss {result.history[-1]['loss']:.5f} -> {out}")
    return [pack_path], [out, curve], out.with_suffix(".manifest.json")


def cmd_finetune(args, cfg) -> tuple:
    base = load_checkpoint(args.checkpoint)
    pack = X.read_pack(args.packs, "finetune-train")
    model, result, ckpt = X.finetune(cfg, base, args.method, pack)
    inputs = [args.checkpoint, Path(args.packs) / "finetune-train.spk"]
    report = None
    test = Path(args.packs) / "test.spk"
    if test.exists():
        report = X.evaluate_model(model, X.read_pack(args.packs, "test"), cfg)
        inputs.append(test)
    outputs = X.write_run(args.out, model, result, ckpt, report)
    print(f"{args.method}: {model.learnable} learnable, mAP "
          f"{'-' if report is None or report.mAP is None else f'{100 * report.mAP:.2f}'}")
    return inputs, list(outputs.values()), Path(args.out) / "manifest.json"


def cmd_eval(args, cfg) -> tuple:
    if args.zero_shot:
        model = X.build_model(load_checkpoint(args.checkpoint), "zero-shot", cfg)
    else:
        model = X.load_model(args.checkpoint, cfg)
    pack = X.pack_at(args.pack)
    report = X.evaluate_model(model, pack, cfg)
    outputs = X.write_run(args.out, model, None, None, report)
    outputs.update(X.write_report(args.out, [X.run_record(model, report)]))
    print(to_markdown(X.table_rows([X.run_record(model, report)])), end="")
    return [args.checkpoint, args.pack], list(outputs.values()), Path(args.out) / "manifest.json"


def cmd_count_params(args, cfg) -> tuple:
    det_cfg = C.detector_config(cfg)
    if args.full_depth:
        det_cfg = DetectorConfig.full_depth(**{k: v for k, v in det_cfg.to_dict().items()
                                                if k not in ("fe_blocks", "dec_blocks")})
    peft = C.peft_config(cfg)
    b = count_learnable(args.method, det_cfg, peft)
    header = ("method", "M", "insertion_points") + GROUPS + ("total",)
    row = (args.method, peft.M, det_cfg.num_insertion_points) + tuple(b[g] for g in GROUPS) + (b["total"],)
    text = X.csv_text(header, [row])
    print(f"insertion points N = {det_cfg.num_insertion_points}")
    print(text, end="")
    outputs = []
    if args.out:
        outputs.append(X.write_text(args.out, text))
    manifest = Path(args.out).with_suffix(".manifest.json") if args.out else None
    return [], outputs, manifest


def cmd_gradcheck(args, cfg) -> tuple:
    worst = run_suite(args.suite, range(args.seeds))
    failed = {k: v for k, v in worst.items() if not v < TOLERANCE}
    for name, err in sorted(worst.items()):
        print(f"{'FAIL' if name in failed else 'ok  '} {name:40s} {err:.3e}")
    print(f"{args.suite}: {len(worst) - len(failed)}/{len(worst)} checks below {TOLERANCE:g}")
    if failed:
        raise NumericalError(f"gradient check failed for {', '.join(sorted(failed))}")
    return [], [], None


def cmd_report(args, cfg) -> tuple:
    records = [X.read_run(d) for d in args.runs]
    outputs = X.write_report(args.out, records)
    print(to_markdown(X.table_rows(records)), end="")
    inputs = [Path(d) / "run.json" for d in args.runs]
    return inputs, list(outputs.values()), Path(args.out) / "manifest.json"


def cmd_experiment(args, cfg) -> tuple:
    res = X.run_experiment(cfg, args.out)
    print(to_markdown(X.table_rows(list(res.records.values()))), end="")
    X.write_json(Path(args.out) / "summary.json", X.experiment_summary(res))
    return [], list(res.outputs.values()), Path(args.out) / "manifest.json"


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mpi-tune", description="Positional-encoding tuning of a toy grounded detector.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--seed", type=int, help="model seed")
        sp.set_defaults(fn=fn)
        return sp

    sp = command("datagen", cmd_datagen, "generate the scene packs")
    sp.add_argument("--out", required=True, help="output directory")

    sp = command("pretrain", cmd_pretrain, "train every detector weight on large objects")
    sp.add_argument("--packs", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--epochs", dest="pretrain_epochs", type=int)
    sp.add_argument("--lr", dest="pretrain_lr", type=float)

    sp = command("finetune", cmd_finetune, "tune a pretrained detector with one method")
    sp.add_argument("--method", required=True, choices=FINETUNE_METHODS)
    sp.add_argument("--M", type=int, help="number of tiny MLPs (mpi)")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--packs", required=True)
    sp.add_argument("--out", required=True, help="run directory")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)

    sp = command("eval", cmd_eval, "evaluate a checkpoint on a scene pack")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--pack", required=True)
    sp.add_argument("--out", required=True, help="run directory")
    sp.add_argument("--zero-shot", action="store_true",
                    help="report the checkpoint as the untuned zero-shot baseline")

    sp = command("count-params", cmd_count_params, "learnable-parameter breakdown of a method")
    sp.add_argument("--method", required=True, choices=tuple(m for m in ("zero-shot",) + FINETUNE_METHODS))
    sp.add_argument("--M", type=int)
    sp.add_argument("--full-depth", action="store_true", help="six enhancer and six decoder blocks")
    sp.add_argument("--out", help="CSV path")

    sp = command("gradcheck", cmd_gradcheck, "finite-difference gradient suites")
    sp.add_argument("--suite", required=True, choices=SUITES)
    sp.add_argument("--seeds", type=int, default=10)

    sp = command("report", cmd_report, "comparison table over run directories")
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--out", required=True)

    sp = command("experiment", cmd_experiment, "pretrain, zero-shot and MPI comparison end to end")
    sp.add_argument("--out", required=True)
    sp.add_argument("--M", type=int)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        cfg = _config(args)
        with threadpool_limits(limits=C.thread_limit()):
            inputs, outputs, manifest = args.fn(args, cfg)
        if manifest is not None:
            inputs = ([args.config] if args.config else []) + list(inputs)
            write_manifest(manifest, " ".join(["mpi-tune"] + argv), cfg, inputs, outputs, started)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
