"""Pipeline stages shared by the command line and the directional experiment.

A run directory holds ``run.json`` (method, learnable count, metrics),
``model.mpit`` and ``loss_curve.csv``.  ``run_experiment`` chains every stage:
scene packs, full pretraining on large objects, zero-shot evaluation on small
objects, PEFT finetuning, and the comparison tables.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import config as C
from .detector import DetectorConfig, ToyGroundedDetector
from .errors import FormatError
from .metrics import REPORT_COLUMNS, EvalReport, to_csv, to_markdown
from .peft import GROUPS, PeftConfig, TuningMethod, count_learnable, learnable_breakdown, setup_method
from .scenes import ScenePack, generate_pack, load_pack, save_pack
from .train import (Checkpoint, TrainResult, apply_checkpoint, checkpoint_from, evaluate_scenes,
                    load_checkpoint, save_checkpoint, train, train_config_dict)

log = logging.getLogger(__name__)

PACK_SPLITS = {
    "pretrain": ("pretrain", "pretrain_count"),
    "finetune-train": ("finetune", "finetune_train_count"),
    "finetune-val": ("finetune", "finetune_val_count"),
    "test": ("finetune", "test_count"),
}
PEFT_METHODS = tuple(m.value for m in TuningMethod if m is not TuningMethod.ZERO_SHOT)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def write_json(path, obj) -> Path:
    return write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def fmt_float(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# packs
# ---------------------------------------------------------------------------

def make_packs(cfg: dict, splits=tuple(PACK_SPLITS)) -> dict:
    seed = cfg["data"]["seed"]
    out = {}
    for split in splits:
        kind, count_key = PACK_SPLITS[split]
        out[split] = generate_pack(C.scene_config(cfg, kind), split, cfg["data"][count_key], seed)
    return out


def write_packs(packs: dict, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, pack in packs.items():
        paths[split] = out_dir / f"{split}.spk"
        save_pack(pack, paths[split])
    return paths


def pack_at(path) -> ScenePack:
    if not Path(path).is_file():
        raise FormatError("scene pack not found", path=path)
    return load_pack(path)


def read_pack(packs_dir, split: str) -> ScenePack:
    return pack_at(Path(packs_dir) / f"{split}.spk")


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

@dataclass
class Model:
    det: ToyGroundedDetector
    method: TuningMethod
    mhp: object = None
    peft: PeftConfig | None = None

    @property
    def learnable(self) -> int:
        return learnable_breakdown(self.det.store)["total"]


def _checkpoint_config(model: Model, cfg: dict, stage: str) -> dict:
    return {
        "detector": model.det.cfg.to_dict(),
        "method": model.method.value,
        "peft": dict(cfg["peft"]),
        "train": train_config_dict(C.train_config(cfg, stage)),
        "loss": dict(cfg["loss"]),
    }


def detector_from_checkpoint(ckpt: Checkpoint) -> DetectorConfig:
    try:
        d = dict(ckpt.config["detector"])
    except (KeyError, TypeError):
        raise FormatError("checkpoint config lacks a detector section") from None
    return DetectorConfig(**d)


def build_model(ckpt: Checkpoint, method, cfg: dict) -> Model:
    """Detector weights from ``ckpt`` with ``method``'s modules attached.

    Modules the checkpoint already carries (a finetuned run) are restored too.
    """
    method = TuningMethod(method)
    det = ToyGroundedDetector(detector_from_checkpoint(ckpt))
    peft = C.peft_config(cfg)
    mhp = setup_method(det, method, peft)
    flags = {n: det.store.is_trainable(n) for n in det.store.names()}
    apply_checkpoint(det.store, ckpt, flags=False, strict=False)
    unknown = [n for n in ckpt.params if n not in det.store]
    if unknown:
        raise FormatError(f"checkpoint parameters do not fit method {method.value!r}: {unknown[:3]}")
    for name, flag in flags.items():
        det.store.set_trainable(name, flag)
    return Model(det, method, mhp, peft)


def load_model(path, cfg: dict) -> Model:
    """Rebuild the model a checkpoint was saved from (its own method and settings)."""
    ckpt = load_checkpoint(path)
    method = ckpt.config.get("method", TuningMethod.FULL.value)
    run_cfg = {**cfg, "peft": {**cfg["peft"], **ckpt.config.get("peft", {})}}
    return build_model(ckpt, method, run_cfg)


def pretrain(cfg: dict, pack: ScenePack) -> tuple:
    det = ToyGroundedDetector(C.detector_config(cfg))
    model = Model(det, TuningMethod.FULL)
    setup_method(det, TuningMethod.FULL)
    result = train(det, TuningMethod.FULL, pack.scenes, C.train_config(cfg, "pretrain"),
                   weights=C.loss_weights(cfg))
    ckpt = checkpoint_from(det.store, _checkpoint_config(model, cfg, "pretrain"))
    return model, result, ckpt


def finetune(cfg: dict, base: Checkpoint, method, pack: ScenePack) -> tuple:
    model = build_model(base, method, cfg)
    result = train(model.det, model.method, pack.scenes, C.train_config(cfg, "finetune"),
                   mhp=model.mhp, weights=C.loss_weights(cfg))
    ckpt = checkpoint_from(model.det.store, _checkpoint_config(model, cfg, "finetune"))
    return model, result, ckpt


def evaluate_model(model: Model, pack: ScenePack, cfg: dict) -> EvalReport:
    return evaluate_scenes(model.det, pack.scenes, model.mhp, cfg["eval"]["batch_size"])


# ---------------------------------------------------------------------------
# run directories and tables
# ---------------------------------------------------------------------------

def loss_curve_csv(result: TrainResult) -> str:
    rows = [(h["epoch"], fmt_float(h["loss"]), fmt_float(h["lr"])) for h in result.history]
    return csv_text(("epoch", "loss", "lr"), rows)


def run_record(model: Model, report: EvalReport | None) -> dict:
    return {
        "method": model.method.value,
        "params": model.learnable,
        "breakdown": learnable_breakdown(model.det.store),
        "metrics": None if report is None else report.columns(),
        "support": None if report is None else report.support,
    }


def write_run(run_dir, model: Model, result: TrainResult | None, ckpt: Checkpoint | None,
              report: EvalReport | None) -> dict:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    outputs = {}
    if ckpt is not None:
        outputs["model.mpit"] = run_dir / "model.mpit"
        save_checkpoint(ckpt, outputs["model.mpit"])
    if result is not None:
        outputs["loss_curve.csv"] = write_text(run_dir / "loss_curve.csv", loss_curve_csv(result))
    outputs["run.json"] = write_json(run_dir / "run.json", run_record(model, report))
    return outputs


def read_run(run_dir) -> dict:
    path = Path(run_dir) / "run.json"
    try:
        rec = json.loads(path.read_text(encoding="utf-8"))
        rec["method"], rec["params"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"not a run record ({exc.__class__.__name__})", path=path) from None
    return rec


def table_rows(records: list) -> list:
    return [(r["method"], r["params"], r.get("metrics") or {}) for r in records]


def frontier_csv(records: list) -> str:
    """Learnable budget against mAP, sorted by budget (plot-ready)."""
    rows = []
    for r in sorted(records, key=lambda r: (r["params"], r["method"])):
        m = (r.get("metrics") or {}).get("mAP")
        rows.append((r["method"], r["params"], "" if m is None else fmt_float(100.0 * m)))
    return csv_text(("method", "params", "mAP"), rows)


def write_report(out_dir, records: list) -> dict:
    out_dir = Path(out_dir)
    rows = table_rows(records)
    return {
        "report.csv": write_text(out_dir / "report.csv", to_csv(rows)),
        "report.md": write_text(out_dir / "report.md", to_markdown(rows)),
        "frontier.csv": write_text(out_dir / "frontier.csv", frontier_csv(records)),
    }


def params_csv(det_cfg: DetectorConfig, peft: PeftConfig, methods=tuple(m.value for m in TuningMethod)) -> str:
    rows = []
    for m in methods:
        b = count_learnable(m, det_cfg, peft)
        rows.append((m,) + tuple(b[g] for g in GROUPS) + (b["total"],))
    return csv_text(("method",) + GROUPS + ("total",), rows)


# ---------------------------------------------------------------------------
# the directional experiment
# ---------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    records: dict = field(default_factory=dict)       # method -> run record
    seconds: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)       # relative name -> path

    def mAP(self, method: str) -> float | None:
        return (self.records[method].get("metrics") or {}).get("mAP")


def run_experiment(cfg: dict, out_dir, baselines=None) -> ExperimentResult:
    """Pretrain on large objects, then compare zero-shot against MPI (and baselines)."""
    out_dir = Path(out_dir)
    res = ExperimentResult()
    baselines = tuple(cfg["experiment"]["baselines"] if baselines is None else baselines)

    t0 = time.perf_counter()
    packs = make_packs(cfg, ("pretrain", "finetune-train", "test"))
    for split, path in write_packs(packs, out_dir / "packs").items():
        res.outputs[f"packs/{split}.spk"] = path
    res.seconds["datagen"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    base_model, base_result, base_ckpt = pretrain(cfg, packs["pretrain"])
    res.seconds["pretrain"] = time.perf_counter() - t0
    res.outputs["pretrain/model.mpit"] = out_dir / "pretrain" / "model.mpit"
    save_checkpoint(base_ckpt, res.outputs["pretrain/model.mpit"])
    res.outputs["pretrain/loss_curve.csv"] = write_text(out_dir / "pretrain" / "loss_curve.csv",
                                                        loss_curve_csv(base_result))

    t0 = time.perf_counter()
    zero = build_model(base_ckpt, TuningMethod.ZERO_SHOT, cfg)
    zero_report = evaluate_model(zero, packs["test"], cfg)
    res.seconds["zero-shot"] = time.perf_counter() - t0
    for name, p in write_run(out_dir / "runs" / "zero-shot", zero, None, None, zero_report).items():
        res.outputs[f"runs/zero-shot/{name}"] = p
    res.records["zero-shot"] = run_record(zero, zero_report)

    curves = [("pretrain", h) for h in base_result.history]
    for method in ("mpi",) + tuple(b for b in baselines if b != "mpi"):
        t0 = time.perf_counter()
        model, result, ckpt = finetune(cfg, base_ckpt, method, packs["finetune-train"])
        report = evaluate_model(model, packs["test"], cfg)
        res.seconds[method] = time.perf_counter() - t0
        for name, p in write_run(out_dir / "runs" / method, model, result, ckpt, report).items():
            res.outputs[f"runs/{method}/{name}"] = p
        res.records[method] = run_record(model, report)
        curves.extend((method, h) for h in result.history)
        log.info("%s: mAP %s with %d learnable", method, report.mAP, model.learnable)

    records = list(res.records.values())
    for name, p in write_report(out_dir, records).items():
        res.outputs[name] = p
    res.outputs["loss_curves.csv"] = write_text(out_dir / "loss_curves.csv", csv_text(
        ("run", "epoch", "loss", "lr"),
        [(run, h["epoch"], fmt_float(h["loss"]), fmt_float(h["lr"])) for run, h in curves]))
    res.outputs["params.csv"] = write_text(
        out_dir / "params.csv", params_csv(C.detector_config(cfg), C.peft_config(cfg)))
    return res


def experiment_summary(res: ExperimentResult) -> dict:
    out = {m: {"params": r["params"], **{k: r["metrics"].get(k) for k in REPORT_COLUMNS}}
           for m, r in res.records.items()}
    return {"runs": out, "seconds": {k: round(v, 3) for k, v in res.seconds.items()}}


def collect_params(cfg: dict, methods) -> dict:
    det_cfg, peft = C.detector_config(cfg), C.peft_config(cfg)
    return {m: count_learnable(m, det_cfg, peft) for m in methods}
