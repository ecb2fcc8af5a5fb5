"""Command-line harness.

Every command reads an :class:`ExperimentConfig`, built from defaults, then
an optional ``--config`` file of ``key = value`` lines, then explicit flags.
Flags are the config keys with dashes, e.g. ``--patch-fraction 0.03``.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import oracle
from .aggregate import MaskingConfig
from .attack import AttackConfig
from .data import synthetic_dataset
from .experiment import (
    ATTACK_HEADER,
    attack_dataset,
    attack_summary,
    certify_dataset,
    certify_header,
    diagnose_dataset,
    shapes_for,
    summarize,
)
from .formats import FormatError, load_dataset, load_model, read_config, save_dataset, save_model, write_csv
from .geometry import RFGeometry
from .model import LabeledDataset, TrainConfig, accuracy, local_logits, logits_to_kind, train, train_provable_adv
from .tensors import ClipBounds, ContractError

log = logging.getLogger("patchguard")

KINDS = ("logits", "confidence", "prediction")


@dataclass
class ExperimentConfig:
    # paths
    dataset: str = "data/train.pgds"
    test_dataset: str = "data/test.pgds"
    model: str = "model.pgmd"
    out_dir: str = "results"
    # data generation
    train_count: int = 2000
    test_count: int = 200
    # geometry and features
    rf: int = 9
    stride: int = 4
    kind: str = "logits"
    # robust masking
    clip_lo: float = 0.0
    clip_hi: float = math.inf
    threshold: float = 0.0
    patch_fraction: float = 0.03
    mask_fraction: float = 0.0  # 0 means the mask matches the patch
    topk: int = 1
    # training
    learning_rate: float = 0.02
    epochs: int = 10
    batch_size: int = 32
    hidden: int = 32
    momentum: float = 0.9
    adv_train: bool = False
    # attack
    steps: int = 500
    step_size: float = 0.05
    locations: int = 5
    limit: int = 0  # process only the first n test images, 0 for all
    # oracle
    lemma1_scenarios: int = 500
    soundness_trials: int = 1000
    lemma2_scenarios: int = 200
    # sweeps, comma separated; empty skips
    sweep_rf: str = ""
    sweep_threshold: str = "0,0.2,0.4,0.6,0.8"
    sweep_kind: str = "logits,confidence,prediction"
    sweep_patch: str = "0.01,0.02,0.03"
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ContractError(f"kind must be one of {KINDS}")
        if not 0.0 <= self.threshold < 1.0:
            raise ContractError("threshold must lie in [0, 1) for certification")
        if not 0.0 < self.patch_fraction <= 1.0 or not 0.0 <= self.mask_fraction <= 1.0:
            raise ContractError("patch and mask fractions must lie in (0, 1]")
        if self.mask_fraction and self.mask_fraction < self.patch_fraction:
            raise ContractError("mask fraction must be at least the patch fraction")
        if self.clip_lo < 0 or self.clip_hi < self.clip_lo:
            raise ContractError("clip bounds need 0 <= clip_lo <= clip_hi")
        for name in ("rf", "stride", "topk", "epochs", "batch_size", "hidden", "locations", "train_count", "test_count"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.steps < 0 or self.limit < 0 or self.learning_rate < 0 or self.step_size <= 0:
            raise ContractError("steps, limit and learning_rate must be >= 0, step_size positive")

    def masking(self, mask_shape) -> MaskingConfig:
        hi = None if math.isinf(self.clip_hi) else self.clip_hi
        return MaskingConfig(tuple(mask_shape), self.threshold, ClipBounds(self.clip_lo, hi))

    def train_config(self, mask_shape=None) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.epochs, self.batch_size, self.seed, self.hidden, mask_shape, self.momentum)

    def attack_config(self) -> AttackConfig:
        return AttackConfig(self.steps, self.step_size, self.locations, None, self.seed)


def _coerce(kind, text: str):
    if kind is bool:
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ContractError(f"not a boolean: {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


_TYPES = {"str": str, "int": int, "float": float, "bool": bool}


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig()
    types = {f.name: _TYPES[f.type] if isinstance(f.type, str) else f.type for f in fields(ExperimentConfig)}
    if args.config:
        for key, value in read_config(args.config).items():
            if key not in types:
                raise ContractError(f"unknown config key {key!r}")
            setattr(cfg, key, _coerce(types[key], value))
    for key, kind in types.items():
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, _coerce(kind, value) if isinstance(value, str) else value)
    cfg.validate()
    return cfg


def _floats(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _load_pair(cfg: ExperimentConfig):
    for path in (cfg.model, cfg.test_dataset):
        if not Path(path).exists():
            raise ContractError(f"missing file {path}")
    model = load_model(cfg.model)
    data = load_dataset(cfg.test_dataset)
    if cfg.limit:
        data = data.subset(slice(0, cfg.limit))
    return model, data


def _out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _geometry(cfg: ExperimentConfig, data: LabeledDataset, rf: Optional[int] = None) -> RFGeometry:
    rows, cols = data.images.shape[1:3]
    return RFGeometry.square(rf or cfg.rf, cfg.stride, rows, cols)


# --- commands ----------------------------------------------------------------


def cmd_generate(cfg: ExperimentConfig) -> int:
    for path, count, seed in ((cfg.dataset, cfg.train_count, cfg.seed), (cfg.test_dataset, cfg.test_count, cfg.seed + 1)):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        save_dataset(synthetic_dataset(count, seed=seed), path)
        print(f"wrote {count} images to {path}")
    return 0


def cmd_ingest(cfg: ExperimentConfig, source: str) -> int:
    """Convert an .npz with ``images`` (n, rows, cols[, channels]) and ``labels`` arrays."""
    with np.load(source) as npz:
        images, labels = npz["images"], npz["labels"]
        classes = int(npz["classes"]) if "classes" in npz else int(labels.max(initial=0)) + 1
    Path(cfg.dataset).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(LabeledDataset(images, labels, classes), cfg.dataset)
    print(f"wrote {len(labels)} images to {cfg.dataset}")
    return 0


def cmd_train(cfg: ExperimentConfig) -> int:
    if not Path(cfg.dataset).exists():
        raise ContractError(f"missing file {cfg.dataset}")
    data = load_dataset(cfg.dataset)
    geom = _geometry(cfg, data)
    _, _, mask = shapes_for(geom, cfg.patch_fraction, cfg.mask_fraction or None)
    tc = cfg.train_config(mask if cfg.adv_train else None)
    start = time.perf_counter()
    model = train_provable_adv(data, geom, tc) if cfg.adv_train else train(data, geom, tc)
    Path(cfg.model).parent.mkdir(parents=True, exist_ok=True)
    save_model(model, cfg.model)
    print(f"final loss {model.final_loss:.4f} after {time.perf_counter() - start:.1f}s")
    print(f"train accuracy {accuracy(model, data):.4f}")
    if Path(cfg.test_dataset).exists():
        test = load_dataset(cfg.test_dataset)
        ev = summarize(certify_dataset(model, test, cfg.masking(mask), mask, cfg.kind))
        print(f"validation accuracy {accuracy(model, test):.4f} (undefended), {ev.clean_accuracy:.4f} (robust masking)")
    print(f"wrote {cfg.model}")
    return 0


def cmd_extract(cfg: ExperimentConfig) -> int:
    """Write the test set's feature tensors and labels as .npy arrays."""
    model, data = _load_pair(cfg)
    fr, fc = model.geom.feature_shape
    feats = np.zeros((len(data), fr, fc, model.classes))
    if len(data):
        feats = logits_to_kind(local_logits(model, data.images), cfg.kind)
    out = _out(cfg)
    np.save(out / f"features_{cfg.kind}.npy", feats)
    np.save(out / "labels.npy", data.labels.astype(np.int64))
    print(f"wrote {feats.shape} {cfg.kind} features to {out}")
    return 0


def cmd_certify(cfg: ExperimentConfig) -> int:
    from .plotting import margin_figure

    model, data = _load_pair(cfg)
    _, malicious, mask = shapes_for(model.geom, cfg.patch_fraction, cfg.mask_fraction or None)
    rows = certify_dataset(model, data, cfg.masking(mask), malicious, cfg.kind, cfg.topk)
    out = _out(cfg)
    write_csv(out / "certify.csv", certify_header(cfg.topk), rows)
    ev = summarize(rows, cfg.topk)
    summary = [
        ("images", ev.count),
        ("malicious_window", f"{malicious[0]}x{malicious[1]}"),
        ("mask_window", f"{mask[0]}x{mask[1]}"),
        ("clean_accuracy", ev.clean_accuracy),
        ("provable_accuracy", ev.provable_accuracy),
        ("detection_fp", ev.detection_fp),
    ] + [(f"top{k + 1}_provable", v) for k, v in enumerate(ev.topk)]
    write_csv(out / "certify_summary.csv", ["metric", "value"], summary)
    if rows:
        margin_figure([r[8] for r in rows], [r[9] for r in rows], [r[5] for r in rows], out / "certify_margins.png")
    for k, v in summary:
        print(f"{k}: {v}")
    return 0


def cmd_attack(cfg: ExperimentConfig) -> int:
    model, data = _load_pair(cfg)
    patch, malicious, mask = shapes_for(model.geom, cfg.patch_fraction, cfg.mask_fraction or None)
    rows = attack_dataset(model, data, patch, cfg.masking(mask), malicious, cfg.attack_config(), cfg.kind)
    out = _out(cfg)
    write_csv(out / "attack.csv", ATTACK_HEADER, rows)
    summary = attack_summary(rows)
    write_csv(out / "attack_summary.csv", ["metric", "value"], summary.items())
    for k, v in summary.items():
        print(f"{k}: {v}")
    # a successful attack on a certified image contradicts the certificate
    return 1 if any(r[2] and r[4] for r in rows) else 0


def cmd_diagnose(cfg: ExperimentConfig) -> int:
    from .plotting import histogram_figure

    model, data = _load_pair(cfg)
    patch, _, _ = shapes_for(model.geom, cfg.patch_fraction)
    rates, hist, _ = diagnose_dataset(model, data, patch, cfg.attack_config())
    out = _out(cfg)
    write_csv(out / "diagnose.csv", ["metric", "value"], rates.items())
    write_csv(out / "histogram.csv", ["bin_lo", "bin_hi", "clean_true", "attacked_class"], hist)
    histogram_figure(hist, out / "histogram.png")
    for k, v in rates.items():
        print(f"{k}: {v}")
    return 0


def cmd_oracle(cfg: ExperimentConfig) -> int:
    rows = []
    l1 = oracle.lemma1_corpus(cfg.seed, cfg.lemma1_scenarios)
    rows.append(["outside_bound", l1["scenarios"], l1["scenarios"] - l1["holds"], l1["case4_attained"]])
    sound = oracle.soundness_report(cfg.seed, cfg.soundness_trials)
    rows.append(["soundness", sound.trials, sound.violations, sound.certified])
    l2 = oracle.lemma2_corpus(cfg.seed, cfg.lemma2_scenarios)
    rows.append(["oversized_bound", l2["scenarios"], l2["scenarios"] - l2["holds"], ""])
    out = _out(cfg)
    write_csv(out / "oracle.csv", ["check", "scenarios", "violations", "note"], rows)
    missing = [c for c in oracle.CASES if l1["cases"].get(c, 0) == 0]
    for r in rows:
        print(f"{r[0]}: {r[2]} violations in {r[1]} scenarios")
    if missing:
        print(f"detection cases never witnessed: {', '.join(missing)}")
    bad = sum(r[2] for r in rows) > 0 or bool(missing) or l1["case4_attained"] == 0
    return 1 if bad else 0


def cmd_sweep(cfg: ExperimentConfig) -> int:
    from .plotting import sweep_figure

    model, data = _load_pair(cfg)
    rows = []

    def add(name, value, mdl, kind, threshold, fraction):
        c = ExperimentConfig(**{**asdict(cfg), "threshold": threshold})
        _, malicious, mask = shapes_for(mdl.geom, fraction, cfg.mask_fraction or None)
        ev = summarize(certify_dataset(mdl, data, c.masking(mask), malicious, kind))
        rows.append({"parameter": name, "value": value, "clean_accuracy": ev.clean_accuracy,
                     "provable_accuracy": ev.provable_accuracy, "detection_fp": ev.detection_fp})
        log.info("%s=%s clean %.3f provable %.3f", name, value, ev.clean_accuracy, ev.provable_accuracy)

    for t in _floats(cfg.sweep_threshold):
        add("threshold", t, model, cfg.kind, t, cfg.patch_fraction)
    for kind in [k.strip() for k in cfg.sweep_kind.split(",") if k.strip()]:
        if kind not in KINDS:
            raise ContractError(f"unknown kind {kind!r}")
        add("kind", kind, model, kind, cfg.threshold, cfg.patch_fraction)
    for frac in _floats(cfg.sweep_patch):
        add("patch_fraction", frac, model, cfg.kind, cfg.threshold, frac)
    if cfg.sweep_rf:
        if not Path(cfg.dataset).exists():
            raise ContractError(f"missing file {cfg.dataset}")
        train_set = load_dataset(cfg.dataset)
        for rf in [int(v) for v in cfg.sweep_rf.split(",") if v.strip()]:
            geom = _geometry(cfg, train_set, rf)
            _, _, mask = shapes_for(geom, cfg.patch_fraction)
            tc = cfg.train_config(mask)
            mdl = train_provable_adv(train_set, geom, tc) if cfg.adv_train else train(train_set, geom, tc)
            add("rf", rf, mdl, cfg.kind, cfg.threshold, cfg.patch_fraction)
    out = _out(cfg)
    header = ["parameter", "value", "clean_accuracy", "provable_accuracy", "detection_fp"]
    write_csv(out / "sweep.csv", header, [[r[h] for h in header] for r in rows])
    sweep_figure(rows, out / "sweep.png")
    for r in rows:
        print(f"{r['parameter']}={r['value']}: clean {r['clean_accuracy']:.4f} provable {r['provable_accuracy']:.4f}")
    return 0


COMMANDS = {
    "generate-data": cmd_generate,
    "train": cmd_train,
    "extract": cmd_extract,
    "certify": cmd_certify,
    "attack": cmd_attack,
    "diagnose": cmd_diagnose,
    "oracle": cmd_oracle,
    "sweep": cmd_sweep,
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchguard", description="Certified patch defense by robust masking of local features.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file; flags override it")
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        common.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper(),
                            help=f"default: {f.default}")
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    ingest = sub.add_parser("ingest", parents=[common], help="convert an .npz of images and labels")
    ingest.add_argument("source")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = build_config(args)
        if args.command == "ingest":
            return cmd_ingest(cfg, args.source)
        return COMMANDS[args.command](cfg)
    except (ContractError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
