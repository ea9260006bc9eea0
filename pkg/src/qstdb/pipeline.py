"""The reproducible run steps behind the CLI.

Order: ANN training -> conversion and threshold calibration -> Q-STDB
training -> evaluation -> activity profiling -> energy report. Every step
writes into its own run directory together with the executed config.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from qstdb.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from qstdb.config import RunConfig
from qstdb.conversion import CalibrationConfig, calibrate_thresholds, init_snn_from_ann
from qstdb.data import PatchDataset, extract_patches, generate_synthetic, load_cube, normalize, split, write_cube
from qstdb.energy import ActivityProfile, EnergyConstants, energy_totals, measure_activity
from qstdb.errors import ConfigurationError, InputError
from qstdb.metrics import Metrics, evaluate
from qstdb.network import QuantConfig, ann_predict, build_network, init_weights, snn_forward
from qstdb.training import AnnTrainConfig, SnnTrainConfig, train_ann, train_snn

log = logging.getLogger(__name__)


@dataclass
class Splits:
    train: PatchDataset
    test: PatchDataset
    bands: int
    num_classes: int


def patch_size(cfg: RunConfig) -> int:
    if cfg.dataset.patch is not None:
        return cfg.dataset.patch
    return 5 if cfg.architecture == "cnn3d" else 3


def load_splits(cfg: RunConfig) -> Splits:
    ds = cfg.dataset
    if ds.path:
        cube, labels = load_cube(ds.path)
    else:
        s = ds.synthetic
        cube, labels = generate_synthetic(s.classes, s.bands, s.samples_per_class, s.noise_sigma, seed=cfg.seed)
    if ds.normalize:
        cube = normalize(cube)
    patches = extract_patches(cube, labels, patch_size(cfg))
    train, test = split(patches, ds.train_fraction, seed=cfg.seed)
    return Splits(train, test, cube.bands, patches.num_classes)


def make_run_dir(out, cfg: RunConfig, command: str) -> Path:
    """``<out>/<timestamp>_<command>_seed<seed>``; an existing name gets a numeric suffix."""
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(out) / f"{stamp}_{command}_seed{cfg.seed}"
    run, i = base, 1
    while run.exists():
        run = base.with_name(f"{base.name}-{i}")
        i += 1
    run.mkdir(parents=True)
    (run / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return run


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def snn_quant(ckpt: Checkpoint, cfg: RunConfig) -> QuantConfig:
    bits = ckpt.meta.get("weight_bits")
    if bits is None:
        return QuantConfig()
    return QuantConfig.inference(bits, cfg.snn.potential_bits)


def predict(ckpt: Checkpoint, x, mode: str, cfg: RunConfig, T: int | None = None, collect: list | None = None):
    if mode == "ann":
        return ann_predict(ckpt.spec.with_mode("ann") if ckpt.mode == "snn" else ckpt.spec, ckpt.weights, x)
    if ckpt.mode != "snn" or not ckpt.lif or any(p.threshold is None for p in ckpt.lif.values()):
        raise ConfigurationError("snn evaluation needs a converted SNN checkpoint; run `convert` first")
    T = T or cfg.snn.timesteps
    quant = snn_quant(ckpt, cfg)
    preds = []
    for i in range(0, len(x), 100):
        u, rec = snn_forward(ckpt.spec, ckpt.weights, ckpt.lif, x[i : i + 100], T, quant, keep=False)
        preds.append(u.argmax(axis=1))
        if collect is not None:
            collect.append(rec.spikes)
    return np.concatenate(preds)


def eval_metrics(ckpt: Checkpoint, data: PatchDataset, mode: str, cfg: RunConfig, T: int | None = None) -> Metrics:
    if len(data) == 0:
        raise InputError("test set is empty")
    return evaluate(data.targets, predict(ckpt, data.patches, mode, cfg, T), data.num_classes)


def _finish(run: Path, metrics: Metrics) -> None:
    _write_json(run / "metrics.json", metrics.to_dict())
    metrics.write_confusion_csv(run / "confusion.csv")


def cmd_synth(cfg: RunConfig, out) -> Path:
    s = cfg.dataset.synthetic
    run = make_run_dir(out, cfg, "synth")
    cube, labels = generate_synthetic(s.classes, s.bands, s.samples_per_class, s.noise_sigma, seed=cfg.seed)
    stem = write_cube(run / "synthetic", cube, labels)
    _write_json(run / "metrics.json", {"height": cube.height, "width": cube.width, "bands": cube.bands,
                                       "labelled": int((labels > 0).sum()), "dataset": str(stem)})
    return run


def cmd_train_ann(cfg: RunConfig, out) -> Path:
    run = make_run_dir(out, cfg, "train-ann")
    data = load_splits(cfg)
    rng = np.random.default_rng(cfg.seed)
    spec = build_network(cfg.architecture, data.bands, data.num_classes, **_arch_kw(cfg))
    weights = init_weights(spec, rng)
    a = cfg.ann
    tcfg = AnnTrainConfig(a.epochs, a.lr, a.decay, tuple(a.milestones), a.batch_size, a.momentum, a.weight_decay)
    best, hist = train_ann(spec, weights, data.train.patches, data.train.targets, tcfg, rng,
                           data.test.patches, data.test.targets)
    hist.write_jsonl(run / "log.jsonl")
    ckpt = Checkpoint(spec, best, meta={"stage": "ann", "seed": cfg.seed})
    save_checkpoint(ckpt, run / "checkpoint")
    _finish(run, eval_metrics(ckpt, data.test, "ann", cfg))
    return run


def _arch_kw(cfg: RunConfig) -> dict:
    kw = {"patch": patch_size(cfg)}
    if cfg.architecture == "cnn32h":
        kw["hidden"] = cfg.hidden
    return kw


def cmd_convert(cfg: RunConfig, ann_checkpoint, out) -> Path:
    ann = load_checkpoint(ann_checkpoint)
    if ann.mode != "ann":
        raise ConfigurationError(f"{ann_checkpoint} is not an ANN checkpoint")
    run = make_run_dir(out, cfg, "convert")
    data = load_splits(cfg)
    spec, weights, _ = init_snn_from_ann(ann.spec, ann.weights)
    spec.timesteps = cfg.snn.timesteps
    c = cfg.calibration
    ccfg = CalibrationConfig(c.batch, c.T_cal, c.percentile, c.scale)
    batch = data.train.patches[: c.batch]
    lif, report = calibrate_thresholds(spec, weights, batch, ccfg)
    _write_json(run / "calibration.json", report)
    ckpt = Checkpoint(spec, weights, lif, meta={"stage": "converted", "seed": cfg.seed, "weight_bits": None})
    save_checkpoint(ckpt, run / "checkpoint")
    _finish(run, eval_metrics(ckpt, data.test, "snn", cfg))
    return run


def cmd_train_snn(cfg: RunConfig, snn_checkpoint, out) -> Path:
    src = load_checkpoint(snn_checkpoint)
    if src.mode != "snn" or not src.lif:
        raise ConfigurationError(f"{snn_checkpoint} is not a converted SNN checkpoint; run `convert` first")
    run = make_run_dir(out, cfg, "train-snn")
    data = load_splits(cfg)
    rng = np.random.default_rng(cfg.seed)
    s = cfg.snn
    tcfg = SnnTrainConfig(s.epochs, s.lr, s.decay, tuple(s.milestones), s.batch_size, s.bits, s.timesteps,
                          s.gamma, s.potential_bits)
    weights, lif, hist = train_snn(src.spec, src.weights, src.lif, data.train.patches, data.train.targets, tcfg,
                                   rng, data.test.patches, data.test.targets)
    hist.write_jsonl(run / "log.jsonl")
    spec = src.spec
    spec.timesteps = s.timesteps
    ckpt = Checkpoint(spec, weights, lif, meta={"stage": "qstdb", "seed": cfg.seed, "weight_bits": s.bits})
    ckpt = ckpt.with_inference_quant(s.bits)
    save_checkpoint(ckpt, run / "checkpoint")
    _finish(run, eval_metrics(ckpt, data.test, "snn", cfg))
    return run


def cmd_eval(cfg: RunConfig, checkpoint, mode: str, out, timesteps: int | None = None) -> Path:
    ckpt = load_checkpoint(checkpoint)
    if mode == "snn" and ckpt.mode != "snn":
        raise ConfigurationError("cannot evaluate an ANN checkpoint in snn mode without conversion; run `convert` first")
    data = load_splits(cfg)
    metrics = eval_metrics(ckpt, data.test, mode, cfg, timesteps)
    run = make_run_dir(out, cfg, "eval")
    _finish(run, metrics)
    return run


def profile_checkpoint(ckpt: Checkpoint, data: PatchDataset, cfg: RunConfig) -> ActivityProfile:
    records = []
    predict(ckpt, data.patches, "snn", cfg, collect=records)
    return measure_activity(records, cfg.snn.timesteps)


def cmd_profile(cfg: RunConfig, checkpoint, out) -> Path:
    ckpt = load_checkpoint(checkpoint)
    if ckpt.mode != "snn":
        raise ConfigurationError("profiling needs an SNN checkpoint; run `convert` first")
    data = load_splits(cfg)
    profile = profile_checkpoint(ckpt, data.test, cfg)
    run = make_run_dir(out, cfg, "profile")
    _write_json(run / "profile.json", profile.to_dict())
    _finish(run, eval_metrics(ckpt, data.test, "snn", cfg))
    return run


def energy_constants(cfg: RunConfig) -> EnergyConstants:
    e = cfg.energy
    return EnergyConstants(mac_exponent=e.mac_exponent, ac_exponent=e.ac_exponent, anchors=e.anchors)


def cmd_energy(cfg: RunConfig, checkpoint, profile_path, out) -> Path:
    ckpt = load_checkpoint(checkpoint)
    try:
        profile = ActivityProfile.from_dict(json.loads(Path(profile_path).read_text()))
    except FileNotFoundError:
        raise InputError(f"profile not found: {profile_path}") from None
    report = energy_totals(ckpt.spec, profile, cfg.energy.ann_bits, cfg.energy.snn_bits, energy_constants(cfg))
    run = make_run_dir(out, cfg, "energy")
    report.write_json(run / "energy.json")
    report.write_csv(run / "energy.csv")
    _write_json(run / "metrics.json", {"E_ann_pj": report.E_ann, "E_snn_pj": report.E_snn, "ratios": report.ratios})
    return run


def cmd_run(cfg: RunConfig, out) -> Path:
    """Whole pipeline; each stage gets a subdirectory of one top-level run directory."""
    top = make_run_dir(out, cfg, "run")
    ann = cmd_train_ann(cfg, top)
    conv = cmd_convert(cfg, ann / "checkpoint", top)
    snn = cmd_train_snn(cfg, conv / "checkpoint", top)
    prof = cmd_profile(cfg, snn / "checkpoint", top)
    energy = cmd_energy(cfg, snn / "checkpoint", prof / "profile.json", top)
    summary = {}
    for name, d in (("ann", ann), ("converted", conv), ("qstdb", snn)):
        summary[name] = json.loads((d / "metrics.json").read_text())
        summary[name].pop("confusion")
    summary["energy"] = json.loads((energy / "metrics.json").read_text())
    summary["stages"] = {k: str(v) for k, v in (("ann", ann), ("convert", conv), ("train_snn", snn),
                                                 ("profile", prof), ("energy", energy))}
    _write_json(top / "metrics.json", summary)
    return top
