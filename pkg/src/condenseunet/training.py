"""Training with staged condensation, checkpointing, evaluation and prediction."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint as ckpt
from .data import (PHASES, AugmentParams, Dataset, SegmentationSample, batch_iterator, case_volumes,
                   load_dataset, read_labels, slice_stem, write_labels)
from .lgconv import CondenseSchedule, condense_stage, group_lasso_penalty
from .losses import (CLASS_NAMES, FOREGROUND, LV, MYO, RV, ClassMasks, LossWeights, cross_entropy,
                     dice_score, ejection_fraction, myocardial_mass, soft_dice_loss, volume_ml)
from .network import CondenseUNet, NetworkConfig, condensed_copy
from .optim import Adam
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "train_loss", "val_loss", "val_dice_rv", "val_dice_myo", "val_dice_lv",
               "lasso", "active_fraction", "wall_seconds", "train_ce", "train_dice_loss", "stage"]
REPORT_COLUMNS = ["case_id", "phase", "class", "dice", "volume_pred_ml", "volume_gt_ml"]
EQUIVALENCE_TOL = 1e-6


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-4
    alpha: float = 0.5
    beta: float = 0.5
    lasso: float = 1e-5
    seed: int = 0
    fold: int = 0
    patch_size: int = 128
    dtype: str = "float32"
    augment: bool = True
    stage_boundaries: Optional[list] = None
    checkpoint_every: int = 0
    network: dict = field(default_factory=lambda: NetworkConfig().to_dict())

    def __post_init__(self):
        for key in ("epochs", "batch_size", "patch_size"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be positive")
        if self.learning_rate <= 0 or self.lasso < 0:
            raise ValueError("learning_rate must be positive and lasso non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")
        LossWeights(self.alpha, self.beta)
        if isinstance(self.network, NetworkConfig):
            self.network = self.network.to_dict()
        NetworkConfig.from_dict(self.network)
        self.schedule()

    @property
    def net_config(self) -> NetworkConfig:
        return NetworkConfig.from_dict(self.network)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type

    def schedule(self) -> CondenseSchedule:
        c = self.net_config.condensation_factor
        if self.stage_boundaries is None:
            return CondenseSchedule.halves(self.epochs, c, self.lasso)
        if len(self.stage_boundaries) != c - 1:
            raise ValueError(f"need exactly C-1={c - 1} stage boundaries, got {self.stage_boundaries}")
        return CondenseSchedule(self.epochs, list(self.stage_boundaries), self.lasso)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def _net_from_config(cfg: TrainConfig) -> CondenseUNet:
    return CondenseUNet(cfg.net_config, seed=cfg.seed, dtype=cfg.np_dtype)


class Trainer:
    def __init__(self, config: TrainConfig, dataset: Dataset, out_dir):
        self.config = config
        self.dataset = dataset
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.net = _net_from_config(config)
        self.optimizer = Adam(self.net.named_parameters(), lr=config.learning_rate)
        self.schedule = config.schedule()
        self.weights = LossWeights(config.alpha, config.beta)
        self.epoch = 0
        self.best_dice = -1.0
        self.best_epoch = -1
        self.train_samples = dataset.split("train", config.fold)
        self.val_samples = dataset.split("val", config.fold)
        if not self.train_samples:
            raise TrainingError(f"fold {config.fold} has no training samples")
        self._lg_names = [name for name, m in self.net.named_modules()
                          if m.__class__.__name__ == "LearnedGroupConv"]

    # -- state ---------------------------------------------------------------------------
    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        arrays = OrderedDict(self.net.state_dict())
        arrays.update(self.optimizer.state())
        return arrays

    def meta(self) -> dict:
        return {"epoch": self.epoch, "best_dice": self.best_dice, "best_epoch": self.best_epoch,
                "stage_boundaries": self.schedule.stage_boundaries}

    def save(self, path) -> None:
        ckpt.save_checkpoint(path, self.config.to_dict(), self.meta(), self.state_arrays())

    def load(self, path) -> None:
        config, meta, arrays = ckpt.load_checkpoint(path)
        if ckpt.config_digest(config) != ckpt.config_digest(self.config.to_dict()):
            raise TrainingError(f"{path}: checkpoint was written with a different configuration")
        net_state = OrderedDict((k, v) for k, v in arrays.items() if not k.startswith("adam."))
        self.net.load_state_dict(net_state)
        self.optimizer.params = OrderedDict(self.net.named_parameters())
        self.optimizer.load_state(arrays)
        self.epoch = int(meta["epoch"])
        self.best_dice = float(meta["best_dice"])
        self.best_epoch = int(meta["best_epoch"])

    # -- condensation ---------------------------------------------------------------------
    def _condense_if_due(self) -> list:
        reports = []
        due = self.schedule.stages_due(self.epoch)
        lg = self.net.lg_layers()
        while lg and lg[0].completed_stages < due:
            for name, layer in zip(self._lg_names, lg):
                reports.append(condense_stage(layer))
                self.optimizer.mask_moments(f"{name}.weight", layer.mask[:, :, None, None])
        return reports

    def lasso_penalty(self) -> Tensor:
        total = None
        for layer in self.net.lg_layers():
            p = group_lasso_penalty(layer)
            total = p if total is None else total + p
        return total

    # -- epochs -----------------------------------------------------------------------------
    def train_epoch(self) -> dict:
        cfg = self.config
        self.net.train()
        sums = {"ce": 0.0, "dice_loss": 0.0, "lasso": 0.0}
        n_seen = 0
        aug = AugmentParams() if cfg.augment else None
        for b, (images, labels, _) in enumerate(batch_iterator(
                self.train_samples, cfg.batch_size, cfg.seed, self.epoch, True, aug,
                cfg.patch_size, "lv", cfg.np_dtype)):
            pred = self.net(Tensor(images))
            ce = cross_entropy(pred, labels)
            dl = soft_dice_loss(pred, labels)
            lasso = self.lasso_penalty()
            loss = ce * self.weights.alpha + dl * self.weights.beta
            if lasso is not None and cfg.lasso:
                loss = loss + lasso * cfg.lasso
            if not math.isfinite(float(loss.item())):
                self._nan_dump(b, ce.item(), dl.item(), float(loss.item()))
            self.optimizer.zero_grad()
            loss.backward()
            for name, layer in zip(self._lg_names, self.net.lg_layers()):
                if layer.weight.grad is not None:
                    layer.weight.grad *= layer.mask[:, :, None, None]
            self.optimizer.step()
            self.net.apply_masks()
            n = images.shape[0]
            n_seen += n
            sums["ce"] += float(ce.item()) * n
            sums["dice_loss"] += float(dl.item()) * n
            sums["lasso"] += (float(lasso.item()) if lasso is not None else 0.0) * n
        out = {k: v / n_seen for k, v in sums.items()}
        # the objective recomposed in float64 so the log is self-consistent
        out["loss"] = (self.weights.alpha * out["ce"] + self.weights.beta * out["dice_loss"]
                       + cfg.lasso * out["lasso"])
        return out

    def _nan_dump(self, batch: int, ce: float, dl: float, loss: float) -> None:
        dump = {"epoch": self.epoch, "batch": batch, "ce": ce, "dice_loss": dl, "loss": loss,
                "param_norms": {k: float(np.linalg.norm(p.data)) for k, p in self.net.named_parameters()}}
        (self.out_dir / "nan_dump.json").write_text(json.dumps(dump, indent=2, default=str))
        raise TrainingError(f"non-finite loss at epoch {self.epoch} batch {batch}; see nan_dump.json")

    def validate(self) -> dict:
        if not self.val_samples:
            return {"loss": float("nan"), "dice": {c: float("nan") for c in FOREGROUND}}
        self.net.eval()
        preds, loss_sum, n = {}, 0.0, 0
        with no_grad():
            for images, labels, prepared in batch_iterator(
                    self.val_samples, self.config.batch_size, self.config.seed, 0, False, None,
                    self.config.patch_size, "image", self.config.np_dtype):
                pred = self.net(Tensor(images))
                loss = cross_entropy(pred, labels) * self.weights.alpha + \
                    soft_dice_loss(pred, labels) * self.weights.beta
                loss_sum += float(loss.item()) * images.shape[0]
                n += images.shape[0]
                for s, lab in zip(prepared, pred.data.argmax(axis=1)):
                    preds[(s.case_id, s.phase, s.slice_index)] = (lab, s.labels)
        self.net.train()
        dice = {c: [] for c in FOREGROUND}
        for key in sorted({(k[0], k[1]) for k in preds}):
            sl = sorted(k for k in preds if k[:2] == key)
            p = np.stack([preds[k][0] for k in sl])
            g = np.stack([preds[k][1] for k in sl])
            for c in FOREGROUND:
                dice[c].append(dice_score(p, g, c))
        return {"loss": loss_sum / n, "dice": {c: float(np.mean(v)) for c, v in dice.items()}}

    def run(self, stop_after: Optional[int] = None) -> list:
        """Train from ``self.epoch`` up to ``config.epochs`` (or ``stop_after`` epochs total)."""
        cfg = self.config
        log_path = self.out_dir / "train_log.csv"
        rows = _read_log(log_path, upto=self.epoch)
        end = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
        while self.epoch < end:
            t0 = time.perf_counter()
            for r in self._condense_if_due():
                log.info("condensed %s stage %d", r["layer"], r["stage"])
            tr = self.train_epoch()
            va = self.validate()
            mean_dice = float(np.mean(list(va["dice"].values())))
            row = {
                "epoch": self.epoch, "train_loss": tr["loss"], "val_loss": va["loss"],
                "val_dice_rv": va["dice"][RV], "val_dice_myo": va["dice"][MYO], "val_dice_lv": va["dice"][LV],
                "lasso": tr["lasso"], "active_fraction": self.net.active_fraction(),
                "wall_seconds": time.perf_counter() - t0, "train_ce": tr["ce"],
                "train_dice_loss": tr["dice_loss"], "stage": self.net.lg_layers()[0].completed_stages
                if self.net.lg_layers() else 0,
            }
            rows.append(row)
            self.epoch += 1
            if math.isfinite(mean_dice) and mean_dice > self.best_dice:
                self.best_dice, self.best_epoch = mean_dice, self.epoch - 1
                self.save(self.out_dir / "best.ckpt")
            self.save(self.out_dir / "last.ckpt")
            if cfg.checkpoint_every and self.epoch % cfg.checkpoint_every == 0:
                self.save(self.out_dir / f"epoch_{self.epoch:04d}.ckpt")
            _write_log(log_path, rows)
            log.info("epoch %d loss %.4f val dice rv %.3f myo %.3f lv %.3f active %.3f (%.1fs)",
                     row["epoch"], row["train_loss"], row["val_dice_rv"], row["val_dice_myo"],
                     row["val_dice_lv"], row["active_fraction"], row["wall_seconds"])
        return rows


def _write_log(path: Path, rows: Sequence[dict]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    tmp.replace(path)


def _read_log(path: Path, upto: int) -> list:
    if upto == 0 or not path.exists():
        return []
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if int(r["epoch"]) < upto]
    return [{k: (int(v) if k in ("epoch", "stage") else float(v)) for k, v in r.items()} for r in rows]


def read_log(path) -> list:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("epoch", "stage") else float(v)) for k, v in r.items()}
                for r in csv.DictReader(fh)]


def train(config: TrainConfig, manifest, out_dir, resume: Optional[str] = None,
          stop_after: Optional[int] = None) -> Trainer:
    dataset = load_dataset(manifest)
    trainer = Trainer(config, dataset, out_dir)
    if resume:
        trainer.load(resume)
    trainer.run(stop_after=stop_after)
    return trainer


# -- evaluation --------------------------------------------------------------------------
def load_network(path, dtype=np.float64) -> tuple:
    """Rebuild the network stored in a checkpoint, cast to ``dtype`` and set to eval mode."""
    config, meta, arrays = ckpt.load_checkpoint(path)
    cfg = TrainConfig.from_dict(config)
    net = _net_from_config(cfg)
    try:
        net.load_state_dict(OrderedDict((k, v) for k, v in arrays.items() if not k.startswith("adam.")))
    except (KeyError, ValueError) as exc:
        raise TrainingError(f"{path}: checkpoint does not match its configuration ({exc})") from exc
    net.astype(dtype).eval()
    return net, cfg, meta


def relative_difference(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.abs(b).max()), 1e-300)
    return float(np.abs(a - b).max()) / scale


def predict_samples(net: CondenseUNet, samples: Sequence[SegmentationSample], patch_size: int,
                    batch_size: int = 8, verify_condensed: bool = True) -> tuple:
    """Full-size predicted label maps keyed by (case, phase, slice).

    Uses the condensed network when every LG-Conv is fully condensed, after
    checking it against the masked dense network on the first batch.
    Returns (predictions, max relative difference or None).
    """
    lg = net.lg_layers()
    runner, diff = net, None
    if lg and all(l.fully_condensed for l in lg):
        runner = condensed_copy(net).eval()
    preds = {}
    with no_grad():
        for b, (images, _, prepared) in enumerate(batch_iterator(
                samples, batch_size, 0, 0, False, None, patch_size, "image", net.stem.weight.dtype)):
            out = runner(Tensor(images)).data
            if b == 0 and runner is not net and verify_condensed:
                diff = relative_difference(out, net(Tensor(images)).data)
                if diff >= EQUIVALENCE_TOL:
                    raise TrainingError(f"condensed inference deviates from dense by {diff:.3e}")
            for s, orig, lab in zip(prepared, _by_key(samples, prepared), out.argmax(axis=1)):
                preds[(s.case_id, s.phase, s.slice_index)] = paste_patch(lab.astype(np.uint8), orig.labels.shape)
    return preds, diff


def _by_key(samples, prepared):
    index = {(s.case_id, s.phase, s.slice_index): s for s in samples}
    return [index[(p.case_id, p.phase, p.slice_index)] for p in prepared]


def paste_patch(patch: np.ndarray, full_shape: tuple) -> np.ndarray:
    """Inverse of the image-centre crop: place ``patch`` on a background canvas."""
    size = patch.shape[0]
    out = np.zeros(full_shape, dtype=patch.dtype)
    r0, c0 = full_shape[0] // 2 - size // 2, full_shape[1] // 2 - size // 2
    rs, cs = max(r0, 0), max(c0, 0)
    re, ce = min(r0 + size, full_shape[0]), min(c0 + size, full_shape[1])
    out[rs:re, cs:ce] = patch[rs - r0:re - r0, cs - c0:ce - c0]
    return out


def evaluate_predictions(preds: dict, samples: Sequence[SegmentationSample]) -> tuple:
    """Per-case/phase/class Dice and volumes plus clinical indices.

    ``preds`` maps (case, phase, slice) to a full-size label map.  Returns
    (rows, summary).
    """
    gt = case_volumes(samples)
    pred_samples = []
    for s in samples:
        key = (s.case_id, s.phase, s.slice_index)
        if key not in preds:
            raise TrainingError(f"no prediction for {slice_stem(*key)}")
        pred_samples.append(SegmentationSample(np.zeros(s.labels.shape), preds[key], s.spacing, s.thickness,
                                               s.case_id, s.phase, s.slice_index))
    pr = case_volumes(pred_samples)
    rows = []
    cases: dict = {}
    for (case, phase), (g_lab, spacing, thickness) in sorted(gt.items()):
        p_lab = pr[(case, phase)][0]
        gm, pm = ClassMasks(g_lab, spacing, thickness), ClassMasks(p_lab, spacing, thickness)
        for c in FOREGROUND:
            rows.append({"case_id": case, "phase": phase, "class": CLASS_NAMES[c],
                         "dice": dice_score(p_lab, g_lab, c),
                         "volume_pred_ml": volume_ml(pm, c), "volume_gt_ml": volume_ml(gm, c)})
        entry = cases.setdefault(case, {})
        entry[phase] = {c: (volume_ml(pm, c), volume_ml(gm, c)) for c in FOREGROUND}
    per_case = {}
    for case, phases in sorted(cases.items()):
        if not all(p in phases for p in PHASES):
            continue
        ed, es = phases["ED"], phases["ES"]
        rec = {}
        for c, tag in ((LV, "lv"), (RV, "rv")):
            for i, who in enumerate(("pred", "gt")):
                edv, esv = ed[c][i], es[c][i]
                rec[f"{tag}_edv_{who}"], rec[f"{tag}_esv_{who}"] = edv, esv
                rec[f"{tag}_ef_{who}"] = ejection_fraction(edv, esv) if edv > 0 else None
        rec["myo_mass_pred"] = myocardial_mass(ed[MYO][0])
        rec["myo_mass_gt"] = myocardial_mass(ed[MYO][1])
        per_case[case] = rec
    summary = {"mean_dice": {}, "cases": per_case}
    for phase in PHASES:
        for c in FOREGROUND:
            vals = [r["dice"] for r in rows if r["phase"] == phase and r["class"] == CLASS_NAMES[c]]
            if vals:
                summary["mean_dice"][f"{CLASS_NAMES[c]}_{phase}"] = float(np.mean(vals))
    summary["mean_foreground_dice"] = float(np.mean([r["dice"] for r in rows])) if rows else float("nan")
    ef_err = [abs(v["lv_ef_pred"] - v["lv_ef_gt"]) for v in per_case.values()
              if v["lv_ef_pred"] is not None and v["lv_ef_gt"] is not None]
    summary["lv_ef_mean_abs_error"] = float(np.mean(ef_err)) if ef_err else None
    return rows, summary


def write_report(rows: Sequence[dict], summary: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def evaluate(checkpoint_path, manifest, fold: int = 0, split: str = "test", out_dir=None) -> dict:
    net, cfg, _ = load_network(checkpoint_path)
    dataset = load_dataset(manifest) if not isinstance(manifest, Dataset) else manifest
    samples = dataset.split(split, fold)
    if not samples:
        raise TrainingError(f"split {split!r} of fold {fold} is empty")
    preds, diff = predict_samples(net, samples, cfg.patch_size)
    rows, summary = evaluate_predictions(preds, samples)
    summary["condensed_max_relative_difference"] = diff
    summary["split"], summary["fold"] = split, fold
    if out_dir is not None:
        write_report(rows, summary, out_dir)
    return {"rows": rows, "summary": summary}


def predict(checkpoint_path, manifest, out_dir, fold: int = 0, split: str = "test") -> Path:
    """Write predicted label maps in the dataset label format, named like the
    source slices so ``load_prediction_dir`` can read them back."""
    net, cfg, _ = load_network(checkpoint_path)
    dataset = load_dataset(manifest)
    samples = dataset.split(split, fold)
    preds, _ = predict_samples(net, samples, cfg.patch_size)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for (case, phase, k), lab in sorted(preds.items()):
        write_labels(out / f"{slice_stem(case, phase, k)}.lbl.png", lab)
    return out


def load_prediction_dir(pred_dir, samples: Sequence[SegmentationSample]) -> dict:
    root = Path(pred_dir)
    return {(s.case_id, s.phase, s.slice_index): read_labels(root / f"{slice_stem(s.case_id, s.phase, s.slice_index)}.lbl.png")
            for s in samples}
