"""Litho-guided self training.

Train the CFNO on ILT labels, then alternate:
    scan: predict a mask for every training design, binarize it and simulate it;
          replace the stored label when the model mask prints strictly better
    retrain: reset the optimizer and train again, warm-starting the weights

The dataset mean litho MSE can therefore only go down from round to round.
"""

from __future__ import annotations

import math
import os
import pathlib
import plistlib
import typing as t
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from tqdm import tqdm

import tensor_ad as ad
from cfno import CfnoNet
from ilt import IltConfig, MaskGrid, binarize, ilt_optimize
from layout import LayoutRaster
from metrics import LithoEvaluator
from utils import MaskinatorError, get_logger, load_pgm, parallel_map, save_pgm

__all__ = [
    "DatasetFormatError",
    "EpochStats",
    "LgstConfig",
    "LgstError",
    "LgstReport",
    "LgstResult",
    "LithoEvaluator",
    "Sample",
    "TrainConfig",
    "TrainingDivergedError",
    "TrainingSet",
    "batch_indices",
    "build_training_set",
    "lgst_round",
    "lgst_run",
    "model_provenance",
    "train_epochs",
    "write_loss_curve",
    "write_lgst_reports",
]

logger = get_logger("lgst")

ILT_PROVENANCE = "ilt"
MANIFEST_NAME = "manifest.plist"
MANIFEST_VERSION = 1
LGST_REPORT_COLUMNS = [
    "round",
    "single_round_pct",
    "accumulated_pct",
    "mean_mse_before",
    "mean_mse_after",
]


class LgstError(MaskinatorError):
    """Base class for self-training exceptions"""

    ...


class TrainingDivergedError(LgstError):
    """Training loss became NaN or infinite"""

    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"training loss is {loss} at epoch {epoch}, batch {batch}")


class DatasetFormatError(LgstError):
    """Dataset manifest is missing or malformed"""

    ...


def model_provenance(round_index: int) -> str:
    return f"model-round-{round_index}"


@dataclass(frozen=True, eq=False)
class Sample:
    name: str
    design: LayoutRaster
    mask: MaskGrid
    mask_mse: float
    provenance: str = ILT_PROVENANCE


@dataclass
class TrainingSet:
    """Design/mask pairs with the cached litho MSE of every mask"""

    samples: t.List[Sample] = field(default_factory=list)
    version: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def mean_mse(self) -> float:
        if not self.samples:
            return 0.0
        return float(np.mean([s.mask_mse for s in self.samples]))

    def save(self, directory: t.Union[str, os.PathLike]):
        """Write PGM payloads under designs/ and masks/ plus a plist manifest"""
        root = pathlib.Path(directory)
        (root / "designs").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
        entries = []
        for sample in self.samples:
            design_path = pathlib.Path("designs") / f"{sample.name}.pgm"
            mask_path = pathlib.Path("masks") / f"{sample.name}.pgm"
            sample.design.save_pgm(root / design_path)
            save_pgm(root / mask_path, sample.mask.values)
            entries.append(
                {
                    "name": sample.name,
                    "design": design_path.as_posix(),
                    "mask": mask_path.as_posix(),
                    "mse": float(sample.mask_mse),
                    "provenance": sample.provenance,
                    "nm_per_px": float(sample.design.nm_per_px),
                }
            )
        manifest = {"format": MANIFEST_VERSION, "version": self.version, "samples": entries}
        with open(root / MANIFEST_NAME, "wb") as fd:
            plistlib.dump(manifest, fd)

    @classmethod
    def load(cls, directory: t.Union[str, os.PathLike], evaluator: LithoEvaluator) -> TrainingSet:
        """Read a dataset written by save; every mask MSE is recomputed with evaluator

        Raises:
            DatasetFormatError: manifest missing or malformed
        """
        root = pathlib.Path(directory)
        try:
            with open(root / MANIFEST_NAME, "rb") as fd:
                manifest = plistlib.load(fd)
            entries = manifest["samples"]
            version = int(manifest["version"])
        except (OSError, plistlib.InvalidFileException, KeyError, TypeError, ValueError) as e:
            raise DatasetFormatError(f"cannot read dataset manifest in {root}: {e}") from e

        samples = []
        for entry in entries:
            try:
                nm = float(entry["nm_per_px"])
                design = LayoutRaster.from_array(load_pgm(root / entry["design"]), nm)
                mask = MaskGrid(load_pgm(root / entry["mask"]), nm)
                name, provenance, stored = entry["name"], entry["provenance"], float(entry["mse"])
            except (OSError, KeyError, TypeError, ValueError) as e:
                raise DatasetFormatError(f"bad dataset entry {entry!r}: {e}") from e
            mse = evaluator.mse(mask, design)
            if not math.isclose(mse, stored, rel_tol=1e-9, abs_tol=1e-9):
                logger.warning(f"{name}: stored mse {stored} differs from recomputed {mse}")
            samples.append(Sample(name, design, mask, mse, provenance))
        return cls(samples, version)


def build_training_set(
    designs: t.Sequence[t.Tuple[str, LayoutRaster]],
    evaluator: LithoEvaluator,
    ilt_cfg: IltConfig = IltConfig(),
    threads: int = 1,
) -> TrainingSet:
    """Label designs with binarized ILT masks"""

    def label(item: t.Tuple[str, LayoutRaster]) -> Sample:
        name, design = item
        mask, _ = ilt_optimize(
            design, evaluator.nominal, evaluator.resist_model, ilt_cfg, evaluator.defocus
        )
        mask = binarize(mask, ilt_cfg.binarize_threshold)
        return Sample(name, design, mask, evaluator.mse(mask, design))

    items = list(tqdm(designs, desc="ilt labels", disable=None, leave=False))
    return TrainingSet(parallel_map(label, items, threads))


@dataclass(frozen=True)
class TrainConfig:
    """Training schedule; defaults are 20 epochs of Adam on L1 with lr 0.004 halved every 2 epochs"""

    epochs: int = 20
    lr: float = 0.004
    lr_step: int = 2
    lr_gamma: float = 0.5
    batch_size: int = 16
    loss: str = "l1"
    seed: int = 0
    holdout: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr_step < 1:
            raise LgstError("epochs, batch_size and lr_step must be >= 1")
        if not self.lr > 0 or not 0 < self.lr_gamma <= 1:
            raise LgstError("lr must be > 0 and lr_gamma in (0, 1]")
        if self.loss not in ("l1", "l2"):
            raise LgstError(f"loss must be 'l1' or 'l2', got {self.loss!r}")


@dataclass(frozen=True)
class LgstConfig:
    rounds: int = 5
    # > 0 gates replacement on mse + pvb_weight * pvb instead of mse alone
    pvb_weight: float = 0.0
    cold_restart: bool = False
    binarize_threshold: float = 0.5

    def __post_init__(self):
        if self.rounds < 1:
            raise LgstError(f"rounds must be >= 1, got {self.rounds}")
        if self.pvb_weight < 0:
            raise LgstError("pvb_weight must be >= 0")


class EpochStats(t.NamedTuple):
    epoch: int
    lr: float
    train_loss: float
    val_mse: float


def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> t.List[np.ndarray]:
    """Shuffle range(n) and cut it into consecutive batches; the last may be short"""
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _split_holdout(ds: TrainingSet, cfg: TrainConfig) -> t.Tuple[t.List[Sample], t.Optional[Sample]]:
    if cfg.holdout and len(ds) > 1:
        return ds.samples[:-1], ds.samples[-1]
    return list(ds.samples), None


def _shard_gradients(
    net: CfnoNet,
    designs: np.ndarray,
    masks: np.ndarray,
    loss_fn: t.Callable,
    threads: int,
) -> t.Tuple[float, t.Dict[str, np.ndarray]]:
    """Batch loss and gradients; shards build independent graphs, summed in shard order"""
    total = len(designs)
    shards = [s for s in np.array_split(np.arange(total), max(1, min(threads, total))) if len(s)]

    def run(shard: np.ndarray):
        leaves = net.leaf_tensors()
        out = net.forward(designs[shard], leaves)
        loss = ad.scale(loss_fn(out, masks[shard]), len(shard) / total)
        loss.backward()
        grads = {
            name: leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            for name, leaf in leaves.items()
        }
        return float(loss.item()), grads

    results = parallel_map(run, shards, threads)
    loss = sum(r[0] for r in results)
    grads = {name: sum(r[1][name] for r in results) for name in net.params}
    return loss, grads


def _stack(samples: t.Sequence[Sample], dtype: np.dtype) -> t.Tuple[np.ndarray, np.ndarray]:
    shapes = {s.design.pixels.shape for s in samples}
    if len(shapes) != 1:
        raise LgstError(f"training designs must share one size, got {sorted(shapes)}")
    designs = np.stack([s.design.as_float() for s in samples])[:, None].astype(dtype)
    masks = np.stack([s.mask.values for s in samples])[:, None].astype(dtype)
    return designs, masks


def train_epochs(
    net: CfnoNet,
    ds: TrainingSet,
    cfg: TrainConfig = TrainConfig(),
    evaluator: t.Optional[LithoEvaluator] = None,
    threads: int = 1,
) -> t.Tuple[CfnoNet, t.List[EpochStats]]:
    """Fit net to the dataset masks with Adam and a fresh optimizer state.

    With cfg.holdout the last sample is held out and, when an evaluator is given, its
    litho MSE under the binarized model mask is recorded every epoch (NaN otherwise).

    Raises:
        LgstError: empty dataset
        TrainingDivergedError: non-finite loss
    """
    if not len(ds):
        raise LgstError("cannot train on an empty dataset")
    train, held_out = _split_holdout(ds, cfg)
    designs, masks = _stack(train, net.arch.real_dtype)
    loss_fn = ad.l1_loss if cfg.loss == "l1" else ad.l2_loss
    rng = np.random.default_rng(cfg.seed)
    adam = ad.Adam(lr=cfg.lr)
    curve: t.List[EpochStats] = []

    for epoch in tqdm(range(cfg.epochs), desc="train", disable=None, leave=False):
        adam.lr = ad.lr_schedule(epoch, cfg.lr, cfg.lr_step, cfg.lr_gamma)
        losses = []
        for b, batch in enumerate(batch_indices(len(train), cfg.batch_size, rng)):
            loss, grads = _shard_gradients(net, designs[batch], masks[batch], loss_fn, threads)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, b, loss)
            net.params = adam.step(net.params, grads)
            losses.append(loss * len(batch))
        train_loss = sum(losses) / len(train)
        val_mse = math.nan
        if held_out is not None and evaluator is not None:
            val_mse = evaluator.mse(net.predict(held_out.design), held_out.design)
        curve.append(EpochStats(epoch, adam.lr, train_loss, val_mse))
        logger.debug(f"epoch {epoch}: lr {adam.lr:.3g} loss {train_loss:.6g} val mse {val_mse}")
    return net, curve


def write_loss_curve(path: t.Union[str, os.PathLike], curve: t.Sequence[EpochStats]):
    frame = pd.DataFrame(curve, columns=list(EpochStats._fields))
    frame.to_csv(path, index=False, lineterminator="\n")


@dataclass(frozen=True)
class LgstReport:
    round: int
    replaced_count: int
    replaced_fraction: float
    dataset_mean_mse_before: float
    dataset_mean_mse_after: float
    # fraction of samples replaced in this or any earlier round; set by lgst_run
    accumulated_fraction: float = 0.0
    replaced: t.Tuple[str, ...] = ()


def _gate(mse: float, mask: MaskGrid, evaluator: LithoEvaluator, cfg: LgstConfig) -> float:
    if cfg.pvb_weight > 0:
        return mse + cfg.pvb_weight * evaluator.pvb(mask)
    return mse


def lgst_round(
    net,
    ds: TrainingSet,
    evaluator: LithoEvaluator,
    round_index: int = 1,
    cfg: LgstConfig = LgstConfig(),
    threads: int = 1,
) -> t.Tuple[TrainingSet, LgstReport]:
    """Scan the dataset and replace every label the model strictly improves on.

    net only needs a predict(design) -> MaskGrid method. Candidates are evaluated
    first and the new dataset is built afterwards, so an evaluator failure leaves
    ds untouched.
    """

    def scan(sample: Sample) -> t.Optional[Sample]:
        candidate = binarize(net.predict(sample.design), cfg.binarize_threshold)
        mse_ml = evaluator.mse(candidate, sample.design)
        if _gate(mse_ml, candidate, evaluator, cfg) < _gate(sample.mask_mse, sample.mask, evaluator, cfg):
            return Sample(sample.name, sample.design, candidate, mse_ml, model_provenance(round_index))
        return None

    candidates = parallel_map(scan, ds.samples, threads)
    samples = [new or old for new, old in zip(candidates, ds.samples)]
    replaced = tuple(s.name for s, new in zip(ds.samples, candidates) if new is not None)
    updated = TrainingSet(samples, ds.version + 1) if replaced else ds

    report = LgstReport(
        round=round_index,
        replaced_count=len(replaced),
        replaced_fraction=len(replaced) / len(ds) if len(ds) else 0.0,
        dataset_mean_mse_before=ds.mean_mse,
        dataset_mean_mse_after=updated.mean_mse,
        accumulated_fraction=len(replaced) / len(ds) if len(ds) else 0.0,
        replaced=replaced,
    )
    logger.info(
        f"lgst round {round_index}: replaced {len(replaced)}/{len(ds)}, "
        f"mean mse {report.dataset_mean_mse_before:.4g} -> {report.dataset_mean_mse_after:.4g}"
    )
    return updated, report


@dataclass
class LgstResult:
    net: CfnoNet
    dataset: TrainingSet
    reports: t.List[LgstReport]
    curves: t.List[t.List[EpochStats]]


def lgst_run(
    net: CfnoNet,
    ds: TrainingSet,
    evaluator: LithoEvaluator,
    train_cfg: TrainConfig = TrainConfig(),
    cfg: LgstConfig = LgstConfig(),
    out_dir: t.Optional[t.Union[str, os.PathLike]] = None,
    threads: int = 1,
) -> LgstResult:
    """Initial training, then cfg.rounds rounds of (scan and replace, retrain).

    With out_dir, writes cfno-round-<t>.ckpt after every training (rounds 0..T),
    loss-round-<t>.csv curves, and rewrites lgst_report.csv and the dataset under
    dataset/ after every round, so an interrupted run keeps its finished rounds.
    """
    out = pathlib.Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def train_and_save(model: CfnoNet, data: TrainingSet, round_index: int) -> t.Tuple[CfnoNet, t.List[EpochStats]]:
        model, curve = train_epochs(model, data, train_cfg, evaluator, threads)
        if out is not None:
            model.save(out / f"cfno-round-{round_index}.ckpt")
            write_loss_curve(out / f"loss-round-{round_index}.csv", curve)
        return model, curve

    def persist(data: TrainingSet, done: t.Sequence[LgstReport]):
        if out is not None:
            write_lgst_reports(out / "lgst_report.csv", done)
            data.save(out / "dataset")

    net, curve = train_and_save(net, ds, 0)
    curves, reports = [curve], []
    persist(ds, reports)
    ever_replaced: t.Set[str] = set()
    for round_index in range(1, cfg.rounds + 1):
        ds, report = lgst_round(net, ds, evaluator, round_index, cfg, threads)
        ever_replaced.update(report.replaced)
        reports.append(replace(report, accumulated_fraction=len(ever_replaced) / len(ds)))
        persist(ds, reports)
        if cfg.cold_restart:
            net = CfnoNet(net.arch, seed=train_cfg.seed)
        net, curve = train_and_save(net, ds, round_index)
        curves.append(curve)

    return LgstResult(net, ds, reports, curves)


def write_lgst_reports(path: t.Union[str, os.PathLike], reports: t.Sequence[LgstReport]):
    """CSV round,single_round_pct,accumulated_pct,mean_mse_before,mean_mse_after"""
    frame = pd.DataFrame(
        [
            (
                r.round,
                100.0 * r.replaced_fraction,
                100.0 * r.accumulated_fraction,
                r.dataset_mean_mse_before,
                r.dataset_mean_mse_after,
            )
            for r in reports
        ],
        columns=LGST_REPORT_COLUMNS,
    )
    frame.to_csv(path, index=False, lineterminator="\n")
