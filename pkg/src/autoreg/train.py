"""Final weight training, one-shot registration, and metric evaluation.

Training fixes the derived architecture and lambda and minimizes the
registration loss with the adaptive-moment optimizer. Registration is a
single forward pass; the reported time brackets the forward pass and the
upsample to full resolution, nothing else. Evaluation warps hard labels
with nearest-neighbor sampling of the same field and reports Dice, global
NCC, fold count, and seconds per pair.
"""

import logging
import math
import os
import time
from dataclasses import dataclass

import torch

from . import fields, io, losses
from .config import config_to_dict
from .exceptions import DataError, NumericalError
from .model import RegNet, mix_weights
from .ops import CATALOG
from .optim import AdaptiveMoment
from .seeding import derive_perm

log = logging.getLogger("autoreg.train")


@dataclass
class ModelBundle:
    """A trained or searched model plus everything needed to run it."""
    model: RegNet
    alpha_f: torch.Tensor
    alpha_d: torch.Tensor
    lam: torch.Tensor
    catalog_names: list
    ndim: int
    num_labels: int
    dtype_name: str
    channels: int
    ncc_window: int
    mind_sigma: float
    squaring_steps: int

    @property
    def dtype(self):
        return torch.float64 if self.dtype_name == "float64" else torch.float32

    @property
    def windows(self):
        return losses.ncc_windows_for(self.ncc_window)

    def mixes(self):
        n = len(self.catalog_names)
        return (mix_weights(self.alpha_f, discrete=True, catalog_size=n),
                mix_weights(self.alpha_d, discrete=True, catalog_size=n))

    def loss_config(self):
        return {"channels": self.channels, "ncc_window": self.ncc_window,
                "mind_sigma": self.mind_sigma,
                "squaring_steps": self.squaring_steps}


def load_model_bundle(ckpt_dir):
    """Rebuild a ModelBundle from a search or train checkpoint."""
    tensors, state = io.load_checkpoint(ckpt_dir)
    kind = state.get("kind")
    if kind == "search":
        lc = {k: state["config"][k] for k in
              ("channels", "ncc_window", "mind_sigma", "squaring_steps")}
    elif kind == "train":
        lc = state["loss_config"]
    else:
        raise DataError("%s holds a %r checkpoint, expected search or train"
                        % (ckpt_dir, kind))
    by_name = {spec.name: spec for spec in CATALOG}
    try:
        catalog = tuple(by_name[n] for n in state["catalog"])
    except KeyError as exc:
        raise DataError("checkpoint names unknown op %s" % exc)
    dtype = torch.float64 if state["dtype"] == "float64" else torch.float32
    model = RegNet(state["ndim"], lc["channels"], catalog, dtype)
    with torch.no_grad():
        for i, p in enumerate(model.parameters()):
            key = "omega.%d" % i
            if key not in tensors:
                raise DataError("checkpoint is missing tensor %s (channel "
                                "plan mismatch?)" % key)
            loaded = torch.from_numpy(tensors[key].copy())
            if loaded.shape != p.shape:
                raise DataError("checkpoint tensor %s has shape %s, model "
                                "expects %s (channel plan mismatch)"
                                % (key, tuple(loaded.shape), tuple(p.shape)))
            p.copy_(loaded)
    return ModelBundle(
        model=model,
        alpha_f=torch.from_numpy(tensors["alpha_f"].copy()),
        alpha_d=torch.from_numpy(tensors["alpha_d"].copy()),
        lam=torch.from_numpy(tensors["lam"].copy()),
        catalog_names=list(state["catalog"]),
        ndim=state["ndim"], num_labels=state["num_labels"],
        dtype_name=state["dtype"], channels=lc["channels"],
        ncc_window=lc["ncc_window"], mind_sigma=lc["mind_sigma"],
        squaring_steps=lc["squaring_steps"])


def save_model_bundle(ckpt_dir, bundle, cfg, seed, extra_state=None):
    tensors = {}
    for i, p in enumerate(bundle.model.parameters()):
        tensors["omega.%d" % i] = p.detach().cpu().numpy()
    tensors["alpha_f"] = bundle.alpha_f.detach().cpu().numpy()
    tensors["alpha_d"] = bundle.alpha_d.detach().cpu().numpy()
    tensors["lam"] = bundle.lam.detach().cpu().numpy()
    state = {
        "kind": "train",
        "seed": seed,
        "dtype": bundle.dtype_name,
        "ndim": bundle.ndim,
        "num_labels": bundle.num_labels,
        "catalog": list(bundle.catalog_names),
        "loss_config": bundle.loss_config(),
        "config": config_to_dict(cfg),
    }
    if extra_state:
        state.update(extra_state)
    io.save_checkpoint(ckpt_dir, tensors, state)


@dataclass
class TrainResult:
    bundle: ModelBundle
    loss_rows: list
    epochs_run: int


def train_weights(bundle, train_pairs, cfg, seed, out_dir=None):
    """Weights-only training of the searched model on registration loss.

    Checkpoints land in out_dir/checkpoint at the configured cadence (plus
    one before the first epoch), so a numerical abort always leaves the
    last good state on disk.
    """
    cfg.validate()
    model = bundle.model
    mix_f, mix_d = bundle.mixes()
    lam = bundle.lam.detach()
    windows = bundle.windows
    pairs = [pair.tensors(bundle.dtype) for pair in train_pairs]
    if not pairs:
        raise DataError("training needs a non-empty train split")
    params = model.trainable_parameters()
    opt = AdaptiveMoment(params, cfg.lr)
    loss_rows = []
    ckpt_dir = os.path.join(out_dir, "checkpoint") if out_dir else None

    def save(epochs_run):
        if ckpt_dir is not None:
            save_model_bundle(ckpt_dir, bundle, cfg, seed,
                              {"epochs_run": epochs_run,
                               "loss_rows": loss_rows})

    save(0)
    for ep in range(cfg.epochs):
        perm = derive_perm(len(pairs), seed, "train", ep)
        epoch_losses = []
        for j in perm:
            s, t = pairs[int(j)]
            out = model(s, t, mix_f, mix_d, bundle.squaring_steps)
            loss = losses.reg_loss(out.pyramid, out.velocities, lam, windows,
                                   mind_sigma=bundle.mind_sigma).total
            if not torch.isfinite(loss):
                raise NumericalError(
                    "training loss not finite at epoch %d; last checkpoint "
                    "kept at %s" % (ep, ckpt_dir or "no checkpoint dir"))
            grads = torch.autograd.grad(loss, params, allow_unused=True)
            grads = [torch.zeros_like(p) if g is None else g
                     for p, g in zip(params, grads)]
            opt.step(grads)
            epoch_losses.append(float(loss.detach()))
        loss_rows.append([ep, sum(epoch_losses) / len(epoch_losses)])
        log.info("train epoch %4d loss %.6g", ep, loss_rows[-1][1])
        if (ep + 1) % max(1, cfg.checkpoint_every) == 0:
            save(ep + 1)
    save(cfg.epochs)
    if out_dir is not None:
        _write_csv(os.path.join(out_dir, "loss_curves.csv"),
                   ["epoch", "train_reg"], loss_rows)
    return TrainResult(bundle=bundle, loss_rows=loss_rows,
                       epochs_run=cfg.epochs)


@dataclass
class RegisterResult:
    phi: torch.Tensor
    warped: torch.Tensor
    seconds: float


def register_pair(bundle, source, target):
    """One forward pass; the timer covers the pass and its upsample only."""
    mix_f, mix_d = bundle.mixes()
    with torch.no_grad():
        start = time.perf_counter()
        out = bundle.model(source, target, mix_f, mix_d,
                           bundle.squaring_steps)
        phi = out.phi_full
        seconds = time.perf_counter() - start
        warped = fields.warp(source, phi)
    return RegisterResult(phi=phi, warped=warped, seconds=seconds)


@dataclass
class EvalRecord:
    pair_id: str
    dice: float  # None when the pair carries no labels
    ncc: float
    folds: int
    seconds: float


def evaluate_model(bundle, test_pairs):
    """Per-pair EvalRecords in dataset order.

    Dice warps hard labels by nearest-neighbor sampling of the same field
    used for the image; NCC is the global signed correlation of (warped,
    target). Pairs without labels get dice None.
    """
    records = []
    for pair in test_pairs:
        s, t = pair.tensors(bundle.dtype)
        res = register_pair(bundle, s, t)
        ncc = float(losses.pearson_ncc(res.warped, t))
        folds = int(fields.count_folds(res.phi))
        dice = None
        if pair.source_labels is not None and pair.target_labels is not None:
            sl, tl = pair.label_tensors()
            warped_labels = fields.warp_nearest(sl, res.phi)
            _, dice = losses.dice_score(warped_labels, tl, bundle.num_labels)
            dice = float(dice)
        if not math.isfinite(ncc) or (dice is not None
                                      and not math.isfinite(dice)):
            raise NumericalError("non-finite metric on pair %s" % pair.pair_id)
        records.append(EvalRecord(pair.pair_id, dice, ncc, folds, res.seconds))
    return records


def baseline_records(pairs, num_labels, dtype=torch.float64):
    """Pre-registration metrics: the identity field, no model involved."""
    records = []
    for pair in pairs:
        s, t = pair.tensors(dtype)
        ncc = float(losses.pearson_ncc(s, t))
        dice = None
        if pair.source_labels is not None and pair.target_labels is not None:
            sl, tl = pair.label_tensors()
            _, dice = losses.dice_score(sl, tl, num_labels)
            dice = float(dice)
        records.append(EvalRecord(pair.pair_id, dice, ncc, 0, 0.0))
    return records


def _mean_std(values):
    """Mean and population standard deviation (n divisor)."""
    n = len(values)
    mean = sum(values) / n
    var = sum((v - mean) ** 2 for v in values) / n
    return mean, var ** 0.5


def aggregate_records(records):
    """Aggregate strings in the `mean ± std` table style, 3 decimals."""
    fmt = lambda vals: "%.3f ± %.3f" % _mean_std(vals)
    dices = [r.dice for r in records if r.dice is not None]
    return {
        "dice_mean": fmt(dices) if dices else "NA",
        "ncc": fmt([r.ncc for r in records]),
        "folds": fmt([float(r.folds) for r in records]),
        "seconds": fmt([r.seconds for r in records]),
    }


def write_eval_table(path, records):
    if not records:
        raise DataError("no records to tabulate")
    agg = aggregate_records(records)
    rows = []
    for r in records:
        dice = "NA" if r.dice is None else repr(r.dice)
        rows.append([r.pair_id, dice, repr(r.ncc), r.folds, repr(r.seconds)])
    rows.append(["aggregate", agg["dice_mean"], agg["ncc"], agg["folds"],
                 agg["seconds"]])
    _write_csv(path, ["pair_id", "dice_mean", "ncc", "folds", "seconds"],
               rows)
    return agg


def _write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(x) for x in row))
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)
