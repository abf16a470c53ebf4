"""Dataset representation and manifest I/O.

A dataset directory holds manifest.json plus one ARVF file per volume.
Pairs keep numpy arrays; torch conversion happens where the math runs.
"""

import os
from dataclasses import dataclass

import numpy as np
import torch

from . import io
from .exceptions import DataError

SPLITS = ("train", "val", "test")


@dataclass
class Pair:
    pair_id: str
    source: np.ndarray
    target: np.ndarray
    source_labels: np.ndarray
    target_labels: np.ndarray
    gt_disp: np.ndarray = None

    def tensors(self, dtype):
        s = torch.from_numpy(self.source).to(dtype)
        t = torch.from_numpy(self.target).to(dtype)
        return s, t

    def label_tensors(self):
        if self.source_labels is None or self.target_labels is None:
            return None, None
        return (torch.from_numpy(self.source_labels.astype(np.int64)),
                torch.from_numpy(self.target_labels.astype(np.int64)))


@dataclass
class Dataset:
    ndim: int
    num_labels: int
    train: list
    val: list
    test: list
    manifest: dict

    def split(self, name):
        if name not in SPLITS:
            raise DataError("unknown split %r" % name)
        return getattr(self, name)


def save_dataset(out_dir, splits, num_labels, spec_echo, seed):
    """Write split volumes and the manifest; returns the manifest dict."""
    os.makedirs(out_dir, exist_ok=True)
    entries = {}
    ndim = None
    for split, pairs in splits.items():
        rows = []
        for pair in pairs:
            ndim = pair.source.ndim
            base = "%s_%s" % (split, pair.pair_id)
            row = {"id": pair.pair_id}
            for tag, arr, kind in (
                    ("source", pair.source, "scalar"),
                    ("target", pair.target, "scalar"),
                    ("source_labels", pair.source_labels, "labels"),
                    ("target_labels", pair.target_labels, "labels"),
                    ("gt_disp", pair.gt_disp, "vector")):
                if arr is None:
                    continue
                fname = "%s_%s.arvf" % (base, tag)
                io.save_volume(os.path.join(out_dir, fname), arr, kind=kind)
                row[tag] = fname
            rows.append(row)
        entries[split] = rows
    manifest = {
        "format": "autoreg-dataset",
        "version": 1,
        "ndim": ndim,
        "num_labels": num_labels,
        "seed": seed,
        "spec": spec_echo,
        "splits": entries,
    }
    io.dump_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def load_dataset(data_dir):
    path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(path):
        raise DataError("no manifest.json under %s" % data_dir)
    manifest = io.load_json(path)
    if manifest.get("format") != "autoreg-dataset":
        raise DataError("%s is not a dataset manifest" % path)
    splits = {}
    for split in SPLITS:
        pairs = []
        for row in manifest["splits"].get(split, ()):
            def grab(tag, row=row):
                if tag not in row:
                    return None
                arr, _ = io.load_volume(os.path.join(data_dir, row[tag]))
                return arr
            pairs.append(Pair(
                pair_id=row["id"],
                source=grab("source"),
                target=grab("target"),
                source_labels=grab("source_labels"),
                target_labels=grab("target_labels"),
                gt_disp=grab("gt_disp"),
            ))
        splits[split] = pairs
    ds = Dataset(ndim=manifest["ndim"], num_labels=manifest["num_labels"],
                 train=splits["train"], val=splits["val"], test=splits["test"],
                 manifest=manifest)
    for pair in ds.val:
        if pair.source_labels is None or pair.target_labels is None:
            raise DataError("validation pair %s lacks labels" % pair.pair_id)
    return ds
