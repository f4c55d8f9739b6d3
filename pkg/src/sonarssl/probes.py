"""Probe evaluation of pretrained encoders on labeled patch corpora.

Four probe modes: ``linear`` and ``mlp`` train a head on frozen backbone
features (precomputed once, backbone untouched); ``finetune`` and
``finetune_mlp`` also update the backbone at a lower learning rate.  Model
selection is early stopping on validation macro-F1 with best-state restore,
and every probe is run across several seeds whose scores are aggregated as
mean and sample standard deviation.
"""

import copy
import dataclasses
import hashlib
import json
import math
import pathlib

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .encoders import encode_features, load_checkpoint
from .patches import CorpusView
from .seeding import derive_seed

MODE_CHOICES = ("linear", "mlp", "finetune", "finetune_mlp")
TASK_CHOICES = ("3class", "binary")
FROZEN_MODES = ("linear", "mlp")

# binary task folds background and non-mine objects into one negative class
TASK_LABEL_MAPS = {
    "3class": {"BG": 0, "MILCO": 1, "NOMBO": 2},
    "binary": {"BG": 0, "MILCO": 1, "NOMBO": 0},
}
TASK_CLASS_NAMES = {
    "3class": ("BG", "MILCO", "NOMBO"),
    "binary": ("non_mine", "mine"),
}
RESULT_FORMAT = "sonarssl-probe-result"


@dataclasses.dataclass(frozen=True)
class ProbeConfig:
    """Probe recipe; JSON round trip is exact."""

    mode: str = "linear"
    task: str = "3class"
    n_epochs: int = 100
    batch_size: int = 256
    lr_head: float = 1e-3
    lr_backbone: float = 1e-4
    weight_decay: float = 0.0
    mlp_hidden: int = 512
    patience: int = 10
    n_seeds: int = 10
    base_seed: int = 0
    subsets: "tuple[str, ...] | None" = None

    def __post_init__(self) -> None:
        if self.mode not in MODE_CHOICES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.task not in TASK_CHOICES:
            raise ValueError(f"unknown task {self.task!r}")
        if self.n_epochs < 1 or self.batch_size < 1:
            raise ValueError("n_epochs and batch_size must be >= 1")
        if self.lr_head <= 0 or self.lr_backbone <= 0:
            raise ValueError("learning rates must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.mlp_hidden < 1:
            raise ValueError("mlp_hidden must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")
        if self.subsets is not None and len(self.subsets) == 0:
            raise ValueError("subsets must be None or non-empty")

    def n_classes(self) -> int:
        return len(TASK_CLASS_NAMES[self.task])

    def to_json_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["subsets"] = None if self.subsets is None else list(self.subsets)
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ProbeConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown probe config fields: {sorted(unknown)}")
        doc = dict(doc)
        if doc.get("subsets") is not None:
            doc["subsets"] = tuple(doc["subsets"])
        return cls(**doc)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_json_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Counts with true class on rows and predicted class on columns."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValueError("y_true and y_pred must be aligned 1-D arrays")
    if y_true.size == 0:
        raise ValueError("empty label arrays")
    for arr, name in ((y_true, "y_true"), (y_pred, "y_pred")):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValueError(f"{name} holds labels outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def macro_f1(cm: np.ndarray) -> float:
    """Mean per-class F1 from a confusion matrix; empty classes score 0."""
    cm = np.asarray(cm, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion matrix must be square")
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1.0), 0.0)
    return float(f1.mean())


def accuracy(cm: np.ndarray) -> float:
    cm = np.asarray(cm, dtype=np.float64)
    return float(np.trace(cm) / cm.sum())


def merge_confusion(cm: np.ndarray, group_of: "list[int]") -> np.ndarray:
    """Collapse a confusion matrix under a class -> group assignment.

    Merging the matrix commutes with relabeling the samples: merging a
    3-class confusion under the binary grouping gives exactly the confusion
    of the mapped labels.
    """
    cm = np.asarray(cm)
    if len(group_of) != cm.shape[0]:
        raise ValueError("need one group per class")
    n_groups = max(group_of) + 1
    out = np.zeros((n_groups, n_groups), dtype=cm.dtype)
    for i, gi in enumerate(group_of):
        for j, gj in enumerate(group_of):
            out[gi, gj] += cm[i, j]
    return out


def aggregate_seeds(values) -> "dict[str, float]":
    """Mean and sample (n-1) standard deviation over per-seed scores."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("no values to aggregate")
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std, "n": int(arr.size)}


def build_head(mode: str, in_dim: int, n_classes: int, hidden: int,
               seed: int) -> nn.Module:
    torch.manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    if mode in ("linear", "finetune"):
        return nn.Linear(in_dim, n_classes)
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(),
                         nn.Linear(hidden, n_classes))


@dataclasses.dataclass
class ProbeData:
    """Inputs and integer labels per split; inputs are features or images."""

    inputs: "dict[str, torch.Tensor]"
    labels: "dict[str, torch.Tensor]"

    def __post_init__(self) -> None:
        for split in ("train", "val", "test"):
            if split not in self.inputs or split not in self.labels:
                raise ValueError(f"missing split {split!r}")
            if self.inputs[split].shape[0] != self.labels[split].shape[0]:
                raise ValueError(f"split {split!r} inputs/labels misaligned")
            if self.inputs[split].shape[0] == 0:
                raise ValueError(
                    f"split {split!r} has no labeled patches; probes need "
                    "train, val (early stopping), and test data")


def normalized_images(view: CorpusView, indices) -> torch.Tensor:
    """Three-channel, subset-normalized patches for the given entries."""
    rows = []
    for i in indices:
        pix = torch.from_numpy(view.normalized_pixels(i))
        if pix.shape[0] == 1:
            pix = pix.expand(3, -1, -1)
        rows.append(pix)
    return torch.stack(rows) if rows else torch.zeros(0, 3, 96, 96)


def load_probe_data(view: CorpusView, task: str,
                    subsets=None) -> "dict[str, tuple[list, torch.Tensor]]":
    """Labeled entry indices and mapped labels per split."""
    label_map = TASK_LABEL_MAPS[task]
    out = {}
    for split in ("train", "val", "test"):
        idx = view.indices(split=split, subsets=subsets, labeled_only=True)
        labels = torch.tensor(
            [label_map[view.manifest.entries[i].label] for i in idx],
            dtype=torch.int64)
        out[split] = (idx, labels)
    return out


def _eval_head(head: nn.Module, backbone, inputs: torch.Tensor,
               labels: torch.Tensor, n_classes: int,
               batch_size: int) -> "tuple[float, np.ndarray]":
    head.eval()
    if backbone is not None:
        backbone.eval()
    preds = []
    with torch.no_grad():
        for s in range(0, inputs.shape[0], batch_size):
            x = inputs[s:s + batch_size]
            if backbone is not None:
                x = backbone(x)
            preds.append(head(x).argmax(dim=1))
    head.train()
    if backbone is not None:
        backbone.train()
    cm = confusion_matrix(labels.numpy(), torch.cat(preds).numpy(), n_classes)
    return macro_f1(cm), cm


def train_probe_head(data: ProbeData, config: ProbeConfig, seed: int,
                     backbone: "nn.Module | None" = None) -> dict:
    """Train one probe head (plus backbone when given) for one seed.

    ``data.inputs`` holds frozen features when ``backbone`` is None,
    otherwise normalized images that are re-encoded every step.  Frozen
    features are standardized per dimension with statistics fit on the
    train split only, so the head sees unit-scale inputs regardless of the
    backbone's feature scale.  Returns the per-seed record with validation
    and test scores at the restored best epoch.
    """
    if backbone is None:
        mu = data.inputs["train"].mean(dim=0)
        sd = data.inputs["train"].std(dim=0, unbiased=True).clamp_min(1e-6)
        data = ProbeData(
            inputs={s: (t - mu) / sd for s, t in data.inputs.items()},
            labels=data.labels)
    in_dim = data.inputs["train"].shape[1] if backbone is None else \
        backbone.feature_dim
    n_classes = config.n_classes()
    head = build_head(config.mode, in_dim, n_classes, config.mlp_hidden,
                      derive_seed(seed, "probe-head"))
    groups = [{"params": head.parameters(), "lr": config.lr_head}]
    if backbone is not None:
        backbone.train()
        groups.append({"params": backbone.parameters(),
                       "lr": config.lr_backbone})
    optimizer = torch.optim.AdamW(groups, weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=config.n_epochs)

    def snapshot():
        state = {"head": copy.deepcopy(head.state_dict())}
        if backbone is not None:
            state["backbone"] = copy.deepcopy(backbone.state_dict())
        return state

    x_train, y_train = data.inputs["train"], data.labels["train"]
    n_train = x_train.shape[0]
    best = {"f1": -math.inf, "epoch": -1, "state": snapshot()}
    bad_epochs = 0
    stopped_epoch = config.n_epochs - 1
    for epoch in range(config.n_epochs):
        order = torch.from_numpy(np.random.default_rng(
            derive_seed(seed, "probe-order", epoch)).permutation(n_train))
        for s in range(0, n_train, config.batch_size):
            pos = order[s:s + config.batch_size]
            x = x_train[pos]
            if backbone is not None:
                x = backbone(x)
            loss = F.cross_entropy(head(x), y_train[pos])
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
        scheduler.step()
        val_f1, _ = _eval_head(head, backbone, data.inputs["val"],
                               data.labels["val"], n_classes,
                               config.batch_size)
        if val_f1 > best["f1"]:
            best = {"f1": val_f1, "epoch": epoch, "state": snapshot()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                stopped_epoch = epoch
                break
    else:
        stopped_epoch = config.n_epochs - 1

    head.load_state_dict(best["state"]["head"])
    if backbone is not None:
        backbone.load_state_dict(best["state"]["backbone"])
    test_f1, test_cm = _eval_head(head, backbone, data.inputs["test"],
                                  data.labels["test"], n_classes,
                                  config.batch_size)
    return {
        "seed": seed,
        "val_f1": best["f1"],
        "best_epoch": best["epoch"],
        "stopped_epoch": stopped_epoch,
        "test_f1": test_f1,
        "test_accuracy": accuracy(test_cm),
        "test_confusion": test_cm.tolist(),
    }


class _FrozenBackboneFeatures:
    """Precompute features once so frozen probes never touch the backbone."""

    def __init__(self, encoder, splits, view: CorpusView):
        self.inputs = {}
        self.labels = {}
        for split, (idx, labels) in splits.items():
            images = normalized_images(view, idx)
            self.inputs[split] = encode_features(encoder, images)
            self.labels[split] = labels


def run_probe(checkpoint_path, manifest_dir, config: ProbeConfig) -> dict:
    """Evaluate a pretrained checkpoint across seeds; returns the result doc.

    Frozen modes precompute backbone features once and leave the backbone
    bit-identical; finetune modes restart from the checkpoint weights for
    every seed.
    """
    encoder, meta = load_checkpoint(checkpoint_path)
    view = CorpusView(manifest_dir)
    try:
        splits = load_probe_data(view, config.task, config.subsets)
        frozen = config.mode in FROZEN_MODES
        if frozen:
            feats = _FrozenBackboneFeatures(encoder, splits, view)
            data = ProbeData(inputs=feats.inputs, labels=feats.labels)
        else:
            inputs = {s: normalized_images(view, idx)
                      for s, (idx, _) in splits.items()}
            labels = {s: lab for s, (_, lab) in splits.items()}
            data = ProbeData(inputs=inputs, labels=labels)
    finally:
        view.close()

    per_seed = []
    for k in range(config.n_seeds):
        seed = derive_seed(config.base_seed, "probe-seed", k)
        if frozen:
            record = train_probe_head(data, config, seed, backbone=None)
        else:
            trial_encoder, _ = load_checkpoint(checkpoint_path)
            record = train_probe_head(data, config, seed,
                                      backbone=trial_encoder.backbone)
        per_seed.append(record)

    return {
        "format": RESULT_FORMAT,
        "version": 1,
        "probe_config": config.to_json_dict(),
        "config_hash": config.config_hash(),
        "checkpoint": {"path": str(checkpoint_path), "arch": meta["arch"],
                       "spec_hash": meta["spec_hash"], "step": meta["step"]},
        "class_names": list(TASK_CLASS_NAMES[config.task]),
        "per_seed": per_seed,
        "aggregate": {
            "test_f1": aggregate_seeds(r["test_f1"] for r in per_seed),
            "val_f1": aggregate_seeds(r["val_f1"] for r in per_seed),
            "test_accuracy": aggregate_seeds(
                r["test_accuracy"] for r in per_seed),
        },
    }


def save_probe_result(result: dict, path) -> None:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result, indent=2, sort_keys=True))


def load_probe_result(path) -> dict:
    doc = json.loads(pathlib.Path(path).read_text())
    if doc.get("format") != RESULT_FORMAT:
        raise ValueError(f"{path} is not a probe result file")
    return doc
