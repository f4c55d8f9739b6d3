"""Self-supervised pretraining loop with per-step metrics and diagnostics.

The loop is bitwise reproducible for a fixed config and corpus: encoder
init, epoch shuffles, per-(patch, view, epoch) augmentation streams, and
per-step projection directions are all derived from the run seed.  Large
batches can be trained under a small memory footprint with the two-pass
gradient cache (see :func:`_accumulated_backward`), which reproduces the
exact full-batch gradient even though the Gaussian-fit term does not
decompose over micro-batches.
"""

import dataclasses
import json
import math
import pathlib

import numpy as np
import torch

from .augment import AugmentPolicy, augment_batch, patch_seed
from .encoders import Encoder, EncoderSpec, build_encoder, save_checkpoint
from .objectives import LossConfig, ViewBatch, objective_terms, slices_for_step
from .patches import CorpusView, DatasetManifest
from .seeding import derive_seed

OBJECTIVE_CHOICES = ("sigreg", "vicreg", "simclr")
DATA_MODE_CHOICES = ("real", "real_plus_syn")
AUG_PRESET_CHOICES = ("sss_adapted", "natural_image")

# Head width is an objective-level convention: the combined objective works
# in a small embedding space, the baselines in their customary wide ones.
DEFAULT_PROJECTOR_DIM = {"sigreg": 16, "vicreg": 2048, "simclr": 128}

# Augmentation knobs that are house choices rather than established
# settings; they are echoed into the run snapshot so downstream readers can
# see which values were assumed.
ASSUMED_AUG_FIELDS = ("crop_scale", "rotation_deg", "brightness", "contrast",
                      "blur_prob", "blur_sigma")


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; carries last diagnostics."""

    def __init__(self, message: str, step: int, terms: "dict[str, float]"):
        super().__init__(message)
        self.step = step
        self.terms = terms


@dataclasses.dataclass(frozen=True)
class PretrainConfig:
    """Full pretraining recipe; round-trips exactly through JSON."""

    arch: str = "vit_tiny"
    pooling: str = "mean_tokens"
    patch_size: int = 16
    objective: str = "sigreg"
    reg_weight: float = 0.1
    n_slices: int = 256
    n_quad_nodes: int = 65
    ep_mode: str = "quadrature"
    vicreg_sim_coeff: float = 25.0
    vicreg_std_coeff: float = 25.0
    vicreg_cov_coeff: float = 1.0
    simclr_temperature: float = 0.2
    n_views: int = 4
    batch_size: int = 1024
    micro_batch_size: "int | None" = None
    n_epochs: int = 100
    warmup_epochs: int = 1
    lr: float = 1.4e-3
    weight_decay: float = 0.05
    projector_dim: "int | None" = None
    data_mode: str = "real_plus_syn"
    aug_preset: str = "sss_adapted"
    eval_subset_size: int = 512
    seed: int = 0

    def __post_init__(self) -> None:
        if self.objective not in OBJECTIVE_CHOICES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.data_mode not in DATA_MODE_CHOICES:
            raise ValueError(f"unknown data_mode {self.data_mode!r}")
        if self.aug_preset not in AUG_PRESET_CHOICES:
            raise ValueError(f"unknown aug_preset {self.aug_preset!r}")
        if self.n_views < 2:
            raise ValueError("n_views must be >= 2")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.micro_batch_size is not None and not (
                0 < self.micro_batch_size <= self.batch_size):
            raise ValueError("micro_batch_size must be in (0, batch_size]")
        if self.n_epochs < 1:
            raise ValueError("n_epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.n_epochs:
            raise ValueError("warmup_epochs must satisfy 0 <= warmup < n_epochs")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be > 0 and weight_decay >= 0")
        if self.projector_dim is not None and self.projector_dim < 1:
            raise ValueError("projector_dim must be >= 1")
        if self.eval_subset_size < 1:
            raise ValueError("eval_subset_size must be >= 1")
        # delegate the remaining numeric checks
        self.loss_config()

    def resolved_projector_dim(self) -> int:
        if self.projector_dim is not None:
            return self.projector_dim
        return DEFAULT_PROJECTOR_DIM[self.objective]

    def loss_config(self) -> LossConfig:
        return LossConfig(
            objective=self.objective, reg_weight=self.reg_weight,
            n_slices=self.n_slices, n_quad_nodes=self.n_quad_nodes,
            ep_mode=self.ep_mode, vicreg_sim_coeff=self.vicreg_sim_coeff,
            vicreg_std_coeff=self.vicreg_std_coeff,
            vicreg_cov_coeff=self.vicreg_cov_coeff,
            simclr_temperature=self.simclr_temperature)

    def encoder_spec(self) -> EncoderSpec:
        return EncoderSpec(arch=self.arch, patch_size=self.patch_size,
                           pooling=self.pooling,
                           projector_dim=self.resolved_projector_dim())

    def augment_policy(self) -> AugmentPolicy:
        if self.aug_preset == "sss_adapted":
            return AugmentPolicy.sss_adapted(n_views=self.n_views)
        return AugmentPolicy.natural_image(n_views=self.n_views)

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json_dict(cls, doc: dict) -> "PretrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Learning rate at an optimizer step: linear warmup, then cosine to 0.

    The schedule is defined on steps 0..total_steps inclusive; it starts at
    exactly 0, peaks at base_lr when warmup ends, and ends at exactly 0.
    """
    if total_steps < 1 or not 0 <= warmup_steps < total_steps:
        raise ValueError("need 0 <= warmup_steps < total_steps")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step <= warmup_steps:
        if warmup_steps == 0:
            return base_lr
        return base_lr * (step / warmup_steps)
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclasses.dataclass
class TrainData:
    """Training patches held in memory with per-patch normalization stats."""

    pixels: torch.Tensor      # (n, c, h, w) raw values in [0, 1]
    mean: torch.Tensor        # (n, c)
    std: torch.Tensor         # (n, c)
    entry_indices: "list[int]"


def load_train_data(view: CorpusView, data_mode: str) -> TrainData:
    """Collect the train split under the configured subset filter.

    ``real`` keeps only the subset literally named "real";
    ``real_plus_syn`` keeps every subset in the corpus.
    """
    if data_mode == "real":
        available = set(view.manifest.normalization)
        if "real" not in available:
            raise ValueError(
                f"data_mode 'real' needs a subset named 'real'; "
                f"corpus has {sorted(available)}")
        idx = view.indices(split="train", subsets=("real",))
    else:
        idx = view.indices(split="train")
    if not idx:
        raise ValueError("no training patches match the data mode")
    pixels = torch.from_numpy(np.stack([view.raw_pixels(i) for i in idx]))
    mean = torch.tensor([view.manifest.normalization[
        view.manifest.entries[i].subset]["mean"] for i in idx],
        dtype=torch.float32)
    std = torch.tensor([view.manifest.normalization[
        view.manifest.entries[i].subset]["std"] for i in idx],
        dtype=torch.float32)
    return TrainData(pixels=pixels, mean=mean, std=std, entry_indices=idx)


def _batch_views(data: TrainData, order_slice: np.ndarray, policy: AugmentPolicy,
                 run_seed: int, epoch: int) -> torch.Tensor:
    """(b, n_views, 3, s, s) views for the given patch positions."""
    seeds = [patch_seed(run_seed, int(p), epoch) for p in order_slice]
    pos = torch.from_numpy(np.asarray(order_slice, dtype=np.int64))
    return augment_batch(data.pixels[pos], policy, seeds,
                         mean=data.mean[pos], std=data.std[pos])


def _embed_views(encoder: Encoder, views: torch.Tensor) -> torch.Tensor:
    b, v = views.shape[:2]
    _, z = encoder(views.reshape(b * v, *views.shape[2:]))
    return z.reshape(b, v, -1)


def _accumulated_backward(encoder: Encoder, data: TrainData,
                          order_slice: np.ndarray, policy: AugmentPolicy,
                          cfg: PretrainConfig, loss_cfg: LossConfig, slices,
                          run_seed: int, epoch: int) -> "dict[str, torch.Tensor]":
    """Two-pass gradient cache: exact full-batch gradients in micro-batches.

    Pass one embeds every micro-batch without graphs.  The loss and its
    gradient with respect to the pooled embeddings are then computed once,
    which is exact even though the objective couples patches across the
    whole batch.  Pass two re-embeds each micro-batch with graphs and
    back-propagates its slice of the pooled gradient.
    """
    micro = cfg.micro_batch_size
    chunks = [order_slice[i:i + micro] for i in range(0, len(order_slice), micro)]
    with torch.no_grad():
        z_parts = [_embed_views(encoder, _batch_views(data, c, policy, run_seed, epoch))
                   for c in chunks]
    pooled = torch.cat(z_parts).requires_grad_(True)
    terms = objective_terms(ViewBatch(pooled), loss_cfg, slices)
    grad = torch.autograd.grad(terms["total"], pooled)[0]
    start = 0
    for chunk in chunks:
        views = _batch_views(data, chunk, policy, run_seed, epoch)
        z = _embed_views(encoder, views)
        z.backward(gradient=grad[start:start + len(chunk)])
        start += len(chunk)
    return {k: v.detach() for k, v in terms.items()}, pooled.detach()


@dataclasses.dataclass
class PretrainResult:
    out_dir: pathlib.Path
    checkpoint_path: pathlib.Path
    metrics_path: pathlib.Path
    diagnostics_path: pathlib.Path
    config_path: pathlib.Path
    n_steps: int
    final_loss: float


def effective_rank(z: torch.Tensor) -> float:
    """exp of the entropy of the normalized covariance spectrum of z."""
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError("need (n, d) embeddings with n >= 2")
    centered = z.to(torch.float64) - z.to(torch.float64).mean(dim=0)
    cov = centered.T @ centered / (z.shape[0] - 1)
    eig = torch.linalg.eigvalsh(cov).clamp_min(0.0)
    total = eig.sum()
    if total <= 0:
        return 0.0
    p = eig / total
    entropy = -(p * torch.log(p.clamp_min(1e-300))).sum()
    return float(torch.exp(entropy))


def _eval_indices(n: int, cap: int) -> np.ndarray:
    """Deterministic, evenly spread positions used for epoch diagnostics."""
    if n <= cap:
        return np.arange(n)
    return np.linspace(0, n - 1, cap).round().astype(np.int64)


def _epoch_diagnostics(encoder: Encoder, data: TrainData,
                       positions: np.ndarray) -> dict:
    """Embedding statistics on normalized, un-augmented eval patches."""
    was_training = encoder.training
    encoder.eval()
    pos = torch.from_numpy(positions)
    x = data.pixels[pos].to(torch.float32)
    if x.shape[1] == 1:
        x = x.expand(-1, 3, -1, -1)
    mean, std = data.mean[pos], data.std[pos]
    if mean.shape[1] == 1:
        mean, std = mean.expand(-1, 3), std.expand(-1, 3)
    x = (x - mean[:, :, None, None]) / std[:, :, None, None]
    with torch.no_grad():
        zs = [encoder(x[i:i + 256])[1] for i in range(0, x.shape[0], 256)]
    z = torch.cat(zs)
    if was_training:
        encoder.train()
    var = z.var(dim=0, unbiased=True)
    return {
        "n_eval": int(z.shape[0]),
        "embed_dim_mean": z.mean(dim=0).tolist(),
        "embed_dim_var": var.tolist(),
        "mean_embed_std": float(var.sqrt().mean()),
        "mean_embed_var": float(var.mean()),
        "effective_rank": effective_rank(z),
    }


def run_snapshot(config: PretrainConfig, manifest_dir, n_train: int,
                 steps_per_epoch: int) -> dict:
    policy = config.augment_policy()
    return {
        "format": "sonarssl-run-config",
        "version": 1,
        "pretrain_config": config.to_json_dict(),
        "resolved": {
            "projector_dim": config.resolved_projector_dim(),
            "n_train_patches": n_train,
            "steps_per_epoch": steps_per_epoch,
            "total_steps": steps_per_epoch * config.n_epochs,
            "warmup_steps": steps_per_epoch * config.warmup_epochs,
        },
        "augment_policy": dataclasses.asdict(policy),
        # these knobs are house choices, not established settings
        "assumed_augmentation_fields": list(ASSUMED_AUG_FIELDS),
        "manifest_dir": str(manifest_dir),
        "encoder_spec": dataclasses.asdict(config.encoder_spec()),
    }


def pretrain(config: PretrainConfig, manifest_dir, out_dir,
             log_every: int = 1) -> PretrainResult:
    """Run the full pretraining loop; writes artifacts under out_dir.

    Artifacts: ``config.json`` (run snapshot), ``metrics.jsonl`` (one line
    per optimizer step), ``diagnostics.jsonl`` (one line per epoch),
    ``checkpoints/epoch_NNNN.pt``, and ``encoder_last.pt``.
    """
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    view = CorpusView(manifest_dir)
    try:
        data = load_train_data(view, config.data_mode)
    finally:
        view.close()

    n_train = data.pixels.shape[0]
    steps_per_epoch = math.ceil(n_train / config.batch_size)
    total_steps = steps_per_epoch * config.n_epochs
    warmup_steps = steps_per_epoch * config.warmup_epochs

    snapshot = run_snapshot(config, manifest_dir, n_train, steps_per_epoch)
    config_path = out_dir / "config.json"
    config_path.write_text(json.dumps(snapshot, indent=2, sort_keys=True))

    encoder = build_encoder(config.encoder_spec(),
                            seed=derive_seed(config.seed, "encoder-init"))
    encoder.train()
    optimizer = torch.optim.AdamW(encoder.parameters(), lr=config.lr,
                                  weight_decay=config.weight_decay)
    policy = config.augment_policy()
    loss_cfg = config.loss_config()
    embed_dim = config.resolved_projector_dim()
    eval_positions = _eval_indices(n_train, config.eval_subset_size)

    metrics_path = out_dir / "metrics.jsonl"
    diagnostics_path = out_dir / "diagnostics.jsonl"
    ckpt_dir = out_dir / "checkpoints"
    last_path = out_dir / "encoder_last.pt"
    step = 0
    final_loss = math.nan

    with metrics_path.open("w") as metrics_file, \
            diagnostics_path.open("w") as diag_file:
        for epoch in range(config.n_epochs):
            order = np.random.default_rng(
                derive_seed(config.seed, "order", epoch)).permutation(n_train)
            for b in range(steps_per_epoch):
                order_slice = order[b * config.batch_size:
                                    (b + 1) * config.batch_size]
                lr = lr_at(step, total_steps, warmup_steps, config.lr)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                slices = None
                if config.objective == "sigreg":
                    slices = slices_for_step(config.seed, step, embed_dim,
                                             config.n_slices, config.n_quad_nodes)
                optimizer.zero_grad(set_to_none=True)
                if (config.micro_batch_size is not None
                        and config.micro_batch_size < len(order_slice)):
                    terms, z_step = _accumulated_backward(
                        encoder, data, order_slice, policy, config, loss_cfg,
                        slices, config.seed, epoch)
                else:
                    views = _batch_views(data, order_slice, policy,
                                         config.seed, epoch)
                    z = _embed_views(encoder, views)
                    terms = objective_terms(ViewBatch(z), loss_cfg, slices)
                    terms["total"].backward()
                    z_step = z.detach()
                term_values = {k: float(v.detach()) for k, v in terms.items()}
                if not all(math.isfinite(v) for v in term_values.values()):
                    diag = _epoch_diagnostics(encoder, data, eval_positions)
                    diag["epoch"] = epoch
                    diag["aborted_at_step"] = step
                    diag_file.write(json.dumps(diag) + "\n")
                    raise TrainingDiverged(
                        f"non-finite loss at step {step}: {term_values}",
                        step, term_values)
                optimizer.step()
                if step % log_every == 0 or b == steps_per_epoch - 1:
                    flat = z_step.reshape(-1, z_step.shape[-1])
                    record = {"step": step, "epoch": epoch, "lr": lr,
                              "embed_std": float(flat.std(dim=0,
                                                          unbiased=True).mean())}
                    record.update({f"loss_{k}": v for k, v in term_values.items()})
                    metrics_file.write(json.dumps(record) + "\n")
                final_loss = term_values["total"]
                step += 1
            metrics_file.flush()
            diag = _epoch_diagnostics(encoder, data, eval_positions)
            diag["epoch"] = epoch
            diag_file.write(json.dumps(diag) + "\n")
            diag_file.flush()
            save_checkpoint(encoder, ckpt_dir / f"epoch_{epoch + 1:04d}.pt",
                            step=step, extra={"epoch": epoch + 1})
            save_checkpoint(encoder, last_path, step=step,
                            extra={"epoch": epoch + 1})

    return PretrainResult(out_dir=out_dir, checkpoint_path=last_path,
                          metrics_path=metrics_path,
                          diagnostics_path=diagnostics_path,
                          config_path=config_path, n_steps=step,
                          final_loss=final_loss)
