"""Self-supervised objectives.

The main objective combines a multi-view invariance term with a sliced
Gaussian-fit regularizer: embeddings are projected onto random unit
directions and each 1-D projection is scored against N(0, 1) with a
characteristic-function statistic.  VICReg and SimCLR (NT-Xent) losses are
provided as baselines.
"""

import dataclasses
import math

import numpy as np
import torch
from torch import Tensor

from .seeding import derive_seed

# Slices whose statistic is evaluated in one vectorized block.  Bounds the
# (chunk, n, nodes) intermediate to a few MB regardless of batch size.
_SLICE_CHUNK = 32

_SQRT2 = math.sqrt(2.0)
_INV_SQRT3 = 3.0 ** -0.5


@dataclasses.dataclass(frozen=True)
class LossConfig:
    """Objective selection and weights.

    Attributes:
        objective: one of ``sigreg``, ``vicreg``, ``simclr``.
        reg_weight: weight on the Gaussian-fit term; the invariance term is
            weighted by ``1 - reg_weight``.  Only used by ``sigreg``.
        n_slices: number of random projection directions per step.
        n_quad_nodes: quadrature nodes for the statistic's fast path.
        ep_mode: ``quadrature`` (default) or ``closed_form``.
        vicreg_*: standard VICReg coefficients and hinge margin.
        simclr_temperature: NT-Xent softmax temperature, must be > 0.
    """

    objective: str = "sigreg"
    reg_weight: float = 0.1
    n_slices: int = 256
    n_quad_nodes: int = 65
    ep_mode: str = "quadrature"
    vicreg_sim_coeff: float = 25.0
    vicreg_std_coeff: float = 25.0
    vicreg_cov_coeff: float = 1.0
    vicreg_gamma: float = 1.0
    simclr_temperature: float = 0.2

    def __post_init__(self) -> None:
        if self.objective not in ("sigreg", "vicreg", "simclr"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if not 0.0 <= self.reg_weight <= 1.0:
            raise ValueError("reg_weight must lie in [0, 1]")
        if self.n_slices < 1:
            raise ValueError("n_slices must be >= 1")
        if self.n_quad_nodes < 2:
            raise ValueError("n_quad_nodes must be >= 2")
        if self.ep_mode not in ("quadrature", "closed_form"):
            raise ValueError(f"unknown ep_mode {self.ep_mode!r}")
        if self.simclr_temperature <= 0.0:
            raise ValueError("simclr_temperature must be > 0")


@dataclasses.dataclass
class ViewBatch:
    """Embeddings for a batch of patches under multiple views.

    ``z`` has shape (n_patches, n_views, dim); row i holds all views of
    patch i.  Entries must be finite and at least two views are required so
    the invariance term is meaningful.
    """

    z: Tensor

    def __post_init__(self) -> None:
        if self.z.ndim != 3:
            raise ValueError(f"expected (patches, views, dim), got {tuple(self.z.shape)}")
        if self.z.shape[1] < 2:
            raise ValueError("need at least two views per patch")
        if not torch.isfinite(self.z).all():
            raise ValueError("non-finite embedding entries")

    @property
    def n_patches(self) -> int:
        return self.z.shape[0]

    @property
    def n_views(self) -> int:
        return self.z.shape[1]

    @property
    def dim(self) -> int:
        return self.z.shape[2]

    def view_means(self) -> Tensor:
        """Per-patch mean embedding over views, shape (n_patches, dim)."""
        return self.z.mean(dim=1)

    def flat(self) -> Tensor:
        """All embeddings pooled over patches and views, shape (n*v, dim)."""
        return self.z.reshape(-1, self.z.shape[-1])


def gauss_hermite_nodes(n_nodes: int) -> "tuple[np.ndarray, np.ndarray]":
    """Nodes and weights integrating f against the standard normal density.

    Probabilists' Gauss-Hermite rule rescaled so the weights sum to 1:
    ``sum(w * f(x)) ~= integral f(t) phi(t) dt``.  Exact for polynomials up
    to degree 2*n_nodes - 1; for the oscillatory characteristic-function
    integrand it is accurate while the sample lives within roughly |y| < 8
    (the operating range of near-Gaussian embeddings), and degrades for
    extreme outliers whose frequencies the fixed grid cannot resolve.
    """
    nodes, weights = np.polynomial.hermite_e.hermegauss(n_nodes)
    return nodes, weights / math.sqrt(2.0 * math.pi)


@dataclasses.dataclass
class SliceSet:
    """Random unit projection directions plus the shared quadrature rule.

    ``directions`` has shape (n_slices, dim) with unit-norm rows; ``nodes``
    and ``weights`` define the statistic's quadrature grid.  ``seed`` records
    the draw so a step's slices can be reconstructed.
    """

    directions: Tensor
    nodes: Tensor
    weights: Tensor
    seed: int

    def __post_init__(self) -> None:
        if self.directions.ndim != 2:
            raise ValueError("directions must be (n_slices, dim)")
        norms = self.directions.norm(dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-6):
            raise ValueError("direction rows must have unit norm")
        if self.nodes.shape != self.weights.shape or self.nodes.ndim != 1:
            raise ValueError("nodes and weights must be matching 1-D tensors")
        if not bool((self.weights > 0).all()):
            raise ValueError("quadrature weights must be positive")

    @property
    def n_slices(self) -> int:
        return self.directions.shape[0]


def sample_slices(dim: int, n_slices: int, seed: int, n_quad_nodes: int = 65) -> SliceSet:
    """Draw a fresh set of uniform unit directions.

    Directions are normalized Gaussian draws from a dedicated generator, so
    the same (dim, n_slices, seed) always yields the same set.  Draws are in
    float64; cast happens where the projections are taken.
    """
    if dim < 1 or n_slices < 1:
        raise ValueError("dim and n_slices must be >= 1")
    gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    raw = torch.randn(n_slices, dim, generator=gen, dtype=torch.float64)
    norms = raw.norm(dim=1, keepdim=True)
    # a zero draw has measure zero but would poison the normalization
    while bool((norms < 1e-12).any()):
        bad = norms.squeeze(1) < 1e-12
        raw[bad] = torch.randn(int(bad.sum()), dim, generator=gen, dtype=torch.float64)
        norms = raw.norm(dim=1, keepdim=True)
    nodes, weights = gauss_hermite_nodes(n_quad_nodes)
    return SliceSet(
        directions=raw / norms,
        nodes=torch.from_numpy(nodes),
        weights=torch.from_numpy(weights),
        seed=seed,
    )


def slices_for_step(run_seed: int, step: int, dim: int, n_slices: int,
                    n_quad_nodes: int = 65) -> SliceSet:
    """Slices for a given optimizer step, resampled per step.

    The draw is keyed by (run_seed, step) so a run is reproducible while
    consecutive steps see fresh directions.
    """
    return sample_slices(dim, n_slices, derive_seed(run_seed, "slices", step), n_quad_nodes)


def _ep_closed_form(y: Tensor) -> Tensor:
    # I = (1/n^2) sum_jk exp(-(y_j-y_k)^2/2) - (sqrt(2)/n) sum_j exp(-y_j^2/4) + 1/sqrt(3)
    diff = y.unsqueeze(0) - y.unsqueeze(1)
    pair = torch.exp(-0.5 * diff * diff).mean()
    single = torch.exp(-0.25 * y * y).mean()
    return pair - _SQRT2 * single + _INV_SQRT3


def _ep_quadrature(y: Tensor, nodes: Tensor, weights: Tensor) -> Tensor:
    nodes = nodes.to(y.dtype)
    weights = weights.to(y.dtype)
    ty = y.unsqueeze(-1) * nodes  # (..., n, g)
    ecf_re = torch.cos(ty).mean(dim=-2)
    ecf_im = torch.sin(ty).mean(dim=-2)
    target = torch.exp(-0.5 * nodes * nodes)
    sq_err = (ecf_re - target) ** 2 + ecf_im ** 2
    return (sq_err * weights).sum(dim=-1)


def epps_pulley_1d(y: Tensor, mode: str = "quadrature",
                   nodes: "Tensor | None" = None,
                   weights: "Tensor | None" = None,
                   n_quad_nodes: int = 65) -> Tensor:
    """Squared characteristic-function distance of a 1-D sample to N(0, 1).

    Computes ``integral |ecf_y(t) - exp(-t^2/2)|^2 phi(t) dt`` where ecf_y is
    the empirical characteristic function and phi the standard normal
    density.  The sample is used raw: no centering or rescaling, so a shift
    or scale mismatch is part of the score.

    Args:
        y: 1-D sample, at least one element, finite entries.
        mode: ``closed_form`` evaluates the exact O(n^2) pairwise identity;
            ``quadrature`` evaluates the integral on a fixed Gauss-Hermite
            grid in O(n * nodes).
        nodes, weights: optional quadrature grid override (both or neither).
        n_quad_nodes: grid size when nodes are not supplied.

    Returns:
        Scalar tensor, differentiable w.r.t. ``y``, nonnegative up to float
        roundoff.  Duplicating the sample leaves the value unchanged: the
        statistic estimates an integral rather than a scaled test score.
    """
    if y.ndim != 1 or y.numel() == 0:
        raise ValueError("y must be a nonempty 1-D tensor")
    if not torch.isfinite(y).all():
        raise ValueError("non-finite sample entries")
    if mode == "closed_form":
        return _ep_closed_form(y)
    if mode != "quadrature":
        raise ValueError(f"unknown mode {mode!r}")
    if (nodes is None) != (weights is None):
        raise ValueError("supply nodes and weights together")
    if nodes is None:
        n_np, w_np = gauss_hermite_nodes(n_quad_nodes)
        nodes = torch.from_numpy(n_np)
        weights = torch.from_numpy(w_np)
    return _ep_quadrature(y, nodes, weights)


def invariance_loss(batch: ViewBatch) -> Tensor:
    """Mean squared distance of each view to its patch's mean embedding.

    ``(1/(n*v)) * sum_i sum_k ||z[i,k] - mean_k z[i,k]||^2``.  Zero exactly
    when all views of every patch coincide; scales quadratically with the
    embeddings.
    """
    centered = batch.z - batch.view_means().unsqueeze(1)
    return centered.pow(2).sum(dim=-1).mean()


def sigreg_loss(batch: ViewBatch, slices: SliceSet, mode: str = "quadrature") -> Tensor:
    """Mean Gaussian-fit statistic over random 1-D projections.

    All n*v embeddings are pooled, projected onto each unit direction, and
    each raw (unstandardized) projection is scored with
    :func:`epps_pulley_1d`; the slice scores are averaged.
    """
    flat = batch.flat()
    if slices.directions.shape[1] != flat.shape[1]:
        raise ValueError(
            f"slice dim {slices.directions.shape[1]} != embedding dim {flat.shape[1]}")
    dirs = slices.directions.to(flat.dtype)
    proj = flat @ dirs.T  # (n*v, n_slices)
    if mode == "closed_form":
        stats = [_ep_closed_form(proj[:, j]) for j in range(slices.n_slices)]
        return torch.stack(stats).mean()
    if mode != "quadrature":
        raise ValueError(f"unknown mode {mode!r}")
    total = proj.new_zeros(())
    for start in range(0, slices.n_slices, _SLICE_CHUNK):
        cols = proj[:, start:start + _SLICE_CHUNK].T  # (chunk, n*v)
        total = total + _ep_quadrature(cols, slices.nodes, slices.weights).sum()
    return total / slices.n_slices


def combined_loss(batch: ViewBatch, slices: SliceSet, cfg: LossConfig) -> "dict[str, Tensor]":
    """Convex combination of invariance and Gaussian-fit terms.

    ``total = (1 - w) * invariance + w * gaussian_fit`` with
    ``w = cfg.reg_weight``.  Both components are returned alongside the
    total so training logs can track them separately.
    """
    inv = invariance_loss(batch)
    fit = sigreg_loss(batch, slices, mode=cfg.ep_mode)
    total = (1.0 - cfg.reg_weight) * inv + cfg.reg_weight * fit
    return {"total": total, "invariance": inv, "gaussian_fit": fit}


def vicreg_loss(za: Tensor, zb: Tensor,
                sim_coeff: float = 25.0, std_coeff: float = 25.0,
                cov_coeff: float = 1.0, gamma: float = 1.0,
                eps: float = 1e-4) -> "dict[str, Tensor]":
    """VICReg: invariance + hinge-variance + covariance penalties.

    ``za`` and ``zb`` are two view batches of shape (n, dim).  Invariance is
    the element-mean MSE between branches.  The variance term hinges each
    dimension's std against the margin ``gamma`` using the stabilized std
    sqrt(var + eps); the covariance term penalizes squared off-diagonal
    entries of each branch's covariance, divided by dim.  Variance and
    covariance are averaged over the two branches.  Returns the weighted
    total plus each unweighted component.
    """
    if za.shape != zb.shape or za.ndim != 2:
        raise ValueError("za and zb must be matching (n, dim) batches")
    if za.shape[0] < 2:
        raise ValueError("need at least two samples for variance/covariance")
    n, dim = za.shape

    inv = (za - zb).pow(2).mean()

    def hinge_std(z: Tensor) -> Tensor:
        std = torch.sqrt(z.var(dim=0) + eps)
        return torch.relu(gamma - std).mean()

    var = 0.5 * (hinge_std(za) + hinge_std(zb))

    def off_diag_cov(z: Tensor) -> Tensor:
        zc = z - z.mean(dim=0)
        cov = (zc.T @ zc) / (n - 1)
        off = cov - torch.diag(torch.diagonal(cov))
        return off.pow(2).sum() / dim

    cov = 0.5 * (off_diag_cov(za) + off_diag_cov(zb))
    total = sim_coeff * inv + std_coeff * var + cov_coeff * cov
    return {"total": total, "invariance": inv, "variance": var, "covariance": cov}


def simclr_loss(za: Tensor, zb: Tensor, temperature: float = 0.2) -> Tensor:
    """NT-Xent contrastive loss over two view batches.

    Rows are L2-normalized, all 2n embeddings score against each other by
    cosine similarity over ``temperature``, and row i's positive is its
    paired view.  With every embedding identical the softmax is uniform over
    the 2n - 1 candidates and the loss equals log(2n - 1).
    """
    if temperature <= 0.0:
        raise ValueError("temperature must be > 0")
    if za.shape != zb.shape or za.ndim != 2:
        raise ValueError("za and zb must be matching (n, dim) batches")
    n = za.shape[0]
    z = torch.cat([za, zb], dim=0)
    norms = z.norm(dim=1)
    if bool((norms < 1e-12).any()):
        raise ValueError("zero-norm embedding rows cannot be normalized")
    z = z / norms.unsqueeze(1)
    sim = (z @ z.T) / temperature
    sim = sim.masked_fill(torch.eye(2 * n, dtype=torch.bool, device=z.device),
                          float("-inf"))  # self-similarity is never a candidate
    targets = torch.cat([torch.arange(n, 2 * n, device=z.device),
                         torch.arange(0, n, device=z.device)])
    return torch.nn.functional.cross_entropy(sim, targets)


def objective_terms(batch: ViewBatch, cfg: LossConfig,
                    slices: "SliceSet | None" = None) -> "dict[str, Tensor]":
    """Dispatch to the configured objective, returning named components.

    ``sigreg`` needs ``slices``; the baselines consume the first two views
    of the batch and ignore any extras.
    """
    if cfg.objective == "sigreg":
        if slices is None:
            raise ValueError("sigreg requires a SliceSet")
        return combined_loss(batch, slices, cfg)
    za, zb = batch.z[:, 0], batch.z[:, 1]
    if cfg.objective == "vicreg":
        return vicreg_loss(za, zb, sim_coeff=cfg.vicreg_sim_coeff,
                           std_coeff=cfg.vicreg_std_coeff,
                           cov_coeff=cfg.vicreg_cov_coeff,
                           gamma=cfg.vicreg_gamma)
    if cfg.objective == "simclr":
        total = simclr_loss(za, zb, temperature=cfg.simclr_temperature)
        return {"total": total}
    raise ValueError(f"unknown objective {cfg.objective!r}")
