"""Multi-view augmentation for sonar patches.

Two presets: ``sss_adapted`` keeps only channel-uniform photometric jitter
(brightness/contrast), enables vertical flips and small rotations, and drops
the hue/saturation/solarize/grayscale ops that assume natural-image color
statistics; ``natural_image`` is the usual contrastive recipe with those ops
on, no vertical flip, and no rotation.

Op order is fixed: crop -> flips -> rotation -> photometric -> blur ->
normalize.  The three geometric ops are composed into a single affine map
and applied with one bilinear resampling (reflection padding at the source
patch bounds), so every output pixel originates from inside the source.
Parameter draws use one fixed-layout uniform vector per view, seeded from
the caller's stream key, which makes every view reproducible in isolation.
"""

import dataclasses
import math

import torch
import torch.nn.functional as F

from .seeding import derive_seed

_LUMA = (0.299, 0.587, 0.114)
# fixed slots of the per-view uniform draw; one layout for every preset so
# streams stay aligned no matter which ops are enabled
_N_SLOTS = 16
(_SLOT_AREA, _SLOT_ASPECT, _SLOT_TOP, _SLOT_LEFT, _SLOT_HFLIP, _SLOT_VFLIP,
 _SLOT_ROT, _SLOT_BRIGHT, _SLOT_CONTRAST, _SLOT_SAT, _SLOT_HUE, _SLOT_SOL,
 _SLOT_GRAY, _SLOT_BLURGATE, _SLOT_BLURSIG) = range(15)

_SOLARIZE_THRESHOLD = 0.5


@dataclasses.dataclass(frozen=True)
class AugmentPolicy:
    """View-generation policy; invalid ranges are rejected at construction.

    Jitter magnitudes are multiplicative half-ranges (0.4 means factors in
    [0.6, 1.4]); ``hue`` is a fraction of the color wheel.  ``preset`` tags
    the policy and enforces the preset's structural constraints.
    """

    n_views: int = 4
    preset: str = "custom"
    crop_scale: "tuple[float, float]" = (0.5, 1.0)
    crop_aspect: "tuple[float, float]" = (0.75, 4.0 / 3.0)
    hflip: bool = True
    vflip: bool = True
    rotation_deg: float = 15.0
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.0
    hue: float = 0.0
    solarize_prob: float = 0.0
    grayscale_prob: float = 0.0
    blur_prob: float = 0.5
    blur_sigma: "tuple[float, float]" = (0.1, 2.0)
    blur_kernel: int = 9
    out_size: int = 96

    def __post_init__(self) -> None:
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("crop_scale must satisfy 0 < lo <= hi <= 1")
        alo, ahi = self.crop_aspect
        if not 0.0 < alo <= ahi:
            raise ValueError("crop_aspect must satisfy 0 < lo <= hi")
        for name in ("brightness", "contrast", "saturation"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if not 0.0 <= self.hue <= 0.5:
            raise ValueError("hue must lie in [0, 0.5]")
        for name in ("solarize_prob", "grayscale_prob", "blur_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if self.rotation_deg < 0.0:
            raise ValueError("rotation_deg must be >= 0")
        slo, shi = self.blur_sigma
        if not 0.0 < slo <= shi:
            raise ValueError("blur_sigma must satisfy 0 < lo <= hi")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ValueError("blur_kernel must be odd and positive")
        if self.out_size < 1:
            raise ValueError("out_size must be positive")
        if self.preset == "sss_adapted":
            if (self.saturation != 0.0 or self.hue != 0.0
                    or self.solarize_prob != 0.0 or self.grayscale_prob != 0.0):
                raise ValueError("sss_adapted forbids saturation/hue/solarize/grayscale")
            if not self.vflip:
                raise ValueError("sss_adapted requires vertical flips")
        elif self.preset == "natural_image":
            if self.saturation <= 0.0 or self.hue <= 0.0:
                raise ValueError("natural_image requires saturation and hue jitter")
            if self.solarize_prob <= 0.0 or self.grayscale_prob <= 0.0:
                raise ValueError("natural_image requires solarize and grayscale")
            if self.vflip:
                raise ValueError("natural_image forbids vertical flips")
            if self.rotation_deg != 0.0:
                raise ValueError("natural_image uses no rotation")
        elif self.preset != "custom":
            raise ValueError(f"unknown preset {self.preset!r}")

    @classmethod
    def sss_adapted(cls, n_views: int = 4, **overrides) -> "AugmentPolicy":
        """Sonar-adapted preset: geometry-rich, channel-preserving photometry."""
        base = dict(preset="sss_adapted", n_views=n_views, vflip=True,
                    rotation_deg=15.0, brightness=0.4, contrast=0.4,
                    saturation=0.0, hue=0.0, solarize_prob=0.0,
                    grayscale_prob=0.0)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def natural_image(cls, n_views: int = 4, **overrides) -> "AugmentPolicy":
        """Standard natural-image recipe, kept as the ablation baseline."""
        base = dict(preset="natural_image", n_views=n_views, vflip=False,
                    rotation_deg=0.0, brightness=0.4, contrast=0.4,
                    saturation=0.4, hue=0.1, solarize_prob=0.2,
                    grayscale_prob=0.2)
        base.update(overrides)
        return cls(**base)


def patch_seed(run_seed: int, patch_index: int, epoch: int) -> int:
    """Per-patch stream key for one epoch; feed these to augment_batch."""
    return derive_seed(run_seed, "aug", patch_index, epoch)


def view_seed(run_seed: int, patch_index: int, view_index: int, epoch: int) -> int:
    """Stream key for one (patch, view, epoch) triple.

    Matches exactly what :func:`augment_batch` derives internally for view
    ``view_index`` when handed ``patch_seed(run_seed, patch_index, epoch)``.
    """
    return derive_seed(patch_seed(run_seed, patch_index, epoch), "view", view_index)


def _draw_params(policy: AugmentPolicy, seeds, n_views: int) -> torch.Tensor:
    """Uniform slot matrix, one row per (patch, view), fixed layout."""
    rows = []
    for seed in seeds:
        for v in range(n_views):
            gen = torch.Generator().manual_seed(
                derive_seed(seed, "view", v) & 0x7FFFFFFFFFFFFFFF)
            rows.append(torch.rand(_N_SLOTS, generator=gen))
    return torch.stack(rows)  # (n*v, slots)


def _geometry_theta(policy: AugmentPolicy, u: torch.Tensor,
                    height: int, width: int) -> torch.Tensor:
    """Compose crop, flips, and rotation into affine_grid parameters."""
    b = u.shape[0]
    lo, hi = policy.crop_scale
    area = (lo + u[:, _SLOT_AREA] * (hi - lo)) * height * width
    alo, ahi = policy.crop_aspect
    log_aspect = (math.log(alo)
                  + u[:, _SLOT_ASPECT] * (math.log(ahi) - math.log(alo)))
    aspect = torch.exp(log_aspect)
    # clamp to the feasible box; extreme aspect at large scale just shrinks
    crop_w = torch.clamp(torch.round(torch.sqrt(area * aspect)), 1, width)
    crop_h = torch.clamp(torch.round(torch.sqrt(area / aspect)), 1, height)
    top = torch.round(u[:, _SLOT_TOP] * (height - crop_h))
    left = torch.round(u[:, _SLOT_LEFT] * (width - crop_w))

    fx = torch.where(torch.logical_and(torch.tensor(policy.hflip),
                                       u[:, _SLOT_HFLIP] < 0.5), -1.0, 1.0)
    fy = torch.where(torch.logical_and(torch.tensor(policy.vflip),
                                       u[:, _SLOT_VFLIP] < 0.5), -1.0, 1.0)
    angle = ((2.0 * u[:, _SLOT_ROT] - 1.0) * policy.rotation_deg) * math.pi / 180.0
    cos, sin = torch.cos(angle), torch.sin(angle)

    half_w = crop_w / width
    half_h = crop_h / height
    cx = (2.0 * left + crop_w) / width - 1.0
    cy = (2.0 * top + crop_h) / height - 1.0

    theta = torch.zeros(b, 2, 3)
    theta[:, 0, 0] = half_w * fx * cos
    theta[:, 0, 1] = -half_w * fx * sin
    theta[:, 0, 2] = cx
    theta[:, 1, 0] = half_h * fy * sin
    theta[:, 1, 1] = half_h * fy * cos
    theta[:, 1, 2] = cy
    return theta


_IDENTITY_THETA = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def _apply_geometry(x: torch.Tensor, theta: torch.Tensor, out_size: int) -> torch.Tensor:
    if (x.shape[-2] == x.shape[-1] == out_size
            and torch.equal(theta, _IDENTITY_THETA.expand_as(theta))):
        return x.clone()  # bit-exact passthrough for identity policies
    grid = F.affine_grid(theta, (x.shape[0], x.shape[1], out_size, out_size),
                         align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="reflection",
                         align_corners=False)


def _luma(x: torch.Tensor) -> torch.Tensor:
    return (_LUMA[0] * x[:, 0] + _LUMA[1] * x[:, 1]
            + _LUMA[2] * x[:, 2]).unsqueeze(1)


def _apply_photometric(x: torch.Tensor, policy: AugmentPolicy,
                       u: torch.Tensor) -> torch.Tensor:
    def factor(slot: int, half_range: float) -> torch.Tensor:
        return (1.0 - half_range
                + 2.0 * half_range * u[:, slot]).view(-1, 1, 1, 1)

    if policy.brightness > 0.0:
        x = torch.clamp(x * factor(_SLOT_BRIGHT, policy.brightness), 0.0, 1.0)
    if policy.contrast > 0.0:
        mean = x.mean(dim=(1, 2, 3), keepdim=True)
        x = torch.clamp((x - mean) * factor(_SLOT_CONTRAST, policy.contrast)
                        + mean, 0.0, 1.0)
    if policy.saturation > 0.0:
        gray = _luma(x)
        x = torch.clamp(gray + (x - gray) * factor(_SLOT_SAT, policy.saturation),
                        0.0, 1.0)
    if policy.hue > 0.0:
        # rotate the chroma plane of YIQ space; a no-op on gray inputs
        angle = ((2.0 * u[:, _SLOT_HUE] - 1.0) * policy.hue
                 * 2.0 * math.pi).view(-1, 1, 1)
        y = _LUMA[0] * x[:, 0] + _LUMA[1] * x[:, 1] + _LUMA[2] * x[:, 2]
        ci = 0.596 * x[:, 0] - 0.274 * x[:, 1] - 0.322 * x[:, 2]
        cq = 0.211 * x[:, 0] - 0.523 * x[:, 1] + 0.312 * x[:, 2]
        cos, sin = torch.cos(angle), torch.sin(angle)
        ri = ci * cos - cq * sin
        rq = ci * sin + cq * cos
        r = y + 0.956 * ri + 0.621 * rq
        g = y - 0.272 * ri - 0.647 * rq
        b = y - 1.106 * ri + 1.703 * rq
        x = torch.clamp(torch.stack([r, g, b], dim=1), 0.0, 1.0)
    if policy.grayscale_prob > 0.0:
        gate = (u[:, _SLOT_GRAY] < policy.grayscale_prob).view(-1, 1, 1, 1)
        x = torch.where(gate, _luma(x).expand_as(x), x)
    if policy.solarize_prob > 0.0:
        gate = (u[:, _SLOT_SOL] < policy.solarize_prob).view(-1, 1, 1, 1)
        x = torch.where(gate & (x >= _SOLARIZE_THRESHOLD), 1.0 - x, x)
    return x


def _apply_blur(x: torch.Tensor, policy: AugmentPolicy, u: torch.Tensor) -> torch.Tensor:
    if policy.blur_prob <= 0.0:
        return x
    b, c, h, w = x.shape
    k = policy.blur_kernel
    half = k // 2
    slo, shi = policy.blur_sigma
    sigma = (slo + u[:, _SLOT_BLURSIG] * (shi - slo)).view(-1, 1)
    offsets = torch.arange(k, dtype=x.dtype) - half
    kernel = torch.exp(-0.5 * (offsets / sigma) ** 2)
    kernel = kernel / kernel.sum(dim=1, keepdim=True)
    gate = (u[:, _SLOT_BLURGATE] < policy.blur_prob).view(-1, 1)
    delta = torch.zeros(1, k, dtype=x.dtype)
    delta[0, half] = 1.0
    kernel = torch.where(gate, kernel, delta)  # ungated views keep a delta tap

    weight = kernel.repeat_interleave(c, dim=0)  # (b*c, k)
    flat = x.reshape(1, b * c, h, w)
    flat = F.pad(flat, (half, half, 0, 0), mode="reflect")
    flat = F.conv2d(flat, weight.view(b * c, 1, 1, k), groups=b * c)
    flat = F.pad(flat, (0, 0, half, half), mode="reflect")
    flat = F.conv2d(flat, weight.view(b * c, 1, k, 1), groups=b * c)
    return flat.reshape(b, c, h, w)


def augment_batch(pixels: torch.Tensor, policy: AugmentPolicy, seeds,
                  mean: "torch.Tensor | None" = None,
                  std: "torch.Tensor | None" = None) -> torch.Tensor:
    """Generate policy.n_views views per patch, fully batched.

    Args:
        pixels: (n, channels, height, width) raw patches in [0, 1]; one or
            three channels.  Single-channel input is replicated to three
            before any photometric op.
        policy: the augmentation policy.
        seeds: one stream key per patch (see :func:`view_seed`); view v of
            patch i depends only on (seeds[i], v), never on batch order.
        mean, std: optional per-patch normalization stats, shape (n, c) with
            c matching the raw channel count (broadcast to three).  Applied
            as the final step.

    Returns:
        (n, n_views, 3, out_size, out_size) float32 views.
    """
    if pixels.ndim != 4:
        raise ValueError("pixels must be (n, channels, height, width)")
    n, c, h, wd = pixels.shape
    if c not in (1, 3):
        raise ValueError(f"expected 1 or 3 channels, got {c}")
    if len(seeds) != n:
        raise ValueError("one seed per patch is required")
    if not torch.isfinite(pixels).all():
        raise ValueError("non-finite pixels")
    v = policy.n_views

    x = pixels.to(torch.float32)
    if c == 1:
        x = x.expand(n, 3, h, wd)
    x = x.repeat_interleave(v, dim=0)  # (n*v, 3, h, w): patch-major, view-minor

    u = _draw_params(policy, seeds, v)
    theta = _geometry_theta(policy, u, h, wd)
    x = _apply_geometry(x, theta, policy.out_size)
    x = _apply_photometric(x, policy, u)
    x = _apply_blur(x, policy, u)

    if (mean is None) != (std is None):
        raise ValueError("supply mean and std together")
    if mean is not None:
        mean = torch.as_tensor(mean, dtype=x.dtype).reshape(n, -1)
        std = torch.as_tensor(std, dtype=x.dtype).reshape(n, -1)
        if bool((std <= 0).any()):
            raise ValueError("std must be positive")
        mean = mean.repeat_interleave(v, dim=0).unsqueeze(-1).unsqueeze(-1)
        std = std.repeat_interleave(v, dim=0).unsqueeze(-1).unsqueeze(-1)
        x = (x - mean) / std

    return x.reshape(n, v, 3, policy.out_size, policy.out_size)


def make_views(patch: torch.Tensor, policy: AugmentPolicy, seed: int,
               mean=None, std=None) -> torch.Tensor:
    """Views for a single patch: (n_views, 3, out, out).

    Equivalent to one row of :func:`augment_batch`; the same seed always
    reproduces the same views.
    """
    if patch.ndim != 3:
        raise ValueError("patch must be (channels, height, width)")
    mean_b = None if mean is None else torch.as_tensor(mean).reshape(1, -1)
    std_b = None if std is None else torch.as_tensor(std).reshape(1, -1)
    return augment_batch(patch.unsqueeze(0), policy, [seed], mean_b, std_b)[0]


def identity_policy(n_views: int = 2, out_size: int = 96) -> AugmentPolicy:
    """All jitter off: every view is the (normalized) input itself."""
    return AugmentPolicy(n_views=n_views, preset="custom",
                         crop_scale=(1.0, 1.0), crop_aspect=(1.0, 1.0),
                         hflip=False, vflip=False, rotation_deg=0.0,
                         brightness=0.0, contrast=0.0, saturation=0.0,
                         hue=0.0, solarize_prob=0.0, grayscale_prob=0.0,
                         blur_prob=0.0, out_size=out_size)
