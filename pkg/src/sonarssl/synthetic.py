"""Synthetic sonar-like scene and patch generation.

Scenes are a low-pass-filtered Gaussian random field (seabed reflectivity)
under multiplicative exponential speckle.  Objects add a bright highlight
region plus an attenuation shadow cast behind the object: MILCO targets are
near-regular ellipses that always cast a shadow, NOMBO clutter uses strongly
irregular boundaries.  The generator is a stand-in with the same coarse
statistics as real side-scan imagery, not a physical model.
"""

import dataclasses
import math

import numpy as np
from scipy.ndimage import gaussian_filter

CLASS_LABELS = ("BG", "MILCO", "NOMBO")

_BASE_REFLECTIVITY = 0.35
_FIELD_CONTRAST = 0.08
_SHADOW_ATTENUATION = 0.75  # fraction of intensity removed inside the shadow
_EDGE_SOFTNESS = 1.5        # px, sigmoid width of region boundaries


@dataclasses.dataclass(frozen=True)
class ObjectSpec:
    """One object to render: highlight ellipse plus optional shadow.

    ``axes`` are the (semi-major, semi-minor) highlight radii in pixels,
    ``orientation_rad`` rotates the ellipse, ``irregularity`` perturbs the
    boundary radius by up to that relative amount, and the shadow extends
    ``shadow_length`` pixels behind the object along ``shadow_direction_rad``.
    MILCO must be near-regular (irregularity <= 0.3) and cast a shadow;
    NOMBO must be strongly irregular (irregularity >= 0.5).
    """

    label: str
    center: "tuple[float, float]"  # (row, col)
    axes: "tuple[float, float]"
    orientation_rad: float = 0.0
    irregularity: float = 0.0
    highlight_gain: float = 2.8
    shadow_direction_rad: float = 0.0
    shadow_length: float = 0.0

    def __post_init__(self) -> None:
        if self.label not in ("MILCO", "NOMBO"):
            raise ValueError(f"object label must be MILCO or NOMBO, got {self.label!r}")
        if self.axes[0] <= 0 or self.axes[1] <= 0:
            raise ValueError("highlight axes must be positive")
        if self.axes[1] > self.axes[0]:
            raise ValueError("axes are (semi-major, semi-minor)")
        if not 0.0 <= self.irregularity < 1.0:
            raise ValueError("irregularity must lie in [0, 1)")
        if self.label == "MILCO":
            if self.irregularity > 0.3:
                raise ValueError("MILCO irregularity must be <= 0.3")
            if self.shadow_length <= 0:
                raise ValueError("MILCO must cast a shadow (shadow_length > 0)")
        if self.label == "NOMBO" and self.irregularity < 0.5:
            raise ValueError("NOMBO irregularity must be >= 0.5")
        if self.highlight_gain <= 1.0:
            raise ValueError("highlight_gain must exceed 1")
        if self.shadow_length < 0:
            raise ValueError("shadow_length must be >= 0")

    def max_radius(self) -> float:
        """Largest boundary radius, including the irregularity margin."""
        return self.axes[0] * (1.0 + self.irregularity)


@dataclasses.dataclass(frozen=True)
class SonarSceneSpec:
    """Full description of one renderable scene."""

    height: int
    width: int
    seabed_smoothness: float = 6.0   # gaussian low-pass sigma, px
    speckle_scale: float = 0.35      # multiplicative noise std
    objects: "tuple[ObjectSpec, ...]" = ()
    seed: int = 0

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValueError("scene dimensions must be positive")
        if self.seabed_smoothness <= 0:
            raise ValueError("seabed_smoothness must be positive")
        if self.speckle_scale <= 0:
            raise ValueError("speckle_scale must be positive")
        object.__setattr__(self, "objects", tuple(self.objects))
        for obj in self.objects:
            r, c = obj.center
            m = obj.max_radius()
            if r - m < 0 or r + m > self.height - 1 or c - m < 0 or c + m > self.width - 1:
                raise ValueError(
                    f"object at {obj.center} with radius {m:.1f} exceeds the "
                    f"{self.height}x{self.width} canvas")


def _boundary_profile(irregularity: float, rng: np.random.Generator):
    """Random radial perturbation R(theta) in [1 - irr, 1 + irr]."""
    harmonics = np.arange(2, 6)
    amp = rng.uniform(0.5, 1.0, size=len(harmonics))
    amp = amp / amp.sum() * irregularity
    phase = rng.uniform(0.0, 2.0 * math.pi, size=len(harmonics))

    def profile(theta: np.ndarray) -> np.ndarray:
        out = np.ones_like(theta)
        for k, a, p in zip(harmonics, amp, phase):
            out = out + a * np.cos(k * theta + p)
        return out

    return profile


def _highlight_mask(obj: ObjectSpec, rows: np.ndarray, cols: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    a, b = obj.axes
    dy = rows - obj.center[0]
    dx = cols - obj.center[1]
    ct, st = math.cos(obj.orientation_rad), math.sin(obj.orientation_rad)
    u = dx * ct + dy * st
    v = -dx * st + dy * ct
    rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    profile = _boundary_profile(obj.irregularity, rng)
    bound = profile(np.arctan2(v, u))
    # signed distance from the (perturbed) boundary, in rough pixel units
    signed = (bound - rho) * min(a, b)
    return 1.0 / (1.0 + np.exp(-signed / _EDGE_SOFTNESS))


def _shadow_mask(obj: ObjectSpec, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    if obj.shadow_length <= 0:
        return np.zeros_like(rows)
    d = (math.sin(obj.shadow_direction_rad), math.cos(obj.shadow_direction_rad))
    dy = rows - obj.center[0]
    dx = cols - obj.center[1]
    along = dy * d[0] + dx * d[1]
    across = -dy * d[1] + dx * d[0]
    start = obj.max_radius()
    width = max(obj.axes[1], 3.0)
    soft = _EDGE_SOFTNESS
    in_front = 1.0 / (1.0 + np.exp(-(along - start) / soft))
    before_end = 1.0 / (1.0 + np.exp((along - start - obj.shadow_length) / soft))
    narrow = 1.0 / (1.0 + np.exp((np.abs(across) - width) / soft))
    return in_front * before_end * narrow


def _object_bbox(obj: ObjectSpec, height: int, width: int) -> "tuple[int, int, int, int]":
    """Axis-aligned extent of highlight plus shadow, clipped to the canvas."""
    m = obj.max_radius()
    r0, c0 = obj.center[0] - m, obj.center[1] - m
    r1, c1 = obj.center[0] + m, obj.center[1] + m
    if obj.shadow_length > 0:
        d = (math.sin(obj.shadow_direction_rad), math.cos(obj.shadow_direction_rad))
        tip_r = obj.center[0] + d[0] * (m + obj.shadow_length)
        tip_c = obj.center[1] + d[1] * (m + obj.shadow_length)
        w = max(obj.axes[1], 3.0)
        r0, r1 = min(r0, tip_r - w), max(r1, tip_r + w)
        c0, c1 = min(c0, tip_c - w), max(c1, tip_c + w)
    return (int(max(0, math.floor(r0))), int(max(0, math.floor(c0))),
            int(min(height, math.ceil(r1))), int(min(width, math.ceil(c1))))


def render_scene(spec: SonarSceneSpec):
    """Render one scene deterministically from its spec.

    Returns:
        (image, annotations): image is float32 (height, width) in [0, 1];
        annotations is one (label, (r0, c0, r1, c1)) per object, boxes in
        half-open pixel coordinates covering highlight plus shadow.
    """
    rng = np.random.default_rng(spec.seed)
    field = rng.normal(size=(spec.height, spec.width))
    smooth = gaussian_filter(field, sigma=spec.seabed_smoothness)
    sd = smooth.std()
    if sd > 1e-9:
        smooth = smooth / sd
    base = _BASE_REFLECTIVITY + _FIELD_CONTRAST * smooth
    base = np.clip(base, 0.05, None)

    rows, cols = np.meshgrid(np.arange(spec.height, dtype=np.float64),
                             np.arange(spec.width, dtype=np.float64), indexing="ij")
    annotations = []
    for obj in spec.objects:
        shadow = _shadow_mask(obj, rows, cols)
        base = base * (1.0 - _SHADOW_ATTENUATION * shadow)
        highlight = _highlight_mask(obj, rows, cols, rng)
        base = base * (1.0 + (obj.highlight_gain - 1.0) * highlight)
        annotations.append((obj.label, _object_bbox(obj, spec.height, spec.width)))

    speckle = 1.0 + spec.speckle_scale * (rng.exponential(1.0, size=base.shape) - 1.0)
    image = base * np.clip(speckle, 0.0, None)
    return np.clip(image, 0.0, 1.0).astype(np.float32), annotations


def _random_object(label: str, rng: np.random.Generator,
                   scene_size: int) -> ObjectSpec:
    a = float(rng.uniform(10.0, 20.0))
    b = float(rng.uniform(0.35, 0.7)) * a
    if label == "MILCO":
        irregularity = float(rng.uniform(0.0, 0.25))
        shadow_length = float(rng.uniform(30.0, 60.0))
    else:
        irregularity = float(rng.uniform(0.5, 0.85))
        shadow_length = float(rng.uniform(0.0, 15.0)) if rng.random() < 0.5 else 0.0
    # place the center so the full perturbed boundary stays on the canvas
    margin = a * (1.0 + irregularity) + 1.0
    center = (float(rng.uniform(margin, scene_size - 1 - margin)),
              float(rng.uniform(margin, scene_size - 1 - margin)))
    return ObjectSpec(
        label=label,
        center=center,
        axes=(a, b),
        orientation_rad=float(rng.uniform(0.0, math.pi)),
        irregularity=irregularity,
        highlight_gain=float(rng.uniform(2.2, 3.5)),
        shadow_direction_rad=float(rng.uniform(0.0, 2.0 * math.pi)),
        shadow_length=shadow_length,
    )


def generate_labeled_patches(n_per_class: int, patch_size: int = 96, seed: int = 0,
                             scene_size: int = 192):
    """Generate a balanced labeled patch set, one channel per patch.

    Object patches are cut from single-object scenes, centered on the object
    (clamped to the canvas).  BG patches come from object-free scenes.  The
    whole procedure is a pure function of the arguments.

    Returns:
        (patches, labels): patches float32 (3 * n_per_class, 1, patch_size,
        patch_size) in [0, 1]; labels aligned, from CLASS_LABELS.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if patch_size > scene_size:
        raise ValueError("patch_size cannot exceed scene_size")
    root = np.random.SeedSequence(seed)
    patches, labels = [], []
    for label in CLASS_LABELS:
        for k in range(n_per_class):
            child = root.spawn(1)[0]
            rng = np.random.default_rng(child)
            scene_seed = int(rng.integers(0, 2 ** 62))
            if label == "BG":
                spec = SonarSceneSpec(scene_size, scene_size,
                                      seabed_smoothness=float(rng.uniform(4.0, 9.0)),
                                      seed=scene_seed)
                image, _ = render_scene(spec)
                r0 = int(rng.integers(0, scene_size - patch_size + 1))
                c0 = int(rng.integers(0, scene_size - patch_size + 1))
            else:
                obj = _random_object(label, rng, scene_size)
                spec = SonarSceneSpec(scene_size, scene_size,
                                      seabed_smoothness=float(rng.uniform(4.0, 9.0)),
                                      objects=(obj,), seed=scene_seed)
                image, _ = render_scene(spec)
                r0 = int(np.clip(round(obj.center[0]) - patch_size // 2,
                                 0, scene_size - patch_size))
                c0 = int(np.clip(round(obj.center[1]) - patch_size // 2,
                                 0, scene_size - patch_size))
            patch = image[r0:r0 + patch_size, c0:c0 + patch_size]
            patches.append(patch[None, :, :])
            labels.append(label)
    return np.stack(patches).astype(np.float32), labels
