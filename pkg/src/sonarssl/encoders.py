"""Image encoders: a from-scratch ViT, a fast conv baseline, and a projector.

An encoder is backbone + projection head.  The backbone maps (n, 3, s, s)
images to pooled features h; the projector is a two-layer MLP from h to the
low-dimensional embedding z that the objectives operate on.  The projector
is always freshly initialized, even when backbone weights come from an
external checkpoint.
"""

import dataclasses
import hashlib
import json
import pathlib

import torch
from torch import Tensor, nn

ARCH_CHOICES = ("vit_tiny", "vit_small", "toy_conv")
POOLING_CHOICES = ("mean_tokens", "class_token")
CHECKPOINT_FORMAT = "sonarssl-checkpoint"

_VIT_DIMS = {"vit_tiny": (192, 12, 3), "vit_small": (384, 12, 6)}
_TOY_WIDTHS = (16, 32, 64, 128)


@dataclasses.dataclass(frozen=True)
class EncoderSpec:
    """Architecture and initialization description.

    ``init_mode`` is ``random`` or ``external_checkpoint``; the latter needs
    ``init_path`` pointing at a flat tensor-name -> tensor archive for the
    backbone.  ``pooling`` only applies to the ViT variants.
    """

    arch: str = "vit_tiny"
    patch_size: int = 16
    pooling: str = "mean_tokens"
    projector_dim: int = 16
    input_size: int = 96
    init_mode: str = "random"
    init_path: "str | None" = None

    def __post_init__(self) -> None:
        if self.arch not in ARCH_CHOICES:
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.pooling not in POOLING_CHOICES:
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.projector_dim < 1:
            raise ValueError("projector_dim must be >= 1")
        if self.arch != "toy_conv" and self.input_size % self.patch_size != 0:
            raise ValueError("input_size must be divisible by patch_size")
        if self.init_mode not in ("random", "external_checkpoint"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")
        if self.init_mode == "external_checkpoint" and not self.init_path:
            raise ValueError("external_checkpoint needs init_path")

    def canonical_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    def spec_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


class _Attention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.scale = (dim // n_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.n_heads, d // self.n_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class _Block(nn.Module):
    def __init__(self, dim: int, n_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = _Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(),
                                 nn.Linear(hidden, dim))

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class VisionTransformer(nn.Module):
    """Patch-token transformer with mean-token or class-token pooling."""

    def __init__(self, input_size: int, patch_size: int, dim: int, depth: int,
                 n_heads: int, pooling: str):
        super().__init__()
        self.pooling = pooling
        self.feature_dim = dim
        n_tokens = (input_size // patch_size) ** 2
        self.patch_embed = nn.Conv2d(3, dim, kernel_size=patch_size,
                                     stride=patch_size)
        if pooling == "class_token":
            self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
            n_tokens += 1
        self.pos_embed = nn.Parameter(torch.zeros(1, n_tokens, dim))
        self.blocks = nn.ModuleList(_Block(dim, n_heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self._init_weights()

    def _init_weights(self) -> None:
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        if self.pooling == "class_token":
            nn.init.trunc_normal_(self.cls_token, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, x: Tensor) -> Tensor:
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)  # (b, t, d)
        if self.pooling == "class_token":
            cls = self.cls_token.expand(tokens.shape[0], -1, -1)
            tokens = torch.cat([cls, tokens], dim=1)
        tokens = tokens + self.pos_embed
        for block in self.blocks:
            tokens = block(tokens)
        tokens = self.norm(tokens)
        if self.pooling == "class_token":
            return tokens[:, 0]
        return tokens.mean(dim=1)


def _init_fan_in(module: nn.Module) -> None:
    """He (fan-in) init for conv/linear weights, zero biases.

    The torch defaults underscale activations by ~sqrt(3) per layer, which
    after an unnormalized conv stack plus projector leaves the embedding
    spread around 1e-4 — a near-stationary point for every objective here,
    where training stalls regardless of the learning rate.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ToyConvNet(nn.Module):
    """Four stride-reducing conv blocks, global mean pool, 128-D features.

    Each block carries a GroupNorm: without one, gradient descent on any
    view-matching objective can cheapen the loss by shrinking every layer a
    little (the loss is quadratic in scale), and the compounding shrink
    collapses the embedding long before the views are actually aligned.
    Normalizing inside the trunk closes that route while staying
    batch-independent and deterministic.
    """

    def __init__(self):
        super().__init__()
        w = _TOY_WIDTHS
        self.feature_dim = w[-1]

        def block(c_in: int, c_out: int, k: int, stride: int) -> "list[nn.Module]":
            return [nn.Conv2d(c_in, c_out, kernel_size=k, stride=stride,
                              padding=k // 2),
                    nn.GroupNorm(8, c_out), nn.GELU()]

        self.net = nn.Sequential(
            *block(3, w[0], 5, 4), *block(w[0], w[1], 3, 2),
            *block(w[1], w[2], 3, 2), *block(w[2], w[3], 3, 2),
        )
        _init_fan_in(self)

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x).mean(dim=(2, 3))


class Projector(nn.Module):
    """Two-layer MLP head: features -> features -> embedding."""

    def __init__(self, feature_dim: int, embed_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(feature_dim, feature_dim), nn.GELU(),
                                 nn.Linear(feature_dim, embed_dim))
        _init_fan_in(self)

    def forward(self, h: Tensor) -> Tensor:
        return self.net(h)


class Encoder(nn.Module):
    """Backbone plus projector; forward returns (features, embeddings)."""

    def __init__(self, spec: EncoderSpec, backbone: nn.Module, projector: Projector):
        super().__init__()
        self.spec = spec
        self.backbone = backbone
        self.projector = projector

    @property
    def feature_dim(self) -> int:
        return self.backbone.feature_dim

    @property
    def embed_dim(self) -> int:
        return self.spec.projector_dim

    def forward(self, x: Tensor) -> "tuple[Tensor, Tensor]":
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (n, 3, s, s) input, got {tuple(x.shape)}")
        s = self.spec.input_size
        if x.shape[2] != s or x.shape[3] != s:
            raise ValueError(
                f"expected {s}x{s} input, got {x.shape[2]}x{x.shape[3]}; "
                "resize upstream rather than relying on the encoder")
        h = self.backbone(x)
        return h, self.projector(h)


def _make_backbone(spec: EncoderSpec) -> nn.Module:
    if spec.arch == "toy_conv":
        return ToyConvNet()
    dim, depth, heads = _VIT_DIMS[spec.arch]
    return VisionTransformer(spec.input_size, spec.patch_size, dim, depth,
                             heads, spec.pooling)


def build_encoder(spec: EncoderSpec, seed: int = 0) -> Encoder:
    """Construct and initialize an encoder, deterministically in the seed.

    With ``init_mode == "external_checkpoint"`` the backbone weights are
    replaced from the archive at ``spec.init_path`` (see
    :func:`load_external_weights`); the projector keeps its fresh random
    initialization in every mode.
    """
    torch.manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    backbone = _make_backbone(spec)
    projector = Projector(backbone.feature_dim, spec.projector_dim)
    encoder = Encoder(spec, backbone, projector)
    if spec.init_mode == "external_checkpoint":
        load_external_weights(backbone, spec.init_path)
    return encoder


def load_external_weights(backbone: nn.Module, path,
                          name_map: "dict[str, str] | None" = None) -> dict:
    """Copy tensors from a flat archive into the backbone by name.

    ``name_map`` renames archive keys before matching.  Returns a report
    with ``loaded``, ``missing`` (backbone tensors the archive lacks), and
    ``skipped`` (archive tensors with no backbone counterpart).  A shape
    mismatch on a matched name is an error naming every offender.
    """
    archive = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(archive, dict):
        raise ValueError(f"{path} does not hold a tensor-name archive")
    if name_map:
        archive = {name_map.get(k, k): v for k, v in archive.items()}
    own = backbone.state_dict()
    mismatched = [
        f"{k}: archive {tuple(archive[k].shape)} vs model {tuple(own[k].shape)}"
        for k in archive.keys() & own.keys()
        if tuple(archive[k].shape) != tuple(own[k].shape)
    ]
    if mismatched:
        raise ValueError("shape mismatch: " + "; ".join(sorted(mismatched)))
    loaded = sorted(archive.keys() & own.keys())
    for k in loaded:
        own[k].copy_(archive[k])
    return {
        "loaded": loaded,
        "missing": sorted(own.keys() - archive.keys()),
        "skipped": sorted(archive.keys() - own.keys()),
    }


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def save_checkpoint(encoder: Encoder, path, step: int = 0,
                    extra: "dict | None" = None) -> None:
    """Write a key -> tensor archive with a metadata block.

    Metadata records the architecture, a hash of the encoder spec, and the
    training step, so later loads can verify what they are resuming.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "spec_json": encoder.spec.canonical_json(),
        "spec_hash": encoder.spec.spec_hash(),
        "arch": encoder.spec.arch,
        "step": step,
        "extra": extra or {},
        "backbone": encoder.backbone.state_dict(),
        "projector": encoder.projector.state_dict(),
    }
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> "tuple[Encoder, dict]":
    """Rebuild an encoder from :func:`save_checkpoint` output."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an encoder checkpoint")
    spec_doc = json.loads(payload["spec_json"])
    spec = EncoderSpec(**spec_doc)
    if spec.spec_hash() != payload["spec_hash"]:
        raise ValueError("checkpoint spec hash does not match its spec record")
    encoder = build_encoder(dataclasses.replace(spec, init_mode="random",
                                                init_path=None), seed=0)
    # reattach the original spec so provenance survives the random rebuild
    encoder.spec = spec
    encoder.backbone.load_state_dict(payload["backbone"])
    encoder.projector.load_state_dict(payload["projector"])
    meta = {"arch": payload["arch"], "step": payload["step"],
            "spec_hash": payload["spec_hash"], "extra": payload["extra"]}
    return encoder, meta


def encode_features(encoder: Encoder, images: Tensor,
                    batch_size: int = 256) -> Tensor:
    """Backbone features under no_grad and eval mode; restores train state."""
    was_training = encoder.training
    encoder.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            h, _ = encoder(images[start:start + batch_size])
            chunks.append(h)
    if was_training:
        encoder.train()
    return torch.cat(chunks) if chunks else images.new_zeros(0, encoder.feature_dim)
