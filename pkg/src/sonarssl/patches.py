"""Patch extraction, split assignment, normalization stats, and corpus files.

A corpus on disk is one packed binary per subset plus a JSON manifest that
lists every patch (locator, label, subset, split) and one normalization
record per subset.  Pixels are stored raw in [0, 1]; normalization happens
at load time with the owning subset's statistics.
"""

import dataclasses
import json
import math
import pathlib
import struct

import numpy as np

from .seeding import derive_seed

PACK_MAGIC = b"MJPA"
PACK_VERSION = 1
MANIFEST_NAME = "manifest.json"
STD_FLOOR = 1e-6
SPLIT_NAMES = ("train", "val", "test")


@dataclasses.dataclass
class PatchTensor:
    """One patch: raw pixels plus provenance.

    ``pixels`` is float32 (channels, height, width) in [0, 1] before any
    normalization.  ``offset`` is the (row, col) of the patch's top-left
    corner in its source image.
    """

    pixels: np.ndarray
    source_id: str
    offset: "tuple[int, int]"
    subset: str
    label: "str | None" = None

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3:
            raise ValueError("pixels must be (channels, height, width)")
        if self.pixels.dtype != np.float32:
            raise ValueError("pixels must be float32")
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < -1e-6 or hi > 1.0 + 1e-6:
            raise ValueError(f"pixels outside [0, 1]: range [{lo}, {hi}]")


def _as_chw(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return image[None, :, :]
    if image.ndim == 3:
        return image
    raise ValueError("image must be (height, width) or (channels, height, width)")


def grid_patch_count(height: int, width: int, window: int, stride: int) -> int:
    """Number of full windows on the regular grid: one per valid offset."""
    if height < window or width < window:
        return 0
    return ((height - window) // stride + 1) * ((width - window) // stride + 1)


def extract_grid_patches(image: np.ndarray, window: int = 96, stride: int = 64,
                         source_id: str = "", subset: str = "real"):
    """Cut a regular grid of full windows, row-major.

    Offsets are multiples of ``stride``; windows never cross the image
    boundary, so trailing pixels that do not fit a full window are dropped.
    An image smaller than the window is an error rather than zero patches.
    """
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    chw = _as_chw(image)
    _, height, width = chw.shape
    if height < window or width < window:
        raise ValueError(f"image {height}x{width} is smaller than window {window}")
    out = []
    for r in range(0, height - window + 1, stride):
        for c in range(0, width - window + 1, stride):
            out.append(PatchTensor(
                pixels=np.ascontiguousarray(chw[:, r:r + window, c:c + window],
                                            dtype=np.float32),
                source_id=source_id, offset=(r, c), subset=subset))
    assert len(out) == grid_patch_count(height, width, window, stride)
    return out


def _boxes_overlap(r0, c0, r1, c1, box) -> bool:
    br0, bc0, br1, bc1 = box
    return not (r1 <= br0 or br1 <= r0 or c1 <= bc0 or bc1 <= c0)


def extract_labeled_patches(image: np.ndarray, annotations, window: int = 96,
                            bg_per_image: int = 3, seed: int = 0,
                            source_id: str = "", subset: str = "real",
                            max_tries: int = 200):
    """Object-centered patches plus background patches clear of every box.

    Each annotation (label, (r0, c0, r1, c1)) yields one patch centered on
    its box center, clamped to the image bounds.  BG patches are drawn at
    uniform offsets and accepted only when the window is disjoint from all
    boxes; after ``max_tries`` rejections per patch the search stops, so
    crowded images may yield fewer than ``bg_per_image`` BG patches.
    """
    chw = _as_chw(image)
    _, height, width = chw.shape
    if height < window or width < window:
        raise ValueError(f"image {height}x{width} is smaller than window {window}")
    out = []
    boxes = []
    for label, box in annotations:
        r0, c0, r1, c1 = box
        if not (0 <= r0 < r1 <= height and 0 <= c0 < c1 <= width):
            raise ValueError(f"annotation box {box} outside image {height}x{width}")
        boxes.append(box)
        cr, cc = (r0 + r1) // 2, (c0 + c1) // 2
        top = int(np.clip(cr - window // 2, 0, height - window))
        left = int(np.clip(cc - window // 2, 0, width - window))
        out.append(PatchTensor(
            pixels=np.ascontiguousarray(chw[:, top:top + window, left:left + window],
                                        dtype=np.float32),
            source_id=source_id, offset=(top, left), subset=subset, label=label))
    rng = np.random.default_rng(seed)
    found = 0
    tries = 0
    while found < bg_per_image and tries < max_tries * bg_per_image:
        tries += 1
        top = int(rng.integers(0, height - window + 1))
        left = int(rng.integers(0, width - window + 1))
        if any(_boxes_overlap(top, left, top + window, left + window, b) for b in boxes):
            continue
        out.append(PatchTensor(
            pixels=np.ascontiguousarray(chw[:, top:top + window, left:left + window],
                                        dtype=np.float32),
            source_id=source_id, offset=(top, left), subset=subset, label="BG"))
        found += 1
    return out


@dataclasses.dataclass(frozen=True)
class SplitSpec:
    """Split fractions and the seed of the stratified shuffle."""

    fractions: "tuple[float, float, float]" = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.fractions) != 3:
            raise ValueError("fractions are (train, val, test)")
        if any(f < 0 for f in self.fractions):
            raise ValueError("fractions must be nonnegative")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError("fractions must sum to 1")


def make_splits(strata, spec: SplitSpec):
    """Assign train/val/test per item, stratified and deterministic.

    ``strata`` is one hashable key per item (e.g. (label, subset)).  Within
    each stratum the items are shuffled by a seed derived from the split
    seed and the stratum key, then apportioned by largest remainder, so each
    split's per-stratum count is within one item of the exact fraction.
    """
    strata = list(strata)
    groups: "dict[object, list[int]]" = {}
    for idx, key in enumerate(strata):
        groups.setdefault(key, []).append(idx)
    assignment = [""] * len(strata)
    for key in sorted(groups, key=repr):
        idxs = groups[key]
        rng = np.random.default_rng(
            np.random.SeedSequence([spec.seed, derive_seed("split", repr(key))]))
        order = rng.permutation(len(idxs))
        n = len(idxs)
        exact = [f * n for f in spec.fractions]
        counts = [math.floor(e) for e in exact]
        remainders = sorted(range(3), key=lambda j: (exact[j] - counts[j], -j),
                            reverse=True)
        for j in remainders[: n - sum(counts)]:
            counts[j] += 1
        cursor = 0
        for split, count in zip(SPLIT_NAMES, counts):
            for p in order[cursor:cursor + count]:
                assignment[idxs[p]] = split
            cursor += count
    return assignment


def compute_subset_stats(pixel_iter):
    """Per-channel mean/std over an iterable of (C, H, W) float arrays.

    All patches must share a channel count.  The std is floored at
    ``STD_FLOOR`` so constant channels stay usable.
    """
    total = None
    total_sq = None
    count = 0
    channels = None
    for pix in pixel_iter:
        pix = np.asarray(pix, dtype=np.float64)
        if channels is None:
            channels = pix.shape[0]
            total = np.zeros(channels)
            total_sq = np.zeros(channels)
        elif pix.shape[0] != channels:
            raise ValueError("mixed channel counts within one subset")
        total += pix.sum(axis=(1, 2))
        total_sq += (pix * pix).sum(axis=(1, 2))
        count += pix.shape[1] * pix.shape[2]
    if count == 0:
        raise ValueError("no pixels to compute stats from")
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    std = np.maximum(np.sqrt(var), STD_FLOOR)
    return mean.astype(np.float32), std.astype(np.float32)


def write_pack(path, arrays) -> None:
    """Write patches to the packed binary format.

    Layout: magic b'MJPA', version u16, count u64, then per patch the
    channel/height/width as u16 triplet followed by the raw float32 planes.
    All integers and floats are little-endian.
    """
    arrays = list(arrays)
    with open(path, "wb") as fh:
        fh.write(PACK_MAGIC)
        fh.write(struct.pack("<HQ", PACK_VERSION, len(arrays)))
        for arr in arrays:
            arr = np.ascontiguousarray(arr, dtype="<f4")
            if arr.ndim != 3:
                raise ValueError("pack entries must be (channels, height, width)")
            c, h, w = arr.shape
            if max(c, h, w) > 0xFFFF:
                raise ValueError("dimension exceeds u16 range")
            fh.write(struct.pack("<HHH", c, h, w))
            fh.write(arr.tobytes())


class PackReader:
    """Random access over a packed patch file.

    Builds an offset index when opened; ``read(i)`` then seeks directly.
    The file handle stays open for the reader's lifetime (use as a context
    manager or call ``close``).
    """

    def __init__(self, path):
        self.path = pathlib.Path(path)
        self._fh = open(self.path, "rb")
        header = self._fh.read(4 + 2 + 8)
        if len(header) < 14 or header[:4] != PACK_MAGIC:
            self._fh.close()
            raise ValueError(f"{self.path} is not a patch pack (bad magic)")
        version, count = struct.unpack("<HQ", header[4:])
        if version != PACK_VERSION:
            self._fh.close()
            raise ValueError(f"unsupported pack version {version}")
        self.count = count
        self._index = []
        pos = 14
        for _ in range(count):
            self._fh.seek(pos)
            dims = self._fh.read(6)
            if len(dims) < 6:
                self._fh.close()
                raise ValueError(f"{self.path} truncated at record {len(self._index)}")
            c, h, w = struct.unpack("<HHH", dims)
            self._index.append((pos + 6, (c, h, w)))
            pos += 6 + 4 * c * h * w
        self._fh.seek(0, 2)
        if self._fh.tell() < pos:
            self._fh.close()
            raise ValueError(f"{self.path} truncated (payload ends early)")

    def read(self, i: int) -> np.ndarray:
        if not 0 <= i < self.count:
            raise IndexError(f"patch index {i} out of range [0, {self.count})")
        offset, (c, h, w) = self._index[i]
        self._fh.seek(offset)
        buf = self._fh.read(4 * c * h * w)
        return np.frombuffer(buf, dtype="<f4").reshape(c, h, w).copy()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclasses.dataclass
class ManifestEntry:
    locator: str  # "<pack relpath>#<index>"
    label: "str | None"
    subset: str
    split: str


@dataclasses.dataclass
class DatasetManifest:
    """Corpus index: one entry per patch plus per-subset normalization."""

    entries: "list[ManifestEntry]"
    normalization: "dict[str, dict[str, list[float]]]"
    split_seed: int

    def __post_init__(self) -> None:
        for entry in self.entries:
            if entry.split not in SPLIT_NAMES:
                raise ValueError(f"unknown split {entry.split!r}")
            if entry.subset not in self.normalization:
                raise ValueError(f"subset {entry.subset!r} has no normalization record")
        for subset, rec in self.normalization.items():
            std = np.asarray(rec["std"], dtype=np.float64)
            if std.size == 0 or (std < STD_FLOOR - 1e-12).any():
                raise ValueError(f"subset {subset!r} std below floor {STD_FLOOR}")

    def save(self, directory) -> pathlib.Path:
        directory = pathlib.Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        doc = {
            "format": "sonarssl-manifest",
            "version": 1,
            "split_seed": self.split_seed,
            "normalization": self.normalization,
            "entries": [dataclasses.asdict(e) for e in self.entries],
        }
        path = directory / MANIFEST_NAME
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")
        return path

    @classmethod
    def load(cls, directory) -> "DatasetManifest":
        directory = pathlib.Path(directory)
        path = directory if directory.is_file() else directory / MANIFEST_NAME
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("format") != "sonarssl-manifest":
            raise ValueError(f"{path} is not a corpus manifest")
        entries = [ManifestEntry(**e) for e in doc["entries"]]
        return cls(entries=entries, normalization=doc["normalization"],
                   split_seed=doc["split_seed"])


def write_corpus(out_dir, records, split_spec: SplitSpec) -> DatasetManifest:
    """Split records, write one pack per subset, and save the manifest.

    Splits are stratified by (label, subset); normalization statistics are
    computed from each subset's training split only, so no information from
    val/test leaks into preprocessing.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to write")
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = make_splits([(r.label, r.subset) for r in records], split_spec)

    subsets = sorted({r.subset for r in records})
    entries: "list[ManifestEntry | None]" = [None] * len(records)
    normalization = {}
    for subset in subsets:
        idxs = [i for i, r in enumerate(records) if r.subset == subset]
        pack_name = f"patches_{subset}.mjpa"
        write_pack(out_dir / pack_name, [records[i].pixels for i in idxs])
        for pack_pos, i in enumerate(idxs):
            entries[i] = ManifestEntry(
                locator=f"{pack_name}#{pack_pos}", label=records[i].label,
                subset=subset, split=splits[i])
        train_pixels = (records[i].pixels for i in idxs if splits[i] == "train")
        try:
            mean, std = compute_subset_stats(train_pixels)
        except ValueError:
            # tiny corpora can land zero train items in a subset; fall back
            # to the whole subset so the manifest invariant still holds
            mean, std = compute_subset_stats(records[i].pixels for i in idxs)
        normalization[subset] = {"mean": mean.tolist(), "std": std.tolist()}

    manifest = DatasetManifest(entries=list(entries), normalization=normalization,
                               split_seed=split_spec.seed)
    manifest.save(out_dir)
    return manifest


class CorpusView:
    """Lazy pixel access over a manifest directory.

    Resolves locators to pack readers on demand and can hand back raw or
    subset-normalized pixels per entry index.
    """

    def __init__(self, base_dir, manifest: "DatasetManifest | None" = None):
        self.base_dir = pathlib.Path(base_dir)
        self.manifest = manifest or DatasetManifest.load(self.base_dir)
        self._readers: "dict[str, PackReader]" = {}

    def __len__(self) -> int:
        return len(self.manifest.entries)

    def indices(self, split: "str | None" = None, subsets=None,
                labeled_only: bool = False):
        out = []
        for i, e in enumerate(self.manifest.entries):
            if split is not None and e.split != split:
                continue
            if subsets is not None and e.subset not in subsets:
                continue
            if labeled_only and e.label is None:
                continue
            out.append(i)
        return out

    def _reader(self, pack: str) -> PackReader:
        if pack not in self._readers:
            self._readers[pack] = PackReader(self.base_dir / pack)
        return self._readers[pack]

    def raw_pixels(self, i: int) -> np.ndarray:
        entry = self.manifest.entries[i]
        pack, _, idx = entry.locator.partition("#")
        return self._reader(pack).read(int(idx))

    def normalized_pixels(self, i: int) -> np.ndarray:
        entry = self.manifest.entries[i]
        rec = self.manifest.normalization[entry.subset]
        pix = self.raw_pixels(i)
        mean = np.asarray(rec["mean"], dtype=np.float32)[:, None, None]
        std = np.asarray(rec["std"], dtype=np.float32)[:, None, None]
        return (pix - mean) / std

    def close(self) -> None:
        for reader in self._readers.values():
            reader.close()
        self._readers.clear()
