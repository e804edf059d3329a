"""Dataset ingestion, identity-disjoint splitting, and a parametric synthetic
cross-view dataset generator.

On-disk layout: <root>/cam_<label>/<identity:04d>_<index:02d>.png with 8-bit
RGB PNGs.  Synthetic datasets live in memory but export to the same layout.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .pipeline import PersonImage


class DatasetError(ValueError):
    """Raised for malformed dataset trees, filenames or images."""


_FILE_RE = re.compile(r"^(\d+)_(\d+)\.png$")


@dataclass(frozen=True)
class DatasetEntry:
    identity: str
    camera: str
    index: int
    path: Path | None = None
    pixels: np.ndarray | None = None

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.identity, self.camera, self.index)


@dataclass
class DatasetIndex:
    """Complete listing of a dataset; image decoding is deferred to
    load_image."""

    name: str
    entries: list[DatasetEntry]
    cameras: tuple[str, ...]

    def identities(self) -> list[str]:
        return sorted({e.identity for e in self.entries})

    def subset(self, identities) -> "DatasetIndex":
        keep = set(identities)
        return DatasetIndex(self.name, [e for e in self.entries if e.identity in keep],
                            self.cameras)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class SplitSpec:
    """Identity-disjoint train/test partition."""

    train_identities: tuple[str, ...]
    test_identities: tuple[str, ...]
    seed: int

    def __post_init__(self):
        overlap = set(self.train_identities) & set(self.test_identities)
        if overlap:
            raise DatasetError(f"split identities overlap: {sorted(overlap)[:5]}")


def ingest(root) -> DatasetIndex:
    """Index a dataset tree; decoding is deferred until load_image."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    entries = []
    cameras = []
    for cam_dir in sorted(root.glob("cam_*")):
        if not cam_dir.is_dir():
            continue
        camera = cam_dir.name[len("cam_"):]
        if not camera:
            raise DatasetError(f"camera directory {cam_dir} has an empty label")
        cameras.append(camera)
        for f in sorted(cam_dir.iterdir()):
            if not f.is_file():
                continue
            m = _FILE_RE.match(f.name)
            if m is None:
                raise DatasetError(
                    f"malformed image filename {f}: expected <identity>_<index>.png")
            entries.append(DatasetEntry(identity=m.group(1), camera=camera,
                                        index=int(m.group(2)), path=f))
    if not entries:
        raise DatasetError(f"no images found under {root}")
    keys = [e.key for e in entries]
    if len(set(keys)) != len(keys):
        raise DatasetError("duplicate (identity, camera, index) entries")
    return DatasetIndex(name=root.name, entries=entries, cameras=tuple(cameras))


def split(index: DatasetIndex, fraction: float,
          rng: np.random.Generator | int = 0) -> SplitSpec:
    """Shuffle identities by seed and take the first round(fraction * n) as
    the training set."""
    if not 0.0 < fraction < 1.0:
        raise DatasetError(f"split fraction must be in (0, 1), got {fraction}")
    ids = index.identities()
    if len(ids) < 2:
        raise DatasetError(f"need at least 2 identities to split, got {len(ids)}")
    seed = rng if isinstance(rng, (int, np.integer)) else -1
    gen = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    order = gen.permutation(len(ids))
    n_train = int(round(fraction * len(ids)))
    n_train = min(max(n_train, 1), len(ids) - 1)
    shuffled = [ids[i] for i in order]
    return SplitSpec(train_identities=tuple(sorted(shuffled[:n_train])),
                     test_identities=tuple(sorted(shuffled[n_train:])),
                     seed=int(seed))


def load_image(entry: DatasetEntry) -> PersonImage:
    """Decode an entry into a PersonImage with float32 RGB pixels in [0, 1]."""
    if entry.pixels is not None:
        return PersonImage(entry.identity, entry.camera, entry.index,
                           np.asarray(entry.pixels, dtype=np.float32))
    try:
        with Image.open(entry.path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as e:
        raise DatasetError(f"cannot decode image {entry.path}: {e}") from e
    pixels = np.ascontiguousarray(arr.transpose(2, 0, 1)) / 255.0
    return PersonImage(entry.identity, entry.camera, entry.index, pixels)


def export_dataset(index: DatasetIndex, root) -> None:
    """Write an in-memory dataset to the on-disk layout (8-bit RGB PNGs)."""
    root = Path(root)
    for e in index.entries:
        person = load_image(e)
        out_dir = root / f"cam_{e.camera}"
        out_dir.mkdir(parents=True, exist_ok=True)
        arr = np.clip(person.pixels * 255.0 + 0.5, 0, 255).astype(np.uint8)
        Image.fromarray(arr.transpose(1, 2, 0)).save(
            out_dir / f"{e.identity}_{e.index:02d}.png")


@dataclass(frozen=True)
class SynthParams:
    """Synthetic cross-view dataset controls.  View A renders each identity
    plainly; view B additionally applies a per-image brightness/hue shift.
    Jitter and sensor noise apply to every image."""

    n_identities: int = 64
    images_per_view: int = 2
    height: int = 64
    width: int = 32
    brightness_shift: tuple[float, float] = (0.12, 0.30)
    hue_shift: tuple[float, float] = (0.0, 0.25)
    jitter: int = 2
    noise: float = 0.03
    seed: int = 0
    cameras: tuple[str, ...] = ("a", "b")

    def __post_init__(self):
        if self.height < 16 or self.width < 8:
            raise DatasetError(
                f"synthetic extents too small: {self.height}x{self.width} (min 16x8)")
        if self.n_identities < 2 or self.images_per_view < 1:
            raise DatasetError("need >= 2 identities and >= 1 image per view")
        for lo, hi in (self.brightness_shift, self.hue_shift):
            if hi < lo:
                raise DatasetError("shift ranges must satisfy lo <= hi")


def synth_generate(p: SynthParams) -> DatasetIndex:
    """Render layered color-block persons.  The first camera view is the
    plain render of the latent appearance; every other view applies per-image
    spatial jitter, hue/brightness shift and sensor noise, so identity is
    recoverable across views only through appearance, not pixel equality."""
    rng = np.random.default_rng(p.seed)
    entries = []
    for i in range(p.n_identities):
        latent = _draw_latent(rng)
        identity = f"{i:04d}"
        for cam_i, camera in enumerate(p.cameras):
            cross_view = cam_i > 0
            for j in range(p.images_per_view):
                if cross_view:
                    dx = int(rng.integers(-p.jitter, p.jitter + 1)) if p.jitter else 0
                    dy = int(rng.integers(-p.jitter, p.jitter + 1)) if p.jitter else 0
                    img = _render_person(latent, p.height, p.width, dx, dy)
                    img = _hue_mix(img, rng.uniform(*p.hue_shift))
                    img = img + rng.uniform(*p.brightness_shift)
                    if p.noise:
                        img = img + rng.normal(0.0, p.noise, size=img.shape)
                else:
                    img = _render_person(latent, p.height, p.width, 0, 0)
                img = np.clip(img, 0.0, 1.0).astype(np.float32)
                entries.append(DatasetEntry(identity=identity, camera=camera,
                                            index=j, pixels=img))
    return DatasetIndex(name=f"synth_{p.seed}", entries=entries, cameras=p.cameras)


def _draw_latent(rng: np.random.Generator) -> dict:
    # color range leaves headroom so the cross-view brightness shift does not
    # clip block colors against [0, 1] and destroy identity information
    return {
        "torso": rng.uniform(0.18, 0.82, size=3),
        "legs": rng.uniform(0.18, 0.82, size=3),
        "hat": rng.uniform(0.18, 0.82, size=3),
        "skin": np.array([0.8, 0.68, 0.56]) * rng.uniform(0.8, 1.05),
        "bag": rng.uniform(0.18, 0.82, size=3) if rng.random() < 0.5 else None,
        "bag_side": int(rng.integers(2)),
        "build": rng.uniform(0.55, 0.8),  # body width fraction
    }


def _render_person(latent: dict, h: int, w: int, dx: int, dy: int) -> np.ndarray:
    img = np.full((3, h, w), 0.78)
    body_w = max(2, int(latent["build"] * w))
    x0 = (w - body_w) // 2 + dx

    def block(r0, r1, c0, c1, color):
        r0, r1 = max(0, r0 + dy), min(h, r1 + dy)
        c0, c1 = max(0, c0), min(w, c1)
        if r0 < r1 and c0 < c1:
            img[:, r0:r1, c0:c1] = np.asarray(color)[:, None, None]

    head_w = max(2, body_w // 2)
    hx0 = (w - head_w) // 2 + dx
    block(int(0.02 * h), int(0.09 * h), hx0, hx0 + head_w, latent["hat"])
    block(int(0.09 * h), int(0.17 * h), hx0, hx0 + head_w, latent["skin"])
    block(int(0.19 * h), int(0.55 * h), x0, x0 + body_w, latent["torso"])
    leg_w = max(1, body_w // 2 - 1)
    block(int(0.57 * h), int(0.97 * h), x0, x0 + leg_w, latent["legs"])
    block(int(0.57 * h), int(0.97 * h), x0 + body_w - leg_w, x0 + body_w, latent["legs"])
    if latent["bag"] is not None:
        bw = max(1, w // 6)
        bx = x0 - bw if latent["bag_side"] == 0 else x0 + body_w
        block(int(0.28 * h), int(0.5 * h), bx, bx + bw, latent["bag"])
    return img


def _hue_mix(img: np.ndarray, t: float) -> np.ndarray:
    """Rotate colors toward the cyclic channel permutation by fraction t; a
    convex mix, so values stay in [0, 1]."""
    return (1.0 - t) * img + t * img[[1, 2, 0]]
