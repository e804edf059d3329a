"""Image preparation and ranking-unit sampling.

A network input is built by resizing two person images to side x side/2,
stitching them left/right into a square, optionally applying one of the 8
flip/swap variants, and cropping.  Unit sampling pairs every probe with its
cross-view true match plus a reference set of mismatches whose size follows
the curriculum schedule.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np


class SamplerError(ValueError):
    """Raised when a dataset cannot satisfy the sampling policy."""


@dataclass(frozen=True)
class PersonImage:
    """One person observation: identity/camera labels plus pixels [3, h, w]
    with values in [0, 1]."""

    identity: str
    camera: str
    index: int
    pixels: np.ndarray

    def __post_init__(self):
        if not self.identity or not self.camera:
            raise ValueError("identity and camera labels must be non-empty")
        p = self.pixels
        if p.ndim != 3 or p.shape[0] != 3:
            raise ValueError(f"pixels must be [3, h, w], got {p.shape}")
        if p.shape[1] < 8 or p.shape[2] < 8:
            raise ValueError(f"person image too small: {p.shape[1]}x{p.shape[2]}")


@dataclass(frozen=True)
class StitchedPair:
    """Square two-person input image plus provenance: which identity is in
    each half and which flip/swap variant produced it.  variant
    (False, False, False) is the canonical order (probe left)."""

    image: np.ndarray
    left_ref: str
    right_ref: str
    variant: tuple[bool, bool, bool] = (False, False, False)

    @property
    def side(self) -> int:
        return self.image.shape[1]


VARIANT_FLAGS = tuple(itertools.product((False, True), repeat=3))


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centers; identity when the size is
    unchanged."""
    img = np.asarray(img)
    c, h, w = img.shape
    if h < 2 or w < 2:
        raise ValueError(f"cannot resize degenerate {h}x{w} image")
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = ys.astype(np.int64)
    x0 = xs.astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ty = (ys - y0).astype(img.dtype)[None, :, None]
    tx = (xs - x0).astype(img.dtype)[None, None, :]
    r0 = img[:, y0[:, None], x0[None, :]] * (1 - tx) + img[:, y0[:, None], x1[None, :]] * tx
    r1 = img[:, y1[:, None], x0[None, :]] * (1 - tx) + img[:, y1[:, None], x1[None, :]] * tx
    return r0 * (1 - ty) + r1 * ty


def resize_half(person: PersonImage, side: int) -> np.ndarray:
    """Resize one person image to the [3, side, side//2] stitch half."""
    _check_side(side)
    return bilinear_resize(person.pixels, side, side // 2)


def _check_side(side: int) -> None:
    if side < 16 or side % 2:
        raise ValueError(f"stitch side must be even and >= 16, got {side}")


def stitch(a: PersonImage, b: PersonImage, side: int) -> StitchedPair:
    """Resize both images to side x side/2 and concatenate left/right."""
    image = np.concatenate([resize_half(a, side), resize_half(b, side)], axis=2)
    return StitchedPair(image=image, left_ref=a.identity, right_ref=b.identity)


def stitch_halves(left: np.ndarray, right: np.ndarray, left_ref: str,
                  right_ref: str) -> StitchedPair:
    """Stitch pre-resized halves (the fast path when halves are cached)."""
    return StitchedPair(image=np.concatenate([left, right], axis=2),
                        left_ref=left_ref, right_ref=right_ref)


def augment_variant(p: StitchedPair, flip_left: bool, flip_right: bool,
                    swap: bool) -> StitchedPair:
    """Mirror each half around its own central vertical axis, then exchange
    the halves.  Variant flags compose as a group action, so the recorded
    variant is always relative to the canonical pair and applying the same
    flip twice is the identity."""
    half = p.side // 2
    left = p.image[:, :, :half]
    right = p.image[:, :, half:]
    if flip_left:
        left = left[:, :, ::-1]
    if flip_right:
        right = right[:, :, ::-1]
    if swap:
        image = np.concatenate([right, left], axis=2)
        left_ref, right_ref = p.right_ref, p.left_ref
    else:
        image = np.concatenate([left, right], axis=2)
        left_ref, right_ref = p.left_ref, p.right_ref

    fl, fr, sw = p.variant
    if sw:
        new_fl, new_fr = fl ^ flip_right, fr ^ flip_left
    else:
        new_fl, new_fr = fl ^ flip_left, fr ^ flip_right
    return StitchedPair(image=np.ascontiguousarray(image), left_ref=left_ref,
                        right_ref=right_ref, variant=(new_fl, new_fr, sw ^ swap))


def random_crop(image: np.ndarray, crop: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random crop to [3, crop, crop]."""
    oy, ox = crop_offsets(image, crop, rng)
    return np.ascontiguousarray(image[:, oy:oy + crop, ox:ox + crop])


def crop_offsets(image: np.ndarray, crop: int, rng: np.random.Generator):
    s_h, s_w = image.shape[1], image.shape[2]
    if crop > s_h or crop > s_w:
        raise ValueError(f"crop {crop} exceeds image {s_h}x{s_w}")
    return int(rng.integers(0, s_h - crop + 1)), int(rng.integers(0, s_w - crop + 1))


def central_crop(image: np.ndarray, crop: int) -> np.ndarray:
    s_h, s_w = image.shape[1], image.shape[2]
    if crop > s_h or crop > s_w:
        raise ValueError(f"crop {crop} exceeds image {s_h}x{s_w}")
    oy, ox = (s_h - crop) // 2, (s_w - crop) // 2
    return np.ascontiguousarray(image[:, oy:oy + crop, ox:ox + crop])


def default_stitch_side(crop: int) -> int:
    """Stitched side for a crop size, keeping the crop/stitch ratio of the
    227-in-256 setup: the smallest even S with S >= 9*crop/8."""
    return 2 * int(np.ceil(9 * crop / 16))


def test_time_inputs(a: PersonImage, b: PersonImage, side: int, crop: int) -> list[np.ndarray]:
    """The 8 flip/swap variants of stitch(a, b), each centrally cropped.
    Order is the lexicographic (flip_left, flip_right, swapped) flag order."""
    canonical = stitch(a, b, side)
    return [central_crop(augment_variant(canonical, *flags).image, crop)
            for flags in VARIANT_FLAGS]


@dataclass(frozen=True)
class RankingUnit:
    """A probe, its cross-view true match, and the sampled mismatch
    references."""

    probe: object
    positive: object
    references: tuple

    def __post_init__(self):
        if self.positive.identity != self.probe.identity:
            raise SamplerError("positive must share the probe identity")
        if any(r.identity == self.probe.identity for r in self.references):
            raise SamplerError("references must not contain the probe identity")
        if len(self.references) < 1:
            raise SamplerError("reference set must be non-empty")


@dataclass(frozen=True)
class SamplerPolicy:
    """Reference sampling policy: cross-view strictness plus the curriculum
    mapping epoch thresholds to reference-set sizes (non-decreasing, sizes in
    {1, 2, 4})."""

    cross_view_relaxed: bool = False
    curriculum: dict = field(default_factory=lambda: {0: 1})
    seed: int = 0

    def __post_init__(self):
        if not self.curriculum:
            raise ValueError("curriculum must have at least one stage")
        items = sorted(self.curriculum.items())
        sizes = [v for _, v in items]
        if any(v not in (1, 2, 4) for v in sizes):
            raise ValueError(f"reference-set sizes must be in {{1, 2, 4}}, got {sizes}")
        if any(a > b for a, b in zip(sizes, sizes[1:])):
            raise ValueError("curriculum sizes must be non-decreasing over epochs")
        if min(self.curriculum) > 0:
            raise ValueError("curriculum must define a size for epoch 0")

    def size_for_epoch(self, epoch: int) -> int:
        return self.curriculum[max(t for t in self.curriculum if t <= epoch)]

    def max_size(self) -> int:
        return max(self.curriculum.values())


def build_units(train_set, epoch: int, policy: SamplerPolicy,
                rng: np.random.Generator | None = None,
                size: int | None = None) -> list[RankingUnit]:
    """Sample one ranking unit per probe image (both cameras serve as probe)
    and shuffle the stream.  Deterministic for a given (train_set, epoch,
    policy.seed)."""
    entries = list(getattr(train_set, "entries", train_set))
    if rng is None:
        rng = np.random.default_rng([policy.seed, epoch])
    if size is None:
        size = policy.size_for_epoch(epoch)

    identities = sorted({e.identity for e in entries})
    if len(identities) < size + 1:
        raise SamplerError(
            f"need at least {size + 1} identities for |references| = {size}, "
            f"got {len(identities)}")

    units = []
    for probe in entries:
        positives = [e for e in entries
                     if e.identity == probe.identity and e.camera != probe.camera]
        if not positives:
            continue
        positive = positives[int(rng.integers(len(positives)))]
        if policy.cross_view_relaxed:
            pool = [e for e in entries if e.identity != probe.identity]
        else:
            pool = [e for e in entries
                    if e.identity != probe.identity and e.camera != probe.camera]
        if len(pool) < size:
            raise SamplerError(
                f"probe {probe.identity}/{probe.camera} has only {len(pool)} "
                f"candidate references, needs {size}")
        picks = rng.choice(len(pool), size=size, replace=False)
        units.append(RankingUnit(probe=probe, positive=positive,
                                 references=tuple(pool[i] for i in picks)))
    order = rng.permutation(len(units))
    return [units[i] for i in order]


def make_minibatches(units, batch_units: int) -> list[list[RankingUnit]]:
    """Consecutive groups of batch_units units; the final short batch is kept."""
    if batch_units < 1:
        raise ValueError(f"batch_units must be >= 1, got {batch_units}")
    units = list(units)
    return [units[i:i + batch_units] for i in range(0, len(units), batch_units)]
