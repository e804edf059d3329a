"""SGD training orchestration: forward all pairs of each ranking unit with
fresh augmentation, push the per-score ranking gradients back through the
network, and take one momentum step per mini-batch.

Unit computations within a batch may run on worker threads against read-only
parameters; per-unit gradient buffers are merged in unit order before the
step, so results are bit-identical for any worker count.
"""

from __future__ import annotations

import hashlib
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import DatasetIndex, load_image
from .kernels import OptState, sgd_momentum_step
from .network import (Checkpoint, Network, accumulate_grads, backward_pair,
                      checkpoint_from, load_checkpoint, require_matching_config,
                      score_pair)
from .pipeline import (RankingUnit, SamplerPolicy, build_units, default_stitch_side,
                       make_minibatches, resize_half)
from .ranking import UnitScores, unit_grad, unit_loss
from .evaluation import PairScorer


class DivergenceError(RuntimeError):
    """Raised when a batch produces a non-finite loss."""


@dataclass
class TrainConfig:
    epochs: int
    batch_units: int = 16
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    curriculum: dict = field(default_factory=lambda: {0: 1})
    crop: int | None = None          # defaults to the network input side
    stitch_side: int | None = None   # defaults to default_stitch_side(crop)
    seed: int = 0
    snapshot_every: int = 0
    snapshot_dir: str | Path | None = None
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_units < 1 or self.threads < 1:
            raise ValueError("epochs >= 0, batch_units >= 1 and threads >= 1 required")
        for v in (self.learning_rate, self.momentum, self.weight_decay):
            if v < 0:
                raise ValueError(f"rates must be non-negative, got {v}")


@dataclass
class LossLogEntry:
    epoch: int
    train_loss: float
    heldout_loss: float | None
    seconds: float


@dataclass
class LossLog:
    entries: list[LossLogEntry] = field(default_factory=list)

    def train_losses(self) -> list[float]:
        return [e.train_loss for e in self.entries]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write("epoch,train_loss,heldout_loss,seconds\n")
            for e in self.entries:
                held = "" if e.heldout_loss is None else format(e.heldout_loss, ".9g")
                f.write(f"{e.epoch},{format(e.train_loss, '.9g')},{held},"
                        f"{format(e.seconds, '.6g')}\n")


class _PairPrep:
    """Cached resize + augmentation for training inputs."""

    def __init__(self, index: DatasetIndex, stitch_side: int, crop: int, dtype):
        self.stitch_side = stitch_side
        self.crop = crop
        self.persons = {e.key: load_image(e) for e in index.entries}
        self.halves = {}
        self.flipped = {}
        for key, person in self.persons.items():
            h = resize_half(person, stitch_side).astype(dtype)
            self.halves[key] = h
            self.flipped[key] = np.ascontiguousarray(h[:, :, ::-1])
        self.means = np.zeros(3, dtype=dtype)

    def channel_means(self) -> np.ndarray:
        stacked = [p.pixels.reshape(3, -1) for p in self.persons.values()]
        return np.concatenate(stacked, axis=1).mean(axis=1).astype(np.float32)

    def make_input(self, probe_key, cand_key, flags, offsets) -> np.ndarray:
        flip_left, flip_right, swap = flags
        left = self.flipped[probe_key] if flip_left else self.halves[probe_key]
        right = self.flipped[cand_key] if flip_right else self.halves[cand_key]
        image = np.concatenate([right, left] if swap else [left, right], axis=2)
        oy, ox = offsets
        x = image[:, oy:oy + self.crop, ox:ox + self.crop]
        return x - self.means[:, None, None]


def _plan_unit(unit: RankingUnit, rng: np.random.Generator, max_offset: int):
    """Draw fresh augmentation for every pair of the unit: variant flags,
    crop offsets and a dropout stream seed.  Drawn sequentially on the main
    thread so the plan is independent of worker scheduling."""
    plans = []
    for _ in range(1 + len(unit.references)):
        flags = tuple(bool(b) for b in rng.random(3) < 0.5)
        offsets = tuple(int(v) for v in rng.integers(0, max_offset + 1, size=2))
        drop_seed = int(rng.integers(0, 2 ** 62))
        plans.append((flags, offsets, drop_seed))
    return plans


def _run_unit(net: Network, prep: _PairPrep, unit: RankingUnit, plans):
    """Forward + backward every pair of one unit; returns (loss, grad map)."""
    pairs = [(unit.probe, unit.positive)] + [(unit.probe, r) for r in unit.references]
    scores, caches = [], []
    for (probe, cand), (flags, offsets, drop_seed) in zip(pairs, plans):
        x = prep.make_input(probe.key, cand.key, flags, offsets)
        s, cache = score_pair(net, x, mode="train", rng=np.random.default_rng(drop_seed))
        scores.append(s)
        caches.append(cache)
    unit_scores = UnitScores(positive_score=scores[0], negative_scores=tuple(scores[1:]))
    grads_per_score = unit_grad(unit_scores)
    coeffs = (grads_per_score.d_positive,) + grads_per_score.d_negatives
    total: dict[str, np.ndarray] = {}
    for cache, coeff in zip(caches, coeffs):
        accumulate_grads(total, backward_pair(net, cache, coeff))
    return unit_loss(unit_scores), total


def train(net: Network, train_set: DatasetIndex, cfg: TrainConfig,
          policy: SamplerPolicy | None = None, heldout_units=None,
          on_epoch=None, instrument=None) -> tuple[Checkpoint, LossLog]:
    """Train in place and return (final checkpoint, loss log).

    Batch gradients are averaged over the units of the batch.  Non-finite
    batch loss aborts with the offending batch index.  `on_epoch(epoch, net,
    entry)` runs after each epoch and may return truthy to stop early;
    `instrument(info)` receives the merged gradient accumulator right after
    each optimizer step.
    """
    crop = cfg.crop or net.config.input_side
    if crop != net.config.input_side:
        raise ValueError(f"crop {crop} does not match network input side "
                         f"{net.config.input_side}")
    stitch_side = cfg.stitch_side or default_stitch_side(crop)
    if stitch_side < crop:
        raise ValueError(f"stitch side {stitch_side} smaller than crop {crop}")
    if policy is None:
        policy = SamplerPolicy(cross_view_relaxed=False, curriculum=dict(cfg.curriculum),
                               seed=cfg.seed)

    prep = _PairPrep(train_set, stitch_side, crop, net.dtype)
    net.channel_means = prep.channel_means()
    prep.means = net.channel_means.astype(net.dtype)
    opt = OptState.for_params(net.params, cfg.learning_rate, cfg.momentum,
                              cfg.weight_decay)
    max_offset = stitch_side - crop

    log = LossLog()
    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            rng = np.random.default_rng([cfg.seed, 104729, epoch])
            units = build_units(train_set, epoch, policy)
            epoch_loss = 0.0
            for bi, batch in enumerate(make_minibatches(units, cfg.batch_units)):
                plans = [_plan_unit(u, rng, max_offset) for u in batch]
                if pool is not None:
                    results = list(pool.map(
                        lambda uw: _run_unit(net, prep, uw[0], uw[1]),
                        zip(batch, plans)))
                else:
                    results = [_run_unit(net, prep, u, pl)
                               for u, pl in zip(batch, plans)]
                batch_loss = sum(loss for loss, _ in results)
                if not np.isfinite(batch_loss):
                    raise DivergenceError(
                        f"non-finite loss in batch {bi} of epoch {epoch}")
                acc: dict[str, np.ndarray] = {}
                scale = 1.0 / len(batch)
                for _, unit_grads in results:
                    accumulate_grads(acc, unit_grads, scale=scale)
                sgd_momentum_step(net.params, acc, opt)
                if instrument is not None:
                    instrument({"epoch": epoch, "batch": bi, "accumulator": acc,
                                "units": len(batch)})
                epoch_loss += batch_loss
            entry = LossLogEntry(
                epoch=epoch,
                train_loss=epoch_loss / max(len(units), 1),
                heldout_loss=(held_out_loss(net, heldout_units, stitch_side)
                              if heldout_units else None),
                seconds=time.perf_counter() - t0)
            log.entries.append(entry)
            if cfg.snapshot_every and (epoch + 1) % cfg.snapshot_every == 0:
                _snapshot(net, cfg, log, train_set, stitch_side, crop, epoch + 1)
            if on_epoch is not None and on_epoch(epoch, net, entry):
                break
    finally:
        if pool is not None:
            pool.shutdown()

    cp = _final_checkpoint(net, cfg, log, train_set, stitch_side, crop)
    return cp, log


def _metadata(net, cfg, log, train_set, stitch_side, crop) -> dict:
    digest = hashlib.sha256(",".join(
        format(l, ".9g") for l in log.train_losses()).encode()).hexdigest()
    return {"epoch": len(log.entries), "loss_digest": digest, "seed": cfg.seed,
            "stitch_side": stitch_side, "crop": crop,
            "train_identities": train_set.identities()}


def _final_checkpoint(net, cfg, log, train_set, stitch_side, crop) -> Checkpoint:
    return checkpoint_from(net, **_metadata(net, cfg, log, train_set, stitch_side, crop))


def _snapshot(net, cfg, log, train_set, stitch_side, crop, epoch) -> None:
    from .network import save_checkpoint
    out = Path(cfg.snapshot_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(_final_checkpoint(net, cfg, log, train_set, stitch_side, crop),
                    out / f"snap_{epoch}.drnk")


def fine_tune(pretrained, train_set: DatasetIndex, cfg: TrainConfig,
              policy: SamplerPolicy | None = None, expect_config=None,
              **train_kwargs) -> tuple[Checkpoint, LossLog]:
    """Resume from a checkpoint and train every layer on the target set.

    `pretrained` is a Checkpoint, Network or checkpoint path.  When
    expect_config is given, a differing architecture is rejected.
    """
    if isinstance(pretrained, (str, Path)):
        net = load_checkpoint(pretrained)
    elif isinstance(pretrained, Checkpoint):
        net = pretrained.to_network()
    elif isinstance(pretrained, Network):
        net = pretrained.copy()
    else:
        raise TypeError(f"cannot fine-tune from {type(pretrained).__name__}")
    if expect_config is not None:
        require_matching_config(net.config, expect_config)
    return train(net, train_set, cfg, policy=policy, **train_kwargs)


def held_out_loss(net: Network, units, stitch_side: int | None = None) -> float:
    """Mean unit loss under infer-mode scoring: central crop, canonical
    variant, no dropout."""
    units = list(units)
    if not units:
        raise ValueError("held_out_loss needs at least one unit")
    scorer = PairScorer(net, stitch_side)
    persons: dict = {}

    def person_of(entry):
        got = persons.get(entry.key)
        if got is None:
            got = load_image(entry)
            persons[entry.key] = got
        return got

    total = 0.0
    for u in units:
        probe = person_of(u.probe)
        pos = scorer.score(probe, person_of(u.positive))
        negs = tuple(scorer.score(probe, person_of(r)) for r in u.references)
        total += unit_loss(UnitScores(positive_score=pos, negative_scores=negs))
    return total / len(units)
