"""Command-line front end: synth, train, finetune, eval, openworld, fuse and
scores subcommands, each writing a RunManifest before any long computation.

Configuration is flags-first; an optional line-oriented ``key = value`` file
supplies defaults that explicit flags override.  DRNK_SEED is the seed
fallback when no --seed is given.
"""

from __future__ import annotations

import argparse
import bisect
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import SynthParams, export_dataset, ingest, load_image, split, synth_generate
from .evaluation import (OpenWorldPoint, ScoreMatrix, cmc_from_scores,
                         cmc_trials_from_matrix, fuse_scores, multishot_aggregate,
                         open_world_sweep, read_score_csv, score_matrix,
                         write_cmc_csv, write_openworld_csv, write_score_csv)
from .network import PRESETS, build_network, load_checkpoint, require_matching_config, save_checkpoint
from .pipeline import SamplerPolicy, build_units
from .training import TrainConfig, fine_tune, train


class CliError(ValueError):
    pass


def _parse_curriculum(text: str) -> dict:
    out = {}
    try:
        for part in text.split(","):
            epoch, size = part.split(":")
            out[int(epoch)] = int(size)
    except ValueError as e:
        raise CliError(f"bad curriculum {text!r}, expected e.g. 0:1,10:2,20:4") from e
    return out


def _parse_range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError as e:
        raise CliError(f"bad range {text!r}, expected lo,hi") from e
    return (lo, hi)


def _read_config_file(path) -> dict:
    cfg = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        cfg[key.replace("-", "_")] = value
    return cfg


def _coerce(value, like):
    if isinstance(like, bool):
        return str(value).strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return str(value)


class Run:
    """Tracks resolved options and created artifacts for one command."""

    def __init__(self, command: str, args, defaults: dict):
        self.command = command
        file_cfg = _read_config_file(args.config) if getattr(args, "config", None) else {}
        self.opts = {}
        for key, builtin in defaults.items():
            v = getattr(args, key, None)
            if v is None and key in file_cfg:
                v = _coerce(file_cfg[key], builtin)
            self.opts[key] = builtin if v is None else v
        if "seed" in self.opts and getattr(args, "seed", None) is None \
                and "seed" not in file_cfg and os.environ.get("DRNK_SEED"):
            self.opts["seed"] = int(os.environ["DRNK_SEED"])
        self.created: list[tuple[Path, bool]] = []

    def out_dir(self, key: str = "out") -> Path:
        path = Path(self.opts[key])
        existed = path.exists()
        path.mkdir(parents=True, exist_ok=True)
        if not existed:
            self.created.append((path, True))
        return path

    def track(self, path: Path) -> Path:
        self.created.append((Path(path), False))
        return Path(path)

    def write_manifest(self, out: Path, inputs: dict, outputs: dict) -> None:
        manifest = {
            "tool": "deeprank",
            "version": __version__,
            "command": self.command,
            "seed": self.opts.get("seed"),
            "config": {k: (str(v) if isinstance(v, Path) else v)
                       for k, v in sorted(self.opts.items())},
            "inputs": inputs,
            "outputs": outputs,
        }
        path = self.track(out / "manifest.json")
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    def cleanup(self) -> None:
        for path, is_tree in reversed(self.created):
            try:
                if is_tree and path.is_dir():
                    shutil.rmtree(path)
                elif path.is_file():
                    path.unlink()
            except OSError:
                pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="optional key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deeprank",
                                description="deep ranking re-identification toolkit")
    p.add_argument("--version", action="version", version=f"deeprank {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic cross-view dataset")
    _add_common(s)
    s.add_argument("--ids", type=int)
    s.add_argument("--per-view", dest="per_view", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--width", type=int)
    s.add_argument("--noise", type=float)
    s.add_argument("--jitter", type=int)
    s.add_argument("--brightness")
    s.add_argument("--hue")

    for name in ("train", "finetune"):
        t = sub.add_parser(name, help=f"{name} a scoring network")
        _add_common(t)
        t.add_argument("--dataset", required=True)
        if name == "finetune":
            t.add_argument("--checkpoint", required=True)
        t.add_argument("--preset", choices=sorted(PRESETS))
        t.add_argument("--epochs", type=int)
        t.add_argument("--lr", type=float)
        t.add_argument("--momentum", type=float)
        t.add_argument("--weight-decay", dest="weight_decay", type=float)
        t.add_argument("--batch-units", dest="batch_units", type=int)
        t.add_argument("--curriculum")
        t.add_argument("--crop", type=int)
        t.add_argument("--stitch", type=int)
        t.add_argument("--split", type=float)
        t.add_argument("--split-seed", dest="split_seed", type=int)
        t.add_argument("--relax-cross-view", dest="relax_cross_view",
                       action="store_true", default=None)
        t.add_argument("--threads", type=int)
        t.add_argument("--snapshot-every", dest="snapshot_every", type=int)
        t.add_argument("--heldout-loss", dest="heldout_loss",
                       action="store_true", default=None)

    e = sub.add_parser("eval", help="closed-world CMC evaluation")
    _add_common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--trials", type=int)
    e.add_argument("--tta", action="store_true", default=None)
    e.add_argument("--multishot", choices=("max", "mean"))
    e.add_argument("--shots", type=int)
    e.add_argument("--eval-on", dest="eval_on", choices=("heldout", "train", "all"))
    e.add_argument("--probe-camera", dest="probe_camera")
    e.add_argument("--tie", choices=("pessimistic", "optimistic"))

    o = sub.add_parser("openworld", help="open-world TTR/FTR sweep")
    _add_common(o)
    o.add_argument("--checkpoint", required=True)
    o.add_argument("--dataset", required=True)
    o.add_argument("--targets", type=int)
    o.add_argument("--trials", type=int)
    o.add_argument("--tta", action="store_true", default=None)
    o.add_argument("--eval-on", dest="eval_on", choices=("heldout", "train", "all"))
    o.add_argument("--probe-camera", dest="probe_camera")
    o.add_argument("--target-agg", dest="target_agg", choices=("max", "mean"))

    f = sub.add_parser("fuse", help="sum two score matrices and recompute CMC")
    _add_common(f)
    f.add_argument("--a", required=True, help="first score CSV")
    f.add_argument("--b", required=True, help="second score CSV")
    f.add_argument("--normalize", choices=("none", "minmax", "zscore"))
    f.add_argument("--multishot", choices=("max", "mean"))
    f.add_argument("--tie", choices=("pessimistic", "optimistic"))

    c = sub.add_parser("scores", help="export the probe x gallery score matrix")
    _add_common(c)
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--dataset", required=True)
    c.add_argument("--tta", action="store_true", default=None)
    c.add_argument("--eval-on", dest="eval_on", choices=("heldout", "train", "all"))
    c.add_argument("--probe-camera", dest="probe_camera")

    return p


def _eval_people(run: Run, net):
    """Probe/gallery PersonImage lists under the chosen evaluation split."""
    index = ingest(run.opts["dataset"])
    ids = set(index.identities())
    train_ids = set(net.metadata.get("train_identities", []))
    mode = run.opts["eval_on"]
    if mode == "heldout":
        keep = ids - train_ids if train_ids else ids
    elif mode == "train":
        keep = ids & train_ids
    else:
        keep = ids
    if not keep:
        raise CliError(f"no identities left for --eval-on {mode}")
    sub = index.subset(sorted(keep))
    cameras = sorted({e.camera for e in sub.entries})
    probe_cam = run.opts["probe_camera"] or cameras[0]
    if probe_cam not in cameras:
        raise CliError(f"probe camera {probe_cam!r} not in dataset cameras {cameras}")
    probes = [load_image(e) for e in sub.entries if e.camera == probe_cam]
    gallery = [load_image(e) for e in sub.entries if e.camera != probe_cam]
    if not probes or not gallery:
        raise CliError("need probe images and an opposite-camera gallery")
    return probes, gallery


def _cmd_synth(run: Run) -> None:
    out = run.out_dir()
    params = SynthParams(
        n_identities=run.opts["ids"], images_per_view=run.opts["per_view"],
        height=run.opts["height"], width=run.opts["width"],
        brightness_shift=_parse_range(run.opts["brightness"]),
        hue_shift=_parse_range(run.opts["hue"]),
        jitter=run.opts["jitter"], noise=run.opts["noise"], seed=run.opts["seed"])
    run.write_manifest(out, inputs={}, outputs={"dataset": str(out)})
    index = synth_generate(params)
    for cam in index.cameras:
        run.created.append((out / f"cam_{cam}", True))
    export_dataset(index, out)
    print(f"wrote {len(index.entries)} images for {params.n_identities} identities to {out}")


def _train_common(run: Run, net, pretrained_path=None) -> None:
    out = run.out_dir()
    index = ingest(run.opts["dataset"])
    split_seed = run.opts["split_seed"] if run.opts["split_seed"] is not None \
        else run.opts["seed"]
    heldout_units = None
    if run.opts["split"] is not None:
        spec = split(index, run.opts["split"], split_seed)
        train_index = index.subset(spec.train_identities)
        if run.opts["heldout_loss"]:
            policy_h = SamplerPolicy(
                cross_view_relaxed=run.opts["relax_cross_view"],
                curriculum={0: max(_parse_curriculum(run.opts["curriculum"]).values())},
                seed=split_seed)
            heldout_units = build_units(index.subset(spec.test_identities), 0, policy_h)
    else:
        train_index = index

    cfg = TrainConfig(
        epochs=run.opts["epochs"], batch_units=run.opts["batch_units"],
        learning_rate=run.opts["lr"], momentum=run.opts["momentum"],
        weight_decay=run.opts["weight_decay"],
        curriculum=_parse_curriculum(run.opts["curriculum"]),
        crop=run.opts["crop"], stitch_side=run.opts["stitch"],
        seed=run.opts["seed"], threads=run.opts["threads"],
        snapshot_every=run.opts["snapshot_every"], snapshot_dir=out)
    policy = SamplerPolicy(cross_view_relaxed=run.opts["relax_cross_view"],
                           curriculum=cfg.curriculum, seed=cfg.seed)
    inputs = {"dataset": str(run.opts["dataset"])}
    if pretrained_path:
        inputs["checkpoint"] = str(pretrained_path)
    run.write_manifest(out, inputs=inputs,
                       outputs={"checkpoint": str(out / "checkpoint.drnk"),
                                "loss": str(out / "loss.csv")})

    cp, log = train(net, train_index, cfg, policy=policy, heldout_units=heldout_units)
    save_checkpoint(cp, run.track(out / "checkpoint.drnk"))
    log.to_csv(run.track(out / "loss.csv"))
    final = log.entries[-1].train_loss if log.entries else float("nan")
    print(f"trained {cfg.epochs} epochs on {len(train_index.identities())} identities; "
          f"final mean unit loss {final:.4f}; checkpoint at {out / 'checkpoint.drnk'}")


def _cmd_train(run: Run) -> None:
    config = PRESETS[run.opts["preset"]]()
    net = build_network(config, init="he", rng=run.opts["seed"])
    _train_common(run, net)


def _cmd_finetune(run: Run) -> None:
    net = load_checkpoint(run.opts["checkpoint"])
    if run.opts["preset"]:
        require_matching_config(net.config, PRESETS[run.opts["preset"]]())
    _train_common(run, net, pretrained_path=run.opts["checkpoint"])


def _cmd_eval(run: Run) -> None:
    out = run.out_dir()
    net = load_checkpoint(run.opts["checkpoint"])
    probes, gallery = _eval_people(run, net)
    run.write_manifest(out, inputs={"checkpoint": str(run.opts["checkpoint"]),
                                    "dataset": str(run.opts["dataset"])},
                       outputs={"cmc": str(out / "cmc.csv")})
    full = score_matrix(net, probes, gallery, use_tta=run.opts["tta"])
    curve = cmc_trials_from_matrix(full, run.opts["trials"],
                                   np.random.default_rng(run.opts["seed"]),
                                   shots=run.opts["shots"],
                                   multishot_policy=run.opts["multishot"],
                                   tie_policy=run.opts["tie"])
    if run.opts["trials"] == 1:
        curve.stddev = None
    write_cmc_csv(curve, run.track(out / "cmc.csv"))
    print(f"rank-1 {curve.rates[0]:.4f} over {len(probes)} probes "
          f"({run.opts['trials']} trials); CMC at {out / 'cmc.csv'}")


def _cmd_openworld(run: Run) -> None:
    out = run.out_dir()
    net = load_checkpoint(run.opts["checkpoint"])
    probes, gallery = _eval_people(run, net)
    run.write_manifest(out, inputs={"checkpoint": str(run.opts["checkpoint"]),
                                    "dataset": str(run.opts["dataset"])},
                       outputs={"openworld": str(out / "openworld.csv")})
    full = score_matrix(net, probes, gallery, use_tta=run.opts["tta"])
    gal_ids = sorted(set(full.gallery_identities()))
    p = run.opts["targets"]
    if p < 1 or p >= len(gal_ids):
        raise CliError(f"--targets must be in [1, {len(gal_ids) - 1}], got {p}")
    rng = np.random.default_rng(run.opts["seed"])
    sweeps = []
    for _ in range(run.opts["trials"]):
        targets = [gal_ids[i] for i in rng.choice(len(gal_ids), size=p, replace=False)]
        keep = [j for j, (gid, _, _) in enumerate(full.gallery_labels) if gid in set(targets)]
        trial_m = ScoreMatrix(list(full.probe_labels),
                              [full.gallery_labels[j] for j in keep],
                              full.values[:, keep])
        sweeps.append(open_world_sweep(trial_m, targets,
                                       target_agg=run.opts["target_agg"]))
    points = _average_sweeps(sweeps)
    write_openworld_csv(points, run.track(out / "openworld.csv"))
    print(f"open-world sweep with {p} targets x {run.opts['trials']} trials; "
          f"CSV at {out / 'openworld.csv'}")


def _average_sweeps(sweeps: list[list[OpenWorldPoint]]) -> list[OpenWorldPoint]:
    """Average step-function sweeps on the union threshold grid; exact because
    a sweep's acceptance at any s equals that of its next recorded threshold."""
    if len(sweeps) == 1:
        return sweeps[0]
    grid = sorted({p.threshold for sweep in sweeps for p in sweep})

    def value_at(sweep, s, attr):
        ts = [p.threshold for p in sweep]
        i = bisect.bisect_left(ts, s)
        if i == len(ts):
            return 0.0
        return getattr(sweep[i], attr)
    out = []
    for s in grid:
        out.append(OpenWorldPoint(
            threshold=s,
            ttr=float(np.mean([value_at(sw, s, "ttr") for sw in sweeps])),
            ftr=float(np.mean([value_at(sw, s, "ftr") for sw in sweeps]))))
    return out


def _cmd_scores(run: Run) -> None:
    out = run.out_dir()
    net = load_checkpoint(run.opts["checkpoint"])
    probes, gallery = _eval_people(run, net)
    run.write_manifest(out, inputs={"checkpoint": str(run.opts["checkpoint"]),
                                    "dataset": str(run.opts["dataset"])},
                       outputs={"scores": str(out / "scores.csv")})
    m = score_matrix(net, probes, gallery, use_tta=run.opts["tta"])
    write_score_csv(m, run.track(out / "scores.csv"))
    print(f"{len(probes)}x{len(gallery)} score matrix at {out / 'scores.csv'}")


def _cmd_fuse(run: Run) -> None:
    out = run.out_dir()
    run.write_manifest(out, inputs={"a": str(run.opts["a"]), "b": str(run.opts["b"])},
                       outputs={"cmc": str(out / "cmc.csv")})
    fused = fuse_scores(read_score_csv(run.opts["a"]), read_score_csv(run.opts["b"]),
                        normalization=run.opts["normalize"])
    ids = fused.gallery_identities()
    if len(set(ids)) != len(ids):
        fused = multishot_aggregate(fused, run.opts["multishot"])
    curve = cmc_from_scores(fused, tie_policy=run.opts["tie"])
    write_cmc_csv(curve, run.track(out / "cmc.csv"))
    print(f"fused rank-1 {curve.rates[0]:.4f}; CMC at {out / 'cmc.csv'}")


_DEFAULTS = {
    "synth": {"out": "synth_out", "seed": 0, "ids": 64, "per_view": 2, "height": 64,
              "width": 32, "noise": 0.03, "jitter": 2, "brightness": "0.12,0.3",
              "hue": "0.0,0.25"},
    "train": {"out": "train_out", "dataset": None, "preset": "desk_small", "epochs": 30,
              "lr": 1e-4, "momentum": 0.9, "weight_decay": 5e-4, "batch_units": 16,
              "curriculum": "0:1", "crop": None, "stitch": None, "split": None,
              "split_seed": None, "relax_cross_view": False, "threads": 1,
              "snapshot_every": 0, "heldout_loss": False, "seed": 0},
    "eval": {"out": "eval_out", "checkpoint": None, "dataset": None, "trials": 10,
             "tta": False, "multishot": "max", "shots": 1, "eval_on": "heldout",
             "probe_camera": None, "tie": "pessimistic", "seed": 0},
    "openworld": {"out": "openworld_out", "checkpoint": None, "dataset": None,
                  "targets": 6, "trials": 1, "tta": False, "eval_on": "heldout",
                  "probe_camera": None, "target_agg": "max", "seed": 0},
    "fuse": {"out": "fuse_out", "a": None, "b": None, "normalize": "none",
             "multishot": "max", "tie": "pessimistic", "seed": 0},
    "scores": {"out": "scores_out", "checkpoint": None, "dataset": None, "tta": False,
               "eval_on": "heldout", "probe_camera": None, "seed": 0},
}
_DEFAULTS["finetune"] = dict(_DEFAULTS["train"], checkpoint=None, preset=None,
                             out="finetune_out")

_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "openworld": _cmd_openworld,
    "fuse": _cmd_fuse,
    "scores": _cmd_scores,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    run = Run(args.command, args, dict(_DEFAULTS[args.command]))
    try:
        _COMMANDS[args.command](run)
    except Exception as e:  # noqa: BLE001 - single CLI error boundary
        run.cleanup()
        print(f"deeprank {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
