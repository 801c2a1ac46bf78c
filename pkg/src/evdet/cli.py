"""``evdet`` command line: synth | train | eval | count-ops | hwsim | gradcheck.

Exit codes: 0 success, 1 user error (bad config, missing file, invalid
input), 2 internal invariant violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__

log = logging.getLogger("evdet")

EXIT_OK, EXIT_USER, EXIT_INVARIANT = 0, 1, 2
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class UserError(Exception):
    pass


class InvariantViolation(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _header(cfg) -> dict:
    return {"version": __version__, "config_hash": cfg.hash}


def _write_json(path: Path, doc: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(doc), indent=2, sort_keys=True, allow_nan=False) + "\n")
    print(path)


def _clean(o):
    """Plain JSON values; NaN and infinities become null."""
    import math

    import numpy as np

    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, np.generic):
        o = o.item()
    if isinstance(o, float) and not math.isfinite(o):
        return None
    return o


def _out_dir(args, cfg) -> Path:
    return Path(args.out or cfg.out or "evdet-out")


def _load_cfg(args):
    from .config import load_config

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def _dataset(cfg, split: str):
    from .datasets import load_event_dir, make_toy_dataset

    ds = cfg.dataset
    if ds["kind"] == "toy":
        return make_toy_dataset(cfg.toy_cfg(split))
    root = ds.get("dir")
    if not root:
        raise UserError("dataset.dir: must name a directory of event files for kind \"files\"")
    d = Path(root) / split
    if not d.is_dir():
        raise UserError(f"dataset.dir: no {split!r} subdirectory under {root}")
    return load_event_dir(d, ds.get("frame_ms", 50.0), ds.get("micro_bins", 5), ds.get("seq_len"),
                          cfg.eval.min_diag, cfg.eval.min_side)


def _binning(cfg) -> dict:
    ds = cfg.dataset
    if ds["kind"] == "toy":
        c = cfg.toy_cfg("train")
        return {"frame_ms": c.frame_ms, "micro_bins": c.micro_bins}
    return {"frame_ms": ds.get("frame_ms", 50.0), "micro_bins": ds.get("micro_bins", 5)}


def _network(cfg, spec=None):
    from .network import build_network

    return build_network(spec or cfg.network_spec(), cfg.seed)


def _read_densities(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UserError(f"--densities: no such file {path}") from None
    except json.JSONDecodeError as e:
        raise UserError(f"--densities: not valid JSON ({e.msg})") from None
    # accept a bare map or an eval report
    dens = doc.get("densities", doc) if isinstance(doc, dict) else None
    if not isinstance(dens, dict) or not all(isinstance(v, (int, float)) for v in dens.values()):
        raise UserError("--densities: expected an object mapping activation keys to numbers")
    return {k: float(v) for k, v in dens.items()}


def read_detections(path, n_frames: int):
    """Parse JSONL detections into per-frame lists."""
    from .detect import Detection

    out = [[] for _ in range(n_frames)]
    with open(path) as fh:
        for i, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                f = int(d["frame"])
                det = Detection(tuple(float(v) for v in d["bbox"]), int(d["class"]), float(d["score"]))
            except (KeyError, ValueError, TypeError, json.JSONDecodeError) as e:
                raise UserError(f"{path}:{i}: bad detection record ({e})") from None
            if not 0 <= f < n_frames:
                raise UserError(f"{path}:{i}: frame {f} outside [0, {n_frames})")
            out[f].append(det)
    return out


def write_detections(path, dets, seq_len: int):
    with open(path, "w") as fh:
        for f, frame in enumerate(dets):
            for d in frame:
                rec = d.to_json(f)
                rec["sequence"], rec["step"] = divmod(f, seq_len)
                fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg):
    from dataclasses import asdict

    from .datasets import write_split

    if cfg.dataset["kind"] != "toy":
        raise UserError("synth: dataset.kind must be \"toy\"")
    out = _out_dir(args, cfg) / "data"
    splits = ("train", "val", "test") if args.split == "all" else (args.split,)
    summary = {}
    for sp in splits:
        tc = cfg.toy_cfg(sp)
        files = write_split(tc, out / sp, binary=not args.csv)
        summary[sp] = {"sequences": len(files), "task": {**asdict(tc), "shapes": list(tc.shapes)}}
    _write_json(out / "synth_report.json", {**_header(cfg), "splits": summary, "binning": _binning(cfg)})
    return EXIT_OK


def cmd_train(args, cfg):
    from dataclasses import replace

    from .train import cfg_dict, load_checkpoint, train_two_stage

    out = _out_dir(args, cfg)
    tcfg = replace(cfg.train, ablate_recurrent=args.ablate_recurrent or cfg.train.ablate_recurrent)
    stages = {"1": (1,), "2": (2,), "both": (1, 2)}[args.stage]
    net = _network(cfg)
    if 2 in stages and 1 not in stages and args.from_ not in (None, "best"):
        src = Path(args.from_)
        if not src.exists():
            raise UserError(f"--from: no such checkpoint {src}")
        out.mkdir(parents=True, exist_ok=True)
        load_checkpoint(net, src)
        from .network import save_weights

        save_weights(net, out / "stage1_best.seedw")
    train, val = _dataset(cfg, "train"), _dataset(cfg, "val")
    res = train_two_stage(net, train, val, tcfg, cfg.loss, out, stages, resume=args.resume)
    report = {**_header(cfg), "train": cfg_dict(tcfg), "binning": _binning(cfg), "stages": {}}
    for n, st in ((1, res.stage1), (2, res.stage2)):
        if st is not None and n in stages:
            report["stages"][str(n)] = {"best_val_mAP": st.best_map, "best_epoch": st.best_epoch,
                                        "checkpoint": str(out / f"stage{n}_best.seedw")}
    _write_json(out / "train_report.json", report)
    return EXIT_OK


def cmd_eval(args, cfg):
    from .datasets import all_frame_tensors
    from .detect import coco_map, groupwise_map
    from .hwsim import count_gsop
    from .train import load_checkpoint, mean_flagged_density, predict

    out = _out_dir(args, cfg)
    ds = _dataset(cfg, args.split)
    spec = cfg.network_spec()
    T = ds.frames.shape[1]
    densities, gsop, flagged = {}, None, None
    if args.detections:
        dets = read_detections(args.detections, len(ds) * T)
    else:
        if not args.checkpoint:
            raise UserError("eval: give --checkpoint or --detections")
        if not Path(args.checkpoint).exists():
            raise UserError(f"--checkpoint: no such file {args.checkpoint}")
        net = _network(cfg, spec)
        load_checkpoint(net, args.checkpoint)
        e = cfg.eval
        dets, densities = predict(net, ds, ablate=args.ablate_recurrent, score_thresh=e.score_thresh,
                                  nms_iou=e.nms_iou, top_k=e.top_k)
        gsop = count_gsop(spec, densities)
        flagged = mean_flagged_density(net, densities)
        for k, v in densities.items():
            if not 0.0 <= v <= 1.0:
                raise InvariantViolation(f"density of {k} is {v}, outside [0, 1]")
    gt = ds.flat_gt()
    overall = coco_map(dets, gt)
    gw = groupwise_map(dets, gt, all_frame_tensors(ds), cfg.eval.groups)
    out.mkdir(parents=True, exist_ok=True)
    det_path = out / f"detections_{args.split}.jsonl"
    if not args.detections:
        write_detections(det_path, dets, T)
    report = {
        **_header(cfg), "split": args.split, "binning": _binning(cfg), "checkpoint": args.checkpoint,
        "ablate_recurrent": bool(args.ablate_recurrent), "mAP": overall.to_json(), "groupwise": gw.to_json(),
        "densities": densities, "mean_flagged_density": flagged, "effective_gsop": gsop,
        "detections": None if args.detections else str(det_path),
    }
    _write_json(out / f"eval_{args.split}.json", report)
    return EXIT_OK


def _spec_at(cfg, args):
    from .netspec import NetworkSpec, SpecError, preset

    name = args.network or cfg.network
    try:
        spec = NetworkSpec.load(name) if name.endswith(".json") else preset(name)
    except FileNotFoundError:
        raise UserError(f"--network: no such file {name}") from None
    if getattr(args, "resolution", None):
        try:
            h, w = (int(v) for v in args.resolution.lower().split("x"))
        except ValueError:
            raise UserError(f"--resolution: expected HxW, got {args.resolution!r}") from None
        d = spec.to_dict()
        d["input"] = [spec.input[0], h, w]
        try:
            spec = NetworkSpec.from_dict(d)
        except SpecError as e:
            raise UserError(f"--resolution: {e}") from None
    return spec


def _densities_for(spec, args):
    from .hwsim import required_keys, uniform_densities

    if args.densities is None:
        return uniform_densities(spec)
    dens = _read_densities(args.densities)
    missing = [k for k in required_keys(spec) if k not in dens]
    if missing:
        raise UserError(f"--densities: no value for activation {missing[0]!r}")
    return dens


def cmd_count_ops(args, cfg):
    from .hwsim import count_gsop, footprint, memory_mbit
    from .netspec import param_count

    spec = _spec_at(cfg, args)
    dens = _densities_for(spec, args)
    fps = footprint(spec, args.bits or cfg.hwsim.bits, dens)
    g = count_gsop(spec, dens)
    rows = [{"layer": f.name, "gsop": f.macs / 1e9, "weight_bits": f.weight_bits, "state_bits": f.state_bits,
             "buffer_bits": f.buffer_bits} for f in fps]
    report = {**_header(cfg), "network": spec.name, "input": list(spec.input), "dense": args.densities is None,
              "params_M": param_count(spec) / 1e6, "gsop": g["total"], "memory_Mb": memory_mbit(fps),
              "bits": args.bits or cfg.hwsim.bits, "per_layer": rows}
    out = _out_dir(args, cfg)
    _write_json(out / f"count_ops_{spec.name}.json", report)
    _write_csv(out / f"count_ops_{spec.name}.csv", rows)
    print(f"{spec.name}: params {report['params_M']:.3f} M, {report['gsop']:.3f} GSOp/frame, "
          f"memory {report['memory_Mb']:.1f} Mb")
    return EXIT_OK


def _write_csv(path, rows):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def cmd_hwsim(args, cfg):
    from dataclasses import replace

    from .hwsim import run_hwsim

    spec = _spec_at(cfg, args)
    dens = _densities_for(spec, args)
    hw = cfg.hwsim
    cores = hw.cores
    if args.cores is not None:
        if args.cores == "unlimited":
            cores = None
        else:
            try:
                cores = int(args.cores)
            except ValueError:
                raise UserError(f"--cores: expected an integer or 'unlimited', got {args.cores!r}") from None
            if cores < 1:
                raise UserError("--cores: must be positive")
    proc = replace(hw.processor, core_count=cores or hw.processor.core_count)
    bits = args.bits or hw.bits
    try:
        mapping, rep = run_hwsim(spec, dens, bits, proc, cores, hw.cost_model, hw.frames)
    except AssertionError as e:
        raise InvariantViolation(f"mapping broke the per-core memory bound: {e}") from None
    out = _out_dir(args, cfg)
    doc = {**_header(cfg), "network": spec.name, "bits": bits, "core_budget": cores if cores else "unlimited",
           "densities": "dense" if args.densities is None else str(args.densities), **rep.to_json()}
    _write_json(out / f"hwsim_{spec.name}.json", doc)
    if args.mapping_csv and mapping.feasible:
        mapping.to_csv(args.mapping_csv)
        print(args.mapping_csv)
    if rep.feasible:
        print(f"{spec.name}: {rep.cores} cores, latency {rep.latency_ms:.3f} ms, energy {rep.energy_mJ:.3f} mJ "
              f"(calibrated: {str(rep.calibrated).lower()})")
    else:
        print(f"{spec.name}: infeasible: {rep.reason}")
    return EXIT_OK


def cmd_gradcheck(args, cfg):
    from .gradcheck import COMPONENTS, grad_check

    comps = args.component or list(COMPONENTS)
    bad = [c for c in comps if c not in COMPONENTS]
    if bad:
        raise UserError(f"--component: unknown {bad[0]!r} (known: {', '.join(COMPONENTS)})")
    reports = [grad_check(c, probes=args.probes, seed=cfg.seed) for c in comps]
    for r in reports:
        print(f"{r.component:10s} max rel err {r.worst:.2e} over {r.probes} probes  "
              f"{'ok' if r.passed else 'FAIL'}")
    _write_json(_out_dir(args, cfg) / "gradcheck.json",
                {**_header(cfg), "reports": [r.to_json() for r in reports]})
    if not all(r.passed for r in reports):
        raise InvariantViolation("analytic gradients disagree with finite differences")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="config file or preset name (toy-64, paper-1mpx, paper-gen1)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, help="numeric library threads; 1 gives bit-reproducible runs")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="evdet", parents=[common], description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"evdet {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write synthetic event files and ground truth")
    s.add_argument("--split", choices=("train", "val", "test", "all"), default="all")
    s.add_argument("--csv", action="store_true", help="write CSV events instead of binary")

    s = sub.add_parser("train", parents=[common], help="two-stage training")
    s.add_argument("--stage", choices=("1", "2", "both"), default="both")
    s.add_argument("--from", dest="from_", help="stage-2 start: 'best' (stage-1 best in --out) or a checkpoint")
    s.add_argument("--ablate-recurrent", action="store_true")
    s.add_argument("--resume", action="store_true", help="continue from the last checkpoint in --out")

    s = sub.add_parser("eval", parents=[common], help="mAP, group-wise mAP, densities and effective GSOp")
    s.add_argument("--checkpoint")
    s.add_argument("--detections", help="JSONL detections to score instead of running a checkpoint")
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s.add_argument("--ablate-recurrent", action="store_true")

    for name, hlp in (("count-ops", "parameters, synaptic operations and memory"),
                      ("hwsim", "map onto the multi-core processor and estimate latency and energy")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("--network", help="network preset or spec file (default: the config's)")
        s.add_argument("--bits", type=int)
        g = s.add_mutually_exclusive_group()
        g.add_argument("--dense", action="store_true", help="every activation dense (default)")
        g.add_argument("--densities", help="JSON map of activation densities, or an eval report")
        if name == "count-ops":
            s.add_argument("--resolution", help="input HxW, e.g. 720x1280")
        else:
            s.add_argument("--cores", help="core budget or 'unlimited'")
            s.add_argument("--mapping-csv")

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("--component", action="append")
    s.add_argument("--probes", type=int, default=100)
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "count-ops": cmd_count_ops,
            "hwsim": cmd_hwsim, "gradcheck": cmd_gradcheck}


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise UserError("--threads: must be positive")
    for v in _THREAD_VARS:
        os.environ[v] = str(n)
    if "numpy" in sys.modules:
        log.debug("numpy already loaded; --threads applies to the BLAS pool only when set before import")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for k in ("config", "seed", "threads", "out", "verbose"):
        if not hasattr(args, k):
            setattr(args, k, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    from .config import ConfigError
    from .netspec import SpecError
    from .train import TrainingDiverged

    try:
        _set_threads(args.threads)
        cfg = _load_cfg(args)
        return COMMANDS[args.command](args, cfg)
    except (UserError, ConfigError, SpecError) as e:
        print(f"evdet {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USER
    except FileNotFoundError as e:
        print(f"evdet {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USER
    except TrainingDiverged as e:
        hint = f"; last good weights: {e.last_good}" if e.last_good else ""
        print(f"evdet {args.command}: training diverged: {e}{hint}", file=sys.stderr)
        return EXIT_INVARIANT
    except (InvariantViolation, AssertionError) as e:
        print(f"evdet {args.command}: invariant violated: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except ValueError as e:
        print(f"evdet {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
