"""``seqco`` command line: one subcommand per workflow.

Exit codes: 0 success, 1 usage error, 2 runtime error. Progress goes to
stderr (verbosity from SEQCO_LOG = error | info | debug); artifacts go to the
paths given on the command line.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

log = logging.getLogger("seqco")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _fmt():
    return argparse.ArgumentDefaultsHelpFormatter


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="seqco", description="Sequence-consistency detection pretext at desk scale.",
                formatter_class=_fmt())
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser, metavar="COMMAND")

    s = sub.add_parser("synth", help="write synthetic scenes with ground-truth boxes", formatter_class=_fmt())
    s.add_argument("--count", type=int, default=200, help="number of scenes")
    s.add_argument("--seed", type=int, default=0, help="dataset seed")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--objects", type=int, choices=(1, 2, 3), default=None,
                   help="objects per scene (default: uniform 1-3)")

    s = sub.add_parser("proposals", help="compute and cache region proposals for images", formatter_class=_fmt())
    s.add_argument("inputs", nargs="+", help="PPM images or directories of them")
    s.add_argument("--mode", choices=("selective_search", "random", "ground_truth"), default="selective_search")
    s.add_argument("--top", type=int, default=30, help="proposals kept per image")
    s.add_argument("--seed", type=int, default=0, help="ranking/random-box seed")
    s.add_argument("--out", default=None, help="write all proposals to this JSON file as well")

    s = sub.add_parser("masks", help="write a momentum/online mask pair as PGM images", formatter_class=_fmt())
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--strategy", choices=("none", "online", "independent", "complementary"), default="complementary")
    s.add_argument("--online", type=float, default=0.7, help="online mask proportion")
    s.add_argument("--momentum", type=float, default=0.3, help="momentum mask proportion (independent only)")
    s.add_argument("--patch", type=int, default=16, help="patch side in pixels")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output prefix; writes PREFIX.momentum.pgm and PREFIX.online.pgm")

    s = sub.add_parser("views", help="write the two augmented, masked views of an image", formatter_class=_fmt())
    s.add_argument("--image", required=True, help="input PPM")
    s.add_argument("--config", default=None, help="pretrain config JSON (mask and augment sections are used)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output prefix; writes PREFIX.view1.ppm and PREFIX.view2.ppm")

    s = sub.add_parser("match", help="solve a min-cost assignment", formatter_class=_fmt())
    s.add_argument("--cost", required=True, help='JSON file: a queries x targets matrix, or {"cost": matrix}')
    s.add_argument("--out", default=None, help="write the assignment JSON here (default: stdout)")

    s = sub.add_parser("gradcheck", help="finite-difference check of the full loss on a tiny model",
                       formatter_class=_fmt())
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-4, help="maximum allowed relative error")
    s.add_argument("--step", type=float, default=1e-5, help="central-difference step")

    s = sub.add_parser("pretrain", help="run pre-training from a JSON config", formatter_class=_fmt())
    s.add_argument("--config", default=None, help="config JSON (omitted keys take their defaults)")
    s.add_argument("--resume", default=None, help="checkpoint to resume from")
    s.add_argument("--seed", type=int, default=None, help="override the config seed")
    s.add_argument("--steps", type=int, default=None, help="override the config step count")
    s.add_argument("--print-config", action="store_true", help="print the effective config as JSON and exit")

    s = sub.add_parser("eval", help="matching report for a checkpoint", formatter_class=_fmt())
    s.add_argument("--config", default=None, help="config JSON used for training")
    s.add_argument("--checkpoint", default=None, help="checkpoint (default: fresh parameters)")
    s.add_argument("--data", default=None, help="dataset directory (default: the config's)")
    s.add_argument("--seed", type=int, default=0, help="view seed for the branch comparison")
    s.add_argument("--out", required=True, help="report JSON path")
    return p


def _setup_logging() -> None:
    level = os.environ.get("SEQCO_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"SEQCO_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(LOG_LEVELS[level])
    log.propagate = False


def _write_json(path, payload) -> None:
    text = json.dumps(payload, indent=2)
    if path is None or path == "-":
        sys.stdout.write(text + "\n")
    else:
        Path(path).write_text(text + "\n")


def _image_paths(inputs) -> list[Path]:
    out = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            out += sorted(p.glob("*.ppm"))
        elif p.exists():
            out.append(p)
        else:
            raise FileNotFoundError(f"no such image or directory: {p}")
    if not out:
        raise ValueError("no .ppm images found")
    return out


def _config(path):
    from .pretrain import PretrainConfig, load_config
    return load_config(path) if path else PretrainConfig()


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    from .synth import generate_synthetic
    paths = generate_synthetic(args.count, args.seed, args.out, args.objects)
    log.info("wrote %d scenes to %s", len(paths), args.out)
    return 0


def cmd_proposals(args) -> int:
    from .proposals import cached_proposals, proposal_source
    from .ppm import read_ppm
    from .seeding import derive_seed
    from .synth import read_gt
    everything = {}
    for path in _image_paths(args.inputs):
        pseed = derive_seed(args.seed, path.name)

        def compute(path=path, pseed=pseed):
            return proposal_source(args.mode, read_ppm(path), read_gt(path), k=args.top, seed=pseed)

        boxes = cached_proposals(path, args.mode, compute, top=args.top, seed=pseed)
        everything[path.name] = boxes.tolist()
        log.info("%s: %d proposals", path.name, len(boxes))
    if args.out:
        _write_json(args.out, everything)
    return 0


def cmd_masks(args) -> int:
    from .masking import MaskConfig, make_mask_pair
    from .ppm import write_pgm
    cfg = MaskConfig(args.strategy, args.online, args.momentum, args.patch)
    mom, onl = make_mask_pair(args.height, args.width, cfg, args.seed)
    # black = masked
    write_pgm(f"{args.out}.momentum.pgm", (~mom.pixel_mask()).astype(float))
    write_pgm(f"{args.out}.online.pgm", (~onl.pixel_mask()).astype(float))
    log.info("momentum %d/%d cells masked, online %d/%d", mom.masked_cells, mom.cells,
             onl.masked_cells, onl.cells)
    return 0


def cmd_views(args) -> int:
    from .augment import make_views
    from .ppm import read_ppm, write_ppm
    cfg = _config(args.config)
    img = read_ppm(args.image)
    aug = cfg.augment
    pair = make_views(img, args.seed, cfg.mask, aug)
    mean = np.asarray(aug.mean).reshape(3, 1, 1)
    std = np.asarray(aug.std).reshape(3, 1, 1)
    write_ppm(f"{args.out}.view1.ppm", pair.view1 * std + mean)
    write_ppm(f"{args.out}.view2.ppm", pair.view2 * std + mean)
    log.info("geometry %s", pair.geometry)
    return 0


def cmd_match(args) -> int:
    from .matching import hungarian
    with open(args.cost) as fh:
        data = json.load(fh)
    cost = np.asarray(data["cost"] if isinstance(data, dict) else data, dtype=np.float64)
    a = hungarian(cost)
    _write_json(args.out, {"assignment": [[t, q] for t, q in a.pairs], "queries": list(a.queries),
                           "cost": a.cost(cost)})
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck
    start = time.time()
    report = gradcheck(seed=args.seed, h=args.step)
    ok = report.passed(args.tol)
    print(f"max relative error: {report.max_rel_error:.3e} "
          f"(parameter {report.worst_param}{list(report.worst_index)}, {report.checked} entries, "
          f"{time.time() - start:.1f} s) {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 2


def cmd_pretrain(args) -> int:
    from .pretrain import run_pretrain
    cfg = _config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.steps is not None:
        changes["steps"] = args.steps
    cfg = dataclasses.replace(cfg, **changes)
    if args.print_config:
        print(json.dumps(cfg.to_dict(), indent=2))
        return 0
    start = time.time()
    state = run_pretrain(cfg, resume=args.resume)
    log.info("finished at step %d in %.1f s; metrics %s, checkpoint %s", state.step, time.time() - start,
             cfg.metrics, cfg.checkpoint)
    return 0


def cmd_eval(args) -> int:
    from . import numcore as nc
    from .pretrain import evaluate_matching, init_state, load_dataset, load_state
    cfg = _config(args.config)
    data = args.data or cfg.dataset
    scenes = load_dataset(data, cfg.proposal_mode, cfg.proposal_top, cfg.seed)
    with nc.precision(cfg.precision):
        state = load_state(args.checkpoint, cfg) if args.checkpoint else init_state(cfg)
    report = evaluate_matching(state, scenes, cfg, seed=args.seed)
    _write_json(args.out, report)
    log.info("recall %.3f, mean IoU %.3f over %d scenes", report["recall"] or 0.0, report["mean_iou"] or 0.0,
             report["scenes"])
    return 0


COMMANDS = {"synth": cmd_synth, "proposals": cmd_proposals, "masks": cmd_masks, "views": cmd_views,
            "match": cmd_match, "gradcheck": cmd_gradcheck, "pretrain": cmd_pretrain, "eval": cmd_eval}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _setup_logging()
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:       # --help
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except KeyboardInterrupt:
        log.error("interrupted")
        return 2
    except Exception as exc:  # noqa: BLE001  (every runtime failure maps to exit code 2)
        log.error("%s: %s", type(exc).__name__, exc)
        log.debug("traceback", exc_info=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
