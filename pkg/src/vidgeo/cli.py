"""Operator surface: dataset generation, the three training stages,
trajectory-conditioned inference, held-out evaluation, and the
finite-difference gradient suites.

Exit codes are part of the contract: 0 success, 2 config error (message
carries the offending line), 3 I/O or data-format error, 4 missing
prerequisite checkpoint, 5 NaN abort during training, 6 malformed
trajectory input.  Every command is deterministic given its --seed,
config, and inputs.
"""

import argparse
import sys

import numpy as np

from . import clipio
from . import config as configfile
from . import evalmetrics
from . import gradchecks
from . import scenes
from . import trainer
from .autodiff import ContractError
from .backbone import ConfigError, StateError
from .cameras import GeometryError
from .scenes import SceneError
from .trainer import NanAbort

EXIT_CONFIG, EXIT_IO, EXIT_MISSING, EXIT_NAN, EXIT_TRAJ = 2, 3, 4, 5, 6

TRAJECTORY_GRAMMAR = "kind:magnitude:T=frames (orbit/pan degrees, dolly units)"


class TrajectoryError(ValueError):
    pass


def parse_trajectory(spec):
    """\"kind:magnitude:T=frames\" -> TrajectorySpec; frames must be
    4(t-1)+1 and the kind/magnitude pair must name a valid move."""
    parts = spec.split(":")
    if len(parts) != 3 or not parts[2].startswith("T="):
        raise TrajectoryError("trajectory %r does not match %s"
                              % (spec, TRAJECTORY_GRAMMAR))
    try:
        magnitude = float(parts[1])
        frames = int(parts[2][2:])
    except ValueError:
        raise TrajectoryError("trajectory %r has non-numeric fields" % spec)
    if frames < 1 or (frames - 1) % 4 != 0:
        raise TrajectoryError("trajectory frame count %d is not 4(t-1)+1"
                              % frames)
    try:
        return scenes.TrajectorySpec(parts[0], magnitude, frames)
    except SceneError as e:
        raise TrajectoryError(str(e))


def read_trajectory_file(path):
    """Raw little-endian float32 pose rows (T, 9) — the poses.bin payload."""
    try:
        raw = open(path, "rb").read()
    except OSError as e:
        raise clipio.FormatError("trajectory file: %s" % e)
    if not raw or len(raw) % 36:
        raise TrajectoryError("trajectory file %s is not a whole number of"
                              " 9-float rows" % path)
    rows = np.frombuffer(raw, dtype="<f4").reshape(-1, 9).astype(np.float64)
    if (len(rows) - 1) % 4 != 0:
        raise TrajectoryError("trajectory file has %d poses, not 4(t-1)+1"
                              % len(rows))
    return rows


def _load_config(path):
    if path is None:
        return configfile.defaults()
    return configfile.load_config(path)


def _cmd_gen_data(args):
    conf = _load_config(args.config)
    d = conf["data"]
    clipio.generate_dataset(args.out, args.clips, args.seed,
                            d["frames"], d["height"], d["width"])
    print("wrote %d clips to %s" % (args.clips, args.out))
    return 0


def _cmd_train(args):
    conf = _load_config(args.config)
    clips = clipio.load_dataset(args.data)
    kw = dict(resume=args.resume, emit=print)
    if args.cmd == "pretrain":
        trainer.pretrain_backbone(clips, conf, args.out, seed=args.seed,
                                  **kw)
    elif args.cmd == "train-stage1":
        trainer.train_stage1(clips, conf, args.out, init=args.init,
                             seed=args.seed, **kw)
    else:
        trainer.train_stage2(clips, conf, args.out, init=args.init,
                             seed=args.seed, **kw)
    print("checkpoint written to %s" % args.out)
    return 0


def _cmd_infer(args):
    ck = trainer.load_checkpoint(args.ckpt)
    frames = clipio.read_frames(args.ref_frame)
    ref = frames[0].astype(np.float64)
    if (args.trajectory is None) == (args.trajectory_file is None):
        raise TrajectoryError("pass exactly one of --trajectory /"
                              " --trajectory-file")
    if args.trajectory is not None:
        poses = scenes.make_trajectory(parse_trajectory(args.trajectory))
    else:
        poses = read_trajectory_file(args.trajectory_file)
    out = trainer.infer(ck["bag"], ck["cfg"], ck["dcfg"], ref, args.text,
                        poses, seed=args.seed)
    clipio.write_outputs(out, args.out, text=args.text)
    print("wrote %d frames + geometry to %s"
          % (out["frames"].shape[0], args.out))
    return 0


def _cmd_eval(args):
    clips = clipio.load_dataset(args.data)
    names = clipio.read_index(args.data)
    report = evalmetrics.run_eval(args.ckpt, clips, csv_path=args.report,
                                  names=names, seed=args.seed)
    agg = report.aggregate
    print("evaluated %d clips -> %s" % (len(report.rows), args.report))
    print("aggregate: " + " ".join(
        "%s=%.6g" % (m, agg[m]) for m in evalmetrics.METRICS
        if agg[m] is not None))
    return 0


def _cmd_gradcheck(args):
    rows = gradchecks.run_suite(args.module)
    failed = 0
    for mod, name, err in rows:
        ok = err < gradchecks.TOL
        failed += not ok
        print("%s.%s worst_rel_err=%.3g %s"
              % (mod, name, err, "PASS" if ok else "FAIL"))
    print("%d/%d checks passed (tol %g)"
          % (len(rows) - failed, len(rows), gradchecks.TOL))
    return 1 if failed else 0


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(
        prog="vidgeo", formatter_class=fmt,
        description="video diffusion with a coupled geometry branch on"
                    " synthetic scenes")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", formatter_class=fmt,
                       help="render a synthetic clip dataset")
    g.add_argument("--config", default=None,
                   help="config file (built-in defaults when omitted)")
    g.add_argument("--out", required=True, help="dataset directory")
    g.add_argument("--clips", type=int, default=1, help="number of clips")
    g.add_argument("--seed", type=int, default=0, help="dataset seed")

    specs = (("pretrain", "stage 0: train the denoising trunk", False),
             ("train-stage1", "stage 1: fit the geometry branch", True),
             ("train-stage2", "stage 2: open the gated coupling", True))
    for name, blurb, needs_init in specs:
        t = sub.add_parser(name, formatter_class=fmt, help=blurb)
        t.add_argument("--config", default=None,
                       help="config file (built-in defaults when omitted)")
        t.add_argument("--data", required=True, help="dataset directory")
        t.add_argument("--out", required=True, help="output checkpoint")
        t.add_argument("--resume", default=None,
                       help="checkpoint to continue from")
        t.add_argument("--seed", type=int, default=0, help="training seed")
        if needs_init:
            t.add_argument("--init", default=None,
                           help="previous-stage checkpoint to start from")

    i = sub.add_parser("infer", formatter_class=fmt,
                       help="sample a clip from a reference frame")
    i.add_argument("--ckpt", required=True, help="trained checkpoint")
    i.add_argument("--ref-frame", required=True,
                   help="reference-frame payload directory")
    i.add_argument("--text", default="", help="text tag (optional)")
    i.add_argument("--trajectory", default=None, help=TRAJECTORY_GRAMMAR)
    i.add_argument("--trajectory-file", default=None,
                   help="pose rows file (poses.bin payload format)")
    i.add_argument("--out", required=True, help="output clip directory")
    i.add_argument("--seed", type=int, default=0, help="sampler seed")

    e = sub.add_parser("eval", formatter_class=fmt,
                       help="score a checkpoint on a held-out dataset")
    e.add_argument("--ckpt", required=True, help="trained checkpoint")
    e.add_argument("--data", required=True, help="held-out dataset")
    e.add_argument("--report", required=True, help="CSV report path")
    e.add_argument("--seed", type=int, default=0, help="evaluation seed")

    c = sub.add_parser("gradcheck", formatter_class=fmt,
                       help="finite-difference gradient suites")
    c.add_argument("--module", default=None,
                   help="restrict to one suite (default: all)")
    return p


COMMANDS = {"gen-data": _cmd_gen_data, "pretrain": _cmd_train,
            "train-stage1": _cmd_train, "train-stage2": _cmd_train,
            "infer": _cmd_infer, "eval": _cmd_eval,
            "gradcheck": _cmd_gradcheck}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.cmd](args)
    except TrajectoryError as e:
        print("error: %s" % e, file=sys.stderr)
        return EXIT_TRAJ
    except NanAbort as e:
        print("error: %s" % e, file=sys.stderr)
        return EXIT_NAN
    except StateError as e:
        print("error: %s" % e, file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as e:
        print("error: %s" % e, file=sys.stderr)
        return EXIT_CONFIG
    except (clipio.FormatError, SceneError, GeometryError, ContractError,
            OSError) as e:
        print("error: %s" % e, file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
