"""Command line entry point: train, enhance, evaluate, synth-data, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import CvunetError, DataError, NumericalError

log = logging.getLogger("cvunet")


def _cmd_train(args) -> int:
    from .train import TrainConfig, train

    cfg = TrainConfig.from_json(args.config)
    res = train(cfg)
    last = res.history[-1] if res.history else {}
    print(json.dumps({"checkpoint": str(res.checkpoint), "metrics": str(res.metrics),
                      "steps": len(res.history), "skipped_steps": res.skipped_steps,
                      "final": last}, indent=2))
    return 0


def _cmd_enhance(args) -> int:
    from .model import load_checkpoint
    from .train import enhance_file

    model = load_checkpoint(args.checkpoint)
    enhance_file(model, args.inp, args.out)
    print(args.out)
    return 0


def _cmd_evaluate(args) -> int:
    from .datapipe import read_manifest
    from .model import load_checkpoint
    from .train import evaluate, model_enhancer

    model = load_checkpoint(args.checkpoint)
    manifest = read_manifest(args.manifest)
    report = evaluate(model_enhancer(model), manifest, args.split, model.config.variant_name)
    report.write(args.out_dir)
    print(report.table(), end="")
    return 0


def _cmd_synth(args) -> int:
    from .datapipe import synth_corpus

    lo, hi = args.snr
    manifest = synth_corpus(args.seed, args.count, (lo, hi), args.out_dir, args.duration)
    print(manifest.path)
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run

    results = run(args.module, args.seed)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cvunet", description="Complex-valued U-Net speech denoiser.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a model from a JSON config")
    s.add_argument("--config", required=True, type=Path)
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("enhance", help="denoise one WAV file")
    s.add_argument("--checkpoint", required=True, type=Path)
    s.add_argument("--in", dest="inp", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=_cmd_enhance)

    s = sub.add_parser("evaluate", help="score a manifest split before and after enhancement")
    s.add_argument("--checkpoint", required=True, type=Path)
    s.add_argument("--manifest", required=True, type=Path)
    s.add_argument("--split", default="test")
    s.add_argument("--out-dir", required=True, type=Path)
    s.set_defaults(func=_cmd_evaluate)

    s = sub.add_parser("synth-data", help="write a synthetic noisy-speech corpus")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out-dir", required=True, type=Path)
    s.add_argument("--snr", type=float, nargs=2, default=(0.0, 20.0), metavar=("LO", "HI"))
    s.add_argument("--duration", type=float, default=2.0, help="seconds per utterance")
    s.set_defaults(func=_cmd_synth)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--module", choices=("complex_nn", "dsp", "model"))
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; usage errors map to 1 here
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except CvunetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
