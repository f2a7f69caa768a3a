"""``streamseg`` command line: gen-data | train | infer | fuse | eval.

Failures print one line ``<error_kind>: <message>`` on stderr and exit 1.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from streamseg.config import RunConfig, load_config
from streamseg.errors import ConfigError, StreamSegError

log = logging.getLogger("streamseg")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"usage: {message}")


def _threads() -> int:
    raw = os.environ.get("STREAMSEG_THREADS")
    if raw is None or raw == "":
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"STREAMSEG_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"STREAMSEG_THREADS must be a positive integer, got {raw!r}")
    return n


def _require(value, flag: str, fallback=None) -> Path:
    value = value if value is not None else fallback
    if value is None:
        raise ConfigError(f"{flag} is required")
    return Path(value)


def cmd_gen_data(args, cfg: RunConfig) -> None:
    from streamseg.datagen import generate_dataset

    d = cfg.data
    seed = args.seed if args.seed is not None else d.seed
    out = _require(args.out, "--out", cfg.paths.data)
    paths = generate_dataset(out, d.sequences, seed, d.height, d.width, d.frames, tuple(d.distractors),
                             d.corrupt_proposals)
    log.info("wrote %d sequences to %s", len(paths), out)


def cmd_train(args, cfg: RunConfig) -> None:
    from streamseg.datagen import list_sequences, load_sequence
    from streamseg.streams import PixelModel
    from streamseg.training import train

    data = _require(args.inp, "--in", cfg.paths.data)
    out = _require(args.out, "--out", cfg.paths.output)
    tc = cfg.train
    if args.seed is not None:
        tc.seed = args.seed
    dataset = [load_sequence(p, with_proposals=False) for p in list_sequences(data)]
    model = PixelModel(cfg.model, seed=tc.seed)
    train(model, dataset, tc, out_dir=out, log_path=out / "loss.csv")
    log.info("checkpoint written to %s", out / "model.ckpt")


def cmd_infer(args, cfg: RunConfig) -> None:
    from streamseg.pipeline import infer_dataset
    from streamseg.training import read_model

    data = _require(args.inp, "--in", cfg.paths.data)
    out = _require(args.out, "--out", cfg.paths.output)
    ckpt = _require(args.checkpoint, "--checkpoint", cfg.paths.checkpoint)
    model = read_model(ckpt)
    infer_dataset(model, data, out, T=cfg.train.T)


def cmd_fuse(args, cfg: RunConfig) -> None:
    from streamseg.pipeline import fuse_dataset

    probs = _require(args.inp, "--in")
    data = _require(args.data, "--data", cfg.paths.data)
    out = _require(args.out, "--out", cfg.paths.output)
    fuse_dataset(probs, data, out, crf=cfg.crf if args.crf else None,
                 gate_iou=cfg.tracker.gate_iou, coast_limit=cfg.tracker.coast_limit)


def cmd_eval(args, cfg: RunConfig) -> None:
    from streamseg.metrics import write_report
    from streamseg.pipeline import evaluate_dataset

    pred = _require(args.inp, "--in")
    gt = _require(args.data, "--data", cfg.paths.data)
    out = _require(args.out, "--out", cfg.paths.output)
    report = evaluate_dataset(pred, gt, workers=_threads())
    write_report(out / "report.json", report)
    print(json.dumps({k: report[k] for k in ("J_mean", "F_mean", "JF_mean")}))


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer, "fuse": cmd_fuse, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="streamseg", description="Two-stream video object segmentation on synthetic video.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON run configuration")
        s.add_argument("--out", help="output directory")
        s.add_argument("--seed", type=int, help="overrides the configured seed")
        if name != "gen-data":
            s.add_argument("--in", dest="inp", help="input directory")
        if name in ("fuse", "eval"):
            s.add_argument("--data", help="dataset root with frames, proposals and ground truth")
        if name == "fuse":
            s.add_argument("--crf", action="store_true", help="refine with the dense CRF")
        if name == "infer":
            s.add_argument("--checkpoint", help="model checkpoint")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = load_config(args.config)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=_threads()):
            COMMANDS[args.command](args, cfg)
    except StreamSegError as exc:
        print(f"{exc.kind}: {_one_line(exc)}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io_error: {_one_line(exc)}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort single-line report
        print(f"internal_error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1
    return 0


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
