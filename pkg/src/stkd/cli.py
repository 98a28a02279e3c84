"""Command-line entry point: ``stkd {train,infer,eval,ablate,synth}``.

Exit codes: 0 ok, 1 usage/config, 2 data, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from stkd.config import load_config
from stkd.errors import DataError, StkdError

log = logging.getLogger("stkd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _indices(spec: str, cfg):
    from stkd.persistence import index_dataset

    roots = [r for r in spec.split(",") if r.strip()]
    if not roots:
        raise DataError("no dataset root given")
    return [index_dataset(r.strip(), cfg.data.layout, cfg.data.resolution) for r in roots]


def cmd_train(args) -> int:
    from stkd.persistence import load_checkpoint
    from stkd.training import train_stage1, train_stage2

    overrides = {"train.seed": str(args.seed)} if args.seed is not None else {}
    cfg = load_config(args.config, overrides)
    indices = _indices(args.data, cfg)
    out = Path(args.out)
    if args.stage == 1:
        init = load_checkpoint(args.resume).store() if args.resume else None
        res = train_stage1(indices, cfg, out, max_iter=args.max_iter, init=init)
    else:
        init_path = Path(args.resume) if args.resume else out / "stage1_final.stkd"
        if not init_path.is_file():
            raise StkdError(f"stage 2 needs --resume CKPT or a stage-1 checkpoint at {init_path}")
        res = train_stage2(load_checkpoint(init_path), indices, cfg, out, max_iter=args.max_iter)
        (out / "stage2_init.json").write_text(json.dumps(res.init_report, indent=2))
    last = res.history[-1]
    print(f"stage {args.stage}: {len(res.history)} iterations, final total loss {last['total']:.6f}")
    print(f"checkpoint: {res.checkpoint}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from stkd.inference import Predictor, infer_dataset

    ckpt = Path(args.ckpt)
    if not ckpt.is_file():
        raise DataError(f"checkpoint not found: {ckpt}")
    cfg = load_config(args.config) if args.config else None
    pred = Predictor(ckpt, cfg)
    (index,) = _indices(args.data, pred.cfg)
    seqs = [s for s in args.sequences.split(",") if s] if args.sequences else None
    report = infer_dataset(pred, index, args.out, seqs)
    t = report["timing"]
    print(f"{t['frames']} maps written to {args.out}; mean {t['mean_s'] * 1000:.2f} ms/frame")
    if report["skipped"]:
        print(f"skipped {len(report['skipped'])} unreadable frames", file=sys.stderr)
    return EXIT_OK


def _collect(root: Path) -> dict[str, Path]:
    from stkd.persistence import IMAGE_SUFFIXES

    if not root.is_dir():
        raise DataError(f"not a directory: {root}")
    return {
        str(p.relative_to(root).with_suffix("")): p
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    }


def cmd_eval(args) -> int:
    from stkd.metrics import evaluate
    from stkd.persistence import load_mask, load_prediction

    preds = _collect(Path(args.pred))
    gts = _collect(Path(args.gt))
    only_pred = sorted(set(preds) - set(gts))
    only_gt = sorted(set(gts) - set(preds))
    if only_pred or only_gt:
        raise DataError(f"unpaired files: predictions without ground truth {only_pred}, ground truth without prediction {only_gt}")
    if not preds:
        raise DataError("no maps to evaluate")
    keys = sorted(preds)
    try:
        res = evaluate([load_prediction(preds[k]) for k in keys], [load_mask(gts[k]) for k in keys])
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    report = res.to_report()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2))
    print(f"frames {res.frame_count}  max F {res.f_max:.4f}  MAE {res.mae:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from stkd.ablation import format_table, parse_scenarios, run_ablation

    cfg = load_config(args.config)
    scenarios = parse_scenarios(args.scenarios)
    train = _indices(args.data, cfg)
    (test,) = _indices(args.test or args.data.split(",")[0], cfg)
    results = run_ablation(cfg, train, test, args.out, scenarios, stage1=args.stage1)
    print(format_table(results), end="")
    return EXIT_OK


def cmd_synth(args) -> int:
    from stkd.synthetic import make_dataset

    root = make_dataset(args.out, args.sequences, args.frames, args.size, args.seed)
    print(f"wrote {args.sequences} sequences of {args.frames} frames to {root}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stkd", description="Video salient object detection with spatiotemporal distillation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run training stage 1 or 2")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--config", help="key-value config file (defaults if omitted)")
    t.add_argument("--data", required=True, help="dataset root(s), comma separated")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to start from")
    t.add_argument("--seed", type=int)
    t.add_argument("--max-iter", type=int, help="stop after N iterations (schedule length N)")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="write saliency maps for a dataset")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--sequences", help="comma separated subset of sequence names")
    i.add_argument("--config", help="check the checkpoint against this config's architecture")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="max F-measure and MAE of saved maps")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True, help="JSON report path")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train/infer/eval each ablation scenario")
    a.add_argument("--config")
    a.add_argument("--data", required=True, help="training root(s)")
    a.add_argument("--test", help="held-out root (default: first --data root)")
    a.add_argument("--out", required=True)
    a.add_argument("--scenarios", default="bs,sd,sd+td,sd+fe_o,sd+td+fe_t,full")
    a.add_argument("--stage1", help="reuse this stage-1 checkpoint")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("synth", help="generate a synthetic moving-square dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--sequences", type=int, default=4)
    s.add_argument("--frames", type=int, default=5)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StkdError as exc:
        print(f"stkd {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, PermissionError) as exc:
        print(f"stkd {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
