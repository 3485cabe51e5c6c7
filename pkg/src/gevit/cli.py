"""``gevit`` command line: check, errormap, train, eval."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import errormap
from .certify import randomize_encoder, run_checks, transform_planar
from .groups import GROUP_SPECS, ExactActionUnavailable, make_group
from .model import GEViT, build
from .posenc import PE_VARIANTS, EncoderNet
from .train import evaluate, fit, load_configs, make_splits

log = logging.getLogger("gevit")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key=value file with model and training settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--group", choices=GROUP_SPECS)
    p.add_argument("--neighborhood", type=int)
    p.add_argument("--pe-variant", choices=PE_VARIANTS, dest="pe_variant")
    p.add_argument("--boundary", choices=("torus", "clamp"))
    p.add_argument("--out", type=Path)


def _configs(args):
    return load_configs(args.config, seed=args.seed, precision=args.precision, group=args.group,
                        neighborhood=args.neighborhood, pe_variant=args.pe_variant,
                        boundary=args.boundary)


def _write(out: Path | None, name: str, text: str) -> None:
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text)


def cmd_check(args) -> int:
    mcfg, tcfg = _configs(args)
    report = run_checks(mcfg, tcfg.seed, args.precision or "f64")
    text = report.to_text()
    sys.stdout.write(text)
    _write(args.out, "check_report.txt", text)
    _write(args.out, "check_report.csv", report.to_csv())
    return 0 if report.ok else 1


def _load_model(args, mcfg, tcfg) -> GEViT:
    model = build(mcfg, tcfg.seed)
    if args.checkpoint:
        model.load(args.checkpoint)
    else:
        # fresh weights: give the zero-initialized encoders a nonzero map
        rng = np.random.default_rng([tcfg.seed, 99])
        for m in model.modules():
            if isinstance(m, EncoderNet):
                randomize_encoder(m, rng)
    return model


def _checkpoint_config(args):
    """Prefer the config saved next to the checkpoint unless one was given."""
    if args.config is None and args.checkpoint:
        saved = Path(args.checkpoint).parent / "config.txt"
        if saved.exists():
            args.config = saved
    return _configs(args)


def cmd_errormap(args) -> int:
    mcfg, tcfg = _checkpoint_config(args)
    model = _load_model(args, mcfg, tcfg)
    s = mcfg.image_size
    if args.image:
        img = errormap.read_pgm(args.image)
    else:
        _, val, _ = make_splits(tcfg)
        img = val.images[args.index]
    if img.shape != (s, s):
        raise SystemExit(f"error: image is {img.shape[0]}x{img.shape[1]}, model expects {s}x{s}")
    try:
        em = errormap.compute(model, img, args.element, args.layer)
    except ExactActionUnavailable as exc:
        raise SystemExit(f"error: {exc}")
    out = args.out or Path("errormap")
    paths = errormap.write_outputs(em, out)
    errormap.write_pgm(out / "input.pgm", img)
    print(f"group={mcfg.group} element={args.element} layer={em.depth} "
          f"pe_variant={mcfg.pe_variant} precision={mcfg.precision}")
    print(f"average_abs_error={em.mean_abs_error:.6e}")
    print(f"wrote {len(paths)} files to {out}")
    return 0


def cmd_train(args) -> int:
    overrides = {k: v for k, v in (("epochs", args.epochs), ("train_count", args.train_count))
                 if v is not None}
    mcfg, tcfg = _configs(args)
    for k, v in overrides.items():
        setattr(tcfg, k, v)
    out = args.out or Path("runs/default")
    summary = fit(mcfg, tcfg, out, log_fn=print)
    print(f"best_val_acc={summary['best_val_acc']:.4f} seconds={summary['seconds']:.1f}")
    return 0


def rotate_split(d: D.Dataset, quarter_turns: int = 1) -> D.Dataset:
    n, s, _ = d.images.shape
    flat = transform_planar(d.images.reshape(n, s * s, 1), make_group("cyclic", 4), quarter_turns % 4, s, s)
    return D.Dataset(flat.reshape(n, s, s), d.labels.copy(), {**d.provenance, "rotated": 90 * quarter_turns})


def cmd_eval(args) -> int:
    mcfg, tcfg = _checkpoint_config(args)
    model = build(mcfg, tcfg.seed)
    if args.checkpoint:
        model.load(args.checkpoint)
    splits = dict(zip(("train", "val", "test"), make_splits(tcfg)))
    d = splits[args.split]
    res = evaluate(model, d, tcfg.eval_batch)
    rot = evaluate(model, rotate_split(d), tcfg.eval_batch)
    lines = [f"split={args.split} samples={len(d)}",
             f"accuracy={res['accuracy']:.4f}",
             f"accuracy_rotated90={rot['accuracy']:.4f}",
             f"rotated_predictions_identical={bool((res['predictions'] == rot['predictions']).all())}",
             "confusion (rows: true, cols: predicted)"]
    k = mcfg.classes
    lines.append("     " + " ".join(f"{j:>4d}" for j in range(k)))
    for i in range(k):
        lines.append(f"{i:>4d} " + " ".join(f"{c:>4d}" for c in res["confusion"][i]))
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    _write(args.out, f"eval_{args.split}.txt", text)
    csv = "true," + ",".join(f"pred_{j}" for j in range(k)) + "\n" + "".join(
        f"{i}," + ",".join(str(c) for c in res["confusion"][i]) + "\n" for i in range(k))
    _write(args.out, f"eval_{args.split}_confusion.csv", csv)
    return 0


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gevit", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="equivariance certification with random weights")
    _common(p)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("errormap", help="feature-map error maps for an exact group element")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--image", type=Path, help="8-bit PGM matching the model's image size")
    p.add_argument("--index", type=int, default=0, help="validation image when --image is absent")
    p.add_argument("--element", type=int, default=1, help="group element index (1 = first rotation)")
    p.add_argument("--layer", type=int, help="0 = lifting output, k = after block k (default: last block)")
    p.set_defaults(func=cmd_errormap)

    p = sub.add_parser("train", help="train on synthetic rotated MNIST")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--train-count", type=int, dest="train_count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy, confusion and rotated-copy accuracy")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
