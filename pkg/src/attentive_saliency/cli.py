"""Command-line interface.

Exit status: 0 on success, 1 on invalid input (bad flags, malformed files,
degenerate data), 2 on I/O failure.  Diagnostics go to stderr.  Every
subcommand computes its full result before writing any output file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import metrics as M
from . import model as Mo
from . import optim as O
from . import pipeline as P
from .io import ImageGray, pgm_encode, read_pgm, samp_decode

GRADCHECK_TOL = 1e-4


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _read_json(path):
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise OSError(f"cannot read {path}: {e.strerror or e}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid JSON ({e})") from None


def _write(path, data):
    path = Path(path)
    if isinstance(data, str):
        path.write_text(data)
    else:
        path.write_bytes(data)


def _extent(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("extent must be positive")
    return h, w


# -- subcommands --------------------------------------------------------------

def _map_files(directory, kind):
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"{kind} directory not found: {d}")
    files = {p.stem: p for p in sorted(d.iterdir()) if p.suffix in (".pgm", ".samt")}
    return files


def cmd_evaluate(args):
    metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    bad = [m for m in metrics if m not in M.METRIC_NAMES]
    if bad or not metrics:
        raise ValueError(f"unknown metrics {bad}; choose from {','.join(M.METRIC_NAMES)}")
    pred, den, fix = (_map_files(args.pred, "prediction"), _map_files(args.den, "density"),
                      _map_files(args.fix, "fixation"))
    ids = sorted(pred)
    if not ids:
        raise ValueError(f"no .pgm/.samt maps in {args.pred}")
    missing = [f"{kind}/{i}" for i in ids for kind, d in (("den", den), ("fix", fix)) if i not in d]
    if missing:
        raise FileNotFoundError(f"missing groundtruth for {', '.join(missing)}")
    items = []
    for i in ids:
        p, d, f = P.load_map(pred[i]), P.load_map(den[i]), P.load_map(fix[i]) > 0
        if not (p.shape == d.shape == f.shape):
            raise ValueError(f"{i}: extents differ (pred {p.shape}, den {d.shape}, fix {f.shape})")
        items.append((i, p, d, f))
    report = M.evaluate(items, metrics, seed=args.seed, max_cells=args.emd_max_cells,
                        workers=args.workers)
    report.meta["padding_crop"] = "padding cropped before the final resize"
    _write(args.out, report.to_csv())
    if args.json:
        _write(args.json, report.to_json())
    return 0


def cmd_train_toy(args):
    doc = _read_json(args.config) if args.config else {}
    data_opts = doc.pop("data", {})
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = O.TrainConfig.from_dict(doc)
    if args.data:
        root = Path(args.data)
        manifest = P.DatasetManifest.from_json(Path(root / "manifest.json").read_text())
        dataset = manifest.load(root)
        extent = (manifest.height, manifest.width)
    else:
        extent = tuple(data_opts.get("extent", (48, 64)))
        _, samples = P.synth_dataset(int(data_opts.get("seed", cfg.seed)), int(data_opts.get("n", 4)),
                                     extent, n_fix=int(data_opts.get("n_fix", 40)))
        dataset = P.samples_to_training(samples)
    params, history = O.train_loop(cfg, dataset)
    blob = params.to_bytes({"input_extent": list(extent), "train_seed": cfg.seed,
                            "steps": cfg.steps})
    _write(args.out, blob)
    if args.history:
        _write(args.history, O.history_csv(history))
    return 0


def cmd_predict(args):
    try:
        blob = Path(args.params).read_bytes()
    except OSError as e:
        raise OSError(f"cannot read {args.params}: {e.strerror or e}") from None
    params = Mo.ModelParams.from_bytes(blob)
    _, manifest = samp_decode(blob)
    img = read_pgm(args.input)
    size = args.size or tuple(manifest["meta"].get("input_extent", (240, 320)))
    x = P.preprocess(img, *size)
    if params.config.in_channels != 1:
        raise ValueError("predict reads gray PGM input; the model expects "
                         f"{params.config.in_channels} channels")
    smap = Mo.forward_model(params, x)
    out = P.postprocess(smap, img.height, img.width, args.sigma)
    _write(args.out, pgm_encode(ImageGray.from_float(out, 65535 if args.bits == 16 else 255)))
    return 0


def cmd_transform_net(args):
    if args.toy:
        net, _ = bb.build_toy_backbone(args.toy)
    else:
        net = bb.spec_from_json(_read_json(args.spec))
    if args.recipe:
        net = bb.apply_dilated_recipe(net, args.recipe)
    for k in args.layer or ():
        try:
            net = bb.dilate_transform(net, k)
        except IndexError as e:
            raise ValueError(str(e)) from None
    _write(args.out, bb.dumps(net))
    return 0


def cmd_gradcheck(args):
    cfg = Mo.ModelConfig(t_steps=args.t_steps)
    params = Mo.jitter_zero_tensors(Mo.init_params(args.seed, cfg), args.seed)
    rng = np.random.default_rng(args.seed)
    h, w = args.size
    _, samples = P.synth_dataset(args.seed, 1, (h, w))
    img, den, fix = P.samples_to_training(samples)[0]
    # a little pixel noise so no two input cells tie exactly
    img = img + rng.normal(0, 1e-3, img.shape)
    rows = Mo.gradcheck(params, img, den, fix, n_probe=args.n_probe, step=args.step, seed=args.seed)
    lines = [f"{'tensor':<24} {'max_rel_err':>12} {'max_|grad|':>12} {'probed':>6} {'kinks':>5}"]
    for name, r in rows.items():
        lines.append(f"{name:<24} {r.max_rel_err:12.3e} {r.max_abs_grad:12.3e} "
                     f"{r.probed:6d} {r.skipped_kinks:5d}")
    worst = max(r.max_rel_err for r in rows.values())
    lines.append(f"worst relative error {worst:.3e} (tolerance {GRADCHECK_TOL:g})")
    text = "\n".join(lines) + "\n"
    if args.out:
        _write(args.out, text)
    sys.stdout.write(text)
    if worst >= GRADCHECK_TOL:
        print("gradient check FAILED", file=sys.stderr)
        return 1
    return 0


def cmd_synth(args):
    P.synth_dataset(args.seed, args.n, args.size, args.out, n_fix=args.n_fix)
    return 0


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="attentive-saliency",
                 description="Toy attentive saliency model: training, prediction, metrics.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("evaluate", help="score predicted maps against groundtruth")
    p.add_argument("--pred", required=True, help="directory of predicted maps (.pgm/.samt)")
    p.add_argument("--den", required=True, help="directory of density maps")
    p.add_argument("--fix", required=True, help="directory of fixation maps")
    p.add_argument("--metrics", default="nss,cc,kl,auc_judd,sim",
                   help=f"comma list from {','.join(M.METRIC_NAMES)}")
    p.add_argument("--out", required=True, help="CSV report path")
    p.add_argument("--json", help="also write the report as JSON here")
    p.add_argument("--seed", type=int, default=0, help="sAUC negative sampling seed")
    p.add_argument("--emd-max-cells", type=int, default=M.EMD_MAX_CELLS)
    p.add_argument("--workers", type=int, default=4)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("train-toy", help="train the toy model on synthetic or manifest data")
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--seed", type=int)
    p.add_argument("--data", help="dataset directory holding manifest.json (default: synthetic)")
    p.add_argument("--out", required=True, help="parameter file (.samp)")
    p.add_argument("--history", help="loss history CSV path")
    p.set_defaults(fn=cmd_train_toy)

    p = sub.add_parser("predict", help="predict a saliency map for one PGM image")
    p.add_argument("--params", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=_extent, help="model input extent HxW (default: training extent)")
    p.add_argument("--sigma", type=float, default=P.DEFAULT_BLUR_SIGMA)
    p.add_argument("--bits", type=int, choices=(8, 16), default=8)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("transform-net", help="apply the stride-to-dilation transform")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec", help="network spec JSON")
    src.add_argument("--toy", choices=("vgg_like", "residual_like"), help="start from a toy backbone")
    p.add_argument("--layer", type=int, action="append",
                   help="layer index to transform; repeat to chain (indices refer to the current spec)")
    p.add_argument("--recipe", choices=("vgg_like", "residual_like"),
                   help="apply the stock stride-8 recipe before any --layer")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_transform_net)

    p = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-probe", type=int, default=20)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--size", type=_extent, default=(24, 32))
    p.add_argument("--t-steps", type=int, default=4)
    p.add_argument("--out", help="also write the table here")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=_extent, default=(48, 64))
    p.add_argument("--n-fix", type=int, default=40)
    p.set_defaults(fn=cmd_synth)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr, format="%(levelname)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
