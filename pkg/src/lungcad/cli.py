"""Command-line entry point: ``lungcad <subcommand> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 unknown subcommand or usage
error, 3 invalid flag value.  Failures print one JSON line on stderr.
Every run that gets past argument parsing writes a JSON run log.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("lungcad")

RUNLOG_SCHEMA = 1
SUBCOMMANDS = ("synth", "tile", "extract-features", "train-svm", "train-cnn", "predict", "eval", "heatmap", "grad-check")


class UsageError(Exception):
    def __init__(self, message, code=2, flag=None):
        super().__init__(message)
        self.code, self.flag = code, flag


class ValidationError(UsageError):
    def __init__(self, flag, message):
        super().__init__(f"{flag}: {message}", 3, flag)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        flag = None
        if message.startswith("argument "):
            flag = message[len("argument "):].split(":", 1)[0].split("/")[0]
        if "invalid choice" in message and flag in (None, "command"):
            raise UsageError(message, 2, None)
        if "invalid" in message and "value" in message:
            raise UsageError(message, 3, flag)
        raise UsageError(message, 2, flag)


# ---------------------------------------------------------------------------
# flag parsing helpers


def _size(text):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid size value: {text!r} (expected WxH)") from None
    return w, h


def _pair(text):
    try:
        dx, dy = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid offset value: {text!r} (expected dx,dy)") from None
    return dx, dy


def _floats(text):
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid list value: {text!r}") from None


def _require(cond, flag, message):
    if not cond:
        raise ValidationError(flag, message)


_NO_HELP = "\x00"  # placeholder so argparse formats flags declared without help text


class _HelpFormatter(argparse.HelpFormatter):
    """Show the default of every optional flag, including flags without help text."""

    def _get_help_string(self, action):
        text = "" if action.help in (None, _NO_HELP) else action.help
        default = action.default
        if default in (None, argparse.SUPPRESS) or not action.option_strings or "(default" in text:
            if not text:
                return "(required)" if action.required else "(no default)"
            return text
        if isinstance(default, tuple):
            default = ",".join(f"{v:g}" if isinstance(v, float) else str(v) for v in default)
        elif isinstance(default, float):
            default = f"{default:g}"
        return f"{text} (default: {default})".strip()


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global")
    g.add_argument("--workdir", default=".", help="base directory for relative paths")
    g.add_argument("--threads", type=int, default=1, help="maximum worker threads")
    g.add_argument("--log", default=None, help="run-log path (default: <workdir>/logs/<command>.runlog.json)")
    g.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    p = _Parser(prog="lungcad", description="Patch-based lung carcinoma detection pipeline.", formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"lungcad {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, help):
        return sub.add_parser(name, help=help, parents=[common], formatter_class=fmt, description=help)

    s = add("synth", "generate a deterministic synthetic slide dataset")
    s.add_argument("--slides", type=int, default=20)
    s.add_argument("--size", type=_size, default=(1024, 1024), help="WxH in pixels")
    s.add_argument("--regions", type=int, default=2, help="cancer rectangles per slide")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--patch-size", type=int, default=256, help="smallest slide side allowed")
    s.add_argument("--out", required=True)

    s = add("tile", "plan and label patches for every slide")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="output directory (inventory.csv)")
    s.add_argument("--patch-size", type=int, default=256)
    s.add_argument("--stride", type=int, default=196)
    s.add_argument("--label-threshold", type=float, default=0.5)
    s.add_argument("--test-fraction", type=float, default=7 / 33, help="used when the manifest has no split tags")
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--materialize", action="store_true", help="also write PNG crops")

    s = add("extract-features", "GLCM texture features for inventory patches")
    s.add_argument("--inventory", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--gray-levels", type=int, default=8)
    s.add_argument("--offset", type=_pair, default=(1, 0), help="dx,dy")
    s.add_argument("--symmetric", action=argparse.BooleanOptionalAction, default=True)
    s.add_argument("--aggregate", choices=("all", "mean_variance"), default="all")
    s.add_argument("--split", choices=("train", "test", "all"), default="all")

    s = add("train-svm", "train the SVM on a feature CSV")
    s.add_argument("--features", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--C", type=float, default=1.0)
    s.add_argument("--kernel", choices=("linear", "rbf"), default="rbf")
    s.add_argument("--gamma", default="auto", help="'auto' = 1/feature dim")
    s.add_argument("--tol", type=float, default=1e-3)
    s.add_argument("--max-passes", type=int, default=10)
    s.add_argument("--seed", type=int, default=1)

    s = add("train-cnn", "train the CNN from scratch or fine-tune a saved model")
    s.add_argument("--inventory", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--arch", default=None, help="architecture JSON (default: built-in PilotNet)")
    init = s.add_mutually_exclusive_group()
    init.add_argument("--init", choices=("scratch",), default="scratch")
    init.add_argument("--init-from", default=None, help="model file to fine-tune from")
    s.add_argument("--lr", type=float, default=1e-5)
    s.add_argument("--wd", type=float, default=1e-4)
    s.add_argument("--decoupled-decay", action="store_true")
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--batch", type=int, default=64)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--split", choices=("train", "test", "all"), default="train")
    s.add_argument("--out", required=True)

    s = add("predict", "score patches with an SVM or CNN model")
    s.add_argument("--model", required=True)
    s.add_argument("--features", default=None, help="feature CSV (SVM models)")
    s.add_argument("--inventory", default=None, help="inventory CSV (CNN models)")
    s.add_argument("--manifest", default=None, help="manifest (CNN models)")
    s.add_argument("--split", choices=("train", "test", "all"), default="test", help="CNN inventory split")
    s.add_argument("--name", default=None, help="model name in the scores CSV")
    s.add_argument("--out", required=True)

    s = add("eval", "ROC/AUC and TPR at fixed FPR per model")
    s.add_argument("--scores", required=True, nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--fpr-targets", type=_floats, default=(0.05, 0.1, 0.5))

    s = add("heatmap", "render a slide's probability heatmap overlay")
    s.add_argument("--scores", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--slide-id", required=True)
    s.add_argument("--model", default=None, help="model name to use when the CSV holds several")
    s.add_argument("--patch-size", type=int, default=256)
    s.add_argument("--stride", type=int, default=196)
    s.add_argument("--alpha", type=float, default=0.4)
    s.add_argument("--rule", choices=("mean", "max", "nearest"), default="mean")
    s.add_argument("--transform", choices=("auto", "none", "sigmoid"), default="auto")
    s.add_argument("--field", default=None, help="also write the raw float32 pixel field here")
    s.add_argument("--out", required=True)

    s = add("grad-check", "finite-difference gradient check on tiny networks")
    s.add_argument("--arch", default=None, help="architecture JSON (default: built-in per-layer suite)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epsilon", type=float, default=1e-5)
    s.add_argument("--max-error", type=float, default=1e-4)
    s.add_argument("--out", default=None)

    # argparse only formats help for actions with help text
    for parser in sub.choices.values():
        for action in parser._actions:
            if action.help is None and action.option_strings:
                action.help = _NO_HELP
    return p


# ---------------------------------------------------------------------------
# commands; each returns a list of output paths


def _path(args, value):
    p = Path(value)
    return p if p.is_absolute() else Path(args.workdir) / p


def cmd_synth(args):
    from .dataio import SynthConfig, generate_synthetic_dataset

    _require(args.slides >= 1, "--slides", "must be >= 1")
    _require(args.regions >= 1, "--regions", "must be >= 1")
    _require(0 <= args.seed < 2**64, "--seed", "must be a 64-bit unsigned integer")
    w, h = args.size
    _require(w >= args.patch_size and h >= args.patch_size, "--size", f"sides must be >= patch size {args.patch_size}")
    cfg = SynthConfig(args.slides, w, h, args.regions, args.seed, args.patch_size)
    out = _path(args, args.out)
    m = generate_synthetic_dataset(cfg, out, threads=args.threads)
    return [out / "manifest.json", *[e.image_path for e in m.slides], *[e.annotation_path for e in m.slides]]


def cmd_tile(args):
    from .dataio import load_manifest, manifest_split
    from .tiling import TilingConfig, materialize_patches, tile_dataset, write_inventory

    _require(args.patch_size >= 1, "--patch-size", "must be >= 1")
    _require(1 <= args.stride <= args.patch_size, "--stride", "must satisfy 1 <= stride <= patch size")
    _require(0 < args.label_threshold <= 1, "--label-threshold", "must be in (0, 1]")
    _require(0 < args.test_fraction < 1, "--test-fraction", "must be in (0, 1)")
    cfg = TilingConfig(args.patch_size, args.stride, args.label_threshold)
    manifest = load_manifest(_path(args, args.manifest))
    split = manifest_split(manifest, args.test_fraction, args.seed)
    inventory = tile_dataset(manifest, cfg, split, threads=args.threads)
    out = _path(args, args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_inventory(inventory, out / "inventory.csv")
    outputs = [out / "inventory.csv"]
    if args.materialize:
        materialize_patches(inventory, manifest, out / "patches")
        outputs += sorted((out / "patches").glob("*.png"))
    return outputs


def cmd_extract_features(args):
    from .dataio import load_manifest
    from .pipeline import inventory_features
    from .texture import TextureConfig, write_features
    from .tiling import read_inventory

    _require(args.gray_levels >= 2, "--gray-levels", "must be >= 2")
    _require(abs(args.offset[0]) < 7 and abs(args.offset[1]) < 7 and args.offset != (0, 0), "--offset",
             "must be non-zero and fit inside a 7x7 segment")
    cfg = TextureConfig(args.gray_levels, args.offset, args.symmetric, aggregate=args.aggregate)
    rows = inventory_features(read_inventory(_path(args, args.inventory)), load_manifest(_path(args, args.manifest)),
                              cfg, args.split, args.threads)
    if not rows:
        raise RuntimeError(f"no patches in split {args.split!r}")
    out = _path(args, args.out)
    write_features(rows, out)
    return [out]


def cmd_train_svm(args):
    from .svm import KernelSpec, train_svm
    from .texture import read_features

    _require(args.C > 0, "--C", "must be > 0")
    _require(args.tol > 0, "--tol", "must be > 0")
    _require(args.max_passes >= 1, "--max-passes", "must be >= 1")
    gamma = None
    if args.gamma != "auto":
        try:
            gamma = float(args.gamma)
        except ValueError:
            raise ValidationError("--gamma", "must be 'auto' or a positive number") from None
        _require(gamma > 0, "--gamma", "must be > 0")
    _, labels, X = read_features(_path(args, args.features))
    model = train_svm(X, labels, args.C, KernelSpec(args.kernel, gamma), args.tol, args.max_passes, args.seed)
    out = _path(args, args.out)
    model.save(out)
    return [out]


def _arch(args):
    from .nn import PILOTNET, Arch

    return Arch.load(_path(args, args.arch)) if args.arch else Arch.from_json(PILOTNET)


def cmd_train_cnn(args):
    from .dataio import load_manifest
    from .nn import Network, TrainConfig, load_patch_tensors, save_model, train_cnn
    from .tiling import read_inventory

    _require(args.lr > 0, "--lr", "must be > 0")
    _require(args.wd >= 0, "--wd", "must be >= 0")
    _require(args.epochs >= 0, "--epochs", "must be >= 0")
    _require(args.batch >= 1, "--batch", "must be >= 1")
    arch = _arch(args)
    Network(arch)  # shape-check before loading any data
    X, y, _, _ = load_patch_tensors(read_inventory(_path(args, args.inventory)),
                                    load_manifest(_path(args, args.manifest)), arch.input_shape[1], args.split)
    init = _path(args, args.init_from) if args.init_from else None
    cfg = TrainConfig(args.lr, args.wd, args.epochs, args.batch, args.seed, args.decoupled_decay)
    model, trace = train_cnn(X, y, arch, cfg, init=init)
    out = _path(args, args.out)
    save_model(model, out)
    return [out]


def cmd_predict(args):
    from .evaluation import write_scores
    from .pipeline import slide_id_of

    mpath = _path(args, args.model)
    kind = json.loads(mpath.read_text()).get("kind")
    out = _path(args, args.out)
    if kind == "svm":
        from .svm import SvmModel
        from .texture import read_features

        _require(args.features is not None, "--features", "required for SVM models")
        model = SvmModel.load(mpath)
        ids, labels, X = read_features(_path(args, args.features))
        scores = model.decision(X) if len(X) else np.zeros(0)
        write_scores(out, ids, [slide_id_of(i) for i in ids], labels, scores, args.name or "GLCM+SVM")
    elif kind == "cnn":
        from .dataio import load_manifest
        from .nn import load_model, load_patch_tensors, predict_cnn
        from .tiling import read_inventory

        _require(args.inventory is not None, "--inventory", "required for CNN models")
        _require(args.manifest is not None, "--manifest", "required for CNN models")
        model = load_model(mpath)
        X, y, ids, sids = load_patch_tensors(read_inventory(_path(args, args.inventory)),
                                             load_manifest(_path(args, args.manifest)),
                                             model.arch.input_shape[1], args.split)
        write_scores(out, ids, sids, y, predict_cnn(model, X), args.name or "CNN")
    else:
        raise ValidationError("--model", f"unknown model kind {kind!r}")
    return [out]


def cmd_eval(args):
    from .evaluation import read_scores, report, write_report

    _require(all(0 <= t <= 1 for t in args.fpr_targets), "--fpr-targets", "targets must lie in [0, 1]")
    sets = read_scores(*[_path(args, s) for s in args.scores])
    rep = report(sets, args.fpr_targets)
    paths = write_report(rep, _path(args, args.out))
    print(rep.table())
    return list(paths.values())


def cmd_heatmap(args):
    from .dataio import load_manifest
    from .evaluation import read_scores
    from .heatmap import save_field, save_png
    from .pipeline import slide_heatmap
    from .tiling import TilingConfig

    _require(args.patch_size >= 1, "--patch-size", "must be >= 1")
    _require(1 <= args.stride <= args.patch_size, "--stride", "must satisfy 1 <= stride <= patch size")
    _require(0 <= args.alpha <= 1, "--alpha", "must be in [0, 1]")
    sets = read_scores(_path(args, args.scores))
    if args.model is not None:
        sets = [s for s in sets if s.model_name == args.model]
        _require(bool(sets), "--model", f"no scores for model {args.model!r}")
    _require(len(sets) == 1, "--model", "scores CSV holds several models; pick one")
    img, _, field, used = slide_heatmap(sets[0], load_manifest(_path(args, args.manifest)), args.slide_id,
                                        TilingConfig(args.patch_size, args.stride), args.alpha, args.rule, args.transform)
    log.info("score transform: %s", used)
    out = _path(args, args.out)
    save_png(img, out)
    outputs = [out]
    if args.field:
        fp = _path(args, args.field)
        outputs += [fp, save_field(field, fp)]
    return outputs


def cmd_grad_check(args):
    from .nn import grad_check, tiny_archs

    _require(args.epsilon > 0, "--epsilon", "must be > 0")
    archs = {"arch": _arch(args)} if args.arch else tiny_archs()
    results = {}
    worst = 0.0
    for name, arch in archs.items():
        r = grad_check(arch, args.seed, args.epsilon)
        results[name] = {"max": r["max"], "input": r["input"], "by_kind": r["by_kind"], "skipped": r["skipped"]}
        worst = max(worst, r["max"])
        print(f"{name}\tmax_rel_error={r['max']:.3e}\t{'ok' if r['max'] < args.max_error else 'FAIL'}")
    outputs = []
    if args.out:
        out = _path(args, args.out)
        out.write_text(json.dumps(results, indent=2) + "\n")
        outputs.append(out)
    if worst >= args.max_error:
        raise RuntimeError(f"gradient check failed: max relative error {worst:.3e} >= {args.max_error}")
    return outputs


COMMANDS = {
    "synth": cmd_synth,
    "tile": cmd_tile,
    "extract-features": cmd_extract_features,
    "train-svm": cmd_train_svm,
    "train-cnn": cmd_train_cnn,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "heatmap": cmd_heatmap,
    "grad-check": cmd_grad_check,
}


# ---------------------------------------------------------------------------


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions():
    import PIL
    import scipy

    return {"lungcad": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "Pillow": PIL.__version__}


def _fail(code, kind, message, flag=None):
    rec = {"status": "error", "code": code, "kind": kind, "message": message}
    if flag:
        rec["flag"] = flag
    print(json.dumps(rec), file=sys.stderr)
    return code


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(exc.code, "usage" if exc.code == 2 else "validation", str(exc), exc.flag)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    flags = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items() if k != "command"}
    runlog = {
        "schema_version": RUNLOG_SCHEMA,
        "command": args.command,
        "argv": argv,
        "flags": flags,
        "seed": getattr(args, "seed", None),
        "versions": _versions(),
    }
    start = time.perf_counter()
    code, outputs = 0, []
    try:
        if args.threads < 1:
            raise ValidationError("--threads", "must be >= 1")
        outputs = COMMANDS[args.command](args) or []
    except ValidationError as exc:
        code = _fail(3, "validation", str(exc), exc.flag)
    except Exception as exc:  # noqa: BLE001 - surfaced as a one-line error
        log.debug("failure", exc_info=True)
        code = _fail(1, "runtime", f"{type(exc).__name__}: {exc}")
    runlog.update(
        exit_code=code,
        wall_time_s=time.perf_counter() - start,
        outputs={str(p): _digest(Path(p)) for p in outputs if Path(p).is_file()},
    )
    log_path = Path(args.log) if args.log else Path(args.workdir) / "logs" / f"{args.command}.runlog.json"
    try:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text(json.dumps(runlog, indent=2, default=str) + "\n")
    except OSError as exc:
        log.warning("could not write run log %s: %s", log_path, exc)
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
