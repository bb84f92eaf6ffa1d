"""Command-line entry point: ``condenseunet <command> [options]``.

Settings are resolved as defaults < JSON config file (``--config``) <
command-line flags, and the result is written to ``resolved-config.json``
in the output directory.  Exit status: 0 success, 1 internal failure,
2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("condenseunet")


class UsageError(Exception):
    pass


# Per-command defaults; every key can come from the config file or a flag.
DEFAULTS = {
    "synth-data": {"cases": 20, "seed": 0, "image_size": 128, "slices": 3},
    "train": {"epochs": 200, "batch_size": 16, "learning_rate": 1e-4, "alpha": 0.5, "beta": 0.5,
              "lasso": 1e-5, "seed": 0, "fold": 0, "patch_size": 128, "dtype": "float32",
              "augment": True, "stage_boundaries": None, "checkpoint_every": 0, "resume": None},
    "eval": {"fold": 0, "split": "test", "predictions": None},
    "predict": {"fold": 0, "split": "test"},
    "count-params": {"input_size": 128},
    "inspect-condense": {},
    "gradcheck": {"seeds": 10, "cases": None},
}
REQUIRED = {
    "synth-data": ("out",), "train": ("out", "data"), "eval": ("out", "data"),
    "predict": ("out", "data", "checkpoint"), "count-params": ("out",),
    "inspect-condense": ("out", "checkpoint"), "gradcheck": ("out",),
}
NETWORK_KEYS = ("layers", "growth_rate", "initial_features", "condensation", "groups", "bottleneck_width")
_NETWORK_FIELDS = {"layers": "layers_per_block", "condensation": "condensation_factor"}


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_network_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("network")
    g.add_argument("--layers", type=_int_list, help="layers per block, e.g. 2,3,4,5,4,3,2")
    g.add_argument("--growth-rate", type=int)
    g.add_argument("--initial-features", type=int)
    g.add_argument("--condensation", type=int, help="condensation factor C")
    g.add_argument("--groups", type=int, help="group count M")
    g.add_argument("--bottleneck-width", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condenseunet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, argument_default=None)
        p.add_argument("--config", type=Path, help="JSON file of settings (a resolved-config.json works)")
        p.add_argument("--out", type=Path, help="output directory")
        return p

    p = command("synth-data", "write a synthetic phantom dataset")
    p.add_argument("--cases", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--slices", type=int)

    p = command("train", "train a network")
    p.add_argument("--data", type=Path, help="dataset manifest.json")
    for flag, typ in (("--epochs", int), ("--batch-size", int), ("--learning-rate", float),
                      ("--alpha", float), ("--beta", float), ("--lasso", float), ("--seed", int),
                      ("--fold", int), ("--patch-size", int), ("--checkpoint-every", int)):
        p.add_argument(flag, type=typ)
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--no-augment", dest="augment", action="store_const", const=False)
    p.add_argument("--stage-boundaries", type=_int_list, help="epochs at which stages fire, e.g. 10,20,30")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    _add_network_flags(p)

    p = command("eval", "evaluate a checkpoint (or a directory of predicted labels)")
    p.add_argument("--data", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--predictions", type=Path, help="directory of predicted .lbl.png files")
    p.add_argument("--fold", type=int)
    p.add_argument("--split", choices=["train", "val", "test"])

    p = command("predict", "write predicted label maps")
    p.add_argument("--data", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--fold", type=int)
    p.add_argument("--split", choices=["train", "val", "test"])

    p = command("count-params", "parameter comparison with the DenseNet and U-Net analogs")
    p.add_argument("--input-size", type=int)
    _add_network_flags(p)

    p = command("inspect-condense", "dump per-layer LG-Conv masks of a checkpoint")
    p.add_argument("--checkpoint", type=Path)

    p = command("gradcheck", "run the finite-difference gradient suite")
    p.add_argument("--seeds", type=int)
    p.add_argument("--cases", type=lambda s: [c for c in s.split(",") if c], help="subset of case names")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the config file and explicit flags into one dict."""
    settings = dict(DEFAULTS[args.command])
    skip = {"command", "config", "verbose"}
    network: dict = {}
    if args.config is not None:
        if not args.config.is_file():
            raise UsageError(f"config file {args.config} not found")
        try:
            from_file = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON ({exc})")
        if not isinstance(from_file, dict):
            raise UsageError(f"{args.config}: top level must be an object")
        network.update(from_file.pop("network", {}) or {})
        if from_file.pop("command", args.command) != args.command:
            raise UsageError(f"{args.config} was written for a different command")
        from_file.pop("version", None)
        allowed = (set(vars(args)) - skip) | set(settings)
        unknown = sorted(set(from_file) - allowed)
        if unknown:
            raise UsageError(f"{args.config}: unknown setting(s) {unknown} for {args.command}")
        for key, value in from_file.items():
            if key in NETWORK_KEYS:
                network[_NETWORK_FIELDS.get(key, key)] = value
            else:
                settings[key] = value
    for key, value in vars(args).items():
        if key in skip or value is None:
            continue
        if key in NETWORK_KEYS:
            network[_NETWORK_FIELDS.get(key, key)] = value
        else:
            settings[key] = value
    missing = [k for k in REQUIRED[args.command] if settings.get(k) is None]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k for k in missing))
    for key in ("out", "data", "checkpoint", "predictions", "resume"):
        if settings.get(key) is not None:
            settings[key] = Path(settings[key])
    if args.command in ("train", "count-params"):
        from .network import CondenseUNet, NetworkConfig

        try:
            cfg = NetworkConfig(**network)
            CondenseUNet(cfg, dtype=np.float32)  # surfaces divisibility problems as usage errors
            settings["network"] = cfg.to_dict()
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid network settings: {exc}")
    return settings


def _jsonable(obj):
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj).__name__}")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _require(path, what: str) -> Path:
    if path is None or not Path(path).exists():
        raise UsageError(f"{what} {path} not found")
    return Path(path)


# -- commands ---------------------------------------------------------------------------
def cmd_synth_data(s: dict) -> int:
    from .data import generate_phantom_dataset

    manifest = generate_phantom_dataset(s["cases"], s["seed"], s["out"], s["image_size"], s["slices"])
    print(f"wrote {s['cases']} cases to {manifest}")
    return 0


def _network_config(network: dict):
    from .network import NetworkConfig

    return NetworkConfig.from_dict(network)


def cmd_train(s: dict) -> int:
    from .training import TrainConfig, train

    _require(s["data"], "manifest")
    if s["resume"] is not None:
        _require(s["resume"], "checkpoint")
    cfg = TrainConfig(
        epochs=s["epochs"], batch_size=s["batch_size"], learning_rate=s["learning_rate"],
        alpha=s["alpha"], beta=s["beta"], lasso=s["lasso"], seed=s["seed"], fold=s["fold"],
        patch_size=s["patch_size"], dtype=s["dtype"], augment=bool(s["augment"]),
        stage_boundaries=s["stage_boundaries"], checkpoint_every=s["checkpoint_every"],
        network=_network_config(s["network"]).to_dict())
    _write_json(Path(s["out"]) / "train-config.json", cfg.to_dict())
    trainer = train(cfg, s["data"], s["out"], resume=s["resume"])
    print(f"trained {trainer.epoch} epochs; best mean val Dice {trainer.best_dice:.4f} "
          f"at epoch {trainer.best_epoch}")
    return 0


def cmd_eval(s: dict) -> int:
    from .data import load_dataset
    from .training import evaluate, evaluate_predictions, load_prediction_dir, write_report

    _require(s["data"], "manifest")
    if (s.get("checkpoint") is None) == (s["predictions"] is None):
        raise UsageError("give exactly one of --checkpoint and --predictions")
    if s["predictions"] is not None:
        _require(s["predictions"], "prediction directory")
        samples = load_dataset(s["data"]).split(s["split"], s["fold"])
        rows, summary = evaluate_predictions(load_prediction_dir(s["predictions"], samples), samples)
        summary["split"], summary["fold"] = s["split"], s["fold"]
        write_report(rows, summary, s["out"])
    else:
        _require(s["checkpoint"], "checkpoint")
        summary = evaluate(s["checkpoint"], s["data"], s["fold"], s["split"], s["out"])["summary"]
    print(f"mean foreground Dice {summary['mean_foreground_dice']:.4f}; report in {s['out']}")
    return 0


def cmd_predict(s: dict) -> int:
    from .training import predict

    _require(s["data"], "manifest")
    _require(s["checkpoint"], "checkpoint")
    out = predict(s["checkpoint"], s["data"], s["out"], s["fold"], s["split"])
    print(f"wrote predictions to {out}")
    return 0


def cmd_count_params(s: dict) -> int:
    from .accounting import compare_architectures, comparison_csv, comparison_json

    comp = compare_architectures(_network_config(s["network"]), s["input_size"])
    out = Path(s["out"])
    (out / "params.csv").write_text(comparison_csv(comp))
    (out / "params.json").write_text(comparison_json(comp))
    with open(out / "layers.csv", "w") as fh:
        for i, report in enumerate(comp["reports"].values()):
            text = report.to_csv()
            fh.write(text if i == 0 else text.split("\n", 1)[1])
    print(comparison_csv(comp), end="")
    print(f"ratio_vs_densenet={comp['ratio_vs_densenet']:.4f} ratio_vs_unet={comp['ratio_vs_unet']:.4f}")
    return 0


def cmd_inspect_condense(s: dict) -> int:
    from .training import load_network

    _require(s["checkpoint"], "checkpoint")
    net, _, meta = load_network(s["checkpoint"])
    layers = []
    for layer in net.lg_layers():
        layers.append({
            "layer": layer.name, "in_channels": layer.in_channels, "out_channels": layer.out_channels,
            "groups": layer.groups, "condensation_factor": layer.condensation_factor,
            "completed_stages": layer.completed_stages, "active_fraction": layer.active_fraction(),
            "group_masks": layer.group_masks().astype(int).tolist(),
        })
    _write_json(Path(s["out"]) / "masks.json",
                {"epoch": meta["epoch"], "active_fraction": net.active_fraction(), "layers": layers})
    print(f"{len(layers)} LG-Conv layers, active fraction {net.active_fraction():.4f}")
    return 0


def cmd_gradcheck(s: dict) -> int:
    from .gradcheck import CASES, TOLERANCE, run_suite

    names = s["cases"]
    if names:
        unknown = [n for n in names if n not in CASES]
        if unknown:
            raise UsageError(f"unknown gradcheck case(s) {unknown}; known: {sorted(CASES)}")
    t0 = time.perf_counter()
    results = run_suite(s["seeds"], names, log=print)
    failed = [r for r in results if not r.passed]
    _write_json(Path(s["out"]) / "gradcheck.json", {
        "tolerance": TOLERANCE, "seconds": time.perf_counter() - t0,
        "results": [{"case": r.name, "seed": r.seed, "max_rel_error": r.max_rel_error,
                     "checked": r.n_checked, "passed": r.passed} for r in results]})
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


COMMANDS = {
    "synth-data": cmd_synth_data, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
    "count-params": cmd_count_params, "inspect-condense": cmd_inspect_condense, "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on bad flags
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        settings = resolve(args)
        out = Path(settings["out"])
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "resolved-config.json", {"command": args.command, "version": __version__, **settings})
        return COMMANDS[args.command](settings)
    except UsageError as exc:
        parser.error(str(exc))
    except Exception as exc:  # internal failure: one-line diagnostic, details at debug level
        log.debug("failure", exc_info=True)
        print(f"condenseunet {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
