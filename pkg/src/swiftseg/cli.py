"""Command-line surface: model inspection, measurement, training, inference.

Commands: build, params, flops, bench, train, eval, infer, erf, fuse-bn.
Configuration is a JSON document validated against a closed schema (unknown
keys are rejected); any leaf can be overridden with ``--set key=value``.
Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


class ConfigError(RuntimeError):
    pass


# schema: section -> key -> default. None defaults are typed by _parse_value.
_MODEL_DEFAULTS = {
    "backbone": "resnet18",
    "width_mult": 1.0,
    "decoder_width": 128,
    "spp_grids": [1, 2, 4, 8],
    "spp_per_level": 0,
    "spp_out": 0,
    "pyramid_levels": 1,
    "num_classes": 19,
    "lateral": True,
    "interp": "bilinear",
}
_TRAIN_DEFAULTS = {
    "lr_max": 4e-4,
    "lr_min": 1e-6,
    "weight_decay": 1e-4,
    "epochs": 200,
    "batch": 12,
    "crop": 768,
    "scale_range": [0.5, 2.0],
    "pretrained_lr_divisor": 4.0,
    "pretrained_wd_divisor": 4.0,
    "seed": 0,
    "augment": True,
    "pretrained_prefixes": [],
    "val_interval": 10,
    "ignore_index": 255,
}
_DATA_DEFAULTS = {
    "root": None,
    "val_root": None,
    "mean": [0.5, 0.5, 0.5],
    "std": [0.25, 0.25, 0.25],
}
_TOP_DEFAULTS = {
    "input": "2048x1024",  # WIDTHxHEIGHT
    "seed": 0,
    "checkpoint": None,
    "passes": 1000,
    "warmup": 10,
}
_SCHEMA = {"model": _MODEL_DEFAULTS, "train": _TRAIN_DEFAULTS, "data": _DATA_DEFAULTS}


def default_config() -> dict:
    cfg = {k: (dict(v) if isinstance(v, dict) else v) for k, v in _TOP_DEFAULTS.items()}
    for section, defaults in _SCHEMA.items():
        cfg[section] = {k: (list(v) if isinstance(v, list) else v) for k, v in defaults.items()}
    return cfg


def _reject_unknown(doc: dict, allowed, where: str):
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"unknown config key {where}{key!r}")


def load_config(path: str | None) -> dict:
    cfg = default_config()
    if path is None:
        return cfg
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    _reject_unknown(doc, set(_TOP_DEFAULTS) | set(_SCHEMA), "")
    for key, value in doc.items():
        if key in _SCHEMA:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            _reject_unknown(value, _SCHEMA[key], f"{key}.")
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


def _parse_value(text: str, like):
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected boolean, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, list):
        if text.strip() == "":
            return []
        parts = [p for p in text.split(",") if p != ""]
        inner = like[0] if like else 1.0
        return [_parse_value(p, inner) for p in parts]
    return text


def apply_overrides(cfg: dict, pairs):
    """``--set key=value`` with bare keys: resolved against the fixed schema."""
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, _, text = pair.partition("=")
        key = key.strip()
        if key in _TOP_DEFAULTS:
            like = _TOP_DEFAULTS[key]
            cfg[key] = _parse_value(text, like if like is not None else text)
            continue
        hits = [s for s, d in _SCHEMA.items() if key in d]
        if not hits:
            raise ConfigError(f"--set: unknown key {key!r}")
        if len(hits) > 1:
            raise ConfigError(f"--set: ambiguous key {key!r} (in {hits}); use a config file")
        section = hits[0]
        like = _SCHEMA[section][key]
        cfg[section][key] = _parse_value(text, like if like is not None else text)
    return cfg


def parse_input_dims(text: str):
    """'WxH' -> (H, W) row/column dims."""
    try:
        w, h = (int(p) for p in text.lower().split("x"))
    except Exception:
        raise ConfigError(f"input must look like 2048x1024, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise ConfigError(f"input dims must be positive, got {text!r}")
    return h, w


def _echo_config(cfg: dict, out_dir: str | None):
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "effective_config.json"), "w") as f:
            json.dump(cfg, f, indent=2, sort_keys=True)
            f.write("\n")


# ---------------------------------------------------------------------------
# command implementations (numpy-dependent imports stay inside)
# ---------------------------------------------------------------------------

def _model_from_cfg(cfg, fused=False):
    from .graph import ModelSpec, build, load, read_entries
    from .seghead import fuse_bn
    spec = ModelSpec(**{k: (tuple(v) if isinstance(v, list) else v)
                        for k, v in cfg["model"].items()})
    model = build(spec, seed=int(cfg["seed"]))
    path = cfg.get("checkpoint")
    if path and not os.path.isfile(path):
        raise ConfigError(f"checkpoint file not found: {path}")
    if not path:
        return fuse_bn(model) if fused else model
    ckpt_fused = not any(".bn." in name for name in read_entries(path))
    if ckpt_fused:
        model = fuse_bn(model)
        load(model, path)
        return model
    load(model, path)
    return fuse_bn(model) if fused else model


def _train_cfg(cfg):
    from .train import TrainConfig
    kw = dict(cfg["train"])
    kw["scale_range"] = tuple(kw["scale_range"])
    kw["pretrained_prefixes"] = tuple(kw["pretrained_prefixes"])
    return TrainConfig(**kw)


def _dataset(cfg, root_key="root", require_labels=True):
    from .data import SegDataset
    root = cfg["data"][root_key]
    if not root:
        raise ConfigError(f"data.{root_key} is required for this command")
    return SegDataset(root, cfg["model"]["num_classes"],
                      mean=cfg["data"]["mean"], std=cfg["data"]["std"],
                      ignore_index=cfg["train"]["ignore_index"],
                      require_labels=require_labels)


def cmd_build(cfg, args):
    from . import profile
    model = _model_from_cfg(cfg)
    report = profile.count(model, parse_input_dims(cfg["input"]))
    print(report.to_text())
    _echo_config(cfg, args.out)
    return 0


def cmd_params(cfg, args):
    model = _model_from_cfg(cfg)
    totals = {}
    for name, p in model.named_parameters():
        head = name.split(".", 1)[0]
        totals[head] = totals.get(head, 0) + p.data.size
    for head, n in totals.items():
        print(f"{head:<10} {n:>12,}")
    total = model.parameter_count()
    print(f"{'total':<10} {total:>12,}  ({total / 1e6:.1f}M)")
    _echo_config(cfg, args.out)
    return 0


def cmd_flops(cfg, args):
    from . import profile
    model = _model_from_cfg(cfg)
    report = profile.count(model, parse_input_dims(cfg["input"]))
    print(report.to_text())
    if args.out:
        _echo_config(cfg, args.out)
        with open(os.path.join(args.out, "flops.json"), "w") as f:
            f.write(report.to_json() + "\n")
        with open(os.path.join(args.out, "flops.csv"), "w") as f:
            f.write(report.to_csv())
    return 0


def cmd_bench(cfg, args):
    from . import profile
    model = _model_from_cfg(cfg, fused=args.fused)
    report = profile.benchmark(model, parse_input_dims(cfg["input"]),
                               passes=int(cfg["passes"]), warmup=int(cfg["warmup"]))
    print(report.to_json())
    if args.out:
        _echo_config(cfg, args.out)
        with open(os.path.join(args.out, "bench.json"), "w") as f:
            f.write(report.to_json() + "\n")
    return 0


def cmd_train(cfg, args):
    from .train import fit
    model = _model_from_cfg(cfg)
    train_set = _dataset(cfg)
    val_set = _dataset(cfg, "val_root") if cfg["data"]["val_root"] else None
    _echo_config(cfg, args.out)
    result = fit(model, train_set, _train_cfg(cfg), out_dir=args.out, val_dataset=val_set)
    print(f"best mIoU {result.best_miou:.4f}"
          + (f", checkpoint {result.best_checkpoint}" if result.best_checkpoint else ""))
    return 0


def _print_iou(mean_iou, per_class):
    for k, v in enumerate(per_class):
        shown = "excluded" if v != v else f"{v:.4f}"  # NaN: class absent everywhere
        print(f"class {k:>3}: {shown}")
    print(f"mIoU: {mean_iou:.4f}")


def cmd_eval(cfg, args):
    import numpy as np
    from .data import read_pgm
    from .train import confusion_matrix, miou
    k = cfg["model"]["num_classes"]
    ignore = cfg["train"]["ignore_index"]
    dataset = _dataset(cfg)
    conf = np.zeros((k, k), dtype=np.int64)
    if args.pred_dir:
        for i in range(len(dataset)):
            _, labels = dataset.load_raw(i)
            ppath = os.path.join(args.pred_dir, dataset.stem(i) + ".pgm")
            if not os.path.isfile(ppath):
                raise ConfigError(f"missing prediction file: {ppath}")
            pred = read_pgm(ppath)
            if pred.shape != labels.shape:
                raise ConfigError(f"{ppath}: prediction dims {pred.shape} do not "
                                  f"match labels {labels.shape}")
            scored = labels != ignore
            if scored.any() and pred[scored].max() >= k:
                raise ConfigError(f"{ppath}: prediction value "
                                  f"{int(pred[scored].max())} outside [0, {k})")
            conf += confusion_matrix(pred, labels, k, ignore)
    else:
        model = _model_from_cfg(cfg, fused=args.fused)
        for i in range(len(dataset)):
            x, labels = dataset[i]
            conf += confusion_matrix(model.predict(x)[0], labels, k, ignore)
    mean_iou, per_class = miou(conf)
    _print_iou(mean_iou, per_class)
    _echo_config(cfg, args.out)
    return 0


def cmd_infer(cfg, args):
    from .data import read_ppm, write_pgm, normalize_image
    if not os.path.isfile(args.image):
        raise ConfigError(f"image file not found: {args.image}")
    model = _model_from_cfg(cfg, fused=args.fused)
    img = read_ppm(args.image)
    x = normalize_image(img, cfg["data"]["mean"], cfg["data"]["std"])
    pred = model.predict(x)[0].astype("uint8")
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.image))[0]
    out_path = os.path.join(out_dir, stem + "_pred.pgm")
    write_pgm(out_path, pred)
    print(out_path)
    _echo_config(cfg, args.out)
    return 0


def cmd_erf(cfg, args):
    from . import erf as erf_mod
    model = _model_from_cfg(cfg)
    dataset = _dataset(cfg, require_labels=False)
    images = [dataset[i][0] for i in range(len(dataset))]
    if args.out and args.dump_grad:
        os.makedirs(args.out, exist_ok=True)
    report = erf_mod.estimate(model, images,
                              threshold_fraction=args.threshold,
                              dump_dir=args.out if args.dump_grad else None)
    print(report.to_json())
    if args.out:
        _echo_config(cfg, args.out)
        with open(os.path.join(args.out, "erf.json"), "w") as f:
            f.write(report.to_json() + "\n")
    return 0


def cmd_fuse_bn(cfg, args):
    from .graph import save
    from .seghead import fuse_bn
    model = _model_from_cfg(cfg)
    fused = fuse_bn(model)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    out_path = os.path.join(out_dir, "fused.swft")
    save(fused, out_path)
    print(out_path)
    _echo_config(cfg, args.out)
    return 0


_COMMANDS = {
    "build": cmd_build,
    "params": cmd_params,
    "flops": cmd_flops,
    "bench": cmd_bench,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "erf": cmd_erf,
    "fuse-bn": cmd_fuse_bn,
}


def _build_parser():
    parser = argparse.ArgumentParser(prog="swiftseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config path")
        p.add_argument("--set", dest="overrides", nargs="*", default=[],
                       metavar="KEY=VALUE", help="override config leaves")
        p.add_argument("--out", default=None, help="output directory")
        if name in ("bench", "eval", "infer"):
            p.add_argument("--fused", action="store_true",
                           help="fold batch norms before running")
        if name == "eval":
            p.add_argument("--pred-dir", default=None,
                           help="score existing prediction PGMs instead of the model")
        if name == "infer":
            p.add_argument("--image", required=True, help="input P6 PPM file")
        if name == "erf":
            p.add_argument("--threshold", type=float, default=0.05)
            p.add_argument("--dump-grad", action="store_true",
                           help="write gradient-magnitude maps as PGM")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        apply_overrides(cfg, args.overrides)
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - cli boundary
        from .data import DataError
        if isinstance(e, (DataError, FileNotFoundError)):
            print(f"error: {e}", file=sys.stderr)
            return 1
        print(f"runtime error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
