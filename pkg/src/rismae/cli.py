"""Command-line entry point: ``rismae {gen,pretrain,finetune,eval,ablate}``.

Every subcommand reads an optional JSON config, applies ``--set key=value``
overrides on dotted keys, writes ``resolved_config.json`` into ``--out`` and
then runs. Exit codes: 0 success, 2 configuration error, 3 I/O error,
4 numerical abort.

Config layout (all sections optional, defaults fill the rest)::

    gen:       the DatasetManifest fields (top level)
    pretrain:  {"dataset": path, "model": {...}, "train": {...}}
    finetune:  {"dataset": path, "checkpoint": path | null, "train": {...},
                "model": {...}}   # model used only when checkpoint is null
    eval:      {"dataset": path, "checkpoint": path, "split": "ft_test"}
    ablate:    {"dataset": path, "model": {...}, "pretrain": {...},
                "finetune": {...}, "axis": name, "values": [...]}
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from pathlib import Path

from .metrics import config_digest, evaluate_dataset
from .model import ModelConfig, RISMAE, load_checkpoint, save_checkpoint
from .nn import NumericalError
from .siggen import Dataset, DatasetManifest, generate_dataset
from .siggen.modulation import SCHEME_NAMES
from .train import TrainConfig, finetune, pretrain

log = logging.getLogger("rismae")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
ABLATE_AXES = ("mask_ratio", "snr_min", "patch_size", "label_fraction")


class ConfigError(ValueError):
    pass


def parse_value(text: str):
    """JSON literal when it parses, plain string otherwise."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> dict:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, _, raw = assignment.partition("=")
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"override key {key!r} is malformed")
    node = cfg
    for p in parts[:-1]:
        child = node.setdefault(p, {})
        if not isinstance(child, dict):
            raise ConfigError(f"override key {key!r}: {p!r} is not a section")
        node = child
    node[parts[-1]] = parse_value(raw)
    return cfg


def load_config(path, overrides=()) -> dict:
    cfg = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(cfg, dict):
            raise ConfigError(f"{path}: top level must be an object")
    for item in overrides:
        apply_override(cfg, item)
    return cfg


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"{name!r} must be an object")
    return dict(sec)


def _build(factory, d: dict, where: str):
    try:
        obj = factory(d)
        obj.validate()
        return obj
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _check_schemes(schemes):
    for i, s in enumerate(schemes):
        if s not in SCHEME_NAMES:
            raise ConfigError(f"schemes[{i}]: unknown scheme {s!r} (known: {list(SCHEME_NAMES)})")


def _prepare_out(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise OSError(f"output path {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise OSError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, default=float)


def _open_dataset(cfg: dict) -> Dataset:
    path = cfg.get("dataset")
    if not path:
        raise ConfigError("'dataset' path is required")
    if not (Path(path) / "manifest.json").exists():
        raise OSError(f"no dataset at {path}")
    return Dataset(path)


def _model_config(cfg: dict, ds: Dataset | None) -> ModelConfig:
    d = _section(cfg, "model")
    if ds is not None:
        d.setdefault("frame_length", ds.frame_length)
        d.setdefault("num_classes", ds.num_classes)
    return _build(ModelConfig.from_dict, d, "model")


def _train_config(cfg: dict, stage: str, section: str = "train") -> TrainConfig:
    d = _section(cfg, section)
    d.setdefault("stage", stage)
    return _build(lambda x: TrainConfig.for_stage(x.pop("stage"), **x), d, section)


# -- subcommands ---------------------------------------------------------------

def cmd_gen(cfg: dict, out: Path, args) -> int:
    d = dict(cfg)
    if args.seed is not None:
        d["master_seed"] = args.seed
    _check_schemes(d.get("schemes", []))
    manifest = _build(DatasetManifest.from_dict, d, "manifest")
    _write_json(out / "resolved_config.json", manifest.to_dict())
    generate_dataset(manifest, out, workers=args.workers)
    print(json.dumps(manifest.to_dict(), indent=2))
    return EXIT_OK


def run_pretrain(ds: Dataset, mcfg: ModelConfig, tcfg: TrainConfig, out: Path, digest: str):
    model = RISMAE(mcfg, with_decoder=True, with_head=False)
    trace = pretrain(ds, model, tcfg)
    trace.write_csv(out / "trace.csv")
    save_checkpoint(model, out / "checkpoint",
                    rng_state={"seed": tcfg.seed, "init_seed": mcfg.init_seed},
                    extra={"digest": digest, "trace": trace.summary()})
    return model, trace


def run_finetune(ds: Dataset, checkpoint, mcfg: ModelConfig | None, tcfg: TrainConfig,
                 out: Path, digest: str):
    if checkpoint is not None:
        model = load_checkpoint(checkpoint, with_decoder=False, num_classes=ds.num_classes)
    else:
        model = RISMAE(mcfg, with_decoder=False, with_head=True)
    trace = finetune(ds, model, tcfg)
    trace.write_csv(out / "trace.csv")
    save_checkpoint(model, out / "checkpoint", rng_state={"seed": tcfg.seed},
                    extra={"digest": digest, "trace": trace.summary(),
                           "labeled_frames": int(len(trace.selected_frames))})
    return model, trace


def cmd_pretrain(cfg: dict, out: Path, args) -> int:
    ds = _open_dataset(cfg)
    if args.seed is not None:
        cfg.setdefault("train", {})["seed"] = args.seed
    mcfg = _model_config(cfg, ds)
    tcfg = _train_config(cfg, "pretrain")
    resolved = {"dataset": str(cfg["dataset"]), "model": mcfg.to_dict(), "train": tcfg.to_dict()}
    _write_json(out / "resolved_config.json", resolved)
    _, trace = run_pretrain(ds, mcfg, tcfg, out, config_digest(resolved))
    print(json.dumps(trace.summary()))
    return EXIT_OK


def cmd_finetune(cfg: dict, out: Path, args) -> int:
    ds = _open_dataset(cfg)
    if args.seed is not None:
        cfg.setdefault("train", {})["seed"] = args.seed
    if args.label_fraction is not None:
        cfg.setdefault("train", {})["label_fraction"] = args.label_fraction
    if args.freeze_encoder:
        cfg.setdefault("train", {})["freeze_encoder"] = True
    ckpt = cfg.get("checkpoint")
    if ckpt is not None and not (Path(ckpt) / "config.json").exists():
        raise OSError(f"no checkpoint at {ckpt}")
    mcfg = _model_config(cfg, ds) if ckpt is None else None
    tcfg = _train_config(cfg, "finetune")
    resolved = {"dataset": str(cfg["dataset"]), "checkpoint": ckpt, "train": tcfg.to_dict(),
                "model": mcfg.to_dict() if mcfg else None}
    _write_json(out / "resolved_config.json", resolved)
    _, trace = run_finetune(ds, ckpt, mcfg, tcfg, out, config_digest(resolved))
    print(json.dumps(trace.summary()))
    return EXIT_OK


def cmd_eval(cfg: dict, out: Path, args) -> int:
    ds = _open_dataset(cfg)
    ckpt = cfg.get("checkpoint")
    if not ckpt or not (Path(ckpt) / "config.json").exists():
        raise OSError(f"no checkpoint at {ckpt}")
    split = cfg.get("split", "ft_test")
    resolved = {"dataset": str(cfg["dataset"]), "checkpoint": ckpt, "split": split,
                "snr_min": cfg.get("snr_min"), "snr_max": cfg.get("snr_max")}
    _write_json(out / "resolved_config.json", resolved)
    model = load_checkpoint(ckpt, with_decoder=False)
    if not model.with_head:
        raise ConfigError(f"checkpoint {ckpt} has no classifier head")
    try:
        report = evaluate_dataset(model, ds, split, resolved["snr_min"], resolved["snr_max"],
                                  digest=config_digest(resolved))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    report.write(out)
    print(json.dumps({"oa": report.oa, "kappa": report.kappa,
                      "oa_macro_snr": report.macro_snr_oa}))
    return EXIT_OK


def _ablation_plan(cfg: dict, ds: Dataset):
    axis = cfg.get("axis")
    if axis not in ABLATE_AXES:
        raise ConfigError(f"axis: unknown ablation axis {axis!r} (known: {list(ABLATE_AXES)})")
    values = cfg.get("values")
    if not isinstance(values, list) or not values:
        raise ConfigError("values: a non-empty list is required")
    runs = []
    for v in values:
        run = {k: copy.deepcopy(cfg.get(k, {})) for k in ("model", "pretrain", "finetune")}
        if axis == "mask_ratio":
            run["model"]["mask_ratio"] = v
        elif axis == "patch_size":
            run["model"]["patch_size"] = v
            if not isinstance(v, int) or v < 1 or ds.frame_length % v:
                raise ConfigError(f"values: patch_size {v!r} does not divide frame length "
                                  f"{ds.frame_length}")
        elif axis == "snr_min":
            run["pretrain"]["pretrain_snr_min_db"] = v
        else:
            run["finetune"]["label_fraction"] = v
        mcfg = _model_config(run, ds)
        pcfg = _train_config(run, "pretrain", "pretrain")
        fcfg = _train_config(run, "finetune", "finetune")
        runs.append((v, mcfg, pcfg, fcfg))
    return axis, runs


def cmd_ablate(cfg: dict, out: Path, args) -> int:
    ds = _open_dataset(cfg)
    if args.seed is not None:
        for k in ("pretrain", "finetune"):
            cfg.setdefault(k, {})["seed"] = args.seed
    if args.label_fraction is not None:
        cfg.setdefault("finetune", {})["label_fraction"] = args.label_fraction
    if args.freeze_encoder:
        cfg.setdefault("finetune", {})["freeze_encoder"] = True
    axis, runs = _ablation_plan(cfg, ds)
    resolved = {"dataset": str(cfg["dataset"]), "axis": axis,
                "runs": [{"value": v, "model": m.to_dict(), "pretrain": p.to_dict(),
                          "finetune": f.to_dict()} for v, m, p, f in runs]}
    _write_json(out / "resolved_config.json", resolved)
    rows = []
    cache = {}
    for i, (value, mcfg, pcfg, fcfg) in enumerate(runs):
        run_dir = out / f"run_{i:02d}"
        run_dir.mkdir(exist_ok=True)
        key = config_digest({"model": mcfg.to_dict(), "pretrain": pcfg.to_dict()})
        if key not in cache:
            pre_dir = run_dir / "pretrain"
            pre_dir.mkdir(exist_ok=True)
            run_pretrain(ds, mcfg, pcfg, pre_dir, key)
            cache[key] = pre_dir / "checkpoint"
        ft_dir = run_dir / "finetune"
        ft_dir.mkdir(exist_ok=True)
        digest = config_digest(resolved["runs"][i])
        model, _ = run_finetune(ds, cache[key], None, fcfg, ft_dir, digest)
        report = evaluate_dataset(model, ds, "ft_test", digest=digest)
        report.write(run_dir / "eval")
        rows.append((value, report.oa, report.kappa))
        log.info("ablate %s=%s oa %.4f kappa %.4f", axis, value, report.oa, report.kappa)
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["value", "oa", "kappa"])
        for value, oa, kap in rows:
            w.writerow([value, f"{oa:.6f}", f"{kap:.6f}"])
    print(json.dumps([{"value": v, "oa": a, "kappa": k} for v, a, k in rows]))
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "eval": cmd_eval, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rismae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="overrides the master/training seed")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a dotted config key")
        p.add_argument("--force", action="store_true", help="allow a non-empty --out")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "gen":
            p.add_argument("--workers", type=int, default=1)
        if name in ("finetune", "ablate"):
            p.add_argument("--label-fraction", type=float)
            p.add_argument("--freeze-encoder", action="store_true",
                           help="train only the classifier head (linear probe)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        out = _prepare_out(args.out, args.force)
        return COMMANDS[args.command](cfg, out, args)
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
