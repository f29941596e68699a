"""Command-line entry point for the whole pipeline.

Subcommands: synth, train-source, init-bank, adapt, eval, gradcheck,
describe, pipeline.  All of them read a JSON config (defaults below) with
dotted-path overrides via --set, write a resolved-config snapshot next to
their outputs, and thread one seed through every RNG stream.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

from . import gradcheck as gc
from . import metrics, prototypes, scenes, train
from .model import ModelConfig, SegNet, describe
from .prototypes import AdaptConfig, PrototypeBank
from .scenes import SceneSpec
from .tensor import NumericError
from .tensor_io import DataError
from .train import AugmentConfig, TrainConfig


class ConfigError(RuntimeError):
    pass


DEFAULTS: dict = {
    "seed": 0,
    "data": {
        "classes": 5,
        "layout_seed": 0,
        "objects": [5, 9],
        "fov_deg": 70.0,
        "pano_height": 64,
        "pinhole_size": 64,
        "n_source": 16,
        "n_target": 16,
        "n_test": 8,
    },
    "model": {"preset": "nano", "border": "clamp", "r": 4.0},
    "train": {
        "lr0": 3e-3,
        "poly_power": 0.9,
        "weight_decay": 1e-4,
        "betas": [0.9, 0.999],
        "eps": 1e-8,
        "batch_size": 2,
        "max_iters": 900,
        "augment": {"resize": False, "ratio": [0.5, 2.0], "hflip": True, "crop": True},
        "augment_target": {"resize": False, "ratio": [0.5, 2.0], "hflip": True, "crop": False},
    },
    "adapt": {
        "lr0": 3e-4,
        "max_iters": 300,
        "temperature": 20.0,
        "lambda": 0.9,
        "alpha": 0.001,
        "threshold": 0.98,
        "momentum": 0.999,
        "refresh_pseudo": False,
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, here)
        else:
            out[key] = val
    return out


def _apply_set(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config path: {key}")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown config path: {key}")
    node[parts[-1]] = value


def load_config(path: str | None, sets: list[str], seed: int | None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON in {p}: {e}") from e
        cfg = _merge(cfg, user)
    for assignment in sets or []:
        _apply_set(cfg, assignment)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _snapshot(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))


def _scene_spec(cfg: dict) -> SceneSpec:
    d = cfg["data"]
    return SceneSpec(
        classes=d["classes"],
        layout_seed=d["layout_seed"],
        objects=tuple(d["objects"]),
        fov_deg=d["fov_deg"],
        pano_height=d["pano_height"],
        pinhole_size=d["pinhole_size"],
    )


def _model(cfg: dict) -> SegNet:
    m = cfg["model"]
    preset = m["preset"]
    if preset == "nano":
        mc = ModelConfig.nano(classes=cfg["data"]["classes"])
    elif preset == "tiny":
        mc = ModelConfig.tiny(classes=cfg["data"]["classes"])
    else:
        raise ConfigError(f"unknown model preset {preset!r}")
    mc.border = m["border"]
    mc.r = m["r"]
    return SegNet(mc, seed=cfg["seed"])


def _train_cfg(cfg: dict, section: str) -> TrainConfig:
    t = cfg["train"]
    sec = cfg[section]
    return TrainConfig(
        lr0=sec["lr0"] if "lr0" in sec else t["lr0"],
        poly_power=t["poly_power"],
        weight_decay=t["weight_decay"],
        betas=tuple(t["betas"]),
        eps=t["eps"],
        batch_size=t["batch_size"],
        max_iters=sec["max_iters"] if "max_iters" in sec else t["max_iters"],
        seed=cfg["seed"],
        augment=AugmentConfig(**{**t["augment"], "ratio": tuple(t["augment"]["ratio"])}),
        augment_target=AugmentConfig(
            **{**t["augment_target"], "ratio": tuple(t["augment_target"]["ratio"])}
        ),
    )


def _adapt_cfg(cfg: dict) -> AdaptConfig:
    a = cfg["adapt"]
    return AdaptConfig(
        temperature=a["temperature"],
        lam=a["lambda"],
        alpha=a["alpha"],
        threshold=a["threshold"],
        momentum=a["momentum"],
        refresh_pseudo=a["refresh_pseudo"],
    )


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output dir {out} is not empty (use --force)")
    _snapshot(cfg, out)
    d = cfg["data"]
    manifest = scenes.build_datasets(
        _scene_spec(cfg), d["n_source"], d["n_target"], d["n_test"], cfg["seed"], out
    )
    print(
        f"wrote {len(manifest['source'])} source / {len(manifest['target'])} target / "
        f"{len(manifest['test'])} test scenes ({manifest['classes']} classes) to {out}"
    )
    return 0


def cmd_train_source(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    out = Path(args.out)
    _snapshot(cfg, out)
    manifest, base = scenes.load_manifest(args.data)
    source = scenes.load_split(manifest, base, "source")
    net = _model(cfg)
    logs = train.train_source(net, source, _train_cfg(cfg, "train"), out / "train_log.jsonl")
    net.save(out / "params")
    print(f"trained {len(logs)} iters; final loss {logs[-1]['total']:.4f}; checkpoint in {out}")
    return 0


def cmd_init_bank(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    out = Path(args.out)
    _snapshot(cfg, out)
    manifest, base = scenes.load_manifest(args.data)
    net = _model(cfg)
    net.load(Path(args.model) / "params")
    bank = prototypes.build_bank(
        net,
        scenes.load_split(manifest, base, "source"),
        scenes.load_split(manifest, base, "target"),
        _adapt_cfg(cfg),
    )
    bank.save(out)
    print(f"bank initialized for {int(bank.initialized.sum())}/{bank.classes} classes")
    return 0


def cmd_adapt(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    out = Path(args.out)
    _snapshot(cfg, out)
    manifest, base = scenes.load_manifest(args.data)
    net = _model(cfg)
    net.load(Path(args.model) / "params")
    bank = None
    if args.mode != "ssl":
        if not args.bank:
            raise DataError(f"mode {args.mode!r} requires --bank (run init-bank first)")
        bank = PrototypeBank.load(args.bank)
    logs = train.adapt(
        net,
        bank,
        scenes.load_split(manifest, base, "source"),
        scenes.load_split(manifest, base, "target"),
        _train_cfg(cfg, "adapt"),
        _adapt_cfg(cfg),
        args.mode,
        out / "train_log.jsonl",
    )
    net.save(out / "params")
    if bank is not None:
        bank.save(out / "bank")
    print(f"adapted ({args.mode}) {len(logs)} iters; final loss {logs[-1]['total']:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    out = Path(args.out)
    _snapshot(cfg, out)
    manifest, base = scenes.load_manifest(args.data)
    net = _model(cfg)
    net.load(Path(args.model) / "params")
    classes = manifest["classes"]
    pano_cm, sector_cms = train.evaluate_scenes(
        net, scenes.load_split(manifest, base, "test"), classes
    )
    pin_cm = None
    if manifest.get("source_test"):
        pin_cm, _ = train.evaluate_scenes(
            net, scenes.load_split(manifest, base, "source_test"), classes
        )
    report = metrics.build_report(pano_cm, sector_cms, pin_cm)
    metrics.write_report(report, out)
    print(metrics.format_report(report))
    return 0


def cmd_gradcheck(args) -> int:
    results = gc.run_suite(scope=args.scope, seed=args.seed if args.seed is not None else 0)
    for r in results:
        print(r.line())
    if any(not r.passed for r in results):
        raise NumericError("gradient check failed")
    return 0


def cmd_describe(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    net_cfg = _model(cfg).cfg
    h = cfg["data"]["pano_height"]
    print(describe(net_cfg, h, 2 * h))
    return 0


def run_pipeline(cfg: dict, out: Path, modes: list[str]) -> dict[str, Path]:
    """synth -> train-source -> init-bank -> adapt(mode) -> eval, per mode.

    Dataset, source checkpoint, and bank are shared across modes.  Returns
    the eval.json path per mode.  Failures carry the stage name.
    """
    _snapshot(cfg, out)
    stage = "synth"
    try:
        d = cfg["data"]
        data_dir = out / "dataset"
        manifest = scenes.build_datasets(
            _scene_spec(cfg), d["n_source"], d["n_target"], d["n_test"], cfg["seed"], data_dir
        )
        base = data_dir
        source = scenes.load_split(manifest, base, "source")
        target = scenes.load_split(manifest, base, "target")
        test = scenes.load_split(manifest, base, "test")
        test_pin = scenes.load_split(manifest, base, "source_test")

        stage = "train-source"
        net = _model(cfg)
        src_dir = out / "source"
        train.train_source(net, source, _train_cfg(cfg, "train"), src_dir / "train_log.jsonl")
        net.save(src_dir / "params")
        source_state = net.state_arrays()

        bank0 = None
        if any(m in ("mpa", "mpa+ssl") for m in modes):
            stage = "init-bank"
            bank0 = prototypes.build_bank(net, source, target, _adapt_cfg(cfg))
            bank0.save(out / "bank")

        reports: dict[str, Path] = {}
        for mode in modes:
            stage = f"adapt({mode})" if mode != "none" else "eval(none)"
            net.load_state(source_state)
            if mode != "none":
                bank = None
                if mode != "ssl":
                    bank = PrototypeBank.load(out / "bank")
                mode_dir = out / f"adapt_{mode.replace('+', '_')}"
                train.adapt(
                    net,
                    bank,
                    source,
                    target,
                    _train_cfg(cfg, "adapt"),
                    _adapt_cfg(cfg),
                    mode,
                    mode_dir / "train_log.jsonl",
                )
                net.save(mode_dir / "params")
            stage = f"eval({mode})"
            pano_cm, sector_cms = train.evaluate_scenes(net, test, manifest["classes"])
            pin_cm, _ = train.evaluate_scenes(net, test_pin, manifest["classes"])
            report = metrics.build_report(pano_cm, sector_cms, pin_cm)
            eval_dir = out / f"eval_{mode.replace('+', '_')}"
            reports[mode] = metrics.write_report(report, eval_dir)
            print(f"[{mode}] mIoU {report['miou']:.2f} (pinhole {report['pinhole_miou']:.2f})")
        return reports
    except Exception as e:
        raise type(e)(f"stage {stage}: {e}") from e


def cmd_pipeline(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for m in modes:
        if m != "none" and m not in prototypes.MODES:
            raise ConfigError(f"unknown mode {m!r}")
    run_pipeline(cfg, Path(args.out), modes)
    return 0


# ---------------------------------------------------------------------------


def _common(sub, *, config=True, seed=True):
    if config:
        sub.add_argument("--config", help="JSON config file")
        sub.add_argument("--set", action="append", default=[], metavar="KEY=VAL")
    if seed:
        sub.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="panodeform")
    sp = ap.add_subparsers(dest="command", required=True)

    s = sp.add_parser("synth", help="generate a synthetic pinhole/panorama dataset")
    _common(s)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(fn=cmd_synth)

    s = sp.add_parser("train-source", help="supervised training on the source split")
    _common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train_source)

    s = sp.add_parser("init-bank", help="initialize class prototypes over both domains")
    _common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_init_bank)

    s = sp.add_parser("adapt", help="adapt a source checkpoint to the target domain")
    _common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--bank")
    s.add_argument("--mode", choices=list(prototypes.MODES), default="mpa+ssl")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_adapt)

    s = sp.add_parser("eval", help="evaluate a checkpoint on the test splits")
    _common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sp.add_parser("gradcheck", help="finite-difference checks for all ops")
    s.add_argument("--scope", choices=["op", "module", "model"], default="op")
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(fn=cmd_gradcheck)

    s = sp.add_parser("describe", help="print model shapes and parameter counts")
    _common(s)
    s.set_defaults(fn=cmd_describe)

    s = sp.add_parser("pipeline", help="synth + train + adapt + eval in one run")
    _common(s)
    s.add_argument("--out", required=True)
    s.add_argument("--modes", default="none,ssl,mpa,mpa+ssl")
    s.set_defaults(fn=cmd_pipeline)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
