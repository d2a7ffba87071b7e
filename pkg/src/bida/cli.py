"""Command-line entry point: ``bida gen-data | train | eval | gradcheck | ablate``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file-format
error, 3 numeric failure.  Every command writes a JSON run manifest holding
the command line, the resolved configuration, the SHA-256 digest of every
input file, the package version, the wall-clock time and the output paths.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import NOISE_KINDS, TrainConfig, tiny_config
from .errors import BidaError, CompatibilityError, ConfigError
from .evaluation import confusion, export_features, metrics, write_report
from .formats import write_labels
from .synthdata import extract_patches, label_path, make_domain_pair, normalize_bands, read_scene, write_scene
from .tokenizer import TARGET, PatchBatch

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("bida")

ABLATION_FLAGS = ("no_mmd", "no_distill", "no_ars", "no_coupled", "mca", "source_only", "patch_tokenizer")


class UsageError(BidaError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- manifest


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command: str, argv, config: dict | None, inputs, outputs, started: float):
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "inputs": {str(p): sha256(p) for p in inputs},
        "version": __version__,
        "wall_clock_seconds": time.time() - started,
        "outputs": [str(p) for p in outputs],
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


# ---------------------------------------------------------------- config


def load_config_file(path) -> dict:
    """TOML key/value file; the ``[noise]`` table configures the noise settings.

    A ``.json`` run manifest is accepted too: its resolved ``config`` block is
    replayed, which reproduces the recorded run.
    """
    try:
        with open(path, "rb") as fh:
            if str(path).endswith(".json"):
                data = json.load(fh)
                return dict(data.get("config") or {}) if "command" in data else data
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"config file {path}: {exc}") from None


def resolve_config(args, base: TrainConfig | None = None) -> TrainConfig:
    """defaults < config file < command-line flags."""
    d = (base or TrainConfig()).to_dict()
    if getattr(args, "config", None):
        file_cfg = load_config_file(args.config)
        noise = file_cfg.pop("noise", None)
        d.update(file_cfg)
        if noise is not None:
            d["noise"] = {**d["noise"], **noise}
    for key in ("tokens", "d_map", "depth", "heads", "lambda1", "lambda2", "lr", "batch_size", "epochs",
                "warmup_epochs", "ema_decay", "seed", "source_per_class", "target_pool"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    if getattr(args, "noise", None) is not None:
        kinds = tuple(k for k in args.noise.split(",") if k) if args.noise != "none" else ()
        d["noise"] = {**d["noise"], "kinds": kinds}
    if getattr(args, "noise_sigma", None) is not None:
        d["noise"] = {**d["noise"], "sigma": args.noise_sigma}
    for flag in ABLATION_FLAGS:
        if getattr(args, flag, False):
            d[flag] = True
    return TrainConfig.from_dict(d)


def _add_train_flags(p, tokens: bool = True):
    p.add_argument("--config", help="TOML file of TrainConfig keys ([noise] table), or a run manifest")
    if tokens:
        p.add_argument("--tokens", type=int)
    p.add_argument("--d-map", dest="d_map", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup-epochs", dest="warmup_epochs", type=int)
    p.add_argument("--ema-decay", dest="ema_decay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--source-per-class", dest="source_per_class", type=int)
    p.add_argument("--target-pool", dest="target_pool", type=int)
    p.add_argument("--noise", help=f"comma list from {','.join(NOISE_KINDS)}, or 'none'")
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    for flag in ABLATION_FLAGS:
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, action="store_true")


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, argv, started):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    source, targets = make_domain_pair(args.classes, args.size, args.bands, args.seed, args.targets)
    written = []
    for name, scene in [("source", source)] + [(f"target{k}", t) for k, t in enumerate(targets, 1)]:
        path = out / f"{name}.hsi"
        write_scene(scene, path)
        written += [path, label_path(path)]
    cfg = {k: getattr(args, k) for k in ("classes", "bands", "size", "targets", "seed")}
    write_manifest(out / "manifest.json", "gen-data", argv, cfg, [], written, started)
    print(f"wrote {len(written) // 2} scenes to {out}")
    return 0


def cmd_train(args, argv, started):
    from .trainer import Trainer, write_log

    cfg = resolve_config(args)
    source, target = read_scene(args.source), read_scene(args.target)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        tr = Trainer.load(args.resume, source, target)
        if args.epochs is not None:
            tr.cfg = tr.cfg.replace(epochs=args.epochs)
        cfg = tr.cfg
    else:
        tr = Trainer(cfg, source, target)
    while tr.epoch < cfg.epochs:
        row = tr.run_epoch()
        print(f"epoch {row['epoch']}: loss {row['loss_total']:.4f} target OA {row['target_oa']:.4f}"
              f" pseudo-labels {row['pseudo_count']}")
    ckpt, metrics_csv = out / "checkpoint.bida", out / "metrics.csv"
    tr.save(ckpt)
    write_log(tr.log, metrics_csv)
    inputs = [args.source, label_path(args.source), args.target, label_path(args.target)]
    if args.resume:
        inputs.append(args.resume)
    write_manifest(out / "manifest.json", "train", argv, cfg.to_dict(), inputs, [ckpt, metrics_csv], started)
    return 0


def cmd_eval(args, argv, started):
    from .trainer import load_model

    cfg, model, meta = load_model(args.checkpoint)
    scene = read_scene(args.target)
    if scene.bands != meta["bands"]:
        raise CompatibilityError(f"checkpoint expects {meta['bands']} bands, scene has {scene.bands}")
    if scene.labels.max() >= meta["classes"]:
        raise CompatibilityError(
            f"checkpoint expects {meta['classes']} classes, scene labels reach class {scene.labels.max()}"
        )
    if args.tokens is not None and args.tokens != cfg.tokens:
        raise CompatibilityError(f"checkpoint has {cfg.tokens} tokens, --tokens asked for {args.tokens}")
    domain = TARGET if cfg.adapts_target else "source"
    batch = extract_patches(normalize_bands(scene), patch=cfg.patch, domain=domain)
    probs = model.predict_proba(batch.data, domain)
    m = metrics(confusion(np.argmax(probs, axis=1), batch.labels, meta["classes"]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out.with_suffix(".csv")
    write_report(m, out, csv_path)
    outputs = [out, csv_path]
    if args.raster:
        raster = np.full(scene.labels.shape, -1, dtype=np.int32)
        coords = scene.labeled_coords()
        raster[coords[:, 0], coords[:, 1]] = np.argmax(probs, axis=1)
        write_labels(args.raster, raster)
        outputs.append(Path(args.raster))
    if args.export_features:
        export_features(model, PatchBatch(batch.data, batch.domain, batch.labels), args.export_features, domain)
        outputs.append(Path(args.export_features))
    inputs = [args.checkpoint, args.target, label_path(args.target)]
    write_manifest(Path(args.manifest or out.with_name(out.stem + ".manifest.json")), "eval", argv,
                   cfg.to_dict(), inputs, outputs, started)
    kappa = "undefined" if m.kappa is None else f"{m.kappa:.4f}"
    print(f"OA {m.oa:.4f}  KC {kappa}  " + "  ".join(f"CA{c} {v:.3f}" for c, v in m.ca.items()))
    return 0


def cmd_gradcheck(args, argv, started):
    from .trainer import gradient_check

    cfg = tiny_config()
    errs = gradient_check(cfg, bands=args.bands, classes=args.classes, seed=args.seed)
    groups: dict[str, float] = {}
    for name, err in errs.items():
        groups[name] = max(groups.get(name, 0.0), err)
    worst = max(groups.values())
    for name, err in groups.items():
        print(f"{'ok  ' if err < args.tolerance else 'FAIL'} {name:28s} {err:.3e}")
    verdict = worst < args.tolerance
    print(f"{'PASS' if verdict else 'FAIL'}: worst relative error {worst:.3e} (tolerance {args.tolerance:.1e})")
    if args.manifest:
        write_manifest(args.manifest, "gradcheck", argv, cfg.to_dict(), [], [], started)
    return 0 if verdict else 3


def cmd_ablate(args, argv, started):
    from .config import desk_protocol
    from .trainer import LADDERS, AblationRow, run_ablation, write_ablation

    cfg = resolve_config(args, desk_protocol())
    if args.source and args.target:
        source, target = read_scene(args.source), read_scene(args.target)
        inputs = [args.source, label_path(args.source), args.target, label_path(args.target)]
    elif args.source or args.target:
        raise UsageError("give both --source and --target, or neither")
    else:
        source, (target,) = make_domain_pair(seed=args.data_seed)
        inputs = []
    seeds = tuple(range(args.seeds))
    ladders = tuple(k for k in args.ladders.split(",") if k)
    unknown = set(ladders) - set(LADDERS)
    if unknown:
        raise UsageError(f"unknown ladders {sorted(unknown)}; choose from {sorted(LADDERS)}")

    def progress(ladder, name, seed, oa):
        print(f"{ladder:9s} {name:22s} seed {seed}: target OA {oa:.4f}", flush=True)

    rows = run_ablation(cfg, source, target, ladders, seeds, progress)
    if args.token_sweep:
        from .trainer import Trainer

        for L in (int(t) for t in args.token_sweep.split(",")):
            oas = []
            for seed in seeds:
                tr = Trainer(cfg.replace(tokens=L, seed=seed), source, target)
                tr.fit()
                oas.append(tr.log[-1]["target_oa"])
                progress("tokens", f"L={L}", seed, oas[-1])
            rows.append(AblationRow("tokens", f"L={L}", oas))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ablation(rows, out)
    for r in rows:
        print(f"{r.ladder:9s} {r.name:22s} mean target OA {100 * r.mean:6.2f}")
    write_manifest(out.with_name(out.stem + ".manifest.json"), "ablate", argv, cfg.to_dict(), inputs, [out], started)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bida", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"bida {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic source scene and shifted target scenes")
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--bands", type=int, default=32)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--targets", type=int, default=1)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train on a labelled source and an unlabelled target scene")
    t.add_argument("--source", required=True)
    t.add_argument("--target", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--resume", help="checkpoint to continue from")
    _add_train_flags(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a labelled target scene")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--target", required=True)
    e.add_argument("--out", required=True, help="metrics JSON path (a CSV mirror is written alongside)")
    e.add_argument("--tokens", type=int, help="expected token count (checked against the checkpoint)")
    e.add_argument("--raster", help="write predicted class ids as a label raster")
    e.add_argument("--export-features", dest="export_features", help="CSV of class-token features")
    e.add_argument("--manifest")

    c = sub.add_parser("gradcheck", help="finite-difference check of the total loss on the tiny config")
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--bands", type=int, default=6)
    c.add_argument("--classes", type=int, default=3)
    c.add_argument("--manifest")

    a = sub.add_parser("ablate", help="run the ablation ladders and write a table")
    a.add_argument("--source")
    a.add_argument("--target")
    a.add_argument("--data-seed", dest="data_seed", type=int, default=7,
                   help="scene seed of the generated scenario when no scenes are given")
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--ladders", default="loss,branch,noise,tokenizer")
    a.add_argument("--tokens", dest="token_sweep", help="comma list of token counts for a token-count sweep")
    a.add_argument("--out", required=True)
    _add_train_flags(a, tokens=False)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "ablate": cmd_ablate}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    started = time.time()
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("bida: a command is required (gen-data, train, eval, gradcheck, ablate)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return COMMANDS[args.command](args, argv, started)
    except BidaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
