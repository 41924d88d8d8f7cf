"""``nsn2n`` command line: synth, corrupt, pairs, train, denoise, eval, report, pipeline.

Stages talk to each other only through files. Every command accepts
``--config`` pointing at a JSON file with optional sections ``phantom``,
``noise``, ``lpf``, ``train`` and ``model`` whose keys are the fields of the
matching dataclass. Values resolve as command-line flag, then config file,
then built-in default. Exit status is 0 on success, 2 for invalid input and
3 when a run fails (divergence, corrupt file).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from contextlib import nullcontext
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import CorruptFileError, DivergedError
from .filters import LpfParams
from .metrics import evaluate_volume
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .pairing import (
    DEFAULT_THRESHOLDS,
    build_training_set,
    load_training_set,
    parse_threshold,
    save_training_set,
    weight_diagnostics,
)
from .synth import NoiseSpec, PhantomSpec, add_noise, make_phantom, overlap_fractions
from .train import ABLATIONS, HISTORY_COLUMNS, TrainConfig, TrainHistory, denoise_volume, train
from .volume import load_volume, save_volume

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_FAILED = 3

SECTIONS = {
    "phantom": PhantomSpec,
    "noise": NoiseSpec,
    "lpf": LpfParams,
    "train": TrainConfig,
    "model": ModelConfig,
}


class UsageError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    """Everything one experiment needs, validated as a whole."""

    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    lpf: LpfParams = field(default_factory=LpfParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    threads: int | None = None
    workdir: str | None = None


def read_config_file(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    unknown = set(data) - set(SECTIONS) - {"threads", "workdir"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    for name, cls in SECTIONS.items():
        section = data.get(name, {})
        if not isinstance(section, dict):
            raise UsageError(f"config section {name!r} must be an object")
        bad = set(section) - {f.name for f in fields(cls)}
        if bad:
            raise UsageError(f"unknown keys in config section {name!r}: {sorted(bad)}")
    return data


def resolve_config(file_config: dict, overrides: dict, noise_known: bool = False) -> RunConfig:
    """Merge defaults, the config file and ``{section: {field: value}}`` flag overrides.

    When the noise level is known (set explicitly, or ``noise_known``), LPF
    fields fall back to :meth:`LpfParams.for_noise_level` and the threshold to
    the level's entry in ``DEFAULT_THRESHOLDS`` instead of the plain defaults.
    """
    merged = {}
    for name in SECTIONS:
        values = dict(file_config.get(name, {}))
        values.update({k: v for k, v in overrides.get(name, {}).items() if v is not None})
        merged[name] = values

    def build(name, **base):
        cls = SECTIONS[name]
        try:
            return cls(**{**base, **merged[name]})
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid {name} settings: {exc}") from None

    noise = build("noise")
    noise_known = noise_known or "level" in merged["noise"]
    lpf_base = {}
    if noise_known and noise.level > 0:
        derived = LpfParams.for_noise_level(noise.level)
        lpf_base = {"h": derived.h, "sigma": derived.sigma}
    train_base = {}
    if noise_known and noise.level in DEFAULT_THRESHOLDS:
        train_base["th"] = DEFAULT_THRESHOLDS[noise.level]
    threads = overrides.get("threads")
    if threads is None:
        threads = file_config.get("threads")
    if threads is not None and int(threads) < 1:
        raise UsageError("--threads must be >= 1")
    return RunConfig(
        phantom=build("phantom"),
        noise=noise,
        lpf=build("lpf", **lpf_base),
        train=build("train", **train_base),
        model=build("model"),
        threads=None if threads is None else int(threads),
        workdir=overrides.get("workdir") or file_config.get("workdir"),
    )


def _thread_limit(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# --------------------------------------------------------------------------
# argument parsing


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _threshold(text):
    try:
        return parse_threshold(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


# (flag, section, field, type, help)
PHANTOM_FLAGS = [
    ("--width", "phantom", "width", int, "slice width in pixels"),
    ("--height", "phantom", "height", int, "slice height in pixels"),
    ("--depth", "phantom", "depth", int, "number of slices"),
    ("--n-shapes", "phantom", "n_shapes", int, "nesting depth of the ellipses"),
    ("--drift", "phantom", "drift", float, "centre drift per slice, fraction of the extent"),
    ("--intensities", "phantom", "levels", _float_list, "comma-separated tissue intensities"),
]
NOISE_FLAGS = [
    ("--model", "noise", "model", str, "gaussian, rician or correlated"),
    ("--level", "noise", "level", float, "noise std as a fraction of the clean maximum"),
    ("--half-width", "noise", "half_width", int, "box half-width of correlated noise"),
]
LPF_FLAGS = [
    ("--nlm-h", "lpf", "h", float, "NLM filtering strength"),
    ("--nlm-sigma", "lpf", "sigma", float, "noise estimate subtracted from patch distances"),
    ("--patch-radius", "lpf", "patch_radius", int, "NLM patch radius"),
    ("--search-radius", "lpf", "search_radius", int, "NLM search radius"),
    ("--median-size", "lpf", "median_size", int, "median kernel size"),
]
TRAIN_FLAGS = [
    ("--epochs", "train", "epochs", int, "training epochs"),
    ("--lambda-rc", "train", "lambda_rc", float, "weight of the regional consistency loss"),
    ("--lambda-ic", "train", "lambda_ic", float, "weight of the inter-slice continuity loss"),
    ("--lr", "train", "base_lr", float, "initial learning rate"),
    ("--lr-step", "train", "lr_step", int, "epochs between learning-rate halvings"),
    ("--checkpoint-every", "train", "checkpoint_every", int, "epochs between checkpoints (0: never)"),
]
MODEL_FLAGS = [
    ("--unet-levels", "model", "levels", int, "U-Net resolution levels"),
    ("--base-channels", "model", "base_channels", int, "channels at full resolution"),
]
TH_FLAG = ("--th", "train", "th", _threshold, "residual threshold for matched pixels ('inf' allowed)")


def _add_flags(parser, table):
    for flag, _, dest_field, typ, help_ in table:
        parser.add_argument(
            flag,
            dest=f"opt_{dest_field}_{flag.strip('-')}",
            metavar=flag.strip("-").upper().replace("-", "_"),
            type=typ,
            default=None,
            help=help_,
        )


def _collect(args, tables, seed_section=None):
    overrides = {name: {} for name in SECTIONS}
    for table in tables:
        for flag, section, dest_field, _, _ in table:
            value = getattr(args, f"opt_{dest_field}_{flag.strip('-')}", None)
            if value is not None:
                overrides[section][dest_field] = value
    seed = getattr(args, "seed", None)
    if seed is not None:
        for section in [seed_section] if isinstance(seed_section, str) else seed_section or []:
            overrides[section]["seed"] = seed
    if getattr(args, "ablate", None):
        for name in args.ablate:
            overrides["train"][ABLATIONS[name]] = False
    if getattr(args, "deterministic", None) is not None:
        overrides["train"]["deterministic"] = args.deterministic
    overrides["threads"] = getattr(args, "threads", None)
    overrides["workdir"] = getattr(args, "workdir", None)
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nsn2n", description="Self-supervised denoising of slice volumes from neighbouring slices."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file (flags override it)")
        p.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
        return p

    p = command("synth", "write a clean piecewise-constant phantom")
    p.add_argument("--out", required=True, help="output volume header (.json)")
    p.add_argument("--seed", type=int)
    _add_flags(p, PHANTOM_FLAGS)

    p = command("corrupt", "add synthetic noise to a volume")
    p.add_argument("--in", dest="input", required=True, help="input volume")
    p.add_argument("--out", required=True, help="output volume")
    p.add_argument("--seed", type=int)
    _add_flags(p, NOISE_FLAGS)

    p = command("pairs", "build neighbouring-slice weight maps")
    p.add_argument("--in", dest="input", required=True, help="noisy volume")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--noise-level", type=float, help="derive NLM strength and noise estimate from this level")
    p.add_argument("--sweep", type=_float_list, help="comma-separated thresholds; writes diagnostics only")
    _add_flags(p, [TH_FLAG, *LPF_FLAGS])

    p = command("train", "train a denoiser on one noisy volume")
    p.add_argument("--in", dest="input", required=True, help="noisy volume")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--pairs", help="training-set directory from 'pairs' (otherwise built here)")
    p.add_argument("--clean", help="clean volume; enables per-epoch PSNR")
    p.add_argument("--noise-level", type=float, help="derive NLM strength and noise estimate from this level")
    p.add_argument("--seed", type=int)
    p.add_argument("--ablate", action="append", choices=sorted(ABLATIONS), help="switch off a loss component")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                   help="single-threaded BLAS and zeroed timings (default on)")
    _add_flags(p, [TH_FLAG, *TRAIN_FLAGS, *MODEL_FLAGS, *LPF_FLAGS])

    p = command("denoise", "denoise a volume with a trained model")
    p.add_argument("--model", dest="checkpoint", required=True, help="checkpoint (.json)")
    p.add_argument("--in", dest="input", required=True, help="noisy volume")
    p.add_argument("--out", required=True, help="output volume")

    p = command("eval", "PSNR/SSIM of a volume against ground truth")
    p.add_argument("--pred", required=True, help="volume to score")
    p.add_argument("--truth", required=True, help="ground-truth volume")
    p.add_argument("--out", help="metrics JSON")
    p.add_argument("--csv", help="per-slice metrics CSV")
    p.add_argument("--data-range", type=float, default=1.0)

    p = command("report", "merge training histories into one per-epoch table")
    p.add_argument("--history", nargs="+", required=True, help="history CSVs, optionally as LABEL=PATH")
    p.add_argument("--out", required=True, help="output CSV")

    p = command("pipeline", "run synth, corrupt, pairs, train, denoise, eval and report in one go")
    p.add_argument("--workdir", help="directory for every stage's output")
    p.add_argument("--seed", type=int, help="seed for phantom, noise and training")
    p.add_argument("--ablate", action="append", choices=sorted(ABLATIONS))
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    _add_flags(p, [TH_FLAG, *NOISE_FLAGS, *TRAIN_FLAGS])
    return parser


# --------------------------------------------------------------------------
# commands


def _existing(path, what):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _with_noise_level(overrides, level):
    if level is not None:
        if not level > 0:
            raise UsageError("--noise-level must be > 0")
        overrides["noise"].setdefault("level", level)


def cmd_synth(args, cfg: RunConfig):
    vol = make_phantom(cfg.phantom)
    save_volume(vol, args.out)
    frac = overlap_fractions(vol)
    print(f"wrote {args.out}: {vol.width}x{vol.height}x{vol.depth}")
    print(f"overlap between neighbouring slices: min {frac.min():.3f}, mean {frac.mean():.3f}")


def cmd_corrupt(args, cfg: RunConfig):
    vol = load_volume(args.input)
    save_volume(add_noise(vol, cfg.noise), args.out)
    print(f"wrote {args.out}: {cfg.noise.model} noise at level {cfg.noise.level:g}")


def cmd_pairs(args, cfg: RunConfig):
    vol = load_volume(args.input)
    out = Path(args.out)
    if args.sweep:
        rows = weight_diagnostics(vol, cfg.lpf, args.sweep, out_dir=out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "diagnostics.json").write_text(json.dumps(
            [{**r, "th": "inf" if r["th"] == float("inf") else r["th"]} for r in rows], indent=2) + "\n")
        print(f"{'th':>8}  {'matched':>8}  {'min pair':>8}  {'max pair':>8}")
        for r in rows:
            print(f"{r['th']:>8g}  {r['matched_fraction']:>8.3f}  "
                  f"{r['min_pair_fraction']:>8.3f}  {r['max_pair_fraction']:>8.3f}")
        return
    pairs = build_training_set(vol, cfg.train.th, cfg.lpf)
    save_training_set(pairs, out, cfg.train.th, cfg.lpf, volume_path=Path(args.input).resolve())
    mean = sum(p.matched_fraction for p in pairs) / len(pairs)
    print(f"wrote {len(pairs)} pairs to {out}: th {cfg.train.th:g}, mean matched fraction {mean:.3f}")


def run_training(noisy, cfg: RunConfig, out, clean=None, pairs=None, quiet=False):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(r):
        if quiet:
            return
        line = f"epoch {r['epoch']:3d}/{cfg.train.epochs}  lr {r['lr']:.2e}  loss {r['loss_total']:.5f}"
        if r["psnr"] is not None:
            line += f"  psnr {r['psnr']:.2f}"
        print(line, flush=True)

    model, history = train(
        noisy, cfg.train, cfg.model, cfg.lpf,
        clean=clean, pairs=pairs, checkpoint_dir=out / "checkpoints", progress=progress,
    )
    save_checkpoint(out / "model.json", model, epoch=cfg.train.epochs)
    history.write_csv(out / "history.csv")
    history.write_json(out / "history.json")
    (out / "config.json").write_text(json.dumps(_config_dict(cfg), indent=2) + "\n")
    return model, history


def _config_dict(cfg: RunConfig):
    return {
        "noise": cfg.noise.to_dict(),
        "lpf": cfg.lpf.to_dict(),
        "train": cfg.train.to_dict(),
        "model": {f.name: getattr(cfg.model, f.name) for f in fields(ModelConfig)},
    }


def cmd_train(args, cfg: RunConfig):
    noisy = load_volume(args.input)
    clean = load_volume(args.clean) if args.clean else None
    pairs = None
    if args.pairs:
        pairs, manifest = load_training_set(_existing(args.pairs, "training set"), noisy)
        th = manifest["th"]
        cfg = replace(cfg, train=replace(cfg.train, th=th), lpf=LpfParams.from_dict(manifest["lpf"]))
    run_training(noisy, cfg, args.out, clean=clean, pairs=pairs)
    print(f"wrote {Path(args.out) / 'model.json'} and history.csv")


def cmd_denoise(args, cfg: RunConfig):
    model, _ = load_checkpoint(args.checkpoint)
    vol = load_volume(args.input)
    d = model.config.divisor
    if vol.height % d or vol.width % d:
        raise UsageError(f"slice sides {vol.height}x{vol.width} must be divisible by {d} for this model")
    save_volume(denoise_volume(model, vol), args.out)
    print(f"wrote {args.out}")


def cmd_eval(args, cfg: RunConfig):
    pred = load_volume(args.pred)
    truth = load_volume(args.truth)
    if pred.shape != truth.shape:
        raise UsageError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    report = evaluate_volume(pred, truth, args.data_range)
    if args.out:
        report.write_json(args.out)
    if args.csv:
        report.write_csv(args.csv)
    print(report.summary())
    return report


def merge_histories(sources) -> list[dict]:
    """One row per epoch with ``<label>_<column>`` for every history."""
    tables = []
    for label, path in sources:
        tables.append((label, TrainHistory.read_csv(path)))
    epochs = sorted({r["epoch"] for _, h in tables for r in h})
    rows = []
    for e in epochs:
        row = {"epoch": e}
        for label, h in tables:
            match = next((r for r in h if r["epoch"] == e), {})
            for c in HISTORY_COLUMNS[1:]:
                row[f"{label}_{c}"] = match.get(c)
        rows.append(row)
    return rows


def _history_sources(items):
    sources = []
    for item in items:
        label, sep, path = item.partition("=")
        if not sep:
            path = item
            p = Path(item)
            label = p.parent.name if p.stem == "history" and p.parent.name else p.stem
        sources.append((label, _existing(path, "history file")))
    labels = [s[0] for s in sources]
    if len(set(labels)) != len(labels):
        raise UsageError("history labels must be unique; use LABEL=PATH")
    return sources


def write_report(sources, out):
    rows = merge_histories(sources)
    header = ["epoch"] + [f"{label}_{c}" for label, _ in sources for c in HISTORY_COLUMNS[1:]]
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow(["" if r[k] is None else r[k] for k in header])
    return rows


def cmd_report(args, cfg: RunConfig):
    rows = write_report(_history_sources(args.history), args.out)
    print(f"wrote {args.out}: {len(rows)} epochs")


def cmd_pipeline(args, cfg: RunConfig):
    work = Path(cfg.workdir or "nsn2n-run")
    work.mkdir(parents=True, exist_ok=True)
    (work / "config.json").write_text(json.dumps(
        {"phantom": cfg.phantom.to_dict(), **_config_dict(cfg)}, indent=2) + "\n")
    clean = make_phantom(cfg.phantom)
    save_volume(clean, work / "clean.json")
    noisy = add_noise(clean, cfg.noise)
    save_volume(noisy, work / "noisy.json")
    pairs = build_training_set(noisy, cfg.train.th, cfg.lpf)
    save_training_set(pairs, work / "pairs", cfg.train.th, cfg.lpf, volume_path=(work / "noisy.json").resolve())
    print(f"pairs: {len(pairs)}, mean matched fraction "
          f"{sum(p.matched_fraction for p in pairs) / len(pairs):.3f}", flush=True)
    model, _ = run_training(noisy, cfg, work / "train", clean=clean, pairs=pairs)
    denoised = denoise_volume(model, noisy)
    save_volume(denoised, work / "denoised.json")
    base = evaluate_volume(noisy, clean)
    base.write_json(work / "metrics_noisy.json")
    report = evaluate_volume(denoised, clean)
    report.write_json(work / "metrics_denoised.json")
    report.write_csv(work / "metrics_denoised.csv")
    write_report([("run", work / "train" / "history.csv")], work / "report.csv")
    print(f"noisy:    {base.summary()}")
    print(f"denoised: {report.summary()}")


COMMANDS = {
    "synth": (cmd_synth, [PHANTOM_FLAGS], "phantom"),
    "corrupt": (cmd_corrupt, [NOISE_FLAGS], "noise"),
    "pairs": (cmd_pairs, [[TH_FLAG], LPF_FLAGS], None),
    "train": (cmd_train, [[TH_FLAG], TRAIN_FLAGS, MODEL_FLAGS, LPF_FLAGS], "train"),
    "denoise": (cmd_denoise, [], None),
    "eval": (cmd_eval, [], None),
    "report": (cmd_report, [], None),
    "pipeline": (cmd_pipeline, [[TH_FLAG], NOISE_FLAGS, TRAIN_FLAGS], ["phantom", "noise", "train"]),
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    fn, tables, seed_section = COMMANDS[args.command]
    try:
        for attr in ("input", "checkpoint", "pred", "truth"):
            if getattr(args, attr, None):
                _existing(getattr(args, attr), "input")
        overrides = _collect(args, tables, seed_section)
        _with_noise_level(overrides, getattr(args, "noise_level", None))
        cfg = resolve_config(
            read_config_file(args.config), overrides, noise_known=args.command == "pipeline"
        )
        with _thread_limit(cfg.threads):
            fn(args, cfg)
    except (DivergedError, CorruptFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
