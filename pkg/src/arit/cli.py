"""Command-line entry point: ``arit <subcommand> [options]``.

Configuration is layered: built-in defaults, then an optional TOML file
(``--config``), then ``--set key=value`` overrides, then the explicit flags of
each subcommand. Every key is dotted (``train.epochs``, ``corruptions.policy.seed``)
and unknown keys are rejected. The resolved config and its hash are echoed
into every output.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from arit.corruptions import KINDS, CorruptionPolicy, build_benchmark, write_spec_log
from arit.downstream import DepthNetSpec
from arit.errors import AritError, ConfigError, DataError
from arit.imagecore import camera_intrinsics, generate_lumen_dataset, list_images, read_dataset, read_png, write_dataset, write_png
from arit.imagecore.io import FRAME_NAME, frame_id_of
from arit.metrics import MetricReport, fid, kendall_tau, kid, psnr, ssim
from arit.pipeline import (
    VARIANTS,
    Benchmark,
    bottleneck_rows,
    depth_comparison,
    mean_feature_distance,
    registration_comparison,
    translation_scores,
    variant_config,
)
from arit.report import emit_report
from arit.splatting import PseudoLabelConfig, default_embedder, generate_pseudo_labels
from arit.trainer import TrainConfig, TrainingData, fast_model, load_state, save_state, train, translate
from arit.translation import LossWeights, ModelConfig

log = logging.getLogger("arit")

DEFAULTS: dict[str, object] = {
    "data.seed": 0,
    "data.frames": 700,
    "data.resolution": 64,
    "corruptions.policy.seed": 0,
    "corruptions.policy.severity_min": 1,
    "corruptions.policy.severity_max": 5,
    "corruptions.policy.intensity_min": 0.5,
    "corruptions.policy.intensity_max": 1.0,
    "pseudo.split": "train",
    "pseudo.stride": 2,
    "pseudo.steps": 200,
    "pseudo.step_size": 0.05,
    "pseudo.style_weight": 1.0,
    "train.variant": "full",
    "train.profile": "fast",
    "train.epochs": 20,
    "train.batch_size": 8,
    "train.lr_g": 2e-4,
    "train.lr_d": 2e-4,
    "train.seed": 0,
    "train.checkpoint_interval": 0,
    "loss.lam_cyc": 10.0,
    "loss.lam_pair": 1.0,
    "loss.lam_nce": 1.0,
    "loss.n_patches": 64,
    "loss.n_negatives": 64,
    "loss.tau": 0.07,
    "translate.split": "test",
    "depth.epochs": 10,
    "depth.base_channels": 16,
    "depth.lr": 1e-3,
    "depth.batch_size": 16,
    "depth.seed": 0,
    "register.threshold_mm": 5.0,
    "bottleneck.severity": 3,
    "bottleneck.seed": 0,
    "bottleneck.split": "test",
    "ablate.seeds": [0, 1, 2],
    "ablate.variants": ["full", "decoupling", "baseline"],
    "report.formats": ["json", "csv", "png"],
}

PROFILES = ("fast", "full")


# --------------------------------------------------------------------------- config


def _flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        kind = type(default[0])
        ok = isinstance(value, list) and all(isinstance(x, kind) and not isinstance(x, bool) for x in value)
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")
    return value


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text  # bare strings need no quotes on the command line


@dataclasses.dataclass
class RunConfig:
    values: dict

    @classmethod
    def resolve(cls, config_file=None, overrides=(), flags=None) -> "RunConfig":
        values = dict(DEFAULTS)
        layers = []
        if config_file:
            try:
                with open(config_file, "rb") as fh:
                    layers.append(_flatten(tomllib.load(fh)))
            except FileNotFoundError as exc:
                raise ConfigError(f"config file not found: {config_file}") from exc
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{config_file}: {exc}") from exc
        sets = {}
        for item in overrides:
            key, sep, text = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            sets[key.strip()] = _parse_value(text.strip())
        layers.append(sets)
        layers.append({k: v for k, v in (flags or {}).items() if v is not None})
        for layer in layers:
            unknown = sorted(set(layer) - set(DEFAULTS))
            if unknown:
                raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
            values.update({k: _coerce(k, v) for k, v in layer.items()})
        cfg = cls(values)
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.values[key]

    def validate(self) -> None:
        if self["train.profile"] not in PROFILES:
            raise ConfigError(f"train.profile must be one of {PROFILES}")
        for name in [self["train.variant"], *self["ablate.variants"]]:
            if name not in VARIANTS:
                raise ConfigError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}")
        if self["bottleneck.severity"] not in range(1, 6):
            raise ConfigError("bottleneck.severity must lie in 1..5")
        if not set(self["report.formats"]) <= {"json", "csv", "png"}:
            raise ConfigError("report.formats accepts json, csv and png")
        try:
            self.policy()
            self.train_config()
        except DataError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def digest(self) -> str:
        blob = json.dumps(self.values, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def metadata(self) -> dict:
        return {"config": self.values, "config_hash": self.digest}

    # typed views for the library layers
    def policy(self) -> CorruptionPolicy:
        return CorruptionPolicy(
            seed=self["corruptions.policy.seed"],
            severity_range=(self["corruptions.policy.severity_min"], self["corruptions.policy.severity_max"]),
            intensity_range=(self["corruptions.policy.intensity_min"], self["corruptions.policy.intensity_max"]),
        )

    def pseudo_config(self) -> PseudoLabelConfig:
        return PseudoLabelConfig(
            stride=self["pseudo.stride"], steps=self["pseudo.steps"],
            step_size=self["pseudo.step_size"], style_weight=self["pseudo.style_weight"],
        )

    def train_config(self, variant: str | None = None, seed: int | None = None) -> TrainConfig:
        model = fast_model() if self["train.profile"] == "fast" else ModelConfig()
        weights = LossWeights(
            lam_cyc=self["loss.lam_cyc"], lam_pair=self["loss.lam_pair"], lam_nce=self["loss.lam_nce"],
            n_patches=self["loss.n_patches"], n_negatives=self["loss.n_negatives"], tau=self["loss.tau"],
        )
        base = TrainConfig(
            model=model, weights=weights, epochs=self["train.epochs"], batch_size=self["train.batch_size"],
            lr_g=self["train.lr_g"], lr_d=self["train.lr_d"],
            seed=self["train.seed"] if seed is None else seed,
            checkpoint_interval=self["train.checkpoint_interval"],
        )
        return variant_config(variant or self["train.variant"], base)

    def depth_spec(self) -> DepthNetSpec:
        return DepthNetSpec(
            base_channels=self["depth.base_channels"], epochs=self["depth.epochs"], lr=self["depth.lr"],
            batch_size=self["depth.batch_size"], seed=self["depth.seed"],
        )


def write_sidecar(directory, cfg: RunConfig, command: str) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    body = {"command": command, **cfg.metadata()}
    (directory / "run_config.json").write_text(json.dumps(body, sort_keys=True, indent=2) + "\n")


def _emit(report: MetricReport, stem, cfg: RunConfig, label_key=None, chart_keys=None) -> dict:
    report.metadata.update(cfg.metadata())
    written = emit_report(report, stem, cfg["report.formats"], label_key=label_key, chart_keys=chart_keys)
    for path in written.values():
        print(path)
    return written


# --------------------------------------------------------------------------- helpers


def _read_images(directory) -> dict[str, np.ndarray]:
    paths = list_images(directory)
    if not paths:
        raise DataError(f"no PNG images in {directory}")
    return {p.name: read_png(p) for p in paths}


def _read_labels(directory) -> dict[int, np.ndarray]:
    labels = {}
    for p in list_images(directory):
        fid_ = frame_id_of(p)
        if fid_ is not None:
            labels[fid_] = read_png(p)
    if not labels:
        raise DataError(f"no frame_XXXXXX.png pseudo-labels in {directory}")
    return labels


def _split(samples, manifest, name):
    if name not in manifest.splits:
        raise DataError(f"dataset has no {name!r} split")
    ids = set(manifest.splits[name])
    return [s for s in samples if s.frame_id in ids]


def _training_data(samples, manifest, labels) -> TrainingData:
    val = _split(samples, manifest, "val") if manifest.splits.get("val") else None
    return TrainingData.from_samples(_split(samples, manifest, "train"), labels, val or None)


def _state(path):
    return load_state(path) if path else None


# --------------------------------------------------------------------------- subcommands


def cmd_gen_data(args, cfg: RunConfig):
    samples, manifest = generate_lumen_dataset(cfg["data.seed"], cfg["data.frames"], cfg["data.resolution"])
    write_dataset(args.out, samples, manifest)
    write_sidecar(args.out, cfg, "gen-data")
    print(Path(args.out) / "manifest.json")


def cmd_corrupt(args, cfg: RunConfig):
    samples, manifest = read_dataset(args.data)
    corrupted, spec_log = build_benchmark(samples, cfg.policy())
    write_dataset(args.out, corrupted, manifest)
    write_spec_log(Path(args.out) / "corruptions.jsonl", [{**e, "config_hash": cfg.digest} for e in spec_log])
    write_sidecar(args.out, cfg, "corrupt")
    print(Path(args.out) / "manifest.json")


def cmd_pseudo(args, cfg: RunConfig):
    samples, manifest = read_dataset(args.data)
    samples = _split(samples, manifest, cfg["pseudo.split"])
    # style target is the (corrupted) real image of the same frame
    refs = {s.frame_id: s.real_image for s in samples}
    labels = generate_pseudo_labels(samples, refs, camera_intrinsics(manifest), cfg.pseudo_config())
    for frame_id, img in sorted(labels.items()):
        write_png(Path(args.out) / f"{FRAME_NAME.format(frame_id)}.png", img)
    write_sidecar(args.out, cfg, "pseudo")
    print(args.out)


def cmd_train(args, cfg: RunConfig):
    samples, manifest = read_dataset(args.data)
    labels = _read_labels(args.pseudo) if args.pseudo else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "log.jsonl"
    log_path.unlink(missing_ok=True)  # a rerun rewrites the log instead of appending
    tag = {"config_hash": cfg.digest}
    state, _ = train(
        cfg.train_config(), _training_data(samples, manifest, labels), log_path=log_path,
        checkpoint_dir=out / "checkpoints", progress=lambda r: log.info("epoch %d %s", r["epoch"], r["losses"]),
        metadata=tag,
    )
    save_state(out / "model.arit", state, cfg.metadata())
    write_sidecar(out, cfg, "train")
    print(out / "model.arit")


def cmd_translate(args, cfg: RunConfig):
    state = load_state(args.checkpoint)
    src = Path(args.input)
    if (src / "manifest.json").is_file():
        samples, manifest = read_dataset(src, cfg["translate.split"])
        names = [f"{FRAME_NAME.format(s.frame_id)}.png" for s in samples]
        images = [s.real_image for s in samples]
    else:
        found = _read_images(src)
        names, images = list(found), list(found.values())
    for name, img in zip(names, translate(state, images)):
        write_png(Path(args.out) / name, img)
    write_sidecar(args.out, cfg, "translate")
    print(args.out)


def cmd_eval(args, cfg: RunConfig):
    pred, ref = _read_images(args.pred), _read_images(args.ref)
    if set(pred) != set(ref):
        missing = sorted(set(pred) ^ set(ref))[:5]
        raise DataError(f"prediction and reference directories hold different files, e.g. {missing}")
    names = sorted(pred)
    per = {"name": names, "psnr": [psnr(pred[n], ref[n]) for n in names], "ssim": [ssim(pred[n], ref[n]) for n in names]}
    scalars = {"psnr": float(np.mean(per["psnr"])), "ssim": float(np.mean(per["ssim"]))}
    if len(names) >= 2 and len({pred[n].shape for n in names}) == 1:
        emb = default_embedder()
        fa, fb = emb([pred[n] for n in names]), emb([ref[n] for n in names])
        scalars.update(fid=fid(fa, fb), kid=kid(fa, fb))
    _emit(MetricReport(scalars, per), args.out, cfg, label_key="name")


def cmd_depth_eval(args, cfg: RunConfig):
    samples, manifest = read_dataset(args.data)
    test = _split(samples, manifest, "test")
    out = depth_comparison(_state(args.checkpoint), _split(samples, manifest, "train"), test, cfg.depth_spec())
    scalars, per = {}, {"frame_id": [s.frame_id for s in test]}
    for mode, rep in out.items():
        scalars.update({f"{k}_{mode}": v for k, v in rep.scalars.items()})
        per.update({f"{k}_{mode}": v for k, v in rep.per_item.items()})
    _emit(MetricReport(scalars, per), args.out, cfg, label_key="frame_id")


def cmd_register(args, cfg: RunConfig):
    samples, manifest = read_dataset(args.data)
    test = _split(samples, manifest, "test")
    out = registration_comparison(_state(args.checkpoint), test, cfg["register.threshold_mm"])
    scalars, per = {}, {"frame_id": [s.frame_id for s in test]}
    for mode, rep in out.items():
        scalars[f"recall_{mode}"] = rep.scalars["recall"]
        per.update({f"{k}_{mode}": v for k, v in rep.per_item.items()})
    _emit(MetricReport(scalars, per), args.out, cfg, label_key="frame_id", chart_keys=[k for k in per if k.startswith("distance")])


def cmd_bottleneck(args, cfg: RunConfig):
    samples, manifest = read_dataset(args.data)
    bench = Benchmark(samples, samples, manifest, [])
    state = load_state(args.checkpoint)
    rows = bottleneck_rows(state, bench, KINDS, cfg["bottleneck.severity"], cfg["bottleneck.split"], cfg["bottleneck.seed"])
    per = {k: [r[k] for r in rows] for k in ("kind", "feature_map_distance", "psnr")}
    tau, p = kendall_tau(per["feature_map_distance"], per["psnr"])
    _emit(MetricReport({"kendall_tau": tau, "p_value": p}, per), args.out, cfg, label_key="kind")


def cmd_ablate(args, cfg: RunConfig):
    clean, manifest = read_dataset(args.data)
    corrupted, spec_log = build_benchmark(clean, cfg.policy())
    bench = Benchmark(clean, corrupted, manifest, spec_log)
    out = Path(args.out)
    if args.pseudo:
        labels = _read_labels(args.pseudo)
    else:
        train_split = bench.split("train")
        refs = {s.frame_id: s.real_image for s in train_split}
        labels = generate_pseudo_labels(train_split, refs, camera_intrinsics(manifest), cfg.pseudo_config())
        for frame_id, img in sorted(labels.items()):
            write_png(out / "pseudo" / f"{FRAME_NAME.format(frame_id)}.png", img)
    data = _training_data(corrupted, manifest, labels)
    clean_test = [s.real_image for s in bench.split("test", corrupted=False)]
    noisy_test = [s.real_image for s in bench.split("test")]
    runs = []
    for variant in cfg["ablate.variants"]:
        for seed in cfg["ablate.seeds"]:
            run_dir = out / "runs" / f"{variant}_s{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            (run_dir / "log.jsonl").unlink(missing_ok=True)
            state, _ = train(cfg.train_config(variant, seed), data, log_path=run_dir / "log.jsonl", metadata={"config_hash": cfg.digest})
            save_state(run_dir / "model.arit", state, cfg.metadata())
            row = {"variant": variant, "seed": seed, **translation_scores(state, bench)}
            row["feature_map_distance"] = mean_feature_distance(state, clean_test, noisy_test)
            log.info("%s", row)
            runs.append(row)
    metrics = ("fid", "kid", "psnr", "ssim", "feature_map_distance")
    variants = list(cfg["ablate.variants"])
    per = {"variant": variants}
    scalars = {}
    for m in metrics:
        means = [float(np.mean([r[m] for r in runs if r["variant"] == v])) for v in variants]
        per[f"{m}_mean"] = means
        scalars.update({f"{m}_{v}": x for v, x in zip(variants, means)})
    report = MetricReport(scalars, per, {"runs": runs})
    _emit(report, out / "ablation", cfg, label_key="variant")


# --------------------------------------------------------------------------- parser


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="arit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    def command(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="TOML file with dotted keys")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        p.set_defaults(fn=fn, flags={})
        return p

    def flag(p, opt, key, type_, help_=None):
        p.add_argument(opt, dest=key, type=type_, default=None, help=help_ or f"shortcut for {key}")
        p.set_defaults(flags={**p.get_default("flags"), key: None})

    p = command("gen-data", cmd_gen_data, "render a procedural lumen dataset")
    flag(p, "--seed", "data.seed", int)
    flag(p, "--frames", "data.frames", int)
    flag(p, "--resolution", "data.resolution", int)
    p.add_argument("--out", required=True)

    p = command("corrupt", cmd_corrupt, "apply the two-corruption policy to every real image")
    flag(p, "--seed", "corruptions.policy.seed", int)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = command("pseudo", cmd_pseudo, "render artifact-free pseudo-labels by gaussian splatting")
    p.add_argument("--data", required=True, help="corrupted dataset directory")
    p.add_argument("--out", required=True)

    p = command("train", cmd_train, "train a translation model")
    flag(p, "--variant", "train.variant", str)
    flag(p, "--epochs", "train.epochs", int)
    flag(p, "--seed", "train.seed", int)
    p.add_argument("--data", required=True, help="corrupted dataset directory")
    p.add_argument("--pseudo", help="pseudo-label directory (required by two-stage variants)")
    p.add_argument("--out", required=True)

    p = command("translate", cmd_translate, "translate real images to the virtual domain")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="dataset directory or flat PNG directory")
    p.add_argument("--out", required=True)

    p = command("eval", cmd_eval, "PSNR/SSIM (and FID/KID) of paired image directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True, help="report path stem")

    p = command("depth-eval", cmd_depth_eval, "depth errors on raw vs translated test images")
    p.add_argument("--data", required=True, help="corrupted dataset directory")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True, help="report path stem")

    p = command("register", cmd_register, "retrieval recall on raw vs translated test queries")
    flag(p, "--threshold", "register.threshold_mm", float)
    p.add_argument("--data", required=True, help="corrupted dataset directory")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True, help="report path stem")

    p = command("bottleneck", cmd_bottleneck, "feature-map distance and PSNR per corruption kind")
    flag(p, "--severity", "bottleneck.severity", int)
    p.add_argument("--data", required=True, help="clean dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="report path stem")

    p = command("ablate", cmd_ablate, "train and score baseline / +decoupling / full")
    flag(p, "--epochs", "train.epochs", int)
    p.add_argument("--data", required=True, help="clean dataset directory")
    p.add_argument("--pseudo", help="precomputed pseudo-label directory")
    p.add_argument("--out", required=True)
    return parser


def _threads() -> int:
    text = os.environ.get("ARIT_THREADS")
    if text is None:
        return os.cpu_count() or 1
    try:
        n = int(text)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"ARIT_THREADS must be a positive integer, got {text!r}")
    return n


def run(argv=None) -> int:
    """Parse ``argv`` and execute one subcommand. Returns the process exit code."""
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        torch.set_num_threads(_threads())
        flags = {k: getattr(args, k) for k in args.flags}
        cfg = RunConfig.resolve(args.config, args.set, flags)
        args.fn(args, cfg)
    except AritError as exc:
        print(f"arit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"arit: DataError: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
