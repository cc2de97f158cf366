"""Command-line entry point: ``mega {run,train,analyze,gen}``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
failure (including an analysis oracle disagreeing with its formula).

A config file is flat ``key = value`` text under a ``[pipeline]`` section;
keys are :class:`PipelineConfig` field names. Flags override file values.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import analysis
from .errors import ContractViolation, DataError, NumericError
from .pipeline import (ConfigError, MegaParams, PipelineConfig, TrainingVideo, make_codebook,
                       make_scene, run_video, synth_video, train)
from .pools import read_proposals_jsonl, write_proposals_jsonl

log = logging.getLogger("mega")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

FLAG_FIELDS = {  # flag dest -> PipelineConfig field
    "t_l": "T_l", "tau": "tau", "t_g": "T_g", "t_m": "T_m", "n_g": "N_g", "n_l": "N_l",
    "k_l": "K_l", "k_g": "K_g", "k_d": "K_d", "dim": "dim", "heads": "heads", "seed": "seed",
}
SYNTH_DEFAULTS = {"frames": 60, "classes": 3, "tracks": 2, "seed": None, "videos": 1,
                  "occluded": 0.45, "min_len": 3, "max_len": 12, "qlo": 0.2, "qhi": 0.45}


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict[str, Any]
    source: dict[str, Any]
    outputs: dict[str, str] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.config["seed"]

    @property
    def mode(self) -> str:
        return self.config["mode"]

    def to_dict(self) -> dict[str, Any]:
        return {"command": self.command, "config": self.config, "source": self.source,
                "outputs": self.outputs, "seed": self.seed, "mode": self.mode, **self.extra}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# ------------------------------------------------------------ parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key=value file, [pipeline] section")
    p.add_argument("--mode", choices=("base", "mega"))
    p.add_argument("--online", action="store_true", default=None)
    for flag in ("t-l", "tau", "t-g", "t-m", "n-g", "n-l", "k-l", "k-g", "k-d", "dim", "heads", "seed"):
        p.add_argument(f"--{flag}", type=int)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--input", type=Path, help="proposal stream (JSONL)")
    src.add_argument("--synthetic", metavar="SPEC",
                     help="'default' or comma-separated key=value (frames, classes, tracks, seed, videos, ...)")
    p.add_argument("--out", type=Path, default=Path("out"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mega", description="Memory-enhanced global-local video object detection")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    run = sub.add_parser("run", help="detect every frame of a video")
    _common(run)
    run.add_argument("--params", type=Path, help="parameter JSON written by `train`")

    tr = sub.add_parser("train", help="temporal-dropout training on synthetic videos")
    _common(tr)
    tr.add_argument("--steps", type=int, default=500)
    tr.add_argument("--lr", type=float, default=0.2)
    tr.add_argument("--batch-size", type=int, default=2)

    an = sub.add_parser("analyze", help="aggregation-size, receptive-field and cost reports")
    _common(an)
    an.add_argument("--sweep", default="N_l=1,2,3;T_m=0,2,4;T_l=3,5",
                    help="receptive-field sweep, e.g. 'N_l=1,2;T_m=0,4;T_l=3'")

    gen = sub.add_parser("gen", help="write a synthetic proposal stream")
    _common(gen)
    return parser


def _coerce(name: str, raw: str):
    ftype = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}[name]
    text = str(ftype)
    if "bool" in text:
        low = raw.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no"):
            raise ConfigError(name, f"expected a boolean, got {raw!r}")
        return low in ("1", "true", "yes")
    if "int" in text:
        if raw.strip().lower() == "none" and "None" in text:
            return None
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(name, f"expected an integer, got {raw!r}") from None
    if "float" in text:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(name, f"expected a number, got {raw!r}") from None
    return raw.strip()


def read_config_file(path: Path) -> dict[str, Any]:
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keep T_l distinct from t_l
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise DataError(f"cannot parse config file {path}: {exc}") from exc
    if not cp.has_section("pipeline"):
        raise DataError(f"config file {path} has no [pipeline] section")
    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    out = {}
    for key, raw in cp.items("pipeline"):
        if key not in known:
            raise ConfigError(key, f"unknown config key in {path}")
        out[key] = _coerce(key, raw)
    return out


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """File values, then flags; rejects contradictory window flags before any work."""
    values = read_config_file(args.config) if args.config else {}
    for dest, name in FLAG_FIELDS.items():
        v = getattr(args, dest)
        if v is not None:
            values[name] = v
    if args.mode is not None:
        values["mode"] = "base_model" if args.mode == "base" else "mega"
    if args.online:
        values["online"] = True
    online = values.get("online", False)
    if online and args.tau is not None:
        raise UsageError("--online uses a causal window of --t-l frames; --tau (symmetric window) is not allowed")
    if online:
        values.setdefault("T_l", 2 * values.get("tau", PipelineConfig.tau) + 1)
    elif "T_l" in values and "tau" not in values:
        if values["T_l"] % 2 == 0:
            raise ConfigError("T_l", f"offline window 2*tau+1 must be odd, got {values['T_l']}")
        values["tau"] = (values["T_l"] - 1) // 2
    cfg = PipelineConfig(**values)
    cfg.validate()
    return cfg


def parse_synthetic(spec: str | None) -> dict[str, Any]:
    out = dict(SYNTH_DEFAULTS)
    if spec in (None, "", "default"):
        return out
    for item in spec.split(","):
        if "=" not in item:
            raise UsageError(f"bad --synthetic item {item!r}; expected key=value")
        key, raw = (s.strip() for s in item.split("=", 1))
        if key not in out:
            raise UsageError(f"unknown --synthetic key {key!r}; known: {', '.join(out)}")
        try:
            out[key] = float(raw) if key in ("occluded", "qlo", "qhi") else int(raw)
        except ValueError:
            raise UsageError(f"--synthetic {key} expects a number, got {raw!r}") from None
    return out


def synthetic_videos(spec: dict[str, Any], config: PipelineConfig):
    """``videos`` scenes sharing one class codebook; returns ``[(scene, frames)]``."""
    seed = config.seed if spec["seed"] is None else spec["seed"]
    book = make_codebook(spec["classes"], config.dim, seed=seed)
    out = []
    for i in range(spec["videos"]):
        scene = make_scene(spec["frames"], spec["classes"], config.dim, spec["tracks"],
                           seed=seed * 100003 + i, codebook=book, occluded_fraction=spec["occluded"],
                           min_len=spec["min_len"], max_len=spec["max_len"],
                           occluded=(spec["qlo"], spec["qhi"]))
        out.append((scene, synth_video(scene, config, seed=seed * 100003 + i + 7919)))
    return out


def _source(args, config: PipelineConfig):
    """``(config, manifest source, [(scene or None, frames)])``."""
    if args.input is not None:
        path = args.input.resolve()
        if not path.exists():
            raise DataError(f"input file not found: {path}")
        frames = read_proposals_jsonl(path)
        if not frames:
            raise DataError(f"input file has no frames: {path}")
        dim = next((fp.dim for fp in frames if len(fp)), config.dim)
        if dim != config.dim:
            if args.dim is not None:
                raise ConfigError("dim", f"--dim {args.dim} but {path} has {dim}-dim features")
            config = config.replace(dim=dim)
            config.validate()
        return config, {"input": str(path)}, [(None, frames)]
    spec = parse_synthetic(args.synthetic)
    if spec["classes"] != config.num_classes:
        config = config.replace(num_classes=spec["classes"])
    return config, {"synthetic": spec}, synthetic_videos(spec, config)


# ------------------------------------------------------------ commands


def _csv_text(manifest: RunManifest, header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    buf.write(f"# manifest: {manifest.dumps()}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _write(path: Path, text: str) -> None:
    path.write_text(text)
    log.info("wrote %s", path)


def cmd_run(args) -> int:
    config = resolve_config(args)
    config, source, videos = _source(args, config)
    if len(videos) != 1:
        raise UsageError("run takes a single video (videos=1)")
    _, frames = videos[0]
    if args.params:
        if not args.params.exists():
            raise DataError(f"parameter file not found: {args.params.resolve()}")
        params = MegaParams.from_dict(json.loads(args.params.read_text())["params"])
        params.check(config)
    else:
        params = MegaParams.init(config, seed=config.seed)
    out = args.out.resolve()
    out.mkdir(parents=True, exist_ok=True)
    paths = {"detections": out / "detections.jsonl", "stats": out / "stats.csv",
             "manifest": out / "manifest.json"}
    manifest = RunManifest("run", config.to_dict(), source, {k: str(v) for k, v in paths.items()},
                           {"params": str(args.params.resolve()) if args.params else "init"})
    stats: list[dict] = []
    dets = run_video(frames, config, params, stats=stats)
    # detection records only, so runs that differ in flags but not in output compare equal
    _write(paths["detections"], "".join(json.dumps(d.to_record()) + "\n" for per in dets for d in per))
    keys = list(stats[0]) if stats else []
    _write(paths["stats"], _csv_text(manifest, keys, [[s[k] for k in keys] for s in stats]))
    _write(paths["manifest"], json.dumps(manifest.to_dict(), sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.input is not None:
        raise UsageError("train needs ground truth: use --synthetic, not --input")
    if args.steps < 0:
        raise UsageError("--steps must be >= 0")
    config = resolve_config(args)
    config, source, videos = _source(args, config)
    params = MegaParams.init(config, seed=config.seed)
    out = args.out.resolve()
    out.mkdir(parents=True, exist_ok=True)
    paths = {"losses": out / "losses.csv", "params": out / "params.json"}
    manifest = RunManifest("train", config.to_dict(), source, {k: str(v) for k, v in paths.items()},
                           {"steps": args.steps, "lr": args.lr, "batch_size": args.batch_size})
    losses = train([TrainingVideo(f, s.ground_truth) for s, f in videos], config, params,
                   args.steps, args.lr, seed=config.seed, batch_size=args.batch_size)
    _write(paths["losses"], _csv_text(manifest, ["step", "loss"], [[i, repr(l)] for i, l in enumerate(losses)]))
    _write(paths["params"], json.dumps({"manifest": manifest.to_dict(), "params": params.to_dict()},
                                       sort_keys=True) + "\n")
    return EXIT_OK


def parse_sweep(spec: str) -> dict[str, list[int]]:
    out = {"N_l": [1, 2, 3], "T_m": [0, 2, 4], "T_l": [3, 5]}
    for part in filter(None, (s.strip() for s in spec.split(";"))):
        if "=" not in part:
            raise UsageError(f"bad --sweep part {part!r}")
        key, raw = (s.strip() for s in part.split("=", 1))
        if key not in out:
            raise UsageError(f"unknown --sweep key {key!r}; known: N_l, T_m, T_l")
        try:
            out[key] = [int(v) for v in raw.split(",")]
        except ValueError:
            raise UsageError(f"--sweep {key} expects integers, got {raw!r}") from None
        if key == "T_l" and any(v % 2 == 0 for v in out[key]):
            raise UsageError("--sweep T_l values must be odd (offline window 2*tau+1)")
    return out


def _table(header: list[str], rows: list[list]) -> str:
    cells = [[str(c) for c in r] for r in [header] + rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def cmd_analyze(args) -> int:
    config = resolve_config(args)
    sweep = parse_sweep(args.sweep)
    out = args.out.resolve()
    out.mkdir(parents=True, exist_ok=True)
    paths = {"aggregation": out / "aggregation.csv", "receptive_field": out / "receptive_field.csv",
             "cost": out / "cost.csv"}
    manifest = RunManifest("analyze", config.to_dict(), {"sweep": sweep},
                           {k: str(v) for k, v in paths.items()})
    ok = True

    agg_rows = [[2, 3, 4, 4], [3, 25, 25, 10], [config.N_l, config.T_m, config.T_l, config.T_g]]
    agg_rows += [[n, 0, 25, 10] for n in (1, 2, 3)]
    agg = [r + list(analysis.aggregation_size(*r)) for r in agg_rows]
    agg_header = ["N_l", "T_m", "T_l", "T_g", "local", "global"]
    print("aggregation size")
    print(_table(agg_header, agg))
    _write(paths["aggregation"], _csv_text(manifest, agg_header, agg))

    checks = analysis.receptive_field_sweep(sweep["N_l"], sweep["T_m"], sweep["T_l"], T_g=config.T_g,
                                            base=config)
    rf_header = ["N_l", "T_m", "T_l", "T_g", "traced_local", "formula_local", "traced_global",
                 "formula_global", "match"]
    rf = [[c.N_l, c.T_m, c.T_l, c.T_g, c.traced_local, c.expected_local, c.traced_global,
           c.expected_global, c.ok] for c in checks]
    print("\nreceptive field (taint trace vs formula)")
    print(_table(rf_header, rf))
    _write(paths["receptive_field"], _csv_text(manifest, rf_header, rf))
    ok &= all(c.ok for c in checks)

    rep = analysis.linearity_report(config)
    cost_header = ["T_m", "mega_pairs", "enlarged_window_pairs"]
    cost = [[t, m, e] for t, m, e in zip(rep.T_m, rep.mega_pairs, rep.enlarged_pairs)]
    print("\nsteady-state attention pairs per frame")
    print(_table(cost_header, cost))
    print(f"second differences: mega {[str(d) for d in rep.mega_second_diff]}, "
          f"enlarged {[str(d) for d in rep.enlarged_second_diff]}; crossover T_m = {rep.crossover}")
    print(f"linear-vs-quadratic contrast holds: {rep.holds}")
    _write(paths["cost"], _csv_text(manifest, cost_header, cost))
    ok &= rep.holds
    if not ok:
        log.error("an analysis oracle disagrees with its formula")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_gen(args) -> int:
    if args.input is not None:
        raise UsageError("gen writes synthetic data; --input makes no sense here")
    config = resolve_config(args)
    config, source, videos = _source(args, config)
    out = args.out.resolve()
    out.mkdir(parents=True, exist_ok=True)
    for i, (scene, frames) in enumerate(videos):
        stem = "proposals" if len(videos) == 1 else f"proposals_{i:03d}"
        path, gt_path = out / f"{stem}.jsonl", out / f"{stem}.truth.jsonl"
        manifest = RunManifest("gen", config.to_dict(), {**source, "video": i},
                               {"proposals": str(path), "truth": str(gt_path)})
        write_proposals_jsonl(frames, path, header={"manifest": manifest.to_dict()})
        lines = [json.dumps({"manifest": manifest.to_dict()}, sort_keys=True)]
        for t in range(1, scene.num_frames + 1):
            boxes, labels = scene.ground_truth(t)
            lines.append(json.dumps({"frame": t, "boxes": boxes.tolist(), "labels": labels.tolist()}))
        _write(gt_path, "\n".join(lines) + "\n")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "train": cmd_train, "analyze": cmd_analyze, "gen": cmd_gen}


def _setup_logging() -> None:
    level = os.environ.get("MEGA_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"mega: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"mega: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"mega: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"mega: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractViolation as exc:
        print(f"mega: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
