"""Command-line entry points: ``fetrack {synth,train,track,eval,selfcheck,bench}``.

Config files are JSON objects with optional sections::

    {"seed": 0, "precision": "f32", "n_frames": 20,
     "model": {...}, "tracker": {...}, "train": {...}, "scene": {...}}

Section keys are the fields of ModelConfig, TrackerConfig, TrainConfig and
SyntheticScene. Command-line flags override file values.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fetrack.errors import ConfigError, FETrackError, InputError
from fetrack.numerics.tensor import DTYPES

EXIT_OK, EXIT_FAIL, EXIT_MISSING, EXIT_CONFIG = 0, 1, 2, 3
BENCH_LENGTHS = (256, 1024, 4096)


class MissingFile(FETrackError):
    def __init__(self, path):
        super().__init__(f"file not found: {path}")
        self.path = str(path)


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    tracker: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    scene: dict = field(default_factory=dict)
    n_frames: int = 20
    seed: int = 0
    precision: str = "f32"

    SECTIONS = ("model", "tracker", "train", "scene")

    @classmethod
    def load(cls, path=None, **overrides) -> "RunConfig":
        data = {}
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise MissingFile(path)
            try:
                data = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError("config", f"{path}: invalid JSON ({exc})") from exc
            if not isinstance(data, dict):
                raise ConfigError("config", "top level must be a JSON object")
        known = set(cls.SECTIONS) | {"n_frames", "seed", "precision"}
        bad = sorted(set(data) - known)
        if bad:
            raise ConfigError(bad[0], "unknown config key")
        for name in cls.SECTIONS:
            if not isinstance(data.get(name, {}), dict):
                raise ConfigError(name, "section must be a JSON object")
        data.update({k: v for k, v in overrides.items() if v is not None})
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.precision not in DTYPES:
            raise ConfigError("precision", f"expected one of {sorted(DTYPES)}, got {self.precision!r}")
        if int(self.n_frames) < 1:
            raise ConfigError("n_frames", f"must be at least 1, got {self.n_frames}")
        self.model_config()
        self.tracker_config()
        self.train_config()
        self.scene_config()

    def model_config(self):
        from fetrack.model import ModelConfig
        cfg = ModelConfig.from_dict(self.model)
        cfg.validate()
        return cfg

    def tracker_config(self):
        from fetrack.tracker import TrackerConfig
        return TrackerConfig.from_dict(self.tracker)

    def train_config(self):
        from fetrack.train import TrainConfig
        return TrainConfig.from_dict(dict({"seed": self.seed}, **self.train))

    def scene_config(self):
        from fetrack.synthetic import SyntheticScene
        return SyntheticScene.from_dict(self.scene)


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingFile(path)
    return path


def _load_run(args) -> RunConfig:
    return RunConfig.load(args.config, seed=args.seed, precision=args.precision,
                          n_frames=getattr(args, "n_frames", None))


def _write_output(path, text: str, force: bool) -> None:
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ------------------------------------------------------------------ commands

def cmd_synth(args) -> int:
    from fetrack.synthetic import generate_synthetic, write_sequence

    run = _load_run(args)
    seq = generate_synthetic(run.scene_config(), int(run.n_frames), run.seed)
    write_sequence(args.out, seq, force=args.force)
    print(f"frames={len(seq.frames)} events={len(seq.events)} out={args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from fetrack.femamba import save_checkpoint
    from fetrack.model import TrackerNet
    from fetrack.synthetic import read_sequence
    from fetrack.train import train_desk_scale

    run = _load_run(args)
    seq = read_sequence(_require(args.sequence))
    out = Path(args.out)
    curve = out.with_suffix(".loss.json")
    if not args.force and (out.with_suffix(".json").exists() or curve.exists()):
        raise FileExistsError(f"{out} exists; pass --force to overwrite")
    mcfg = run.model_config()
    net = TrackerNet(mcfg, seed=run.seed, precision=run.precision)
    out.parent.mkdir(parents=True, exist_ok=True)
    result = train_desk_scale(net, seq, run.train_config(), run.tracker_config(),
                              log=print, curve_path=curve)
    save_checkpoint(out, net, {"model": mcfg.to_dict(), "precision": run.precision, "seed": run.seed})
    first, last = result.losses[0] if result.losses else 0.0, result.losses[-1] if result.losses else 0.0
    print(f"initial_loss={first:.6f} final_loss={last:.6f} seconds={result.seconds:.1f} checkpoint={out}")
    return EXIT_OK


def _build_net(run: RunConfig, checkpoint):
    from fetrack.femamba import load_checkpoint, read_checkpoint
    from fetrack.model import ModelConfig, TrackerNet

    if checkpoint is None:
        return TrackerNet(run.model_config(), seed=run.seed, precision=run.precision)
    ckpt = Path(checkpoint)
    for part in (ckpt.with_suffix(".json"), ckpt.with_suffix(".bin")):
        if not part.exists():
            raise MissingFile(part)
    _, meta = read_checkpoint(ckpt)
    mcfg = ModelConfig.from_dict(meta.get("model", {}))
    net = TrackerNet(mcfg, seed=run.seed, precision=run.precision)
    load_checkpoint(ckpt, net)
    return net


def cmd_track(args) -> int:
    from fetrack.synthetic import read_sequence
    from fetrack.tracker import Tracker, write_results

    run = _load_run(args)
    seq = read_sequence(_require(args.sequence))
    if len(seq.boxes) == 0:
        raise MissingFile(Path(args.sequence) / "groundtruth.txt")
    net = _build_net(run, args.checkpoint)
    tracker = Tracker(net, run.tracker_config())
    rows = tracker.track_sequence(seq.frames, seq.event_frames(), seq.boxes[0])
    out = Path(args.out)
    if out.exists() and not args.force:
        raise FileExistsError(f"{out} exists; pass --force to overwrite")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_results(out, rows)
    print(f"frames={len(rows)} results={out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from fetrack.events import read_boxes
    from fetrack.metrics import evaluate, format_report
    from fetrack.tracker import read_results

    pred = read_results(_require(args.results))[:, :4]
    gt_path = _require(args.gt)
    if gt_path.is_dir():
        gt_path = _require(gt_path / "groundtruth.txt")
    report = format_report(evaluate(pred, read_boxes(gt_path)))
    print(report)
    if args.out:
        _write_output(args.out, report + "\n", force=True)
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from fetrack.selfcheck import run_checks

    _load_run(args)  # validates --config even though the oracles run in f64
    results = run_checks()
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"checks={len(results)} failed={len(failed)}" + (f" failing={','.join(failed)}" if failed else ""))
    return EXIT_FAIL if failed else EXIT_OK


def cmd_bench(args) -> int:
    from fetrack import ssm

    run = _load_run(args)
    dtype = DTYPES[run.precision]
    rng = np.random.default_rng(run.seed)
    lengths = args.lengths or list(BENCH_LENGTHS)
    Cin, N = args.channels, args.state
    for L in lengths:
        draw = lambda n: rng.normal(size=(1, L, n)).astype(dtype)
        inputs = ssm.ScanInputs(draw(Cin), rng.uniform(0.01, 0.1, (1, L, Cin)).astype(dtype),
                                draw(N), draw(N), draw(N))
        A = -np.exp(rng.normal(size=(Cin, N))).astype(dtype)
        D = np.ones(Cin, dtype=dtype)
        timings = {}
        for name, fn in (("ref", lambda: ssm.selective_scan_ref(inputs, A, D)),
                         ("chunked", lambda: ssm.selective_scan_chunked(inputs, A, D, args.chunk))):
            best = float("inf")
            for _ in range(args.repeats):
                t0 = time.perf_counter()
                fn()
                best = min(best, time.perf_counter() - t0)
            timings[name] = best
        print(f"L={L} channels={Cin} state={N} ref_ms={timings['ref'] * 1e3:.2f} "
              f"chunked_ms={timings['chunked'] * 1e3:.2f} chunk={args.chunk} "
              f"tokens_per_s={L / timings['chunked']:.0f}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--precision", choices=sorted(DTYPES), default=None)
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")

    parser = argparse.ArgumentParser(prog="fetrack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic RGB-event sequence")
    p.add_argument("out")
    p.add_argument("--n-frames", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train on one sequence directory")
    p.add_argument("sequence")
    p.add_argument("--out", required=True, help="checkpoint prefix")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", parents=[common], help="track a sequence and write x,y,w,h,score rows")
    p.add_argument("sequence")
    p.add_argument("--checkpoint", default=None, help="checkpoint prefix (untrained model if omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", parents=[common], help="score a results file against ground truth")
    p.add_argument("results")
    p.add_argument("gt", help="groundtruth.txt or a sequence directory")
    p.add_argument("--out", default=None, help="also write the report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selfcheck", parents=[common], help="run the oracle checks")
    p.set_defaults(func=cmd_selfcheck)

    p = sub.add_parser("bench", parents=[common], help="scan throughput sweep")
    p.add_argument("--lengths", type=int, nargs="+", default=None)
    p.add_argument("--channels", type=int, default=192)
    p.add_argument("--state", type=int, default=16)
    p.add_argument("--chunk", type=int, default=64)
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MissingFile as exc:
        print(f"error: file not found: {exc.path}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"error: invalid config field {exc.field}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileExistsError, InputError, FETrackError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
