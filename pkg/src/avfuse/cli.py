"""Command-line harness: gen-data, train, sample, eval, ablate.

Configuration is a plain ``key=value`` file (``--config``) merged with flag
overrides; unknown keys are rejected. Every command writes the fully
resolved configuration to ``<out>/config.txt``.

Exit codes: 0 success, 2 configuration/validation error, 3 numeric failure,
4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import container
from .data import DatasetError, generate_clip, prompt_text, read_dataset, sample_spec, write_dataset
from .metrics import CalibrationError, EvalReport, evaluate, require_calibration
from .model import ModelConfig, _coerce, count_params, load_checkpoint, save_checkpoint
from .sampler import GuidanceScales, SampleRequest, SamplingError, sample_batch, write_sample
from .training import TASKS, NonFiniteLossError, format_stages, TrainConfig, TrainState, load_state, save_state, train

log = logging.getLogger("avfuse")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 512
    n_val: int = 64
    train_seed_start: int = 0
    val_seed_start: int = 500_000
    eval_seed_start: int = 900_000
    speech_prob: float = 0.75
    two_speaker_prob: float = 0.35
    min_units: int = 4
    max_units: int = 8


@dataclass(frozen=True)
class RunOptions:
    checkpoint_every: int = 500
    sample_steps: int = 50
    n_eval: int = 100
    cfg_grid: str = "0,0,0;0,1,0;0,0,1"


_SECTIONS = (ModelConfig, TrainConfig, DataConfig, RunOptions)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: DataConfig
    run: RunOptions

    @classmethod
    def from_items(cls, items: dict) -> "RunConfig":
        known = {f.name: (i, f) for i, sec in enumerate(_SECTIONS) for f in fields(sec)}
        unknown = sorted(set(items) - set(known))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        kws: list[dict] = [{} for _ in _SECTIONS]
        for key, raw in items.items():
            i, f = known[key]
            try:
                kws[i][key] = _coerce(f.type, raw)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
        try:
            out = cls(*(sec(**kw) for sec, kw in zip(_SECTIONS, kws)))
            out.model.validate()
            out.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        out.check_seed_ranges()
        return out

    @classmethod
    def load(cls, path: Optional[str], overrides: dict) -> "RunConfig":
        items: dict = {}
        if path is not None:
            try:
                items.update(container.parse_kv(Path(path).read_text()))
            except container.ContainerError as exc:
                raise ConfigError(str(exc)) from None
        items.update({k: str(v) for k, v in overrides.items() if v is not None})
        return cls.from_items(items)

    def check_seed_ranges(self) -> None:
        d = self.data
        ranges = {"train": (d.train_seed_start, d.n_train), "val": (d.val_seed_start, d.n_val),
                  "eval": (d.eval_seed_start, self.run.n_eval)}
        names = list(ranges)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                (s1, n1), (s2, n2) = ranges[a], ranges[b]
                if n1 and n2 and s1 < s2 + n2 and s2 < s1 + n1:
                    raise ConfigError(f"{a} and {b} seed ranges overlap")

    def items(self) -> dict:
        out = {}
        for sec in (self.model, self.train, self.data, self.run):
            out.update(asdict(sec))
        out["stages"] = format_stages(self.train.stage_list())
        return out

    def to_text(self) -> str:
        return container.format_kv(self.items())

    def with_model(self, **kw) -> "RunConfig":
        return replace(self, model=replace(self.model, **kw).validate())


# -- helpers ------------------------------------------------------------------

def echo_config(out: Path, cfg: RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())


def specs_for(start: int, n: int, d: DataConfig):
    return [sample_spec(start + i, d.speech_prob, d.two_speaker_prob, d.min_units, d.max_units)
            for i in range(n)]


def build_split(start: int, n: int, d: DataConfig):
    return [generate_clip(s) for s in specs_for(start, n, d)]


def load_training_set(cfg: RunConfig, data_dir: Optional[str]):
    if data_dir is not None:
        return read_dataset(Path(data_dir) / "train.bin")
    return build_split(cfg.data.train_seed_start, cfg.data.n_train, cfg.data)


def train_run(cfg: RunConfig, out: Path, dataset, resume: Optional[str] = None) -> TrainState:
    """Train with periodic state snapshots; writes ``final.ckpt`` and ``final.state``."""
    echo_config(out, cfg)
    metrics = out / "metrics.jsonl"
    if resume is not None:
        state = load_state(resume, cfg.model)
        if metrics.exists():
            keep = [ln for ln in metrics.read_text().splitlines() if json.loads(ln)["step"] < state.step]
            metrics.write_text("".join(ln + "\n" for ln in keep))
    else:
        state = TrainState.fresh(cfg.model, cfg.train)
        metrics.write_text("")
    every = cfg.run.checkpoint_every
    while state.step < cfg.train.steps:
        target = cfg.train.steps if every <= 0 else min(cfg.train.steps, (state.step // every + 1) * every)
        state = train(dataset, cfg.model, cfg.train, state, metrics_path=metrics, until=target)
        if state.step < cfg.train.steps:
            save_state(state, out / f"step_{state.step:07d}.state", cfg.model, cfg.train)
        log.info("step %d / %d", state.step, cfg.train.steps)
    save_state(state, out / "final.state", cfg.model, cfg.train)
    save_checkpoint(out / "final.ckpt", cfg.model, state.params)
    return state


def eval_requests(specs, scales: GuidanceScales, steps: int) -> list[SampleRequest]:
    return [SampleRequest(prompt_text(s), "T2AV", s.duration_units, steps, s.seed, scales) for s in specs]


def evaluate_model(cfg: RunConfig, params, scales: GuidanceScales, n: Optional[int] = None) -> EvalReport:
    """Sample held-out prompts and score them against the generator's ground truth."""
    n = cfg.run.n_eval if n is None else n
    specs = specs_for(cfg.data.eval_seed_start, n, cfg.data)
    if not specs:
        return EvalReport([])
    results = sample_batch(eval_requests(specs, scales, cfg.run.sample_steps), cfg.model, params)
    return evaluate(specs, [(r.audio, r.video) for r in results])


def write_report(out: Path, report: EvalReport, name: str = "eval") -> None:
    (out / f"{name}.jsonl").write_text(report.to_jsonl())
    (out / f"{name}_summary.json").write_text(json.dumps(report.summary(), indent=2) + "\n")


def parse_grid(text: str) -> list[GuidanceScales]:
    return [GuidanceScales.parse(p) for p in text.split(";") if p.strip()]


def layer_variants(model: ModelConfig) -> list[tuple[str, dict]]:
    """Equal-budget variants: one HAL block holds the parameters of two UFL blocks."""
    units = 2 * model.n_hal + model.n_ufl
    return [("hal_only", {"n_hal": units // 2, "n_ufl": units % 2}),
            ("ufl_only", {"n_hal": 0, "n_ufl": units}),
            ("both", {"n_hal": model.n_hal, "n_ufl": model.n_ufl})]


def _fmt(x) -> str:
    return "nan" if x is None else f"{x:.4f}"


def write_table(out: Path, name: str, header: Sequence[str], rows: Sequence[Sequence]) -> str:
    lines = ["\t".join(header)] + ["\t".join(_fmt(c) if isinstance(c, float) or c is None else str(c)
                                            for c in r) for r in rows]
    text = "\n".join(lines) + "\n"
    (out / f"{name}.tsv").write_text(text)
    return text


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    echo_config(out, cfg)
    d = cfg.data
    write_dataset(build_split(d.train_seed_start, d.n_train, d), out / "train.bin")
    write_dataset(build_split(d.val_seed_start, d.n_val, d), out / "val.bin")
    print(f"train: {d.n_train} clips, val: {d.n_val} clips -> {out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    dataset = load_training_set(cfg, args.data)
    state = train_run(cfg, Path(args.out), dataset, args.resume)
    print(f"trained {state.step} steps -> {Path(args.out) / 'final.ckpt'}")
    return EXIT_OK


def _load_params(cfg: RunConfig, path: str):
    _, params = load_checkpoint(path, cfg.model)
    return params


def cmd_sample(args, cfg: RunConfig) -> int:
    params = _load_params(cfg, args.checkpoint)
    task = args.task.upper()
    first = None
    if task == "TI2AV":
        if args.first_frame is None:
            raise ConfigError("--task ti2av needs --first-frame FILE.npy")
        first = np.load(args.first_frame)
    req = SampleRequest(args.prompt, task, args.duration, cfg.run.sample_steps, cfg.train.seed,
                        GuidanceScales.parse(args.scales), first_frame=first).validate()
    (result,) = sample_batch([req], cfg.model, params)
    out = Path(args.out)
    echo_config(out, cfg)
    write_sample(out / "sample.bin", result, req)
    print(f"wrote {out / 'sample.bin'}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    echo_config(out, cfg)
    require_calibration()
    params = _load_params(cfg, args.checkpoint)
    report = evaluate_model(cfg, params, GuidanceScales.parse(args.scales))
    write_report(out, report)
    print(json.dumps(report.summary()))
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    echo_config(out, cfg)
    require_calibration()
    scales = GuidanceScales.parse(args.scales)
    if args.mode == "layers":
        dataset = load_training_set(cfg, args.data)
        rows = []
        for label, kw in layer_variants(cfg.model):
            sub = cfg.with_model(**kw)
            state = train_run(sub, out / label, dataset)
            report = evaluate_model(sub, state.params, scales)
            write_report(out / label, report)
            rows.append([label, sub.model.n_hal, sub.model.n_ufl, count_params(sub.model),
                         report.sync_score, report.timbre_similarity, report.pattern_accuracy])
        sync = {r[0]: r[4] for r in rows}
        ok = all(sync["both"] >= sync[k] for k in ("hal_only", "ufl_only"))
        status = "OK" if ok else "FAILED-DIRECTION"
        table = write_table(out, "ablate_layers",
                            ["variant", "n_hal", "n_ufl", "params", "sync", "timbre", "pattern"], rows)
        (out / "ablate_layers_status.txt").write_text(status + "\n")
        print(table + f"direction: {status}")
        return EXIT_OK
    if args.checkpoint is None:
        raise ConfigError("ablate --mode cfg needs --checkpoint")
    params = _load_params(cfg, args.checkpoint)
    grid = parse_grid(args.grid or cfg.run.cfg_grid)
    rows = []
    for s in grid:
        report = evaluate_model(cfg, params, s)
        write_report(out, report, f"eval_{s.s_text:g}_{s.s_align:g}_{s.s_timbre:g}")
        rows.append([f"{s.s_text:g}", f"{s.s_align:g}", f"{s.s_timbre:g}", report.sync_score, report.timbre_similarity,
                     report.pattern_accuracy])
    print(write_table(out, "ablate_cfg", ["s_text", "s_align", "s_timbre", "sync", "timbre", "pattern"], rows),
          end="")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--seed", type=int, help="training / sampling seed")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--steps", type=int, help="training steps")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")

    p = argparse.ArgumentParser(prog="avfuse", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="write train/val datasets")

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", help="directory written by gen-data (default: generate in memory)")
    t.add_argument("--resume", help="training state to resume from")

    s = sub.add_parser("sample", parents=[common], help="sample one clip")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--scales", default="0,0,0", help="s_text,s_align,s_timbre")
    s.add_argument("--task", default="t2av", choices=[k.lower() for k in TASKS])
    s.add_argument("--duration", type=int, default=6, help="clip length in time units")
    s.add_argument("--first-frame", help=".npy array of first-unit video tokens (ti2av)")

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint on held-out prompts")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--n-clips", type=int)
    e.add_argument("--scales", default="0,0,0")

    a = sub.add_parser("ablate", parents=[common], help="architecture or guidance ablation")
    a.add_argument("--mode", choices=["layers", "cfg"], required=True)
    a.add_argument("--data")
    a.add_argument("--checkpoint")
    a.add_argument("--scales", default="0,0,0", help="scales used to evaluate layer variants")
    a.add_argument("--grid", help="';'-separated scale triples for --mode cfg")
    a.add_argument("--n-clips", type=int)
    return p


def _overrides(args) -> dict:
    """``--set`` pairs, then dedicated flags (which win when both are given)."""
    out: dict = {}
    for kv in args.set:
        key, sep, value = kv.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {kv!r}")
        out[key.strip()] = value.strip()
    flags = {"seed": args.seed, "steps": args.steps, "n_eval": getattr(args, "n_clips", None)}
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample,
            "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.load(args.config, _overrides(args))
        return COMMANDS[args.command](args, cfg)
    except (container.ContainerError, DatasetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteLossError, SamplingError, CalibrationError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
