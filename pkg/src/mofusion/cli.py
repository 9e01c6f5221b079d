"""Command line: ``mofusion {synth,train,sample,cleanup,eval,bench}``.

Settings come from defaults, then ``--config FILE``, then ``--set section.key=value``
and the dedicated flags (flags win). Every command writes the resolved settings to
``run_config.json`` in its output directory. Exit codes are 0 on success, 2 for
configuration or input errors and 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import shutil
import sys
import warnings
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .dataset import dataset_digest, load_dataset, save_dataset
from .evaluation import EvalEncoders, cache_dir, evaluate, train_eval_encoders
from .footskate import cleanup, in_loop_cleanup, skate_ratio
from .motion import features_to_positions, load_motion, save_motion
from .sampling import DDPM, DPMPP_2M_SDE, PromptCache, SamplerConfig, generate, reduced_precision, run_inference
from .schedule import schedule_karras
from .skeleton import Skeleton, default_skeleton
from .synth import GENERATORS, SynthConfig, default_vocabulary, synth_dataset
from .training import MotionDataset, init_checkpoint, load_checkpoint, save_checkpoint, train

log = logging.getLogger("mofusion")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
BENCH_ROWS = ("ddpm1000", "+solver10", "+cache", "+parallel-cfg", "+reduced")


# -- helpers ------------------------------------------------------------------------


def _parse_set(items) -> dict:
    out: dict = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out.setdefault(section, {})[name] = value
    return out


def _deep_update(base: dict, extra: dict) -> dict:
    for k, v in extra.items():
        base[k] = {**base.get(k, {}), **v} if isinstance(v, dict) else v
    return base


def _resolve(args, flag_overrides: dict | None = None) -> RunConfig:
    overrides = _parse_set(args.set)
    _deep_update(overrides, flag_overrides or {})
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def _prepare_out(args) -> Path:
    out = Path(args.out or f"mofusion-{args.command}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_config(out: Path, args, cfg: RunConfig) -> None:
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "set", "out", "verbose")}
    record = {"command": args.command, "version": __version__, "flags": flags,
              "set": list(args.set or ()), "config": cfg.to_json()}
    (out / "run_config.json").write_text(json.dumps(record, indent=1, default=str))


def _prompt(text: str) -> tuple[str, ...]:
    tokens = tuple(text.split())
    if not tokens:
        raise ValueError("prompt must contain at least one word")
    return tokens


def _sampler_flags(args) -> dict:
    sampler = {}
    if args.sampler is not None:
        sampler["kind"] = {"ddpm": DDPM, "dpmpp": DPMPP_2M_SDE}[args.sampler]
    if args.steps is not None:
        sampler["steps"] = args.steps
    if getattr(args, "guidance", None) is not None:
        sampler["guidance_scale"] = args.guidance
    if getattr(args, "precision", None) is not None:
        sampler["precision"] = args.precision
    return {"sampler": sampler} if sampler else {}


def _check_ddpm_steps(config: SamplerConfig, schedule, explicit: bool) -> SamplerConfig:
    if config.kind != DDPM:
        return config
    if explicit and config.steps != schedule.T:
        raise ValueError(f"sampler.steps: the ancestral sampler runs all {schedule.T} steps")
    return dataclasses.replace(config, steps=schedule.T)


def inloop_start(config: SamplerConfig, schedule, fraction: float) -> float:
    """Timestep threshold below which in-loop cleanup runs (the last ``fraction`` of steps)."""
    if not 0 <= fraction <= 1:
        raise ValueError("inloop.last_steps_fraction must lie in [0, 1]")
    if config.kind == DDPM:
        return fraction * schedule.T + 1
    active = math.ceil(fraction * config.steps)
    if active == 0:
        return 0.0
    ts = schedule_karras(schedule, config.steps).timesteps
    # strictly below the last inactive step; everything when all steps are active
    return float(ts[config.steps - active - 1]) if active < config.steps else math.inf


def _sidecar_skeleton(path: Path, explicit) -> Skeleton:
    candidate = Path(explicit) if explicit else path.parent / "skeleton.json"
    if candidate.is_file():
        return Skeleton.from_json(json.loads(candidate.read_text()))
    if explicit:
        raise FileNotFoundError(f"skeleton file {explicit} not found")
    return default_skeleton()


# -- commands -----------------------------------------------------------------------


def cmd_synth(args) -> int:
    flags = {}
    if args.classes:
        flags["synth"] = {"classes": args.classes.split(",")}
    if args.samples is not None:
        flags.setdefault("synth", {})["samples_per_class"] = args.samples
    cfg = _resolve(args, flags)
    unknown = [c for c in cfg.synth.classes if c not in GENERATORS]
    if unknown:
        raise ConfigError(f"synth.classes: unknown classes {unknown}; choose from {sorted(GENERATORS)}")
    out = _prepare_out(args)
    s = cfg.synth
    skeleton = default_skeleton()
    motions = synth_dataset(SynthConfig(s.classes, s.samples_per_class, tuple(s.length_range), s.fps, cfg.seed,
                                        s.representation), skeleton)
    save_dataset(motions, out, default_vocabulary(), skeleton, {"classes": list(s.classes), "seed": cfg.seed})
    _write_run_config(out, args, cfg)
    log.info("wrote %d motions to %s", len(motions), out)
    return EXIT_OK


def cmd_train(args) -> int:
    flags = {"train": {"iterations": args.iterations}} if args.iterations is not None else {}
    cfg = _resolve(args, flags)
    motions, vocab, skeleton = load_dataset(args.data)
    out = _prepare_out(args)
    metrics = out / "metrics.jsonl"
    if args.resume:
        ckpt = load_checkpoint(args.resume, view="raw")
        ckpt.train_config = dataclasses.replace(ckpt.train_config, iterations=cfg.train.iterations)
        data = MotionDataset(motions, ckpt.vocab, ckpt.normalizer, ckpt.model.config.max_tokens)
        if Path(args.resume).resolve() != out.resolve():
            metrics.unlink(missing_ok=True)
        log.info("resuming at iteration %d", ckpt.iteration)
    else:
        denoiser = dataclasses.asdict(cfg.denoiser)
        denoiser["channel_multipliers"] = tuple(denoiser["channel_multipliers"])
        ckpt, data = init_checkpoint(motions, vocab, motions[0].spec, skeleton, cfg.train, **denoiser)
        metrics.unlink(missing_ok=True)

    def report(it, result):
        if it % 100 == 0:
            log.info("iteration %d loss %.4f", it, result.loss)

    train(ckpt, data, metrics_path=metrics, callback=report)
    save_checkpoint(ckpt, out)
    _write_run_config(out, args, cfg)
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = _resolve(args, _sampler_flags(args))
    ckpt = load_checkpoint(args.checkpoint, view=args.view)
    sampler = _check_ddpm_steps(cfg.sampler, ckpt.schedule, args.steps is not None)
    prompt = _prompt(args.prompt)
    hook = None
    if args.footskate_inloop:
        if ckpt.skeleton is None:
            raise ValueError("checkpoint has no skeleton; in-loop cleanup needs one")
        hook = in_loop_cleanup(ckpt.spec, ckpt.skeleton, ckpt.normalizer, [args.frames], ckpt.fps,
                               inloop_start(sampler, ckpt.schedule, cfg.inloop.last_steps_fraction),
                               cfg.inloop.every_k, dataclasses.replace(cfg.cleanup, iterations=cfg.inloop.iterations),
                               cfg.contact)
    out = _prepare_out(args)
    motion, report = run_inference(prompt, ckpt, sampler, args.frames, hook=hook)
    save_motion(motion, out / "sample.mot")
    (out / "timing.json").write_text(json.dumps(report.to_json(), indent=1))
    _write_run_config(out, args, cfg)
    return EXIT_OK


def cmd_cleanup(args) -> int:
    flags: dict = {"cleanup": {}}
    if args.weights is not None:
        try:
            w = [float(v) for v in args.weights.split(",")]
        except ValueError as exc:
            raise ConfigError(f"cleanup weights: {exc}") from exc
        if len(w) != 4:
            raise ConfigError("--weights expects four values: pose,foot,traj,vgrf")
        flags["cleanup"].update(w_pose=w[0], w_foot=w[1], w_traj=w[2], w_vgrf=w[3])
    if args.iterations is not None:
        flags["cleanup"]["iterations"] = args.iterations
    cfg = _resolve(args, flags)
    path = Path(args.motion)
    motion = load_motion(path)
    if motion.spec is None:
        raise ValueError(f"{path}: motion has no representation header")
    skeleton = _sidecar_skeleton(path, args.skeleton)
    out = _prepare_out(args)
    corrected, report = cleanup(motion, motion.spec, skeleton, cfg.cleanup, cfg.contact)
    target = out / "corrected.mot"
    if corrected is motion:
        if path.resolve() != target.resolve():
            shutil.copyfile(path, target)
    else:
        save_motion(corrected, target)
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=1))
    _write_run_config(out, args, cfg)
    log.info("%d segments, skate ratio %.3f -> %.3f", len(report.segments),
             report.skate_ratio_before, report.skate_ratio_after)
    return EXIT_OK


def _eval_encoders(cfg: RunConfig, data_dir, motions, vocab) -> EvalEncoders:
    key = f"enc-{dataset_digest(data_dir)}-s{cfg.seed}-i{cfg.eval.encoder_iterations}-b{cfg.eval.batch_size}"
    path = cache_dir() / key
    if (path / "encoders.json").is_file():
        return EvalEncoders.load(path)
    enc = train_eval_encoders(motions, vocab, cfg.seed, cfg.eval.encoder_iterations, cfg.eval.batch_size)
    enc.save(path)
    return EvalEncoders.load(path)


def generate_like(ckpt, real, sampler: SamplerConfig, batch: int = 64, model=None):
    """One sample per real motion, sharing its prompt and length; batch ``b`` uses seed ``seed + b``."""
    out = []
    for b, i in enumerate(range(0, len(real), batch)):
        chunk = real[i : i + batch]
        cfg = dataclasses.replace(sampler, seed=sampler.seed + b)
        motions, _ = generate(ckpt, [m.label for m in chunk], [m.n_valid for m in chunk], cfg, model=model)
        out.extend(motions)
    return out


def cmd_eval(args) -> int:
    flags = {"eval": {"repetitions": args.reps}} if args.reps is not None else {}
    flags.update(_sampler_flags(args))
    if args.view is not None:
        flags.setdefault("eval", {})["view"] = args.view
    cfg = _resolve(args, flags)
    if cfg.eval.repetitions < 1:
        raise ConfigError("eval.repetitions must be >= 1")
    real, vocab, skeleton = load_dataset(args.data)
    enc_dir = args.encoder_data or args.data
    enc_corpus, enc_vocab, _ = load_dataset(enc_dir) if args.encoder_data else (real, vocab, skeleton)
    ckpt = load_checkpoint(args.checkpoint, view=cfg.eval.view)
    sampler = _check_ddpm_steps(cfg.sampler, ckpt.schedule, args.steps is not None)
    encoders = _eval_encoders(cfg, enc_dir, enc_corpus, enc_vocab)
    out = _prepare_out(args)

    net = reduced_precision(ckpt.model) if sampler.precision == "reduced" else ckpt.model
    generated = generate_like(ckpt, real, sampler, model=net)
    groups = defaultdict(list)
    for m in generated:
        groups[m.label].append(m)
    skel = ckpt.skeleton or skeleton
    skates = [skate_ratio(features_to_positions(m.valid_features(), m.spec, skel), skel, m.fps, cfg.contact)
              for m in generated]
    prompts = sorted(groups)
    cache = PromptCache()
    run_inference(prompts[0], ckpt, sampler, cache=cache, model=net)  # warmup
    seconds = [run_inference(p, ckpt, sampler, cache=cache, model=net)[1].seconds for p in prompts]
    report = evaluate(encoders, real, generated, cfg.eval.repetitions, cfg.seed,
                      [g for g in groups.values() if len(g) > 1], skates, seconds)
    report.extra.update({"samples": len(generated), "sampler": sampler.kind, "steps": sampler.steps})
    if args.compare:
        previous = json.loads(Path(args.compare).read_text())
        if previous.get("encoder_version") != report.encoder_version:
            msg = (f"encoder version {report.encoder_version} differs from {previous.get('encoder_version')} "
                   f"in {args.compare}; metrics are not comparable")
            warnings.warn(msg, RuntimeWarning)
            report.extra["compare_warning"] = msg
    (out / "metrics.json").write_text(json.dumps(report.to_json(), indent=1))
    (out / "metrics.csv").write_text(report.to_csv())
    _write_run_config(out, args, cfg)
    return EXIT_OK


def bench_configs(base: SamplerConfig, schedule) -> list[tuple[str, SamplerConfig, bool]]:
    """Cumulative ablation rows: (name, sampler settings, use prompt cache)."""
    ddpm = dataclasses.replace(base, kind=DDPM, steps=schedule.T, batched_cfg=False, precision="full")
    solver = dataclasses.replace(ddpm, kind=DPMPP_2M_SDE, steps=10)
    return [
        ("ddpm1000", ddpm, False),
        ("+solver10", solver, False),
        ("+cache", solver, True),
        ("+parallel-cfg", dataclasses.replace(solver, batched_cfg=True), True),
        ("+reduced", dataclasses.replace(solver, batched_cfg=True, precision="reduced"), True),
    ]


def cmd_bench(args) -> int:
    cfg = _resolve(args)
    ckpt = load_checkpoint(args.checkpoint, view=args.view)
    prompts = [_prompt(p) for p in args.prompt] if args.prompt else sorted(
        {tuple(t) for t in (("walk", "forward"), ("walk", "in", "a", "circle"), ("wave", "arm"), ("squat", "down"))})
    out = _prepare_out(args)
    half = None
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "steps", "aits_seconds", "aits_std", "denoiser_calls", "network_calls", "encoder_calls"])
    for name, sampler, cached in bench_configs(cfg.sampler, ckpt.schedule):
        if name in args.skip:
            continue
        model = None
        if sampler.precision == "reduced":
            half = half or reduced_precision(ckpt.model)
            model = half
        times, reports = [], []
        for _ in range(args.reps):
            for p in prompts:
                # a fresh cache per sample: the prompt is embedded once, then reused
                cache = PromptCache() if cached else None
                _, r = run_inference(p, ckpt, sampler, args.frames, cache, model=model, use_cache=cached)
                times.append(r.seconds)
                reports.append(r)
        first = reports[0]
        w.writerow([name, first.steps, repr(float(np.mean(times))), repr(float(np.std(times))),
                    first.denoiser_calls, first.network_calls, first.encoder_calls])
        log.info("%s: %.3fs per prompt", name, float(np.mean(times)))
    (out / "bench.csv").write_text(buf.getvalue())
    _write_run_config(out, args, cfg)
    return EXIT_OK


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mofusion", description="Text-conditioned motion diffusion toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="top-level seed (overrides every section seed)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override")
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(func=func)
        return p

    def sampler_args(p):
        p.add_argument("--sampler", choices=("dpmpp", "ddpm"))
        p.add_argument("--steps", type=int)
        p.add_argument("--guidance", type=float)
        p.add_argument("--precision", choices=("full", "reduced"))

    p = command("synth", cmd_synth, "write a synthetic labeled motion corpus")
    p.add_argument("--classes", help="comma-separated class names")
    p.add_argument("--samples", type=int, help="samples per class")

    p = command("train", cmd_train, "train the denoiser")
    p.add_argument("--data", required=True, help="dataset directory from 'synth'")
    p.add_argument("--iterations", type=int, help="total iteration target")
    p.add_argument("--resume", help="checkpoint directory to continue from")

    p = command("sample", cmd_sample, "generate a motion for a prompt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--view", choices=("ema", "raw"), default="ema")
    p.add_argument("--footskate-inloop", action="store_true", help="clean x0 predictions during the last steps")
    sampler_args(p)

    p = command("cleanup", cmd_cleanup, "remove foot skating from a .mot file")
    p.add_argument("--motion", required=True)
    p.add_argument("--skeleton", help="skeleton JSON (default: sidecar skeleton.json or built-in)")
    p.add_argument("--weights", help="pose,foot,traj,vgrf loss weights")
    p.add_argument("--iterations", type=int)

    p = command("eval", cmd_eval, "compute the metric suite for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="held-out dataset directory")
    p.add_argument("--encoder-data", help="corpus for the evaluation encoders (default: --data)")
    p.add_argument("--reps", type=int)
    p.add_argument("--view", choices=("ema", "raw"))
    p.add_argument("--compare", help="previous metrics.json; warns on encoder mismatch")
    sampler_args(p)

    p = command("bench", cmd_bench, "progressive inference-cost ablation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", action="append", help="prompt (repeatable; default: one per class)")
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--view", choices=("ema", "raw"), default="ema")
    p.add_argument("--skip", action="append", default=[], choices=BENCH_ROWS, help="omit a row")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except FloatingPointError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, KeyError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
