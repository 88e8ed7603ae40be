"""Command-line driver for the three-stage sketch animation pipeline.

All commands of one run share an output directory. ``pretrain`` writes the
base model, ``stage1`` and ``stage2`` write adapters next to it, ``stage3``
distills the animation, and ``eval`` scores it. ``synth`` and ``render`` are
standalone helpers.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

import filelock
import numpy as np
import torch

from . import metrics, plots, synthetic
from .config import ConfigError, RunConfig, build_config
from .denoiser import Denoiser, init_weights, tokenize_prompt
from .diffusion import POOL, build_schedule
from .formats import (dump_words, load_weights, parse_words, read_csv, read_pgm_frames, save_weights, write_csv,
                      write_pgm, write_pgm_frames)
from .lora import AdapterFileError, load_adapters, save_adapters
from .raster import SoftnessConfig, render, render_video
from .sds import SdsConfig, adapter_predictor, distill
from .sketch import SvgParseError, parse_animated_svg, parse_svg, write_animated_svg, write_svg
from .trainer import (NonFiniteLoss, PretrainConfig, StageConfig, heldout_loss, pretrain, sketch_latent,
                      train_appearance, train_motion)

log = logging.getLogger("sketchmotion")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
ARTICLES = ("a", "an", "the")
TRACE_HEADER = ["step", "loss", "spatial", "temporal"]


class MissingArtifact(Exception):
    def __init__(self, paths):
        self.paths = [str(p) for p in paths]
        super().__init__("missing artifact(s): " + ", ".join(self.paths))


class Artifacts:
    """File names inside a run directory."""

    def __init__(self, root: Path, base_weights: str = ""):
        self.root = Path(root)
        self.base = Path(base_weights) if base_weights else self.root / "base.skwt"
        self.pretrain_trace = self.root / "pretrain_trace.csv"
        self.sketch = self.root / "sketch.svg"
        self.a = self.root / "A.skad"
        self.a_prime = self.root / "A_prime.skad"
        self.m = self.root / "M.skad"
        self.words1 = self.root / "stage1_words.txt"
        self.words2 = self.root / "stage2_words.txt"
        self.trace1 = self.root / "stage1_trace.csv"
        self.trace2 = self.root / "stage2_trace.csv"
        self.prompt1 = self.root / "appearance_prompt.txt"
        self.prompt2 = self.root / "motion_prompt.txt"
        self.reference_track = self.root / "reference_track.csv"
        self.animation = self.root / "animation.svg"
        self.frames = self.root / "frames"
        self.diagnostics = self.root / "diagnostics.csv"
        self.snapshots = self.root / "snapshots"
        self.report_csv = self.root / "report.csv"
        self.report_txt = self.root / "report.txt"

    def require(self, *paths) -> None:
        missing = [p for p in paths if not Path(p).exists()]
        if missing:
            raise MissingArtifact(missing)


# --------------------------------------------------------------------------- helpers


def softness(cfg: RunConfig) -> SoftnessConfig:
    return SoftnessConfig(cfg.tau, cfg.samples)


def stage_config(cfg: RunConfig) -> StageConfig:
    return StageConfig(steps=cfg.stage_steps, batch_size=cfg.batch_size, lr=cfg.stage_lr, seed=cfg.seed,
                       rank=cfg.rank, alpha=cfg.lora_alpha, eval_draws=cfg.eval_draws)


def sds_config(cfg: RunConfig, **changes) -> SdsConfig:
    kw = dict(iterations=cfg.sds_iterations, lr=cfg.sds_lr, lambda_a=cfg.lambda_a, lambda_m=cfg.lambda_m,
              t_min=None if cfg.t_min < 0 else cfg.t_min, t_max=None if cfg.t_max < 0 else cfg.t_max,
              weighting=cfg.weighting, seed=cfg.seed, resolution=cfg.resolution, softness=softness(cfg),
              snapshot_every=cfg.snapshot_every)
    kw.update(changes)
    return SdsConfig(**kw)


def load_base(cfg: RunConfig, art: Artifacts) -> Denoiser:
    art.require(art.base)
    model = load_weights(art.base)
    expected = (cfg.resolution // POOL,) * 2
    if model.latent_hw != expected:
        raise ConfigError(f"base model expects latents {model.latent_hw}, resolution {cfg.resolution} gives {expected}")
    model.freeze()
    return model


def read_sketch(path: str):
    if not path:
        raise ConfigError("no sketch given (--sketch)")
    p = Path(path)
    if not p.exists():
        raise MissingArtifact([p])
    return parse_svg(p.read_text())


def prompt_subject(prompt: str, motion: bool) -> str:
    """The subject token: after a leading article for a motion prompt, the last token otherwise."""
    words = tokenize_prompt(prompt)
    if motion:
        return words[1] if words[0] in ARTICLES and len(words) > 1 else words[0]
    return words[-1]


def inference_prompt(appearance_prompt: str, motion_prompt: str) -> str:
    """Motion prompt with its subject replaced by the sketch subject."""
    words = tokenize_prompt(motion_prompt)
    old = prompt_subject(motion_prompt, motion=True)
    new = prompt_subject(appearance_prompt, motion=False)
    return " ".join(new if w == old else w for w in words)


def _trace_rows(trace):
    return [[r["step"], r["loss"], r["spatial"], r["temporal"]] for r in trace]


def _read_trace(path):
    _, rows = read_csv(path)
    return [float(r[1]) for r in rows]


def _read_track(path) -> np.ndarray:
    _, rows = read_csv(path)
    return np.array([[float(r[1]), float(r[2])] for r in rows])


def _write_track(path, track) -> None:
    write_csv(path, ["frame", "x", "y"], [[k, float(x), float(y)] for k, (x, y) in enumerate(track)])


# --------------------------------------------------------------------------- commands


def cmd_pretrain(cfg: RunConfig) -> Path:
    art = Artifacts(cfg.out_dir, cfg.base_weights)
    torch.manual_seed(cfg.seed)
    lat = cfg.resolution // POOL
    n_frames = cfg.frames or 16
    model = init_weights(cfg.seed, d_model=cfg.d_model, patch=cfg.patch, latent_hw=(lat, lat),
                         max_frames=max(16, n_frames))
    pcfg = PretrainConfig(steps=cfg.pretrain_steps, lr=cfg.pretrain_lr, seed=cfg.seed, pool_size=cfg.pretrain_pool,
                          n_frames=n_frames, resolution=cfg.resolution, tau=cfg.tau, batch_size=cfg.batch_size)
    trace = pretrain(model, pcfg, build_schedule(model.T))
    save_weights(model, art.base)
    write_csv(art.pretrain_trace, TRACE_HEADER, _trace_rows(trace))
    log.info("pretrained %d steps, final loss %.4f", len(trace), trace[-1]["loss"])
    return art.base


def cmd_stage1(cfg: RunConfig) -> Path:
    art = Artifacts(cfg.out_dir, cfg.base_weights)
    model = load_base(cfg, art)
    sketch = read_sketch(cfg.sketch)
    prompt = cfg.appearance_prompt or "sketch"
    scfg = stage_config(cfg)
    sched = build_schedule(model.T)
    result = train_appearance(sketch, prompt, model, scfg, cfg.resolution, softness(cfg), sched)
    save_adapters(result.adapters["A"], art.a)
    art.words1.write_text(dump_words(result.words))
    art.prompt1.write_text(prompt + "\n")
    art.sketch.write_text(write_svg(sketch))
    write_csv(art.trace1, TRACE_HEADER, _trace_rows(result.trace))
    z0 = sketch_latent(sketch, cfg.resolution, softness(cfg))
    after = heldout_loss(model, z0, prompt, sched, scfg, list(result.adapters["A"]), result.words, frame=0)
    log.info("stage 1 held-out loss %.4f", after)
    return art.a


def cmd_stage2(cfg: RunConfig) -> Path:
    art = Artifacts(cfg.out_dir, cfg.base_weights)
    model = load_base(cfg, art)
    if not cfg.video_dir:
        raise ConfigError("no reference video given (--video-dir)")
    vdir = Path(cfg.video_dir)
    if not vdir.is_dir() or not any(vdir.glob("*.pgm")):
        raise MissingArtifact([vdir / "*.pgm"])
    video = read_pgm_frames(vdir)
    if video.shape[1:] != (cfg.resolution, cfg.resolution):
        raise ConfigError(f"reference frames are {video.shape[1]}x{video.shape[2]}, resolution is {cfg.resolution}")
    prompt = cfg.motion_prompt or "a shape is moving"
    result = train_motion(video, prompt, model, stage_config(cfg), build_schedule(model.T))
    save_adapters(result.adapters["A_prime"], art.a_prime)
    save_adapters(result.adapters["M"], art.m)
    art.words2.write_text(dump_words(result.words))
    art.prompt2.write_text(prompt + "\n")
    _write_track(art.reference_track, metrics.centroid_track(video))
    write_csv(art.trace2, TRACE_HEADER, _trace_rows(result.trace))
    log.info("stage 2 final losses spatial %.4f temporal %.4f", result.trace[-1]["spatial"],
             result.trace[-1]["temporal"])
    return art.m


def _stage3_inputs(cfg: RunConfig, art: Artifacts):
    art.require(art.base, art.a, art.m, art.words1, art.words2, art.prompt1, art.prompt2, art.sketch,
                art.reference_track)
    model = load_base(cfg, art)
    try:
        a_set, m_set = load_adapters(art.a), load_adapters(art.m)
    except AdapterFileError as exc:
        raise MissingArtifact([f"{exc} (unreadable adapter file)"]) from None
    words = {**parse_words(art.words2.read_text()), **parse_words(art.words1.read_text())}
    prompt = inference_prompt(art.prompt1.read_text().strip(), art.prompt2.read_text().strip())
    try:
        embedding = model.embed_prompt(prompt, words)
    except KeyError as exc:
        raise ConfigError(f"inference prompt {prompt!r}: {exc}") from None
    sketch = parse_svg(art.sketch.read_text())
    reference = _read_track(art.reference_track)
    n_frames = cfg.frames or len(reference)
    return model, a_set, m_set, embedding, sketch, reference, n_frames


def run_distill(cfg: RunConfig, art: Artifacts, lambda_a: float, lambda_m: float, callback=None):
    model, a_set, m_set, embedding, sketch, _, n_frames = _stage3_inputs(cfg, art)
    contrib = [(a, lambda_a) for a in a_set] + [(a, lambda_m) for a in m_set]
    scfg = sds_config(cfg, lambda_a=lambda_a, lambda_m=lambda_m)
    return distill(sketch, n_frames, adapter_predictor(model, contrib, embedding), scfg,
                   build_schedule(model.T), callback)


def cmd_stage3(cfg: RunConfig) -> Path:
    art = Artifacts(cfg.out_dir, cfg.base_weights)
    result = run_distill(cfg, art, cfg.lambda_a, cfg.lambda_m)
    art.animation.write_text(write_animated_svg(result.anim, cfg.fps))
    if art.frames.exists():
        shutil.rmtree(art.frames)
    art.frames.mkdir()
    write_pgm_frames(art.frames, render_video(result.anim, cfg.resolution, cfg.resolution, softness(cfg)))
    write_csv(art.diagnostics, ["iteration", "grad_norm", "mean_displacement"], result.diagnostics())
    for it, snap in result.snapshots:
        sdir = art.snapshots / f"iter_{it:05d}"
        sdir.mkdir(parents=True, exist_ok=True)
        (sdir / "animation.svg").write_text(write_animated_svg(snap, cfg.fps))
        write_pgm_frames(sdir, render_video(snap, cfg.resolution, cfg.resolution, softness(cfg)))
    log.info("stage 3 done, mean displacement %.4f", result.displacements[-1])
    return art.animation


def evaluate_run(cfg: RunConfig, art: Artifacts) -> metrics.AblationTable:
    art.require(art.animation, art.sketch, art.reference_track)
    soft = softness(cfg)
    res = cfg.resolution
    sketch_img = render(parse_svg(art.sketch.read_text()), res, res, soft)
    reference = _read_track(art.reference_track)
    table = metrics.AblationTable()
    anim = parse_animated_svg(art.animation.read_text())
    table.add(metrics.evaluate(render_video(anim, res, res, soft), sketch_img, reference, "full"))
    if cfg.ablation:
        for label, la, lm in (("w/o A-LoRA", 0.0, cfg.lambda_m), ("w/o M-LoRA", cfg.lambda_a, 0.0)):
            result = run_distill(cfg, art, la, lm)
            table.add(metrics.evaluate(render_video(result.anim, res, res, soft), sketch_img, reference, label))
    return table


def cmd_eval(cfg: RunConfig) -> Path:
    art = Artifacts(cfg.out_dir, cfg.base_weights)
    table = evaluate_run(cfg, art)
    art.report_csv.write_text(table.to_csv())
    art.report_txt.write_text(table.to_text())
    plots.plot_tracks(art.root / "tracks.png", table.reports)
    traces = {name: _read_trace(p) for name, p in
              (("pretrain", art.pretrain_trace), ("stage 1", art.trace1), ("stage 2", art.trace2)) if p.exists()}
    if traces:
        plots.plot_traces(art.root / "losses.png", traces)
    anim = parse_animated_svg(art.animation.read_text())
    plots.plot_filmstrip(art.root / "filmstrip.png", render_video(anim, cfg.resolution, cfg.resolution, softness(cfg)))
    sys.stdout.write(table.to_text())
    return art.report_csv


def cmd_synth(cfg: RunConfig) -> Path:
    if cfg.motion not in synthetic.MOTION_KINDS:
        raise ConfigError(f"motion must be one of {synthetic.MOTION_KINDS}")
    out = cfg.out_dir
    n_frames = cfg.frames or 16
    clip = synthetic.make_synthetic_video(cfg.motion, n_frames, cfg.resolution, cfg.resolution, cfg.shape)
    write_pgm_frames(out, clip.video)
    _write_track(out / "track.csv", clip.track)
    if cfg.builtin_sketch:
        (out / f"{cfg.builtin_sketch}.svg").write_text(write_svg(synthetic.builtin_sketch(cfg.builtin_sketch)))
    return out


def cmd_render(cfg: RunConfig) -> Path:
    if not cfg.sketch:
        raise ConfigError("no sketch given (--sketch)")
    path = Path(cfg.sketch)
    if not path.exists():
        raise MissingArtifact([path])
    text = path.read_text()
    out = cfg.out_dir
    res = cfg.resolution
    if "frame-0" in text:
        anim = parse_animated_svg(text)
        out.mkdir(parents=True, exist_ok=True)
        write_pgm_frames(out, render_video(anim, res, res, softness(cfg)))
    else:
        write_pgm(out, render(parse_svg(text), res, res, softness(cfg)))
    return out


HELP = {
    "pretrain": "train the base denoiser on synthetic clips",
    "stage1": "learn appearance adapters from a sketch",
    "stage2": "learn motion adapters from a reference clip",
    "stage3": "distill the adapted prior into an animated sketch",
    "eval": "score the animation and run the ablations",
    "synth": "write a synthetic reference clip as PGM frames",
    "render": "rasterize an SVG sketch to PGM",
}

COMMANDS = {
    "pretrain": cmd_pretrain,
    "stage1": cmd_stage1,
    "stage2": cmd_stage2,
    "stage3": cmd_stage3,
    "eval": cmd_eval,
    "synth": cmd_synth,
    "render": cmd_render,
}

# which config key --steps sets for each command
STEP_KEYS = {"pretrain": "pretrain_steps", "stage1": "stage_steps", "stage2": "stage_steps",
             "stage3": "sds_iterations", "eval": "sds_iterations"}
PROMPT_KEYS = {"stage1": "appearance_prompt", "stage2": "motion_prompt"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", action="append", default=[], help="key=value file; repeatable, later wins")
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--sketch")
    common.add_argument("--video-dir")
    common.add_argument("--prompt")
    common.add_argument("--steps", type=int)
    common.add_argument("--rank", type=int)
    common.add_argument("--lambda-a", type=float)
    common.add_argument("--lambda-m", type=float)
    common.add_argument("--frames", type=int)
    common.add_argument("--resolution", type=int)
    common.add_argument("--snapshot-every", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="sketchmotion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name])
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    for key in ("seed", "out", "sketch", "video_dir", "rank", "lambda_a", "lambda_m", "frames", "resolution",
                "snapshot_every"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if args.steps is not None:
        if args.command not in STEP_KEYS:
            raise ConfigError(f"--steps has no meaning for {args.command}")
        overrides[STEP_KEYS[args.command]] = args.steps
    if args.prompt is not None:
        if args.command not in PROMPT_KEYS:
            raise ConfigError(f"--prompt has no meaning for {args.command}")
        overrides[PROMPT_KEYS[args.command]] = args.prompt
    return build_config(args.config, overrides)


def _lock_dir(cfg: RunConfig, command: str) -> Path:
    if command == "render" and cfg.out_dir.suffix:
        return cfg.out_dir.parent
    return cfg.out_dir


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        lock_dir = _lock_dir(cfg, args.command)
        lock_dir.mkdir(parents=True, exist_ok=True)
        lock = filelock.FileLock(str(lock_dir / ".sketchmotion.lock"))
        try:
            lock.acquire(timeout=0)
        except filelock.Timeout:
            raise ConfigError(f"output directory {lock_dir} is locked by another command") from None
        try:
            COMMANDS[args.command](cfg)
        finally:
            lock.release()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SvgParseError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NonFiniteLoss, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main() -> None:
    sys.exit(run())
