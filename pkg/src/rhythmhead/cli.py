"""Command-line entry point: ``rhythmhead <subcommand> [options]``.

Exit status is 0 on success, 1 on usage errors and 2 when a command fails.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _config(args):
    from .pipeline import PipelineConfig

    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _clip_inputs(directories):
    from .pipeline import load_clip

    clips = [load_clip(d) for d in directories]
    return clips, [(c.landmarks, c.audio) for c in clips]


def _log_writer(path, key):
    records = []

    def log(record, *extra):
        if extra:  # expression trainer reports (epoch, loss)
            record = {"epoch": record, "mse": extra[0]}
        records.append(dict(record))

    def flush():
        from .pipeline import write_training_log

        rows = [{"step": r[key], **{k: v for k, v in r.items() if k != key}} for r in records]
        write_training_log(path, rows)

    return log, flush


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args):
    from .pipeline import save_scene, synth_scene

    cfg = _config(args)
    n = args.frames or cfg.n_frames
    subject = cfg.seed if args.subject is None else args.subject
    scene = synth_scene(subject, n, cfg, motion_scale=args.motion_scale, expression_scale=args.expression_scale)
    save_scene(args.out, scene)
    print(f"wrote {n} frames of subject {subject} to {args.out}")


def cmd_disentangle(args):
    from . import geometry

    frames, fps = geometry.load_landmarks_json(args.landmarks)
    motion, aligned = geometry.disentangle(frames)
    motion.fps = fps
    geometry.save_motion_csv(args.out, motion)
    if args.aligned_out:
        geometry.save_landmarks_json(args.aligned_out, aligned, fps)
    print(json.dumps({"frames": len(frames), "most_frontal_frame": geometry.select_reference_frame(motion), "motion_csv": str(args.out)}))


def _model_dir_models(cfg, out):
    from .pipeline import Models

    if (Path(out) / "config.json").exists():
        models, _ = Models.load(out, cfg, require=())
        return models
    return Models.build(cfg)


def cmd_train_motion(args):
    from .pipeline import train_motion_model

    cfg = _config(args)
    _, clips = _clip_inputs(args.data)
    log, flush = _log_writer(Path(args.out) / "motion_log.csv", "epoch")
    Path(args.out).mkdir(parents=True, exist_ok=True)
    models = _model_dir_models(cfg, args.out)
    phi, hist = train_motion_model(cfg, clips, models.phi, epochs=args.epochs, log=log)
    models.phi = phi
    hashes = models.save(args.out, cfg, only=("phi",))
    flush()
    print(json.dumps({"final_mse": hist[-1]["mse"] if hist else None, "checkpoints": hashes}))


def cmd_train_expression(args):
    from .pipeline import train_expression_model

    cfg = _config(args)
    _, clips = _clip_inputs(args.data)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    log, flush = _log_writer(Path(args.out) / "expression_log.csv", "epoch")
    models = _model_dir_models(cfg, args.out)
    psi, basis, hist = train_expression_model(cfg, clips, models.psi, epochs=args.epochs, log=log)
    models.psi, models.basis = psi, basis
    hashes = models.save(args.out, cfg, only=("psi", "basis"))
    flush()
    print(json.dumps({"final_mse": hist[-1] if hist else None, "checkpoints": hashes}))


def cmd_train_generator(args):
    from .pipeline import training_samples
    from .pipeline.core import train_generator_model

    cfg = _config(args)
    clips, _ = _clip_inputs(args.data)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    samples = [s for c in clips for s in training_samples(cfg, c.frames, c.landmarks)]
    log, flush = _log_writer(Path(args.out) / "generator_log.csv", "step")
    models = _model_dir_models(cfg, args.out)
    try:
        gen, disc, hist = train_generator_model(cfg, samples, models.generator, models.discriminator, steps=args.steps, log=log, checkpoint_dir=args.out if cfg.save_every else None)
    finally:
        flush()
    models.generator, models.discriminator = gen, disc
    hashes = models.save(args.out, cfg, only=("generator", "discriminator"))
    print(json.dumps({"final": hist[-1] if hist else None, "checkpoints": hashes}))


def cmd_generate(args):
    from . import geometry
    from .audio import AudioTrack, read_wav
    from .pipeline import Models, generate_video, load_clip

    models, cfg = Models.load(args.models)
    if args.config or args.seed is not None:
        cfg = _config(args)
    clip = load_clip(args.data)
    spf = cfg.sample_rate / cfg.fps
    split = int(round(cfg.tau * spf))
    ref_audio = AudioTrack(clip.audio.samples[:split], clip.audio.sample_rate)
    driving = read_wav(args.driving_audio) if args.driving_audio else AudioTrack(clip.audio.samples[split:], clip.audio.sample_rate)
    motion = geometry.load_motion_csv(args.motion, cfg.fps) if args.motion else None
    t0 = time.perf_counter()
    res = generate_video(cfg, clip.frames, clip.landmarks, ref_audio, driving, models, out_dir=args.out, driving_motion=motion)
    print(json.dumps({"frames": len(res.frames), "out": str(args.out), "seconds": round(time.perf_counter() - t0, 3)}))


def cmd_eval(args):
    from . import geometry
    from .pipeline import compute_lmd, compute_ssim, mean_l1
    from .pipeline.scene import load_frames

    gen_dir, ref_dir = Path(args.gen), Path(args.ref)
    gen = load_frames(gen_dir)
    ref = load_frames(ref_dir / "frames" if (ref_dir / "frames").is_dir() else ref_dir)
    start = 0
    if (gen_dir / "manifest.json").exists():
        start = int(json.loads((gen_dir / "manifest.json").read_text()).get("start_frame", 0))
    if start + len(gen) > len(ref):
        raise ValueError(f"reference has {len(ref)} frames; generated frames cover {start}..{start + len(gen) - 1}")
    ref = ref[start : start + len(gen)]
    out = {
        "ssim": float(np.mean([compute_ssim((a + 1) / 2, (b + 1) / 2) for a, b in zip(gen, ref)])),
        "l1": mean_l1(gen, ref),
        "frames": len(gen),
        "start_frame": start,
    }
    if (gen_dir / "landmarks.json").exists() and (ref_dir / "landmarks.json").exists():
        gl, _ = geometry.load_landmarks_json(gen_dir / "landmarks.json")
        rl, _ = geometry.load_landmarks_json(ref_dir / "landmarks.json")
        out["lmd"] = compute_lmd(np.asarray(gl), np.asarray(rl)[start : start + len(gl)])
    else:
        out["lmd"] = None
    out["note"] = "FID and CSIM need pretrained networks and are out of scope; LMD and SSIM only"
    print(json.dumps(out, sort_keys=True))


def cmd_gradcheck(args):
    from .gradsuite import format_table, run_suite

    seed = 0 if args.seed is None else args.seed
    t0 = time.perf_counter()
    results = run_suite(seed)
    print(format_table(results))
    ok = all(r.passed for r in results)
    print(f"\n{sum(r.passed for r in results)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK if ok else EXIT_FAILURE


def cmd_export_motion_csv(args):
    from . import geometry
    from .expression import encode_expression
    from .pipeline import Models

    frames, fps = geometry.load_landmarks_json(args.landmarks)
    motion, aligned = geometry.disentangle(frames)
    h = motion.to_array()
    header = list(geometry.MOTION_COLUMNS)
    cols = [h]
    if args.models:
        models, _ = Models.load(args.models, require=("basis",))
        p = encode_expression(np.asarray(aligned), models.basis)
        header += [f"p{i}" for i in range(p.shape[1])]
        cols.append(p)
    table = np.concatenate(cols, axis=1)
    lines = ["frame," + ",".join(header)] + [f"{t}," + ",".join(repr(float(v)) for v in row) for t, row in enumerate(table)]
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(json.dumps({"frames": len(table), "columns": header, "fps": fps}))


# ---------------------------------------------------------------------------


def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--seed", type=int, metavar="N", help="override the configured seed")

    p = Parser(prog="rhythmhead", description="Talking-head synthesis with explicit head-motion modeling.", parents=[common])
    sub = p.add_subparsers(dest="command", metavar="<command>", parser_class=Parser)

    s = sub.add_parser("synth-data", parents=[common], help="render a labeled synthetic clip")
    s.add_argument("--out", required=True)
    s.add_argument("--subject", type=int, help="subject seed (default: the run seed)")
    s.add_argument("--frames", type=int)
    s.add_argument("--motion-scale", type=float, default=1.0)
    s.add_argument("--expression-scale", type=float, default=1.0)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("disentangle", parents=[common], help="split landmarks into head motion and aligned expression")
    s.add_argument("--landmarks", required=True)
    s.add_argument("--out", required=True, help="motion CSV")
    s.add_argument("--aligned-out", help="aligned landmark JSON")
    s.set_defaults(func=cmd_disentangle)

    s = sub.add_parser("train-motion", parents=[common], help="train the head-motion learner")
    s.add_argument("--data", nargs="+", required=True, help="clip directories")
    s.add_argument("--out", required=True, help="model directory")
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train_motion)

    s = sub.add_parser("train-expression", parents=[common], help="fit the expression basis and learner")
    s.add_argument("--data", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train_expression)

    s = sub.add_parser("train-generator", parents=[common], help="train the frame generator and discriminators")
    s.add_argument("--data", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_train_generator)

    s = sub.add_parser("generate", parents=[common], help="synthesize frames after the reference span")
    s.add_argument("--data", required=True, help="reference clip directory")
    s.add_argument("--models", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--driving-audio", help="WAV following the reference span (default: the clip's own continuation)")
    s.add_argument("--motion", help="motion CSV replacing the predicted head motion")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("eval", parents=[common], help="LMD and SSIM of generated frames against a reference clip")
    s.add_argument("--gen", required=True)
    s.add_argument("--ref", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every differentiable module")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("export-motion-csv", parents=[common], help="per-frame head motion (and expression coefficients) from landmarks")
    s.add_argument("--landmarks", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--models", help="model directory holding basis.hmkt")
    s.set_defaults(func=cmd_export_motion_csv)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        code = args.func(args)
    except Exception as exc:  # runtime failures map to exit status 2
        print(f"rhythmhead {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
