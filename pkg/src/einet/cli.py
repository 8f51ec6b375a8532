"""``einet`` command line: synth-corpus, train, convert, eval, plot-tracks.

Exit codes: 0 success, 2 usage error, 1 runtime error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from .config import dump_config, load_config, set_value
from .corpus import EMOTION_INDEX, EMOTIONS, PAIR_CODES, build_toy_corpus, load_manifest, parse_pair, write_manifest
from .dsp import Waveform, read_wav, write_wav
from .errors import ConfigError, EinetError

METRIC_NAMES = ("mcd", "rmse_f0", "ddur", "msd", "acc_cls")
SWEEP = (0.1, 0.3, 0.5, 0.7, 0.9)


class UsageError(Exception):
    pass


def _floats(text):
    try:
        return [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from None


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------


def cmd_synth_corpus(args):
    cfg = load_config(args.config, args.set, args.profile)
    if os.path.isdir(args.out) and os.listdir(args.out) and not args.force:
        raise UsageError(f"{args.out} exists and is not empty (use --force)")
    intensities = _floats(args.intensities)
    if not intensities or any(not 0 < i < 1 for i in intensities):
        raise UsageError("intensities must lie strictly inside (0, 1)")
    if args.n_per_emotion < 1:
        raise UsageError("--n-per-emotion must be >= 1")
    manifest, audio = build_toy_corpus(args.n_per_emotion, intensities, args.seed, cfg.dsp())
    os.makedirs(args.out, exist_ok=True)
    manifest.base_dir = args.out
    for u in manifest.entries:
        write_wav(manifest.audio_path(u), audio[u.id])
    write_manifest(manifest, os.path.join(args.out, "manifest.txt"))
    counts = {s: len(manifest.split(s)) for s in ("train", "valid", "test")}
    print(f"wrote {len(manifest)} utterances to {args.out} "
          f"(train {counts['train']}, valid {counts['valid']}, test {counts['test']})")
    return 0


def cmd_train(args):
    from .training import Trainer, compute_features

    cfg = load_config(args.config, args.set, args.profile)
    manifest = load_manifest(args.manifest)
    # vocabulary and speaker table sizes always follow the manifest
    cfg = set_value(cfg, "model.n_symbols", len(manifest.phoneme_inventory))
    cfg = set_value(cfg, "model.n_speakers", len(manifest.speakers))
    if args.epochs is not None:
        cfg = set_value(cfg, "run.epochs", args.epochs)
    print("# resolved config")
    sys.stdout.write(dump_config(cfg))
    sys.stdout.flush()
    if args.dry_run:
        return 0
    feats = compute_features(manifest, cfg)
    trainer = Trainer(cfg, manifest, feats, out_dir=args.out)
    if args.resume:
        trainer.resume(args.resume)
    log_path = os.path.join(args.out, "metrics.log")
    if not args.resume and os.path.exists(log_path):
        os.remove(log_path)

    def report(epoch, metrics, seconds):
        print(trainer.log_lines[-1], flush=True)

    trainer.fit(log_path=log_path, on_epoch=report)
    return 0


def _intensity(value):
    try:
        x = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {value!r}") from None
    if not 0.0 < x < 1.0:
        raise argparse.ArgumentTypeError(f"intensity must lie strictly inside (0, 1), got {x}")
    return x


def _resolve_source(args, speakers):
    if args.manifest and args.source_id:
        manifest = load_manifest(args.manifest)
        u = manifest.by_id(args.source_id)
        return list(u.phonemes), u.speaker, u.id
    if args.phonemes is not None:
        if not args.speaker:
            raise UsageError("--phonemes needs --speaker")
        try:
            phon = [int(x) for x in args.phonemes.replace(",", " ").split()]
        except ValueError:
            raise UsageError("--phonemes must be integer symbol ids") from None
        return phon, args.speaker, None
    raise UsageError("give --manifest with --source-id, or --phonemes with --speaker")


def cmd_convert(args):
    from .training import load_model

    model, cfg, speakers = load_model(args.checkpoint)
    phon, speaker, source_id = _resolve_source(args, speakers)
    if speaker not in speakers:
        raise UsageError(f"unknown speaker {speaker!r}; checkpoint knows {speakers}")
    residual = None
    if args.sample_residual:
        rng = np.random.default_rng(args.seed)
        residual = rng.standard_normal(2)
    wav = model.convert(phon, speakers.index(speaker), EMOTION_INDEX[args.emotion], args.intensity,
                        seed=args.seed, residual=residual)
    out = Waveform(wav.numpy().astype(np.float64), cfg.data.sample_rate, source_id or "")
    write_wav(args.out, out)
    sidecar = {
        "emotion": args.emotion, "intensity": args.intensity, "seed": args.seed,
        "checkpoint_sha256": sha256_file(args.checkpoint), "source_id": source_id,
        "speaker": speaker, "sample_residual": bool(args.sample_residual),
        "output_sha256": sha256_file(args.out),
    }
    with open(os.path.splitext(args.out)[0] + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args):
    from .training import load_model

    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in metrics if m not in METRIC_NAMES]
    if unknown:
        raise UsageError(f"unknown metric(s) {unknown}; choose from {list(METRIC_NAMES)}")
    pairs = [p.strip() for p in args.pairs.split(",") if p.strip()]
    for p in pairs:
        try:
            parse_pair(p)
        except EinetError as exc:
            raise UsageError(str(exc)) from None
    if "acc_cls" in metrics and not args.classifier:
        raise UsageError("acc_cls needs --classifier")
    model, cfg, speakers = load_model(args.checkpoint)
    manifest = load_manifest(args.manifest)
    if not manifest.split("test"):
        raise EinetError("test split is empty")
    os.makedirs(args.out, exist_ok=True)
    report = evaluate_checkpoint(model, cfg, speakers, manifest, metrics, pairs, args.seed,
                                 args.domain, args.classifier, args.out)
    with open(os.path.join(args.out, "report.txt"), "w") as fh:
        fh.write(report.to_table())
    with open(os.path.join(args.out, "report.kv"), "w") as fh:
        fh.write(report.to_kv())
    sys.stdout.write(report.to_table())
    return 0


def intensity_sweep_features(model, dsp, phonemes, speaker, emotion, levels, seed=0):
    """Feature vectors of one source converted at each level; level k uses seed ``seed + k``."""
    from .metrics import utterance_features

    feats = []
    for k, level in enumerate(levels):
        w = model.convert(phonemes, speaker, emotion, level, seed=seed + k)
        feats.append(utterance_features(Waveform(w.numpy().astype(np.float64), dsp.sample_rate), dsp))
    return feats


def evaluate_checkpoint(model, cfg, speakers, manifest, metrics, pairs, seed=0, domain="hz",
                        classifier=None, out_dir=None):
    """Convert neutral sources to each pair's target emotion and score them against references.

    A reference is a test-split utterance of the target emotion; its source is
    the neutral utterance with the same speaker and phoneme sequence. The
    conversion intensity is the mapper's reading of the reference VAD. MSD per
    pair averages, over sources, the spread of each source's intensity sweep.
    """
    import torch

    from .metrics import (EvalReport, accuracy, classify_external, ddur, mcd, mel_alignment,
                          mel_cepstra, grouped_msd, rmse_f0)
    from .dsp import extract_f0, mel_spectrogram
    from .emotion_eval import make_provider

    dsp = cfg.dsp()
    provider = make_provider(cfg.data.vad_provider, cfg.data.vad_file or None, cfg.data.vad_sigma, cfg.run.seed)
    neutral = {(u.speaker, u.phonemes): u for u in manifest.entries if u.emotion == "neutral"}
    mcds, rmses, ref_durs, hyp_durs = [], [], {}, {}
    msd_by_pair, wav_paths, expected = {}, [], {}
    for pair in pairs:
        _, target = parse_pair(pair)
        refs = [u for u in manifest.split("test")
                if u.emotion == target and (u.speaker, u.phonemes) in neutral]
        sweep_feats = []
        for ref in refs:
            src = neutral[(ref.speaker, ref.phonemes)]
            spk = speakers.index(src.speaker)
            with torch.no_grad():
                vad = torch.tensor(provider(ref).as_array(), dtype=torch.float32).unsqueeze(0)
                level = float(model.mapper(vad, torch.tensor([EMOTION_INDEX[target]])).intensity.clamp(1e-3, 1 - 1e-3))
            wav = model.convert(src.phonemes, spk, EMOTION_INDEX[target], level, seed=seed)
            hyp = Waveform(wav.numpy().astype(np.float64), dsp.sample_rate, ref.id)
            ref_w = read_wav(manifest.audio_path(ref), dsp.sample_rate)
            ref_mel = mel_spectrogram(ref_w, dsp).frames
            hyp_mel = mel_spectrogram(hyp, dsp).frames
            if "mcd" in metrics:
                mcds.append(mcd(mel_cepstra(ref_mel), mel_cepstra(hyp_mel), "dtw"))
            if "rmse_f0" in metrics:
                r = rmse_f0(extract_f0(ref_w, dsp), extract_f0(hyp, dsp), domain, mel_alignment(ref_mel, hyp_mel))
                if r is not None:
                    rmses.append(r)
            ref_durs[ref.id] = ref_w.duration
            hyp_durs[ref.id] = hyp.duration
            if "acc_cls" in metrics and out_dir:
                path = os.path.join(out_dir, f"{ref.id}__{target}.wav")
                write_wav(path, hyp)
                wav_paths.append(path)
                expected[path] = target
            if "msd" in metrics:
                sweep_feats.append(intensity_sweep_features(model, dsp, src.phonemes, spk,
                                                            EMOTION_INDEX[target], SWEEP, seed))
        if "msd" in metrics:
            msd_by_pair[pair] = grouped_msd(sweep_feats) if sweep_feats else None
    report = EvalReport(rmse_f0_domain=domain, n_samples=len(ref_durs), msd=msd_by_pair)
    if "mcd" in metrics and mcds:
        report.mcd_db = float(np.mean(mcds))
    if "rmse_f0" in metrics and rmses:
        report.rmse_f0 = float(np.mean(rmses))
    if "ddur" in metrics and ref_durs:
        report.ddur_seconds = ddur(ref_durs, hyp_durs)
    if "acc_cls" in metrics and wav_paths:
        report.acc_cls = accuracy(classify_external(classifier, wav_paths), expected)
    return report


def cmd_plot_tracks(args):
    from .metrics import emit_tracks

    cfg = load_config(args.config, args.set, args.profile)
    dsp = cfg.dsp()
    os.makedirs(args.out, exist_ok=True)
    failed = 0
    for path in args.wavs:
        stem = os.path.splitext(os.path.basename(path))[0]
        try:
            w = read_wav(path, dsp.sample_rate)
            track_path = os.path.join(args.out, f"{stem}.tracks.tsv")
            mel_path = os.path.join(args.out, f"{stem}.mel.npy") if args.mel else None
            rows = emit_tracks(w, track_path, dsp, mel_path)
            if args.images:
                _render(track_path, os.path.join(args.out, f"{stem}.png"))
            print(f"{path}: {rows} frames -> {track_path}")
        except (EinetError, OSError, ValueError) as exc:
            failed += 1
            print(f"error: {path}: {exc}", file=sys.stderr)
    return 1 if failed else 0


def _render(track_path, png_path):
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    from .metrics import read_tracks

    tr = read_tracks(track_path)
    fig, (a, b) = plt.subplots(2, 1, sharex=True, figsize=(8, 4))
    f0 = np.where(tr["voicing"] > 0, tr["f0_hz"], np.nan)
    a.plot(tr["frame_time"], f0)
    a.set_ylabel("F0 (Hz)")
    b.plot(tr["frame_time"], tr["rms"])
    b.set_ylabel("RMS")
    b.set_xlabel("time (s)")
    fig.tight_layout()
    fig.savefig(png_path)
    plt.close(fig)


# ---------------------------------------------------------------------------


def _config_args(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--profile", choices=("tiny", "desk", "full"))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="config override (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="einet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-corpus", help="generate the toy corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-emotion", type=int, default=7)
    p.add_argument("--intensities", default="0.1,0.3,0.5,0.7,0.9")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    _config_args(p)
    p.set_defaults(func=cmd_synth_corpus)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and stop")
    p.add_argument("overrides", nargs="*", metavar="KEY=VALUE")
    _config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", help="convert one utterance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--source-id")
    p.add_argument("--phonemes", help="space or comma separated symbol ids")
    p.add_argument("--speaker")
    p.add_argument("--emotion", required=True, choices=EMOTIONS)
    p.add_argument("--intensity", required=True, type=_intensity)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample-residual", action="store_true",
                   help="draw the non-intensity latent coordinates instead of pinning them to 0")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("eval", help="objective metrics on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--metrics", default="mcd,rmse_f0,ddur,msd")
    p.add_argument("--pairs", default=",".join(f"Neu-{c}" for c in PAIR_CODES if c != "Neu"))
    p.add_argument("--domain", choices=("hz", "log"), default="hz")
    p.add_argument("--classifier", help="external command printing '<wav> <label>' lines")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot-tracks", help="write pitch/energy track files")
    p.add_argument("wavs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--mel", action="store_true", help="also dump log-mel frames as .npy")
    p.add_argument("--images", action="store_true", help="render PNGs (needs matplotlib)")
    _config_args(p)
    p.set_defaults(func=cmd_plot_tracks)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "overrides", None):
        args.set = list(args.set) + list(args.overrides)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"einet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (EinetError, OSError, LookupError, ValueError) as exc:
        print(f"einet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
