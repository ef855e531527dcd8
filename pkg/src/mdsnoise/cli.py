"""Command-line entry point: ``mdsnoise <stage> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys

import numpy as np

from . import denoise as dn
from . import gan
from .errors import ConfigurationError, MdsError
from .extract import IdleDetectorConfig, harvest
from .formats import read_mdp, read_mds, write_mdp, write_mds
from .harness import clean_patches, load_config, render_reports, run_experiment
from .metrics import SsimParams, improvement
from .noise_models import NoiseModel, draw_raw, emit, scale_to_variance, target_variance
from .pairs import make_pairs, save_dataset, split, load_dataset
from .sim import MeasuredRecording, NaturalNoiseParams, compose_recording, derive_seeds, template_for
from .spectrogram import ACTIVITIES, ActivityLabel, NoisePatch

log = logging.getLogger("mdsnoise")


def _activities(text: str) -> list[str]:
    names = [a.strip() for a in text.split(",") if a.strip()]
    for n in names:
        ActivityLabel.from_name(n)
    return names


def _model(args) -> NoiseModel:
    if args.model.upper() in ("MNM", "MN"):
        if not args.ckpt:
            raise ConfigurationError("--model mnm needs --ckpt")
        return NoiseModel(args.model, gan.load_generator(args.ckpt))
    return NoiseModel(args.model)


def cmd_simulate(args):
    params = NaturalNoiseParams.white() if args.white else NaturalNoiseParams(rho_f=args.rho_f, rho_t=args.rho_t)
    acts = [(template_for(n), ActivityLabel.from_name(n)) for n in _activities(args.activities)]
    rec = compose_recording(acts, args.idle_gap, params, seed=args.seed, rid=args.rid)
    write_mds(args.out, rec.to_spectrogram())
    if args.clean_out:
        write_mds(args.clean_out, rec.spectrogram.with_data(rec.clean.astype(np.float32), rid=rec.rid, kind="clean"))


def cmd_clean_patches(args):
    names = _activities(args.activities)
    seeds = derive_seeds(args.seed, 2 * len(names) * args.recordings)
    patches, k = [], 0
    for name in names:
        label = ActivityLabel.from_name(name)
        for r in range(args.recordings):
            rec = compose_recording([(template_for(label), label)], 2.5, None,
                                    seed=seeds[k], rid=f"{name}-{r:03d}")
            for j, p in enumerate(clean_patches(rec, args.per_recording, seeds[k + 1])):
                patches.append(NoisePatch(p, "clean", (rec.rid, j, 0)))
            k += 2
    write_mdp(args.out, patches, {"seed": args.seed, "activities": names})


def cmd_extract(args):
    recs = [MeasuredRecording.from_spectrogram(read_mds(p)) for p in args.inputs]
    cfg = IdleDetectorConfig(exclusion_margin=args.margin, use_ground_truth_intervals=not args.energy)
    patches = harvest(recs, cfg, stride=(args.stride_f, args.stride_t))
    write_mdp(args.out, patches, {"sources": [r.rid for r in recs]})
    print(f"{len(patches)} patches -> {args.out}")


def cmd_train_gan(args):
    patches, _ = read_mdp(args.patches)
    cfg = gan.GanConfig(epochs=args.epochs, seed=args.seed, batch_size=args.batch_size, learning_rate=args.lr,
                        critic_steps_per_gen_step=args.n_critic)
    trained = gan.train(patches, cfg, progress=True)
    gan.save_generator(trained, args.out)


def cmd_gen_noise(args):
    model = _model(args)
    cleans = read_mdp(args.clean)[0] if args.clean else None
    seeds = derive_seeds(args.seed, args.count)
    out = []
    for i, s in enumerate(seeds):
        if cleans:
            sp = emit(model, cleans[i % len(cleans)].data, args.snr, s)
            out.append(sp.patch)
        else:
            data, _, _ = scale_to_variance(draw_raw(model, s), target_variance(args.signal_var, args.snr))
            out.append(NoisePatch(data, model.tag.lower(), "generated"))
    write_mdp(args.out, out, {"model": model.tag, "snr_db": args.snr, "seed": args.seed})


def cmd_make_pairs(args):
    cleans, _ = read_mdp(args.clean)
    model = _model(args)
    sources = [o[0] if isinstance(o, (list, tuple)) else str(o) for o in (c.origin for c in cleans)]
    pairs, manifest = make_pairs(cleans, model, args.snr, args.draws, args.seed, args.target, sources, args.residual)
    if args.split_rate:
        train, test = split(manifest, args.split_rate, args.seed)
        manifest.splits = {"rate": args.split_rate, "train": train, "test": test}
    save_dataset(args.out, pairs, manifest)


def cmd_train_denoiser(args):
    pairs, manifest = load_dataset(args.dataset)
    if manifest.splits:
        keep = set(manifest.splits["train"])
        pairs = [p for p in pairs if p.provenance[0] in keep]
    cfg = dn.TrainConfig(learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
                         time_budget_s=args.budget if args.budget > 0 else None, depth=args.depth, width=args.width)
    den = dn.train_denoiser(pairs, args.arch, cfg, progress=True)
    dn.save_denoiser(den, args.out)


def cmd_denoise(args):
    den = dn.load_denoiser(args.ckpt)
    write_mds(args.out, dn.apply(den, read_mds(args.inp)))


def _json_num(v):
    return None if isinstance(v, float) and math.isinf(v) else v


def cmd_evaluate(args):
    gt, noisy, den = read_mds(args.gt), read_mds(args.noisy), read_mds(args.denoised)
    rep = improvement(gt, noisy, den, SsimParams(window=args.window))
    row = {k: _json_num(v) for k, v in rep.as_row().items()}
    row.update({"gt": args.gt, "noisy": args.noisy, "denoised": args.denoised})
    with open(args.out, "w") as fh:
        json.dump(row, fh, indent=2, sort_keys=True)


def cmd_run(args):
    cfg = load_config(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    out = run_experiment(cfg, progress=True)
    print(f"results in {out}")


def cmd_render(args):
    written = render_reports(args.results)
    if written["notice"]:
        print(written["notice"])
    for p in written["tables"] + list(written["figures"]):
        print(p)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mdsnoise", description="Micro-Doppler noise modelling and denoising pipeline")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="synthesise one noisy recording (.mds)")
    p.add_argument("--activities", default=",".join(ACTIVITIES), help="comma-separated activity names")
    p.add_argument("--idle-gap", type=float, default=2.5, help="seconds of idle between activities")
    p.add_argument("--rho-f", type=float, default=0.7)
    p.add_argument("--rho-t", type=float, default=0.9)
    p.add_argument("--white", action="store_true", help="uncorrelated noise without bursts or band")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rid", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--clean-out", help="also write the noise-free spectrogram")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("clean-patches", help="sample clean (100, 28) activity windows (.mdp)")
    p.add_argument("--activities", default=",".join(ACTIVITIES))
    p.add_argument("--recordings", type=int, default=4, help="recordings per activity")
    p.add_argument("--per-recording", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_clean_patches)

    p = sub.add_parser("extract", help="harvest idle-period noise patches")
    p.add_argument("inputs", nargs="+", help=".mds recordings")
    p.add_argument("--stride-f", type=int, default=14)
    p.add_argument("--stride-t", type=int, default=14)
    p.add_argument("--margin", type=int, default=0, help="columns trimmed from each idle edge")
    p.add_argument("--energy", action="store_true", help="detect idle columns by energy instead of stored intervals")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train-gan", help="train the noise generator")
    p.add_argument("--patches", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--n-critic", type=int, default=5)
    p.set_defaults(func=cmd_train_gan)

    p = sub.add_parser("gen-noise", help="emit SNR-scaled noise patches")
    p.add_argument("--model", required=True, type=str.lower, choices=["mnm", "mn", "awgn", "mix"])
    p.add_argument("--ckpt", help="generator checkpoint (mnm only)")
    p.add_argument("--snr", type=float, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--clean", help="clean patches whose variance sets the scale")
    p.add_argument("--signal-var", type=float, default=0.01, help="signal variance when --clean is absent")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_noise)

    p = sub.add_parser("make-pairs", help="build a denoiser training dataset")
    p.add_argument("--clean", required=True, help="clean patches (.mdp)")
    p.add_argument("--model", required=True, type=str.lower, choices=["mnm", "mn", "awgn", "mix"])
    p.add_argument("--ckpt")
    p.add_argument("--snr", type=float, nargs="+", required=True)
    p.add_argument("--draws", type=int, default=1, help="noise draws per clean patch and SNR")
    p.add_argument("--target", choices=["noise_patch", "clean"], default="noise_patch")
    p.add_argument("--residual", choices=["unclipped", "effective"], default="unclipped",
                   help="noise target: scaled noise, or noisy minus clean after clipping")
    p.add_argument("--split-rate", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_pairs)

    p = sub.add_parser("train-denoiser", help="train DnCNN / CAE / UNet")
    p.add_argument("--arch", choices=dn.ARCHES, default="dncnn")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--depth", type=int, default=8)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--budget", type=float, default=300.0, help="wall-clock seconds; <= 0 disables")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_denoiser)

    p = sub.add_parser("denoise", help="denoise a spectrogram with a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("evaluate", help="PSNR/SSIM before and after denoising")
    p.add_argument("--gt", required=True)
    p.add_argument("--noisy", required=True)
    p.add_argument("--denoised", required=True)
    p.add_argument("--window", type=int, default=None, help="sliding SSIM window (default: global)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="run a full experiment from a TOML config")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("render", help="tables and figures from a results directory")
    p.add_argument("--results", required=True)
    p.set_defaults(func=cmd_render)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (MdsError, OSError) as exc:
        print(f"mdsnoise {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
