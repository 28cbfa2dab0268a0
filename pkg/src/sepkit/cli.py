"""Command-line entry point.

Subcommands: generate | train | separate | evaluate | inspect-bases |
inspect-spectrogram. Machine-readable outputs go to files; diagnostics to
stderr. Exit codes: 0 success, 1 usage, 2 data/format, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import datagen, dsp, model as mdl, training
from .errors import FormatError, InvalidArgument, NumericError
from .objectives import improvement, sdr, si_sdr, upit


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def write_pgm(path, values):
    """8-bit binary PGM; rows of `values` scaled to the full 0..255 range."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = np.clip(np.round((v - lo) * scale), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def write_csv(path, values):
    np.savetxt(path, np.asarray(values), delimiter=",", fmt="%.10g")


def config_hash(cfg):
    doc = json.dumps(cfg.to_dict(), sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args):
    manifest = datagen.Manifest.from_json(args.manifest)
    if os.path.isdir(args.out) and os.listdir(args.out) and not args.force:
        print(f"error: output directory {args.out} is not empty "
              f"(use --force to overwrite)", file=sys.stderr)
        return 2
    counts = datagen.build_dataset(manifest, args.out)
    total = sum(counts.values())
    print(f"wrote {total} mixtures to {args.out} "
          f"(train={counts['train']} valid={counts['valid']} "
          f"test={counts['test']})")
    return 0


def cmd_train(args):
    cfg = mdl.ModelConfig.from_json(args.config)
    records = datagen.read_index(args.data)
    items = training.load_items([r for r in records if r["split"] == "train"],
                                expected_rate=8000)
    val_items = training.load_items([r for r in records if r["split"] == "valid"],
                                    expected_rate=8000)
    os.makedirs(args.out, exist_ok=True)
    if args.resume:
        cfg, params, state, epoch, rng = training.load_checkpoint(args.resume)
        training.train(cfg, items, args.epochs, args.seed, out_dir=args.out,
                       val_items=val_items or None, params=params, state=state,
                       rng=rng, start_epoch=epoch,
                       log_fn=lambda e: print(json.dumps(e), file=sys.stderr))
    else:
        if args.epochs == 0:
            params = training.init_params(cfg, args.seed)
            state = training.OptimizerState()
            rng = np.random.default_rng(args.seed + 1)
            training.save_checkpoint(os.path.join(args.out, "last"), cfg,
                                     params, state, 0, rng)
        else:
            training.train(cfg, items, args.epochs, args.seed,
                           out_dir=args.out, val_items=val_items or None,
                           log_fn=lambda e: print(json.dumps(e), file=sys.stderr))
    return 0


def cmd_separate(args):
    cfg, params, _, _, _ = training.load_checkpoint(args.ckpt)
    wav = dsp.wav_read(args.infile)
    outs = mdl.separate(wav.samples, params, cfg)
    os.makedirs(args.out, exist_ok=True)
    for i, est in enumerate(outs, start=1):
        dsp.wav_write(os.path.join(args.out, f"s{i}.wav"),
                      dsp.Waveform(est, wav.sample_rate))
    print(f"wrote {len(outs)} sources to {args.out}")
    return 0


def cmd_evaluate(args):
    records = [r for r in datagen.read_index(args.data) if r["split"] == "test"]
    if not records:
        print("error: empty test split", file=sys.stderr)
        return 2
    if args.oracle:
        cfg = None
    else:
        if not args.ckpt:
            print("error: --ckpt is required unless --oracle is given",
                  file=sys.stderr)
            return 1
        cfg, params, _, _, _ = training.load_checkpoint(args.ckpt)
    items = training.load_items(records, expected_rate=8000)
    per_item = []
    for name, mix_s, refs in items:
        if args.oracle:
            ests = [np.array(r) for r in refs]
        else:
            ests = mdl.separate(mix_s, params, cfg)
        t_use = min(len(ests[0]), min(len(r) for r in refs))
        ests = [e[:t_use] for e in ests]
        refs_t = [r[:t_use] for r in refs]
        mix_t = mix_s[:t_use]
        _, assignment = upit(ests, refs_t)
        k = len(ests)
        si = [improvement(ests[i], refs_t[assignment.mapping[i]], mix_t, si_sdr)
              for i in range(k)]
        sd = [improvement(ests[i], refs_t[assignment.mapping[i]], mix_t, sdr)
              for i in range(k)]
        per_item.append({"name": name,
                         "assignment": list(assignment.mapping),
                         "si_sdri": float(np.mean(si)),
                         "sdri": float(np.mean(sd))})
    report = {
        "config_hash": config_hash(cfg) if cfg else "oracle",
        "items": per_item,
        "mean_si_sdri": float(np.mean([it["si_sdri"] for it in per_item])),
        "mean_sdri": float(np.mean([it["sdri"] for it in per_item])),
    }
    with open(args.report, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    print(f"evaluated {len(per_item)} items; "
          f"mean SI-SDRi {report['mean_si_sdri']:.2f} dB")
    return 0


def greedy_basis_order(filters):
    """Nearest-neighbor chain under Euclidean distance.

    Starts at the filter with the largest norm; ties break toward the
    lower index. Returns a permutation of 0..N-1.
    """
    filters = np.asarray(filters, dtype=np.float64)
    n = len(filters)
    norms = np.linalg.norm(filters, axis=1)
    current = int(np.argmax(norms))
    order = [current]
    remaining = set(range(n)) - {current}
    while remaining:
        cands = sorted(remaining)
        dists = [np.linalg.norm(filters[c] - filters[current]) for c in cands]
        current = cands[int(np.argmin(dists))]
        order.append(current)
        remaining.discard(current)
    return order


def cmd_inspect_bases(args):
    cfg, params, _, _, _ = training.load_checkpoint(args.ckpt)
    kernels = params["enc.kernels"].value.reshape(cfg.n_basis, cfg.enc_kernel)
    order = greedy_basis_order(kernels)
    sorted_bases = kernels[order]
    response = np.abs(np.fft.rfft(sorted_bases, n=512, axis=1))
    os.makedirs(args.out, exist_ok=True)
    write_csv(os.path.join(args.out, "bases_sorted.csv"), sorted_bases)
    write_csv(os.path.join(args.out, "bases_response.csv"), response)
    write_pgm(os.path.join(args.out, "bases_sorted.pgm"), sorted_bases)
    write_pgm(os.path.join(args.out, "bases_response.pgm"), response)
    with open(os.path.join(args.out, "bases_order.json"), "w") as fh:
        json.dump(order, fh)
    print(f"wrote basis inspection for {cfg.n_basis} filters to {args.out}")
    return 0


def cmd_inspect_spectrogram(args):
    wav = dsp.wav_read(args.infile)
    window = dsp.hamming_window(args.win)
    spec = dsp.stft(wav, window, args.hop,
                    pad=0 if args.pad is None else args.pad)
    mag = dsp.magnitude(spec)
    log_mag = np.maximum(20.0 * np.log10(mag + 1e-30), -80.0)
    write_csv(args.out + ".csv", log_mag)
    write_pgm(args.out + ".pgm", log_mag[::-1])  # low frequencies at the bottom
    print(f"wrote {log_mag.shape[0]}x{log_mag.shape[1]} spectrogram "
          f"to {args.out}.csv/.pgm")
    return 0


# ---------------------------------------------------------------------------
# Argument wiring
# ---------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="sepkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="build a synthetic corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train a separator")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", default=None,
                   help="checkpoint directory to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("separate", help="separate one mixture WAV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_separate)

    p = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--oracle", action="store_true",
                   help="echo references as estimates (metric cross-check)")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("inspect-bases", help="export sorted encoder bases")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_inspect_bases)

    p = sub.add_parser("inspect-spectrogram", help="export a log spectrogram")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--win", type=int, default=256)
    p.add_argument("--hop", type=int, default=8)
    p.add_argument("--pad", type=int, default=None)
    p.set_defaults(fn=cmd_inspect_spectrogram)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code or 0
    try:
        return args.fn(args)
    except InvalidArgument as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
