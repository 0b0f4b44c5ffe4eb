"""Command-line surface.

Subcommands: gen-data, train, embed, synth, prime-synth, eval (mcd | id |
auc | stratify), grad-check. Exit codes: 0 success, 1 usage/config error,
2 data/format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import checkpoint, config as config_mod, evaluation, training
from .encoder import SpeakerEmbedding
from .errors import ConfigError, CorpusError, FrameFormatError, LoopfitError, NumericError, TripletLayoutError
from .features import (
    DatasetManifest,
    PhonemeSequence,
    VocoderFrameSequence,
    generate_toy_corpus,
    read_frames,
    write_frames,
)
from .loop import free_run, prime_and_generate


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{message}\n{self.format_usage()}")


def build_parser():
    parser = _Parser(prog="loopfit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[], help="generate a synthetic toy corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, default=12)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--utterances", type=int, default=40)
    p.add_argument("--phonemes", type=int, default=16)
    p.add_argument("--d-o", type=int, default=63)
    p.add_argument("--jitter", type=float, default=0.05)

    p = sub.add_parser("train", help="run the two-phase training schedule")
    p.add_argument("--config")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--preset", default=None, choices=sorted(config_mod.PRESETS))
    p.add_argument("--manifest")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--no-contrast", action="store_true")
    p.add_argument("--no-cycle", action="store_true")
    p.add_argument("--agnostic", action="store_true")
    p.add_argument("--resume")
    p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("embed", help="feed-forward speaker fitting (no transcript)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="synthesize from a fitted embedding")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--embedding", required=True)
    p.add_argument("--phonemes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-frames", type=int, default=1000)
    p.add_argument("--phoneme-map")

    p = sub.add_parser("prime-synth", help="prime the buffer, then synthesize new text")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--primer", required=True)
    p.add_argument("--primer-phonemes", required=True)
    p.add_argument("--phonemes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--primer-frames", type=int, default=300)
    p.add_argument("--max-frames", type=int, default=1000)
    p.add_argument("--phoneme-map")

    p = sub.add_parser("eval", help="evaluation metrics")
    esub = p.add_subparsers(dest="metric", required=True)

    pm = esub.add_parser("mcd", help="DTW-aligned spectral distortion between two frame files")
    pm.add_argument("--a", required=True)
    pm.add_argument("--b", required=True)
    pm.add_argument("--dims", default=None, help="comma-separated feature indices")
    pm.add_argument("--report")

    pi = esub.add_parser("id", help="train/evaluate the speaker-ID classifier")
    pi.add_argument("--manifest", required=True)
    pi.add_argument("--split", default="test", choices=["train", "test"])
    pi.add_argument("--speakers", type=int, default=0, help="restrict to first N speakers")
    pi.add_argument("--epochs", type=int, default=20)
    pi.add_argument("--seed", type=int, default=None)
    pi.add_argument("--classifier", help="load a trained classifier instead of training")
    pi.add_argument("--save-classifier")
    pi.add_argument("--channels", type=int, default=8)
    pi.add_argument("--d-z", type=int, default=16)
    pi.add_argument("--fc-width", type=int, default=32)
    pi.add_argument("--report")

    pa = esub.add_parser("auc", help="same/not-same verification AUC over pair lists")
    pa.add_argument("--classifier", help="speaker-ID classifier checkpoint")
    pa.add_argument("--checkpoint", help="model checkpoint (uses its fitting encoder)")
    pa.add_argument("--same", required=True, help="tab-separated frame-file pairs")
    pa.add_argument("--notsame", required=True)
    pa.add_argument("--roc-csv")
    pa.add_argument("--report")

    ps = esub.add_parser("stratify", help="keep speakers above an inter/intra distance ratio")
    ps.add_argument("--manifest", required=True)
    ps.add_argument("--classifier", required=True)
    ps.add_argument("--threshold", type=float, required=True)
    ps.add_argument("--split", default="test", choices=["train", "test"])
    ps.add_argument("--report")

    p = sub.add_parser("grad-check", help="finite-difference check of the full loss")
    p.add_argument("--preset", default="desk", choices=["desk"])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def _resolve_seed(flag_seed, file_vals=None, default=0):
    """Flags beat file values beat LOOPFIT_SEED beats the schema default."""
    if flag_seed is not None:
        return flag_seed
    if file_vals and "seed" in file_vals:
        return file_vals["seed"]
    env = config_mod.env_default_seed()
    if env is not None:
        return env
    return default


def _parse_phonemes(text, map_path=None):
    mapping = {}
    if map_path:
        with open(map_path, "r", encoding="utf-8") as fh:
            for line in fh:
                parts = line.split()
                if len(parts) == 2:
                    mapping[parts[0]] = int(parts[1])
    ids = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        if token in mapping:
            ids.append(mapping[token])
        else:
            try:
                ids.append(int(token))
            except ValueError as exc:
                raise ConfigError(
                    f"phoneme token {token!r} is not an id or a mapped name"
                ) from exc
    if not ids:
        raise ConfigError("empty phoneme string")
    return ids


def _read_embedding_file(path):
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if len(parts) >= 3:
                return SpeakerEmbedding(np.array([float(v) for v in parts[2:]]))
    raise CorpusError(f"no embedding line found in {path!r}")


def _load_pairs(path):
    base = os.path.dirname(os.path.abspath(path))
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            a, _, b = line.partition("\t")
            if not b:
                raise CorpusError(f"pair line needs two tab-separated paths: {line!r}")
            pairs.append(
                (
                    read_frames(os.path.join(base, a)),
                    read_frames(os.path.join(base, b)),
                )
            )
    if not pairs:
        raise CorpusError(f"no pairs found in {path!r}")
    return pairs


# -- subcommand implementations -----------------------------------------------------


def _cmd_gen_data(args):
    seed = _resolve_seed(args.seed)
    generate_toy_corpus(
        args.out,
        n_speakers=args.speakers,
        utterances_per_speaker=args.utterances,
        phoneme_inventory_size=args.phonemes,
        seed=seed,
        d_o=args.d_o,
        jitter_sd=args.jitter,
    )
    print(f"wrote corpus under {args.out} (seed {seed})")
    return 0


def _cmd_train(args):
    layers = []
    if args.preset:
        layers.append(config_mod.PRESETS[args.preset])
    file_vals = {}
    if args.config:
        file_vals = config_mod.load_config_file(args.config)
        layers.append(file_vals)
    flag_vals = {}
    for item in args.set:
        key, _, raw = item.partition("=")
        if not raw:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        flag_vals[key.strip()] = config_mod._parse_value(key.strip(), raw)
    if args.manifest:
        flag_vals["data.manifest"] = args.manifest
    if args.no_contrast:
        flag_vals["loss.alpha"] = 0.0
    if args.no_cycle:
        flag_vals["loss.beta"] = 0.0
    if args.agnostic:
        flag_vals["model.mode"] = "agnostic"
    flag_vals["seed"] = _resolve_seed(
        args.seed if args.seed is not None else flag_vals.get("seed"), file_vals
    )
    layers.append(flag_vals)
    cfg = config_mod.merge_config(*layers)
    result = training.run_training(
        cfg, args.run_dir, resume=args.resume, quiet=not args.verbose
    )
    print(
        f"training done: {result.state.epoch} epochs, "
        f"val {result.initial_val:.4f} -> {result.final_val:.4f} "
        f"(best {result.best_val:.4f})"
    )
    return 0


def _cmd_embed(args):
    model, encoder, _, _, _ = checkpoint.load_model(args.checkpoint)
    if encoder is None:
        raise ConfigError("checkpoint has no fitting encoder (agnostic model)")
    seq = read_frames(args.frames)
    emb = encoder.embed(seq)
    utt = os.path.splitext(os.path.basename(args.frames))[0]
    with open(args.out, "w", encoding="utf-8") as fh:
        values = " ".join(repr(float(v)) for v in emb.vector)
        fh.write(f"{utt} - {values}\n")
    print(f"embedded {args.frames} -> {args.out} (d_z={emb.d_z})")
    return 0


def _cmd_synth(args):
    model, _, cfg, _, _ = checkpoint.load_model(args.checkpoint)
    if not model.is_embedded:
        raise ConfigError("synth requires an embedded-mode checkpoint; use prime-synth")
    emb = _read_embedding_file(args.embedding)
    ids = _parse_phonemes(args.phonemes, args.phoneme_map)
    s = PhonemeSequence(np.array(ids), cfg["model.n_phonemes"])
    from .autograd import Tensor

    z = Tensor(emb.vector[None, :].astype(model.config.np_dtype))
    seq = free_run(model, s, z=z, max_frames=args.max_frames)
    write_frames(seq, args.out)
    print(f"synthesized {seq.n_frames} frames -> {args.out}")
    return 0


def _cmd_prime_synth(args):
    model, _, cfg, _, _ = checkpoint.load_model(args.checkpoint)
    primer = read_frames(args.primer)
    primer_ids = _parse_phonemes(args.primer_phonemes, args.phoneme_map)
    new_ids = _parse_phonemes(args.phonemes, args.phoneme_map)
    n_ph = cfg["model.n_phonemes"]
    seq, info = prime_and_generate(
        model,
        primer,
        PhonemeSequence(np.array(primer_ids), n_ph),
        PhonemeSequence(np.array(new_ids), n_ph),
        primer_frames=min(args.primer_frames, primer.n_frames),
        max_frames=args.max_frames,
    )
    write_frames(seq, args.out)
    print(
        f"primed {info.primer_frames_used} frames, synthesized {seq.n_frames} -> {args.out}"
    )
    return 0


def _maybe_report(metrics, path):
    if path:
        evaluation.write_report(metrics, path)


def _cmd_eval_mcd(args):
    a = read_frames(args.a)
    b = read_frames(args.b)
    dims = None
    if args.dims:
        dims = [int(t) for t in args.dims.split(",") if t.strip()]
    value = evaluation.mcd_dtw(a, b, dims=dims)
    print(f"mcd_dtw {value!r}")
    _maybe_report({"mcd_dtw": value}, args.report)
    return 0


def _load_corpus_samples(manifest_path, split, n_speakers=0):
    manifest = DatasetManifest.load(manifest_path)
    speakers = sorted(manifest.speakers())
    if n_speakers > 0:
        speakers = speakers[:n_speakers]
    samples = []
    for r in manifest.records:
        if r.speaker in speakers and r.split == split:
            samples.append((read_frames(manifest.resolve(r)), r.speaker))
    return manifest, speakers, samples


def _cmd_eval_id(args):
    seed = _resolve_seed(args.seed)
    manifest, speakers, train_samples = _load_corpus_samples(
        args.manifest, "train", args.speakers
    )
    _, _, test_samples = _load_corpus_samples(args.manifest, args.split, args.speakers)
    if args.classifier:
        clf = evaluation.load_classifier(args.classifier)
    else:
        d_o = train_samples[0][0].d_o
        from .encoder import EncoderConfig

        enc_cfg = EncoderConfig(
            d_o=d_o, d_z=args.d_z, channels=args.channels, fc_width=args.fc_width,
            dtype="float32",
        )
        clf = evaluation.train_speaker_id(
            train_samples, speakers, enc_cfg, seed=seed, epochs=args.epochs
        )
    if args.save_classifier:
        evaluation.save_classifier(args.save_classifier, clf)
    acc = evaluation.top1_accuracy(clf, test_samples)
    print(f"top1_accuracy {acc!r}")
    _maybe_report({"top1_accuracy": acc}, args.report)
    return 0


def _auc_embedder(args):
    if args.classifier:
        clf = evaluation.load_classifier(args.classifier)
        return clf.penultimate
    if args.checkpoint:
        _, encoder, _, _, _ = checkpoint.load_model(args.checkpoint)
        if encoder is None:
            raise ConfigError("checkpoint has no fitting encoder")
        return lambda seq: encoder.embed(seq).vector
    raise ConfigError("eval auc needs --classifier or --checkpoint")


def _cmd_eval_auc(args):
    embedder = _auc_embedder(args)
    same = _load_pairs(args.same)
    notsame = _load_pairs(args.notsame)
    curve, auc = evaluation.verification_auc(embedder, same, notsame)
    print(f"verification_auc {auc!r}")
    if args.roc_csv:
        evaluation.write_roc_csv(curve, args.roc_csv)
    _maybe_report({"verification_auc": auc}, args.report)
    return 0


def _cmd_eval_stratify(args):
    clf = evaluation.load_classifier(args.classifier)
    manifest = DatasetManifest.load(args.manifest)
    by_speaker = {}
    for r in manifest.records:
        if r.split == args.split:
            by_speaker.setdefault(r.speaker, []).append(
                read_frames(manifest.resolve(r))
            )
    kept = evaluation.quality_stratify(by_speaker, clf.penultimate, args.threshold)
    print(f"kept_speakers {','.join(kept) if kept else '-'}")
    _maybe_report({"kept_speakers": ",".join(kept)}, args.report)
    return 0


def _cmd_grad_check(args):
    seed = _resolve_seed(args.seed)
    model, encoder, batch, cfg = training.miniature_setup(seed=seed)

    def closure():
        total, _ = training.batch_loss(model, encoder, batch, cfg, training=True)
        return total

    params = list(model.named_parameters()) + encoder.named_parameters()
    err = training.gradient_check(closure, params, step=args.step)
    print(f"max_relative_error {err!r}")
    if not np.isfinite(err) or err >= args.tolerance:
        raise NumericError(
            f"gradient check failed: {err} >= tolerance {args.tolerance}"
        )
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        handlers = {
            "gen-data": _cmd_gen_data,
            "train": _cmd_train,
            "embed": _cmd_embed,
            "synth": _cmd_synth,
            "prime-synth": _cmd_prime_synth,
            "grad-check": _cmd_grad_check,
        }
        if args.command == "eval":
            metric_handlers = {
                "mcd": _cmd_eval_mcd,
                "id": _cmd_eval_id,
                "auc": _cmd_eval_auc,
                "stratify": _cmd_eval_stratify,
            }
            return metric_handlers[args.metric](args)
        return handlers[args.command](args)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (FrameFormatError, CorpusError, TripletLayoutError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except LoopfitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def console_entry():
    sys.exit(main())


if __name__ == "__main__":
    console_entry()
