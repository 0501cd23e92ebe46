"""Command-line entry point: ``wmspoof <subcommand> [flags]``.

Exit status: 0 on success, 1 when a library call rejects its input, 2 for
usage errors (argparse).
"""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import audio, codecs, corpus, evaluation, kpwl
from .errors import ConfigError, InvalidInputError, WmSpoofError

log = logging.getLogger("wmspoof")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _codec_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scheme", required=True, choices=codecs.SCHEMES)
    p.add_argument("--key", type=int, default=0, help="codec key (default 0)")
    p.add_argument("--strength", type=float, default=None, help="scheme strength (scheme default if omitted)")
    p.add_argument("--segment", type=int, default=None, help="per-bit span, frame or block length")


def _codec_config(args) -> codecs.CodecConfig:
    return codecs.CodecConfig(args.scheme, key=args.key, strength=args.strength, segment=args.segment)


def _emit(args, text: str) -> None:
    if not args.quiet:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _batch(args, src: Path, dst: Path, fn):
    """Apply ``fn(in_path, out_path)`` to one file, or every .wav under a directory."""
    if not src.is_dir():
        return [fn(src, dst)]
    jobs = [(p, dst / p.relative_to(src)) for p in sorted(src.rglob("*.wav"))]
    if not jobs:
        raise InvalidInputError(f"no .wav files under {src}")
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        return list(pool.map(lambda j: fn(*j), jobs))


# ---------------------------------------------------------------------------
# audio and codecs
# ---------------------------------------------------------------------------

def cmd_embed(args) -> None:
    config = _codec_config(args)
    payload = codecs.WatermarkPayload.from_hex(args.payload_hex)

    def one(src: Path, dst: Path):
        clean = audio.read_wav(src)
        marked = codecs.embed(clean, payload, config)
        dst.parent.mkdir(parents=True, exist_ok=True)
        audio.write_wav(marked, dst)
        return src, audio.segmental_snr(clean, marked)

    for src, snr in _batch(args, Path(args.input), Path(args.output), one):
        _emit(args, f"{src}\tbits {len(payload)}\tsegmental_snr_db {snr:.2f}")


def cmd_detect(args) -> None:
    config = _codec_config(args)
    expected = codecs.WatermarkPayload.from_hex(args.payload_hex) if args.payload_hex else None
    n_bits = len(expected) if expected is not None else args.bits
    if n_bits is None:
        raise ConfigError("give --payload-hex (to score BER) or --bits")

    def one(src: Path, _dst):
        result = codecs.detect(audio.read_wav(src), n_bits, config)
        return src, result

    results = _batch(args, Path(args.input), Path(args.input), one)
    for src, result in results:
        line = f"bits {result.payload().to_hex()}"
        if expected is not None:
            line = f"BER {codecs.bit_error_rate(expected.bits, result.bits):.4f}"
        _emit(args, line if len(results) == 1 else f"{src}\t{line}")


def cmd_attack(args) -> None:
    kind = audio.parse_attack(args.attack, seed=args.seed)
    clean = audio.read_wav(args.input)
    audio.write_wav(audio.attack(clean, kind), args.output)
    _emit(args, f"wrote {args.output}")


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------

def cmd_build_plan(args) -> None:
    records = corpus.parse_manifest(args.manifest, args.format)
    roster = corpus.load_roster(args.roster) if args.roster else corpus.default_roster(args.key)
    plan = corpus.build_mix_plan(records, args.ratio, args.seed, roster,
                                 nested=args.nested, payload_bits=args.payload_bits)
    corpus.serialize_plan(plan, args.out)
    counts = plan.group_counts()
    _emit(args, f"records {len(records)}\twatermarked {len(plan.watermarked())}\t"
          + "\t".join(f"{g} {n}" for g, n in counts.items()))


def _external_roots(items) -> dict:
    roots = {}
    for item in items or []:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise ConfigError(f"--external expects NAME=DIR, got {item!r}")
        roots[name] = Path(path)
    return roots


def cmd_materialize(args) -> None:
    plan = corpus.load_plan(args.plan)
    report = corpus.materialize(plan, args.audio_root, args.out_root,
                                _external_roots(args.external), jobs=args.jobs, rate=args.rate)
    if args.report:
        Path(args.report).write_text(report.to_tsv())
    failures = report.failures()
    _emit(args, f"written {len(report.outcomes) - len(failures)}\tfailed {len(failures)}"
          f"\tmean_segmental_snr_db {report.mean_snr():.2f}")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def cmd_score_eval(args) -> None:
    scores = evaluation.parse_scores(args.scores, args.labels)
    result = evaluation.compute_eer(scores)
    _emit(args, f"EER {result.eer:.4f}\tthreshold {result.threshold!r}\ttrials {len(scores)}")


def _table_outputs(args, table: evaluation.RatioTable, title: str = "") -> None:
    _emit(args, table.to_text())
    if args.csv:
        Path(args.csv).write_text(table.to_csv())
    if args.figure:
        from .plotting import plot_ratio_table

        plot_ratio_table(table, args.figure, title)


def cmd_degradation_table(args) -> None:
    ratios = args.ratios
    cells = {}
    for k, item in enumerate(args.eer):
        name, sep, values = item.rpartition("=")
        name = name if sep else f"row{k + 1}"
        vals = _floats(values)
        if len(vals) != len(ratios):
            raise ConfigError(f"{name}: {len(vals)} EER values for {len(ratios)} ratios")
        for r, v in zip(ratios, vals):
            cells[(name, r)] = v
    table = evaluation.emit_ratio_table(cells, with_delta=not args.no_delta, ratios=ratios)
    _table_outputs(args, table)


# ---------------------------------------------------------------------------
# kpwl
# ---------------------------------------------------------------------------

def _train_config(args) -> kpwl.TrainConfig:
    return kpwl.TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed)


def cmd_kpwl_pretrain(args) -> None:
    data = kpwl.read_features(args.features)
    model = kpwl.init_model([data.width, *args.hidden, 2], seed=args.seed)
    model = kpwl.pretrain(model, data, _train_config(args))
    kpwl.save_checkpoint(model, args.out)
    _emit(args, f"wrote {args.out}")


def cmd_kpwl_adapt(args) -> None:
    model = kpwl.freeze_ends(kpwl.load_checkpoint(args.model))
    data = kpwl.read_features(args.features)
    adapted, history = kpwl.kpwl_adapt(model, data, args.beta, args.mu, _train_config(args),
                                       task_weight=args.task_weight)
    kpwl.save_checkpoint(adapted, args.out)
    if args.log:
        kpwl.write_training_log(history, args.log)
    last = history[-1] if history else None
    summary = f"wrote {args.out}\tsteps {len(history)}"
    if last is not None:
        summary += f"\tlast_total {last.total:.6f}"
    _emit(args, summary)


def cmd_kpwl_score(args) -> None:
    model = kpwl.load_checkpoint(args.model)
    scores = kpwl.score_dataset(model, kpwl.read_features(args.features))
    if args.out:
        evaluation.write_scores(scores, args.out)
    labels = {t.label for t in scores.trials}
    if len(labels) == 2:
        _emit(args, f"EER {evaluation.compute_eer(scores).eer:.4f}\ttrials {len(scores)}")
    else:
        _emit(args, f"trials {len(scores)}")


def cmd_grad_check(args) -> None:
    if args.model:
        model = kpwl.load_checkpoint(args.model)
    else:
        model = kpwl.init_model([args.width, *args.hidden, 2], seed=args.seed)
    if args.freeze_ends:
        model = kpwl.freeze_ends(model)
    rng = np.random.default_rng([args.seed, 1])
    if args.features:
        data = kpwl.read_features(args.features)
        x, y = data.features[: args.batch], data.labels[: args.batch]
    else:
        x = rng.standard_normal((args.batch, model.input_width))
        y = rng.integers(0, 2, args.batch)
    err = kpwl.gradient_check(model, x, y, args.beta, args.mu, seed=args.seed)
    _emit(args, f"max_relative_error {err:.3e}")
    if err >= args.tolerance:
        raise ConfigError(f"gradient check failed: {err:.3e} >= {args.tolerance:g}")


def cmd_kpwl_benchmark(args) -> None:
    from .benchmark import BenchmarkConfig, run_benchmark

    result = run_benchmark(BenchmarkConfig(seed=args.seed))
    _table_outputs(args, result.table, title=f"synthetic shifted domain, seed {args.seed}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random draw (default 0)")
    common.add_argument("--jobs", type=int, default=1, help="worker threads for batch work (default 1)")
    common.add_argument("--quiet", action="store_true", help="suppress stdout summaries")

    parser = argparse.ArgumentParser(prog="wmspoof", description=__doc__.splitlines()[0],
                                     allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")

    def add(name, fn, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                           allow_abbrev=False)
        p.set_defaults(func=fn)
        return p

    p = add("embed", cmd_embed, "embed a hex payload into a WAV file (or a directory of them)")
    _codec_flags(p)
    p.add_argument("--payload-hex", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)

    p = add("detect", cmd_detect, "recover a payload; prints BER when --payload-hex is given")
    _codec_flags(p)
    p.add_argument("--payload-hex", default=None, help="expected payload; its length sets the bit count")
    p.add_argument("--bits", type=int, default=None, help="bit count when no expected payload is given")
    p.add_argument("--in", dest="input", required=True)

    p = add("attack", cmd_attack, "apply additive_noise:SNR, resample_chain:RATE or amplitude_scale:GAIN")
    p.add_argument("--attack", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)

    p = add("build-plan", cmd_build_plan, "assign utterances to codecs for one watermark ratio")
    p.add_argument("--manifest", required=True)
    p.add_argument("--format", choices=("native_tsv", "asvspoof_cm"), default="native_tsv")
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--roster", default=None, help="roster file (default: six codecs vs three DNN slots)")
    p.add_argument("--key", type=int, default=0, help="codec key for the default roster")
    p.add_argument("--nested", action="store_true", help="make higher ratios supersets of lower ones")
    p.add_argument("--payload-bits", type=int, default=corpus.DEFAULT_PAYLOAD_BITS)
    p.add_argument("--out", required=True)

    p = add("materialize", cmd_materialize, "render a plan into an audio tree")
    p.add_argument("--plan", required=True)
    p.add_argument("--audio-root", required=True)
    p.add_argument("--out-root", required=True)
    p.add_argument("--external", action="append", metavar="NAME=DIR",
                   help="directory of pre-watermarked audio for an external roster slot")
    p.add_argument("--rate", type=int, default=audio.TARGET_RATE)
    p.add_argument("--report", default=None, help="write the per-record TSV report here")

    p = add("score-eval", cmd_score_eval, "EER of one score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--labels", default=None, help="label sidecar for two-column score files")

    p = add("degradation-table", cmd_degradation_table, "ratio table with relative degradation")
    p.add_argument("--eer", action="append", required=True, metavar="[NAME=]E75,E50,E25,E0",
                   help="EER cells of one row, in --ratios order; repeat for more rows")
    p.add_argument("--ratios", type=_floats, default=[0.75, 0.5, 0.25, 0.0])
    p.add_argument("--no-delta", action="store_true")
    p.add_argument("--csv", default=None)
    p.add_argument("--figure", default=None, help="PNG of EER against ratio")

    def train_flags(p, lr, epochs):
        p.add_argument("--features", required=True, help="TSV of utt_id, label, features")
        p.add_argument("--lr", type=float, default=lr)
        p.add_argument("--epochs", type=int, default=epochs)
        p.add_argument("--batch-size", type=int, default=32)
        p.add_argument("--out", required=True)

    p = add("kpwl-pretrain", cmd_kpwl_pretrain, "phase 1: train every layer on clean features")
    train_flags(p, kpwl.PRETRAIN_DEFAULTS.lr, kpwl.PRETRAIN_DEFAULTS.epochs)
    p.add_argument("--hidden", type=_ints, default=[32, 16], help="hidden widths (default 32,16)")

    p = add("kpwl-adapt", cmd_kpwl_adapt, "phase 2: adapt middle layers with KD and L2-SP")
    train_flags(p, kpwl.ADAPT_DEFAULTS.lr, kpwl.ADAPT_DEFAULTS.epochs)
    p.add_argument("--model", required=True)
    p.add_argument("--beta", type=float, default=0.3)
    p.add_argument("--mu", type=float, default=1e-4)
    p.add_argument("--task-weight", type=float, default=1.0)
    p.add_argument("--log", default=None, help="per-batch loss TSV")

    p = add("kpwl-score", cmd_kpwl_score, "score features with a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", default=None, help="score file (utt_id score label)")

    p = add("grad-check", cmd_grad_check, "compare analytic and finite-difference gradients")
    p.add_argument("--model", default=None, help="checkpoint (default: random model)")
    p.add_argument("--features", default=None, help="batch source (default: random batch)")
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--hidden", type=_ints, default=[8, 8])
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--beta", type=float, default=0.3)
    p.add_argument("--mu", type=float, default=1e-4)
    p.add_argument("--freeze-ends", action="store_true")
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = add("kpwl-benchmark", cmd_kpwl_benchmark, "baseline / watermarked / KPWL on synthetic shifted data")
    p.add_argument("--csv", default=None)
    p.add_argument("--figure", default=None, help="PNG of EER against ratio")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # SystemExit(2) on usage errors
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        args.func(args)
    except WmSpoofError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc.filename}: no such file", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
