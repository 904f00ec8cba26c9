"""Command-line interface: train, embed, extract, attack, evaluate.

Machine-readable results are JSON lines on stdout. Human-readable tables go to
stderr, or to stdout with ``--pretty``. Exit codes: 0 success, 1 usage error,
2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import traceback
import warnings
from pathlib import Path

import numpy as np

from .channel import AttackError, CodecUnavailable, attack, parse_attack
from .checkpoint import CheckpointError
from .nets import load_bundle, save_bundle
from .pipeline import SYNC_DIRECTIONS, SyncConfig, embed_audio, extract_audio
from .signal import Watermark, WavFormatError, load_wav, save_wav, snr
from .train import ConfigError, TrainingConfig, TrainingError, load_config, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

DEFAULT_ATTACKS = (
    "identity",
    "amplitude:0.9",
    "requantize:8",
    "median_filter:3",
    "resample:0.9",
    "dropout:100",
    "simulated_rerecording",
)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2; usage errors are 1 here
        raise UsageError(f"{self.prog}: {message}")


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=False, default=_json_default), flush=True)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _finite(x: float | None):
    return None if x is None or not math.isfinite(x) else x


def _read_bits(value: str) -> Watermark:
    """Bits from a 0/1 or hex string, or from a file holding one."""
    text = value
    p = Path(value)
    if len(value) < 256 and p.is_file():
        text = p.read_text().strip()
    try:
        return Watermark.from_string(text)
    except ValueError as exc:
        raise UsageError(f"--bits: {exc}") from None


def _sync_from(args) -> SyncConfig | None:
    if not (args.sync or any(v is not None for v in (args.sync_min, args.sync_max, args.sync_step))):
        return None
    d = SyncConfig()
    try:
        return SyncConfig(
            shift_min=d.shift_min if args.sync_min is None else args.sync_min,
            shift_max=d.shift_max if args.sync_max is None else args.sync_max,
            shift_step=d.shift_step if args.sync_step is None else args.sync_step,
            direction=args.sync_direction,
        )
    except ValueError as exc:
        raise UsageError(f"sync range: {exc}") from None


def _load_model(path):
    try:
        bundle, _ = load_bundle(path)
    except FileNotFoundError:
        raise DataError(f"model not found: {path}") from None
    except CheckpointError as exc:
        raise DataError(f"cannot load model {path}: {exc}") from None
    return bundle


def _load_audio(path):
    try:
        return load_wav(path)
    except (FileNotFoundError, WavFormatError) as exc:
        raise DataError(str(exc)) from None


def _table(headers: list[str], rows: list[list]) -> str:
    cells = [[str(h) for h in headers]] + [[_fmt(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = []
    for k, r in enumerate(cells):
        lines.append("  ".join(c.rjust(w) if k else c.ljust(w) for c, w in zip(r, widths)))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(c) -> str:
    if c is None:
        return "-"
    if isinstance(c, float):
        return f"{c:.2f}"
    return str(c)


# commands ------------------------------------------------------------------------


def cmd_train(args) -> int:
    try:
        config = load_config(args.config) if args.config else TrainingConfig()
    except ConfigError as exc:
        raise DataError(f"config error: {exc}") from None
    if args.seed is not None:
        config = TrainingConfig(**{**config.to_dict(), "seed": args.seed})
    out = Path(args.out)
    run_dir = out.with_name(out.name + ".run")

    def progress(m):
        _emit({"event": "eval", **m})

    try:
        bundle, record = train(args.input, config, out_dir=run_dir, resume=args.resume, progress=progress)
    except TrainingError as exc:
        raise DataError(str(exc)) from None
    save_bundle(bundle, out)
    final = record.final or {}
    _emit(
        {
            "event": "done",
            "model": str(out),
            "run_dir": str(run_dir),
            "steps": len(record.steps),
            "selected": bundle.meta.get("validation"),
            "final": final,
        }
    )
    if args.report:
        from .plotting import plot_training_curves

        fig = plot_training_curves(record.steps, record.evaluations, Path(args.report) / "training.png")
        _emit({"event": "figure", "path": str(fig)})
    return EXIT_OK


def cmd_embed(args) -> int:
    bundle = _load_model(args.model)
    audio = _load_audio(args.input)
    bits = _read_bits(args.bits)
    strength = bundle.strength if args.strength is None else args.strength
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            result = embed_audio(bundle, audio, bits, strength)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    save_wav(result.signal, args.out)
    _emit({"snr_db": _finite(result.snr_db), "n_segments": result.n_segments, "S": result.strength})
    return EXIT_OK


def cmd_extract(args) -> int:
    bundle = _load_model(args.model)
    audio = _load_audio(args.input)
    truth = _read_bits(args.bits) if args.bits else None
    sync = _sync_from(args)
    try:
        res = extract_audio(bundle, audio, sync=sync, truth=truth, chunks=args.chunks)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    out = {
        "bits": Watermark(res.bits).to_string(),
        "n_segments": res.n_segments,
        "confidence": float(np.mean(np.abs(res.soft))),
    }
    if sync is not None:
        out.update(shift=res.shift, shifts_searched=res.searched)
        if res.heuristic:
            out["sync_method"] = "confidence-proxy (heuristic, no ground truth)"
        else:
            out["sync_method"] = "max-accuracy"
    if res.accuracy is not None or truth is not None:
        out["acc"] = res.accuracy if res.accuracy is not None else float(np.mean(res.bits == truth.bits))
    _emit(out)
    return EXIT_OK


def cmd_attack(args) -> int:
    audio = _load_audio(args.input)
    try:
        spec = parse_attack(args.attack)
        attacked = attack(audio, spec, seed=args.seed or 0)
    except AttackError as exc:
        raise UsageError(str(exc)) from None
    except CodecUnavailable as exc:
        raise DataError(str(exc)) from None
    save_wav(attacked, args.out)
    try:
        measured = snr(audio.samples, attacked.samples)
    except ValueError:
        measured = None
    _emit({"attack": spec.name, "params": spec.params, "seed": args.seed or 0, "snr_db": _finite(measured)})
    return EXIT_OK


def evaluate_corpus(bundle, files, attacks, bits: Watermark, strengths, sync, seed: int = 0):
    """Embed, attack and extract every file; one summary row per (strength, attack)."""
    rows = []
    for s in strengths:
        marked = []
        for f in files:
            try:
                audio = load_wav(f)
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    marked.append((f, embed_audio(bundle, audio, bits, s)))
            except (WavFormatError, ValueError) as exc:
                marked.append((f, exc))
        for a_i, spec_text in enumerate(attacks):
            spec = parse_attack(spec_text)
            accs, snrs, failures = [], [], []
            for f_i, (f, res) in enumerate(marked):
                if isinstance(res, Exception):
                    failures.append({"file": str(f), "error": str(res)})
                    continue
                try:
                    attacked = attack(res.signal, spec, seed=seed + 1000 * a_i + f_i)
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore")
                        ext = extract_audio(bundle, attacked, sync=sync, truth=bits)
                    accs.append(ext.accuracy)
                    snrs.append(res.snr_db)
                except (ValueError, CodecUnavailable) as exc:
                    failures.append({"file": str(f), "error": str(exc)})
            rows.append(
                {
                    "attack": spec.label(),
                    "strength": s,
                    "mean_acc": float(np.mean(accs)) if accs else None,
                    "mean_snr_db": _finite(float(np.mean(snrs))) if snrs else None,
                    "n_ok": len(accs),
                    "n_failed": len(failures),
                    "failures": failures,
                }
            )
    return rows


def cmd_evaluate(args) -> int:
    bundle = _load_model(args.model)
    corpus = Path(args.input)
    files = sorted(corpus.glob("*.wav")) if corpus.is_dir() else []
    if not files:
        raise DataError(f"no .wav files in {corpus}")
    bits = _read_bits(args.bits) if args.bits else Watermark.random(
        bundle.watermark_length, np.random.default_rng(args.seed or 0)
    )
    attacks = args.attack or list(DEFAULT_ATTACKS)
    for a in attacks:
        try:
            parse_attack(a)
        except AttackError as exc:
            raise UsageError(str(exc)) from None
    strengths = _strengths(args.strength, bundle.strength)
    rows = evaluate_corpus(bundle, files, attacks, bits, strengths, _sync_from(args), seed=args.seed or 0)
    for r in rows:
        _emit(r)
    table = _table(
        ["Attack", "S", "ACC (%)", "SNR (dB)", "files", "failed"],
        [
            [r["attack"], r["strength"], None if r["mean_acc"] is None else 100 * r["mean_acc"], r["mean_snr_db"], r["n_ok"], r["n_failed"]]
            for r in rows
        ],
    )
    print(table, file=sys.stdout if args.pretty else sys.stderr)
    if args.report:
        from .plotting import plot_attack_accuracy, plot_strength_tradeoff

        report = Path(args.report)
        for s in strengths:
            fig = plot_attack_accuracy([r for r in rows if r["strength"] == s], report / f"attacks_S{s:g}.png")
            _emit({"event": "figure", "path": str(fig)})
        if len(strengths) > 1:
            for a in {r["attack"] for r in rows}:
                sub = [r for r in rows if r["attack"] == a and r["mean_acc"] is not None]
                if sub:
                    name = a.replace(":", "_").replace(",", "_").replace("=", "")
                    fig = plot_strength_tradeoff(sub, report / f"strength_{name}.png")
                    _emit({"event": "figure", "path": str(fig)})
    if all(r["n_ok"] == 0 for r in rows):
        return EXIT_DATA
    return EXIT_OK


def _strengths(values, default: float) -> list[float]:
    if not values:
        return [default]
    out = []
    for v in values:
        for part in str(v).split(","):
            if part.strip():
                try:
                    out.append(float(part))
                except ValueError:
                    raise UsageError(f"--strength: not a number: {part!r}") from None
    if any(s < 0 for s in out):
        raise UsageError("--strength must be non-negative")
    return out


# parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dear", description="Audio watermarking robust to re-recording.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def sync_flags(sp):
        sp.add_argument("--sync", action="store_true", help="search over sample shifts (default range 0..8000)")
        sp.add_argument("--sync-min", type=int, default=None)
        sp.add_argument("--sync-max", type=int, default=None)
        sp.add_argument("--sync-step", type=int, default=None)
        sp.add_argument("--sync-direction", choices=SYNC_DIRECTIONS, default="forward")

    t = sub.add_parser("train", help="train a model on a directory of WAV files")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--in", dest="input", required=True, help="corpus directory")
    t.add_argument("--out", required=True, help="output model path")
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="resume from a training-state checkpoint (…/last.ckpt)")
    t.add_argument("--report", help="directory for training figures")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("embed", help="embed a watermark into a WAV file")
    e.add_argument("--model", required=True)
    e.add_argument("--in", dest="input", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--bits", required=True, help="0/1 or hex string, or a file holding one")
    e.add_argument("--strength", type=float)
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_embed)

    x = sub.add_parser("extract", help="extract a watermark from a WAV file")
    x.add_argument("--model", required=True)
    x.add_argument("--in", dest="input", required=True)
    x.add_argument("--bits", help="ground-truth bits (enables accuracy and max-accuracy sync)")
    x.add_argument("--chunks", type=int, default=None, help="payload length in units of L bits")
    x.add_argument("--seed", type=int)
    sync_flags(x)
    x.set_defaults(func=cmd_extract)

    a = sub.add_parser("attack", help="apply a distortion to a WAV file")
    a.add_argument("--in", dest="input", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--attack", required=True, help="e.g. gaussian:20dB, amplitude:0.9, rerecord:snr=22")
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_attack)

    v = sub.add_parser("evaluate", help="embed/attack/extract over a corpus and tabulate")
    v.add_argument("--model", required=True)
    v.add_argument("--in", dest="input", required=True, help="corpus directory")
    v.add_argument("--attack", action="append", help="repeatable; default: the common-attack set plus DAR")
    v.add_argument("--bits")
    v.add_argument("--strength", action="append", help="repeatable or comma separated, e.g. 0.2,0.5,1.0")
    v.add_argument("--seed", type=int)
    v.add_argument("--pretty", action="store_true", help="print the table on stdout")
    v.add_argument("--report", help="directory for report figures")
    sync_flags(v)
    v.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except KeyboardInterrupt:
        return EXIT_INTERNAL
    except Exception:  # noqa: BLE001 - last-resort handler maps to the internal-error code
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
