"""Command-line entry point: ``mgfusion {synth,pool,train,eval,cv,combine}``.

Exit codes: 0 success, 1 usage/config error, 2 data or validation error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .dataio import (
    STREAMS,
    SynthConfig,
    generate_synthetic,
    infer_dims,
    load_dataset,
    read_manifest,
    read_stack,
    write_stack,
)
from .errors import ConfigError, DataError, MGFusionError, NumericalError
from .granularity import parse_alignment, pool_segments, resolve_tier
from .models import (
    ARCHITECTURES,
    CLASS_NAMES,
    ModelSpec,
    combine_scores,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    TrainConfig,
    evaluate,
    run_cv,
    train_model,
    unweighted_accuracy,
    write_cv_reports,
)

log = logging.getLogger("mgfusion")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
TIER_OF = {"P": "phone", "S": "syllable", "W": "word"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _gran_list(text: str) -> tuple[str, ...]:
    items = tuple(x.strip().upper() for x in str(text).split(",") if x.strip())
    bad = [x for x in items if x not in ("F", "P", "S", "W")]
    if bad:
        raise argparse.ArgumentTypeError(f"granularities must come from F,P,S,W; got {bad}")
    return items


# -- config file ---------------------------------------------------------------
def read_config(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _all_keys(parser: argparse.ArgumentParser) -> set[str]:
    keys = set()
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                keys |= {a.dest for a in sub._actions if a.dest not in ("help", "config")}
    return keys


def apply_config(args, sub: argparse.ArgumentParser, known: set[str]) -> None:
    """Fill options left unset on the command line from ``--config``."""
    if not args.config:
        return
    values = read_config(args.config)
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    actions = {a.dest: a for a in sub._actions}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None or getattr(args, key, None) is not None:
            continue
        try:
            value = action.type(raw) if action.type else raw
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise ConfigError(f"config key {key}: {exc}") from exc
        setattr(args, key, value)


def _pick(value, default):
    return default if value is None else value


# -- subcommands ---------------------------------------------------------------
def cmd_synth(args) -> int:
    cfg = SynthConfig()
    overrides = {f.name: getattr(args, f.name) for f in fields(SynthConfig)
                 if getattr(args, f.name, None) is not None}
    for k, v in overrides.items():
        setattr(cfg, k, v)
    cfg.seed = _pick(args.seed, 0)
    manifest = generate_synthetic(cfg, args.out)
    print(manifest)
    return EXIT_OK


def cmd_pool(args) -> int:
    manifest = Path(args.manifest)
    grans = _pick(args.granularity, ("P", "S", "W"))
    out = Path(args.out)
    log_lines = []
    for g in grans:
        if g == "F":
            raise ConfigError("pool produces segment-level stacks; F is not a segment tier")
        (out / STREAMS[g][0]).mkdir(parents=True, exist_ok=True)
    for rec in read_manifest(manifest):
        speech = read_stack(manifest.parent / rec.speech_path)
        tiers = parse_alignment((manifest.parent / rec.alignment_path).read_text(encoding="utf-8"),
                                speech.K, rec.utterance_id)
        for w in tiers.warnings:
            log_lines.append(f"{rec.utterance_id}\twarning\t{w}")
        for g in grans:
            segs, fallback = resolve_tier(tiers, TIER_OF[g])
            if not segs:
                raise DataError(f"{rec.utterance_id}: no {TIER_OF[g]} tier in alignment")
            if fallback:
                log_lines.append(f"{rec.utterance_id}\tsyllable\tsyllabify-fallback")
            pooled = pool_segments(speech, segs, STREAMS[g][0])
            write_stack(out / STREAMS[g][0] / f"{rec.utterance_id}.mgef", pooled)
            log_lines.append(f"{rec.utterance_id}\t{STREAMS[g][0]}\tK={pooled.K}")
    (out / "pool_log.txt").write_text("".join(line + "\n" for line in log_lines), encoding="utf-8")
    return EXIT_OK


def _spec_from_args(args, utterances) -> ModelSpec:
    arch = _pick(args.arch, "late_fusion")
    text = _pick(args.text, True)
    if arch in ("linear", "transformer") and args.granularities is None and text:
        grans = ()
    else:
        grans = _pick(args.granularities, ("F",))
    kw = dict(arch=arch, granularities=grans, text=text, seed=_pick(args.seed, 0))
    kw.update(infer_dims(utterances))
    for name in ("hidden1", "hidden2", "heads", "ff_mult", "coattention_layers",
                 "encoder_layers", "dropout"):
        if getattr(args, name) is not None:
            kw[name] = getattr(args, name)
    return ModelSpec(**kw)


def _train_config(args) -> TrainConfig:
    kw = {"seed": _pick(args.seed, 0)}
    for name in ("lr", "batch_size", "max_epochs", "patience", "val_fraction", "repeats"):
        if getattr(args, name, None) is not None:
            kw[name] = getattr(args, name)
    return TrainConfig(**kw)


def _load_for(args, keys):
    if not args.manifest:
        raise ConfigError("--manifest is required")
    utts = load_dataset(args.manifest, keys)
    if not utts:
        raise DataError(f"manifest {args.manifest} has no records")
    return utts


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    probe = _load_for(args, ("T", "F"))
    spec = _spec_from_args(args, probe)
    utts = load_dataset(args.manifest, spec.inputs)
    config = _train_config(args)
    test = [u for u in utts if u.session == args.test_session] if args.test_session else []
    rest = [u for u in utts if u.session != args.test_session]
    rng = np.random.default_rng(config.seed)
    n_val = max(1, int(config.val_fraction * len(rest)))
    val_idx = set(rng.choice(len(rest), size=n_val, replace=False).tolist())
    train = [u for i, u in enumerate(rest) if i not in val_idx]
    val = [u for i, u in enumerate(rest) if i in val_idx]
    model, history = train_model(spec, train, val, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.mgck")
    _dump(history.to_dict(), out / "history.json")
    if test:
        pred, _ = evaluate(model, test, config.batch_size)
        ua = unweighted_accuracy(pred.labels, [u.label for u in test], spec.n_classes, strict=False)
        _dump({"test_session": args.test_session, "n_test": len(test), "test_ua": ua},
              out / "report.json")
        print(f"test UA {ua:.4f}")
    return EXIT_OK


def _write_predictions(path: Path, pred, utts) -> float:
    labels = np.array([u.label for u in utts])
    lines = ["id\tlabel\tpredicted\t" + "\t".join(f"logit_{c}" for c in CLASS_NAMES)
             + "\t" + "\t".join(f"p_{c}" for c in CLASS_NAMES)]
    for uid, y, yhat, lg, post in zip(pred.ids, labels, pred.labels, pred.logits, pred.posterior):
        nums = "\t".join(format(float(x), ".9g") for x in (*lg, *post))
        lines.append(f"{uid}\t{CLASS_NAMES[y]}\t{CLASS_NAMES[yhat]}\t{nums}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return unweighted_accuracy(pred.labels, labels, len(CLASS_NAMES), strict=False)


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    model = load_checkpoint(args.checkpoint)
    utts = _load_for(args, model.spec.inputs)
    pred, loss = evaluate(model, utts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ua = _write_predictions(out / "predictions.tsv", pred, utts)
    _dump({"checkpoint": str(args.checkpoint), "n": len(utts), "loss": loss, "ua": ua},
          out / "eval.json")
    print(f"UA {ua:.4f}")
    return EXIT_OK


def cmd_cv(args) -> int:
    probe = _load_for(args, ("T", "F"))
    spec = _spec_from_args(args, probe)
    utts = load_dataset(args.manifest, spec.inputs)
    result = run_cv(utts, spec, _train_config(args), jobs=_pick(args.jobs, 1))
    write_cv_reports(result, args.out)
    print(f"mean UA over {len(result.folds)} runs: {result.mean_ua:.4f}")
    return EXIT_OK


def cmd_combine(args) -> int:
    if not (args.checkpoint_a and args.checkpoint_b):
        raise ConfigError("--checkpoint-a and --checkpoint-b are required")
    a = load_checkpoint(args.checkpoint_a)
    b = load_checkpoint(args.checkpoint_b)
    keys = tuple(dict.fromkeys(a.spec.inputs + b.spec.inputs))
    utts = _load_for(args, keys)
    pa, _ = evaluate(a, utts)
    pb, _ = evaluate(b, utts)
    combined = combine_scores(pa.logits, pb.logits)
    combined.ids = pa.ids
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ua = _write_predictions(out / "predictions.tsv", combined, utts)
    _dump({"checkpoint_a": str(args.checkpoint_a), "checkpoint_b": str(args.checkpoint_b),
           "n": len(utts), "ua": ua}, out / "combine.json")
    print(f"combined UA {ua:.4f}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------
def _common(p):
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=str)


def _model_opts(p):
    p.add_argument("--manifest")
    p.add_argument("--arch", choices=ARCHITECTURES)
    p.add_argument("--granularities", type=_gran_list, help="comma list over F,P,S,W")
    p.add_argument("--text", type=_bool, help="include the text stream (default true)")
    for name in ("hidden1", "hidden2", "heads", "ff_mult", "coattention_layers",
                 "encoder_layers", "batch_size", "max_epochs", "patience"):
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=int)
    for name in ("dropout", "lr", "val_fraction"):
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mgfusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    _common(p)
    for name in ("n", "sessions", "layers", "dim"):
        p.add_argument("--" + name, type=int)
    for name in ("text_separation", "speech_separation", "jitter", "noise", "frame_noise"):
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=float)
    p.add_argument("--scheme", choices=("complementary", "segmental"))
    p.add_argument("--write-syllables", dest="write_syllables", type=_bool)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pool", help="pool frame stacks into segment-level stacks")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--granularity", type=_gran_list, help="comma list over P,S,W")
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("train", help="train one model")
    _common(p)
    _model_opts(p)
    p.add_argument("--test-session", dest="test_session")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cv", help="leave-one-session-out cross-validation")
    _common(p)
    _model_opts(p)
    p.add_argument("--repeats", type=int)
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("combine", help="average the logits of two checkpoints")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--checkpoint-a", dest="checkpoint_a")
    p.add_argument("--checkpoint-b", dest="checkpoint_b")
    p.set_defaults(func=cmd_combine)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        sub = next(a for a in parser._actions
                   if isinstance(a, argparse._SubParsersAction)).choices[args.command]
        apply_config(args, sub, _all_keys(parser))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.out is None:
            raise ConfigError("--out is required")
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"mgfusion: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"mgfusion: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, MGFusionError, OSError) as exc:
        print(f"mgfusion: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
