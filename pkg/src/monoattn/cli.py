"""Command-line interface: ``monoattn {gen,train,eval,analyze,sweep,replay}``.

Every command writes ``run_manifest.json`` into its output directory before
doing any work.  ``monoattn replay <manifest>`` re-runs the recorded command.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import __version__
from . import analysis
from . import corpus as C
from . import metrics as M
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .monoloss import MonoConfig, MonoConfigError, format_head_mask, parse_head_mask
from .trainer import TrainConfig, TrainingError, evaluate, fit, sweep_lambda, write_sweep, write_trace

log = logging.getLogger("monoattn")

MANIFEST = "run_manifest.json"
SEED_ENV = "MONOATTN_SEED"


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: int | None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    version: str = __version__

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------

def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _apply_config(parser: argparse.ArgumentParser, args: argparse.Namespace, argv: list) -> None:
    """Fill options not given on the command line from ``--config``."""
    if not getattr(args, "config", None):
        return
    values = read_config_file(args.config)
    given = {a.dest for a in parser._actions for s in a.option_strings if _flag_given(s, argv)}
    by_dest = {a.dest: a for a in parser._actions if a.option_strings}
    aliases = {"lambda": "lam"}
    for key, raw in values.items():
        dest = aliases.get(key, key)
        action = by_dest.get(dest)
        if action is None or dest in ("config", "help"):
            raise UsageError(f"{args.config}: unknown key {key!r}")
        if dest in given:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            value = raw.lower() in ("1", "true", "yes", "on")
        else:
            try:
                value = action.type(raw) if action.type else raw
            except (TypeError, ValueError):
                raise UsageError(f"{args.config}: bad value for {key}: {raw!r}") from None
            if action.choices is not None and value not in action.choices:
                raise UsageError(f"{args.config}: {key} must be one of {list(action.choices)}")
        setattr(args, dest, value)


def _flag_given(flag: str, argv: list) -> bool:
    return any(a == flag or a.startswith(flag + "=") for a in argv)


def _resolved_argv(parser: argparse.ArgumentParser, command: str, args: argparse.Namespace) -> list:
    """Explicit argv reproducing ``args`` with every default materialized."""
    out = [command]
    for action in parser._actions:
        if not action.option_strings or action.dest in ("help", "config"):
            continue
        value = getattr(args, action.dest, None)
        flag = action.option_strings[-1]
        if isinstance(action, argparse._StoreTrueAction):
            if value:
                out.append(flag)
        elif value is not None:
            out += [flag, str(value)]
    return out


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 1
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected a comma list of numbers, got {text!r}") from None


def _add_train_flags(p: argparse.ArgumentParser, sweep: bool = False) -> None:
    p.add_argument("--data", required=True, help="directory with train.tsv and dev.tsv")
    p.add_argument("--out", required=True, help="output directory")
    if sweep:
        p.add_argument("--lambdas", required=True, help="comma list of lambda values (at least two)")
    else:
        p.add_argument("--lambda", dest="lam", type=float, default=0.1, help="monotonicity loss weight")
    p.add_argument("--delta", type=float, default=0.0, help="margin in [0, 1]")
    p.add_argument("--direction", choices=("inc", "dec"), default="inc")
    p.add_argument("--mono-heads", default="all", help="all, none, or layer:head,... (decoder cross-attention)")
    p.add_argument("--drophead", type=float, default=0.0, help="probability of dropping a head")
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--layers", type=int, default=1, help="encoder and decoder layers")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--ff-dim", type=int, default=128)
    p.add_argument("--seed", type=int, default=None, help=f"default: ${SEED_ENV} or 1")
    p.add_argument("--sep-masking", action="store_true", help="score only source columns after <sep>")
    p.add_argument("--pos-mode", choices=("vanilla", "sep-centered"), default="vanilla")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--max-steps", type=int, default=3000)
    p.add_argument("--checkpoint-interval", type=int, default=250)
    p.add_argument("--patience", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--dev-metric", choices=tuple(M.METRICS), default="acc")
    p.add_argument("--config", help="flat key = value file; flags override it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="monoattn", description="Monotonicity-regularized seq2seq toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--task", required=True, choices=("cipher", "inflection", "reorder"))
    g.add_argument("--n", type=int, default=2000, help="training pairs (dev/test get n/10 each)")
    g.add_argument("--vocab", type=int, default=20)
    g.add_argument("--min-len", type=int, default=None)
    g.add_argument("--max-len", type=int, default=None)
    g.add_argument("--identity", action="store_true", help="cipher only: copy task")
    g.add_argument("--swap", type=float, default=0.3, help="reorder only: probability of a displaced token")
    g.add_argument("--tags", default=None, help="inflection only: TAG:suf+fix;TAG2:...")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out-dir", required=True)
    g.add_argument("--config")

    t = sub.add_parser("train", help="train a model")
    _add_train_flags(t)

    e = sub.add_parser("eval", help="decode and score a dataset")
    e.add_argument("--model", required=True, help="checkpoint file")
    e.add_argument("--data", required=True, help="TSV file, or directory holding test.tsv")
    e.add_argument("--metrics", default="wer,per,acc,lev,mfs")
    e.add_argument("--delta", type=float, default=None, help="default: the training margin")
    e.add_argument("--mono-heads", default=None, help="default: the training head mask")
    e.add_argument("--sep-masking", action="store_true")
    e.add_argument("--max-len", type=int, default=None)
    e.add_argument("--out-dir", default=".", help="receives report.csv and the manifest")
    e.add_argument("--dump-attn", default=None, help="write the decoded attention as JSON Lines")
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--config")

    a = sub.add_parser("analyze", help="monotonicity paths and heatmaps from attention")
    a.add_argument("--dump", default=None, help="JSON Lines attention dump")
    a.add_argument("--model", default=None)
    a.add_argument("--data", default=None)
    a.add_argument("--delta", type=float, default=0.0)
    a.add_argument("--direction", choices=("inc", "dec"), default="inc")
    a.add_argument("--mono-heads", default="all")
    a.add_argument("--sep-masking", action="store_true")
    a.add_argument("--max-heatmaps", type=int, default=20, help="examples to render")
    a.add_argument("--out-dir", required=True)
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--config")

    s = sub.add_parser("sweep", help="train once per lambda and tabulate dev results")
    _add_train_flags(s, sweep=True)

    r = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    r.add_argument("manifest")
    return parser


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _mono_from(args, lam: float) -> MonoConfig:
    try:
        return MonoConfig(lam=lam, delta=args.delta, direction=args.direction,
                          head_mask=parse_head_mask(args.mono_heads), separator_masking=args.sep_masking)
    except MonoConfigError as exc:
        raise UsageError(str(exc)) from None


def _train_config(args, lam: float) -> TrainConfig:
    model = {"dim": args.dim, "heads": args.heads, "enc_layers": args.layers, "dec_layers": args.layers,
             "ff_dim": args.ff_dim, "drophead": args.drophead, "pos_mode": args.pos_mode}
    try:
        return TrainConfig(mono=_mono_from(args, lam), model=model, batch_size=args.batch_size,
                           max_steps=args.max_steps, checkpoint_interval=args.checkpoint_interval,
                           patience=args.patience, lr=args.lr, dev_metric=args.dev_metric, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _checkpoint_extra(result, config: TrainConfig) -> dict:
    mono = config.mono
    return {"src_vocab": result.vocabs[0].itos, "tgt_vocab": result.vocabs[1].itos,
            "mono": {"lam": mono.lam, "delta": mono.delta, "direction": mono.direction,
                     "head_mask": format_head_mask(mono.head_mask),
                     "separator_masking": mono.separator_masking},
            "best_step": result.best_step, "best_dev_metric": result.best_metric, "steps": result.steps}


def _train_one(splits, config: TrainConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    result = fit(splits, config)
    save_checkpoint(out / "model.npz", result.model, _checkpoint_extra(result, config))
    write_trace(result.trace, out / "trace.csv")
    return result


def _load_splits(data: str) -> C.Splits:
    d = Path(data)
    if not (d / "train.tsv").exists() or not (d / "dev.tsv").exists():
        raise FileNotFoundError(f"{d}: needs train.tsv and dev.tsv")
    return C.read_splits(d)


def cmd_gen(args, argv) -> int:
    seed = _seed(args)
    out = Path(args.out_dir)
    RunManifest("gen", argv, {k: v for k, v in vars(args).items() if k != "config"}, seed,
                outputs={"dir": str(out)}).write(out)
    lens = {"cipher": (5, 15), "reorder": (5, 15), "inflection": (3, 8)}[args.task]
    len_range = (args.min_len or lens[0], args.max_len or lens[1])
    if args.task == "cipher":
        splits = C.gen_cipher(args.n, args.vocab, len_range, seed, identity=args.identity)
    elif args.task == "reorder":
        splits = C.gen_reorder(args.n, args.swap, seed, args.vocab, len_range)
    else:
        tags = None
        if args.tags:
            tags = {}
            for item in args.tags.split(";"):
                name, _, suffix = item.partition(":")
                tags[name.strip()] = [c for c in suffix.split("+") if c]
        splits = C.gen_inflection(args.n, tags, seed, args.vocab, len_range)
    C.write_splits(splits, out)
    print(f"wrote {len(splits.train)}/{len(splits.dev)}/{len(splits.test)} pairs to {out}")
    return 0


def cmd_train(args, argv) -> int:
    args.seed = _seed(args)
    config = _train_config(args, args.lam)
    out = Path(args.out)
    RunManifest("train", argv, {k: v for k, v in vars(args).items() if k != "config"}, args.seed,
                inputs={"data": args.data},
                outputs={"checkpoint": str(out / "model.npz"), "trace": str(out / "trace.csv")}).write(out)
    result = _train_one(_load_splits(args.data), config, out)
    print(f"best_step={result.best_step}\nbest_dev_{args.dev_metric}={result.best_metric!r}\nsteps={result.steps}")
    return 0


def cmd_sweep(args, argv) -> int:
    args.seed = _seed(args)
    lambdas = sorted(set(_floats(args.lambdas)))
    if len(lambdas) < 2:
        raise UsageError("--lambdas needs at least two distinct values")
    base = _train_config(args, lambdas[-1])
    out = Path(args.out)
    RunManifest("sweep", argv, {k: v for k, v in vars(args).items() if k != "config"}, args.seed,
                inputs={"data": args.data}, outputs={"table": str(out / "sweep.csv")}).write(out)
    splits = _load_splits(args.data)

    def save(row):
        d = out / f"lambda_{row.lam!r}"
        d.mkdir(parents=True, exist_ok=True)
        cfg = replace(base, mono=replace(base.mono, lam=row.lam))
        save_checkpoint(d / "model.npz", row.result.model, _checkpoint_extra(row.result, cfg))
        write_trace(row.result.trace, d / "trace.csv")

    rows = sweep_lambda(splits, base, lambdas, on_result=save)
    write_sweep(rows, out / "sweep.csv")
    print((out / "sweep.csv").read_text(), end="")
    return 0


def _load_model(path):
    model, extra = load_checkpoint(path)
    try:
        src_v, tgt_v = C.Vocab(extra["src_vocab"]), C.Vocab(extra["tgt_vocab"])
    except KeyError:
        raise CheckpointError(f"{path}: checkpoint has no vocabularies") from None
    if len(src_v) != model.config.src_vocab or len(tgt_v) != model.config.tgt_vocab:
        raise CheckpointError(f"{path}: vocabulary sizes do not match the model config")
    return model, (src_v, tgt_v), extra.get("mono", {})


def _eval_mono(args, trained: dict) -> MonoConfig:
    heads = args.mono_heads if args.mono_heads is not None else trained.get("head_mask", "all")
    delta = args.delta if args.delta is not None else trained.get("delta", 0.0)
    try:
        return MonoConfig(lam=0.0, delta=delta, direction=trained.get("direction", "increasing"),
                          head_mask=parse_head_mask(heads),
                          separator_masking=args.sep_masking or trained.get("separator_masking", False))
    except MonoConfigError as exc:
        raise UsageError(str(exc)) from None


def _eval_corpus(data: str) -> C.Corpus:
    p = Path(data)
    return C.read_tsv(p / "test.tsv" if p.is_dir() else p)


def cmd_eval(args, argv) -> int:
    names = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in names if m not in M.METRICS]
    if unknown or not names:
        raise UsageError(f"--metrics must be a subset of {','.join(M.METRICS)}")
    out = Path(args.out_dir)
    outputs = {"report": str(out / "report.csv")}
    if args.dump_attn:
        outputs["dump"] = args.dump_attn
    RunManifest("eval", argv, {k: v for k, v in vars(args).items() if k != "config"}, _seed(args),
                inputs={"model": args.model, "data": args.data}, outputs=outputs).write(out)
    model, vocabs, trained = _load_model(args.model)
    mono = _eval_mono(args, trained)
    mono.validate_heads(model.config.dec_layers, model.config.heads)
    ev = evaluate(model, _eval_corpus(args.data), vocabs, mono, names, args.max_len)
    (out / "report.csv").write_text(ev.report.csv_header() + "\n" + ev.report.csv_row() + "\n")
    if args.dump_attn:
        analysis.write_dump(ev.records, args.dump_attn)
    print(ev.report.to_block(), end="")
    return 0


def cmd_analyze(args, argv) -> int:
    if bool(args.dump) == bool(args.model or args.data):
        raise UsageError("give either --dump or --model with --data")
    if not args.dump and not (args.model and args.data):
        raise UsageError("--model and --data go together")
    mono = _mono_from(args, 0.0)
    out = Path(args.out_dir)
    RunManifest("analyze", argv, {k: v for k, v in vars(args).items() if k != "config"}, _seed(args),
                inputs={k: getattr(args, k) for k in ("dump", "model", "data") if getattr(args, k)},
                outputs={"paths": str(out / "paths.csv"), "summary": str(out / "summary.txt"),
                         "heatmaps": str(out / "heatmaps")}).write(out)
    if args.dump:
        records = analysis.read_dump(args.dump)
    else:
        model, vocabs, _ = _load_model(args.model)
        records = evaluate(model, _eval_corpus(args.data), vocabs, mono, ()).records
    report = analysis.report(records, mono)
    analysis.write_paths(analysis.path_rows(records, mono), out / "paths.csv")
    analysis.write_heatmaps(records, out / "heatmaps", args.max_heatmaps)
    text = analysis.summary_text(report)
    (out / "summary.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_replay(args, argv) -> int:
    manifest = RunManifest.read(args.manifest)
    return main(manifest.argv)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze,
            "sweep": cmd_sweep, "replay": cmd_replay}


def main(argv: list | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        if args.command != "replay":
            _apply_config(sub, args, argv)
            if getattr(args, "seed", None) is None and args.command in ("train", "sweep", "gen"):
                args.seed = _seed(args)
            argv = _resolved_argv(sub, args.command, args)
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        sub.print_usage(sys.stderr)
        print(f"monoattn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, TrainingError, CheckpointError) as exc:
        print(f"monoattn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
