"""Command-line entry point: ``triad <command> [options]``.

Every :class:`RunConfig` field is also a flag (``--batch-size 16``); values
from ``--config FILE`` sit between the defaults and the flags, and
``TRIAD_SEED`` overrides the seed.  Exit codes: 0 success, 2 configuration
or input error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import VARIANTS, RunConfig, build_config
from .corpus import generate_corpus, get_grammar, read_jsonl, write_jsonl
from .errors import ConfigError, ContractError, NumericAbort
from .metrics import TABLE_COLUMNS, table_row
from .model import ReportModel, make_batch
from .training import decode_studies, evaluate, oracle_evaluate, train

log = logging.getLogger("triad")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SPLITS = ("train", "val", "test")


class NotFound(LookupError):
    pass


# -- argument handling --------------------------------------------------------------


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("run configuration")
    group.add_argument("--config", help="key=value config file")
    group.add_argument("--variant", choices=list(VARIANTS),
                       help="set the view/history/interpreter flags of a named variant")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in (bool, "bool"):
            group.add_argument(flag, dest=f.name, nargs="?", const="true", default=None, metavar="BOOL")
        else:
            group.add_argument(flag, dest=f.name, default=None)
    group.add_argument("--no-history", dest="use_history", action="store_const", const="false")
    group.add_argument("--single-view", dest="use_multiview", action="store_const", const="false")
    group.add_argument("--no-interpreter", dest="use_interpreter", action="store_const", const="false")


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    return build_config(args.config, overrides, variant=args.variant)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    parser = argparse.ArgumentParser(prog="triad", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", parents=[common], help="write train/val/test JSONL splits")
    _add_config_flags(p)
    p.add_argument("--force", action="store_true", help="overwrite existing split files")

    p = sub.add_parser("train", parents=[common], help="train a model on the corpus")
    _add_config_flags(p)

    p = sub.add_parser("eval", parents=[common], help="score greedy generations on a split")
    _add_config_flags(p)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--oracle", action="store_true",
                   help="score the ground-truth reports against themselves (no checkpoint)")

    p = sub.add_parser("generate", parents=[common], help="print generated reports")
    _add_config_flags(p)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--study-id", action="append", default=[], help="repeatable; default all studies")

    p = sub.add_parser("inspect", parents=[common], help="dump attention heat-maps for one study as CSV")
    _add_config_flags(p)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--study-id", required=True)
    return parser


# -- helpers ----------------------------------------------------------------------------


def split_sizes(total: int, val_ratio: float, test_ratio: float) -> tuple[int, int, int]:
    """Floor for val and test, remainder to train."""
    n_val = int(total * val_ratio)
    n_test = int(total * test_ratio)
    return total - n_val - n_test, n_val, n_test


def _split_path(cfg: RunConfig, split: str) -> Path:
    return Path(cfg.corpus) / f"{split}.jsonl"


def _read_split(cfg: RunConfig, split: str, grammar):
    path = _split_path(cfg, split)
    if not path.exists():
        raise ConfigError(f"corpus split not found: {path}")
    return read_jsonl(path, grammar)


def _checkpoint_path(cfg: RunConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out) / "best.ckpt"


def _load_model(cfg: RunConfig):
    model = checkpoint.load(_checkpoint_path(cfg))
    grammar = get_grammar(cfg.grammar)
    if len(grammar.vocab) != model.config.v or grammar.n != model.config.n:
        raise ConfigError(f"checkpoint vocabulary ({model.config.v} words, {model.config.n} topics) "
                          f"does not match grammar {grammar.name!r} "
                          f"({len(grammar.vocab)} words, {grammar.n} topics)")
    return model, grammar


def _select(studies, ids):
    if not ids:
        return studies
    by_id = {s.id: s for s in studies}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise NotFound(f"study id(s) not found: {', '.join(missing)}")
    return [by_id[i] for i in ids]


def _write_jsonl(path: Path, rows) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _write_heat(path: Path, heat: np.ndarray, topics, words) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["topic", *words])
        for name, row in zip(topics, heat):
            w.writerow([name, *(f"{x:.6g}" for x in row)])


# -- commands -----------------------------------------------------------------------------


def cmd_gen_corpus(cfg: RunConfig, force: bool = False) -> int:
    grammar = get_grammar(cfg.grammar)
    out = Path(cfg.corpus)
    paths = {s: _split_path(cfg, s) for s in SPLITS}
    existing = [str(p) for p in paths.values() if p.exists()]
    if existing and not force:
        raise ConfigError(f"refusing to overwrite {', '.join(existing)} (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    n_train, n_val, n_test = split_sizes(cfg.corpus_size, cfg.val_ratio, cfg.test_ratio)
    studies = generate_corpus(cfg.seed, cfg.corpus_size, grammar)
    parts = {"train": studies[:n_train], "val": studies[n_train:n_train + n_val],
             "test": studies[n_train + n_val:]}
    for split, items in parts.items():
        write_jsonl(items, paths[split], grammar)
        print(f"{split}: {len(items)} studies -> {paths[split]}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    grammar = get_grammar(cfg.grammar)
    train_studies = _read_split(cfg, "train", grammar)
    val_path = _split_path(cfg, "val")
    val_studies = read_jsonl(val_path, grammar) if val_path.exists() else []
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    model = ReportModel(cfg, grammar.n, grammar.k, len(grammar.vocab))
    (out / "config.txt").write_text(model.config.to_text())
    ckpt = _checkpoint_path(cfg)
    data = make_batch(train_studies, grammar.k)
    val = (make_batch(val_studies, grammar.k), val_studies, grammar) if val_studies else None

    use_interp = model.config.use_interpreter and model.config.w_i != 0
    columns = ["epoch", "step", "l_c", "l_g"] + (["l_i"] if use_interp else []) + ["total"]
    loss_path = out / "losses.csv"

    with loss_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)

        def on_epoch(row):
            writer.writerow([row["epoch"], row["step"]] + [f"{row[c]:.6g}" for c in columns[2:]])
            fh.flush()
            log.info("epoch %d step %d total %.4f", row["epoch"], row["step"], row["total"])

        def on_best(m, step, b4):
            checkpoint.save(ckpt, m)
            log.info("step %d: new best val BLEU-4 %.4f -> %s", step, b4, ckpt)

        report = train(model, data, val, on_epoch=on_epoch, on_best=on_best)
    if val is None:
        checkpoint.save(ckpt, model)
    checkpoint.save(out / "last.ckpt", model)
    print(f"trained {report.steps_run} steps; best val BLEU-4 {report.best_bleu4:.4f} "
          f"at step {report.best_step}; checkpoint {ckpt}")
    return EXIT_OK


def _scores_json(lang, clin) -> dict:
    return {"language": lang.as_dict(), "clinical": clin.as_dict(),
            "table": dict(zip(TABLE_COLUMNS, table_row(lang, clin)))}


def _write_scores(out: Path, stem: str, lang, clin) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(json.dumps(_scores_json(lang, clin), indent=2) + "\n")
    with (out / f"{stem}.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_COLUMNS)
        w.writerow([f"{x:.4f}" for x in table_row(lang, clin)])


def cmd_eval(cfg: RunConfig, split: str = "test", oracle: bool = False) -> int:
    out = Path(cfg.out)
    if oracle:
        grammar = get_grammar(cfg.grammar)
        studies = _read_split(cfg, split, grammar)
        lang, clin = oracle_evaluate(studies, grammar)
        _write_scores(out, f"oracle_{split}", lang, clin)
    else:
        model, grammar = _load_model(cfg)
        studies = _read_split(cfg, split, grammar)
        lang, clin, rows = evaluate(model, studies, grammar)
        _write_scores(out, f"metrics_{split}", lang, clin)
        _write_jsonl(out / f"generations_{split}.jsonl", rows)
    print(json.dumps(_scores_json(lang, clin)["table"]))
    return EXIT_OK


def cmd_generate(cfg: RunConfig, split: str = "test", ids=()) -> int:
    model, grammar = _load_model(cfg)
    studies = _select(_read_split(cfg, split, grammar), list(ids))
    seqs, _, _ = decode_studies(model, make_batch(studies, grammar.k))
    for study, seq in zip(studies, seqs):
        print(f"{study.id}\t{grammar.vocab.detokenize(seq)}")
    return EXIT_OK


def cmd_inspect(cfg: RunConfig, split: str, study_id: str) -> int:
    model, grammar = _load_model(cfg)
    study = _select(_read_split(cfg, split, grammar), [study_id])[0]
    history_heat, seq, report_heat = model.heat_maps(make_batch([study], grammar.k))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab = grammar.vocab
    topics = grammar.topic_names
    if history_heat is not None:
        path = out / f"{study_id}_history_heatmap.csv"
        _write_heat(path, history_heat, topics, vocab.decode(study.history, strip=False))
        print(f"history heat-map -> {path}")
    path = out / f"{study_id}_report_heatmap.csv"
    _write_heat(path, report_heat, topics, vocab.decode(seq[1:], strip=False))
    print(f"report heat-map -> {path}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        if args.command == "gen-corpus":
            return cmd_gen_corpus(cfg, args.force)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.split, args.oracle)
        if args.command == "generate":
            return cmd_generate(cfg, args.split, args.study_id)
        return cmd_inspect(cfg, args.split, args.study_id)
    except (NumericAbort, FloatingPointError) as exc:
        print(f"triad: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ContractError, NotFound, ValueError, OSError) as exc:
        print(f"triad: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
