"""Command-line entry point: ``mixtrace <stage> ...``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys

from . import mixtag, pipeline, synthgen, txio
from .config import ABLATIONS, RunConfig, dump_config, parse_config
from .errors import MixtraceError, UsageError

log = logging.getLogger("mixtrace")

LOG_ENV = "MIXTRACE_LOG"


class JsonLines(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        obj = {"level": record.levelname.lower(), "logger": record.name, "event": record.getMessage()}
        obj.update(getattr(record, "fields", {}) or {})
        return json.dumps(obj, sort_keys=True, default=str)


def setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "warning").upper()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLines())
    root = logging.getLogger("mixtrace")
    root.handlers[:] = [handler]
    root.setLevel(getattr(logging, level, logging.WARNING))
    root.propagate = False


def _need(path: str, what: str) -> str:
    if not path or not os.path.exists(path):
        raise UsageError(f"missing {what}: expected a file at {path!r}")
    return path


def _read(path: str, what: str) -> str:
    with open(_need(path, what), encoding="utf-8") as fh:
        return fh.read()


def load_run_config(args, **overrides) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = parse_config(_read(args.config, "config"), RunConfig)
    values = {k: v for k, v in overrides.items() if v is not None}
    for flag in ABLATIONS:
        if getattr(args, flag, False):
            values[flag] = True
    return cfg.replace(**values) if values else cfg.validate()


def _event(name: str, **fields) -> None:
    log.info(name, extra={"fields": fields})


# ------------------------------------------------------------------ stages

def cmd_synth(args) -> int:
    cfg = synthgen.SynthConfig()
    if args.config:
        cfg = parse_config(_read(args.config, "config"), synthgen.SynthConfig)
    if args.seed is not None:
        cfg = synthgen.SynthConfig(**{**cfg.__dict__, "seed": args.seed})
    world = synthgen.generate(cfg)
    out_dir = os.path.dirname(os.path.abspath(args.out_tx))
    pipeline.atomic_write(args.out_tx, txio.dump_lines(t.to_json() for t in world.transactions))
    pipeline.atomic_write(args.out_labels, txio.dump_lines(world.labels))
    mixers = args.out_mixers or os.path.join(out_dir, "mixers.json")
    relayers = args.out_relayers or os.path.join(out_dir, "relayers.json")
    pipeline.atomic_write(mixers, json.dumps(world.mixers, indent=1, sort_keys=True))
    pipeline.atomic_write(relayers, json.dumps(world.relayers, indent=1))
    _event("synth", transactions=len(world.transactions), labels=len(world.labels), seed=cfg.seed)
    return 0


def cmd_purify(args) -> int:
    mixers = txio.load_address_map(_read(args.mixers, "mixer address file"))
    relayers = list(txio.load_address_map(_read(args.relayers, "relayer address file"))) if args.relayers else []
    with open(_need(args.input, "raw transaction file"), encoding="utf-8") as fh:
        purified = pipeline.purify_stage(fh, mixers, relayers)
    pipeline.atomic_write(args.out, txio.dump_lines(p.to_json() for p in purified))
    _event("purify", records=len(purified))
    return 0


def cmd_build(args) -> int:
    cfg = load_run_config(args, num_slices=args.slices, strategy=args.strategy, seed=args.seed)
    with open(_need(args.purified, "purified file"), encoding="utf-8") as fh:
        purified = txio.read_purified(fh)
    labels = pipeline.read_jsonl(_need(args.labels, "label file"))
    graph, slices = pipeline.build_stage(purified, labels, cfg)
    bundle = mixtag.to_bundle(graph, slices, pipeline.bundle_meta(cfg))
    pipeline.atomic_write(args.out, mixtag.dump_bundle(bundle))
    _event("build", nodes=graph.num_nodes, edges=len(graph.edges), labels=len(graph.labels),
           composition=len(graph.composition), dropped=graph.dropped_labels, config_hash=cfg.hash)
    return 0


def _load_graph(path: str) -> tuple:
    with open(_need(path, "graph bundle"), encoding="utf-8") as fh:
        return mixtag.from_bundle(json.load(fh))


def cmd_train(args) -> int:
    cfg = load_run_config(args, window=args.window, epochs=args.epochs, seed=args.seed)
    graph, slices = _load_graph(args.graph)
    if len(slices) != cfg.num_slices:
        cfg = cfg.replace(num_slices=len(slices), window=min(cfg.window, len(slices)))
    exp, _ = pipeline.fit(graph, slices, cfg)
    pipeline.save_checkpoint(args.out, exp)
    _event("train", epochs=exp.epochs_run, best_epoch=exp.best_epoch, config_hash=cfg.hash,
           final_loss=exp.loss_trace[-1] if exp.loss_trace else None)
    return 0


def _checkpoint_config(manifest: dict, args, **overrides) -> RunConfig:
    cfg = RunConfig(**manifest["config"])
    if getattr(args, "config", None):
        cfg = parse_config(_read(args.config, "config"), RunConfig, base=cfg)
    values = {k: v for k, v in overrides.items() if v is not None}
    return cfg.replace(**values) if values else cfg.validate()


def cmd_eval(args) -> int:
    enc, mp, manifest = pipeline.load_checkpoint(_need(args.checkpoint, "checkpoint"))
    cfg = _checkpoint_config(manifest, args, train_fraction=args.train_fraction)
    graph, slices = _load_graph(args.graph)
    feats, data = pipeline.prepare(graph, slices, cfg, mp or None)
    rep = pipeline.report(enc, data, "test", cfg)
    scores = args.scores or os.path.splitext(args.out)[0] + ".scores.csv"
    pipeline.atomic_write(scores, rep.scores_csv())
    body = rep.to_json(config_hash=cfg.hash, seed=cfg.seed, per_pair_scores=os.path.basename(scores),
                       checkpoint_config_hash=manifest["config_hash"])
    pipeline.atomic_write(args.out, json.dumps(body, indent=1, sort_keys=True))
    _event("eval", config_hash=cfg.hash, **rep.metrics)
    return 0


def cmd_predict(args) -> int:
    enc, mp, manifest = pipeline.load_checkpoint(_need(args.checkpoint, "checkpoint"))
    cfg = _checkpoint_config(manifest, args)
    graph, slices = _load_graph(args.graph)
    pairs = [(o["addr_a"], o["addr_b"]) for o in pipeline.read_jsonl(_need(args.pairs, "pair file"))]
    probs = pipeline.predict_pairs(enc, mp, graph, slices, cfg, pairs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["addr_a", "addr_b", "probability"])
    for (a, b), p in zip(pairs, probs):
        w.writerow([a, b, repr(p)])
    pipeline.atomic_write(args.out, buf.getvalue())
    _event("predict", pairs=len(pairs), config_hash=cfg.hash)
    return 0


def cmd_config(args) -> int:
    sys.stdout.write(dump_config(load_run_config(args)))
    return 0


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mixtrace", description="Trace same-entity accounts through mixer transactions.")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic world")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out-tx", required=True)
    s.add_argument("--out-labels", required=True)
    s.add_argument("--out-mixers")
    s.add_argument("--out-relayers")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("purify", help="reduce raw records to purified transactions")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mixers", required=True)
    s.add_argument("--relayers")
    s.set_defaults(fn=cmd_purify)

    s = sub.add_parser("build", help="build and slice the account graph")
    s.add_argument("--purified", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--slices", type=int)
    s.add_argument("--strategy", choices=["equal-time", "equal-count"])
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_build)

    def ablations(sp):
        for flag in ABLATIONS:
            sp.add_argument("--" + flag.replace("_", "-"), dest=flag, action="store_true")

    s = sub.add_parser("train", help="train the encoder")
    s.add_argument("--graph", required=True)
    s.add_argument("--window", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    ablations(s)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="score the held-out split")
    s.add_argument("--graph", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config")
    s.add_argument("--train-fraction", type=float)
    s.add_argument("--out", required=True)
    s.add_argument("--scores")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("predict", help="score address pairs")
    s.add_argument("--graph", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--pairs", required=True, help="JSON lines with addr_a, addr_b")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_predict)

    s = sub.add_parser("config", help="print the resolved configuration")
    s.add_argument("--config")
    ablations(s)
    s.set_defaults(fn=cmd_config)
    return p


def main(argv=None) -> int:
    setup_logging()
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except MixtraceError as exc:
        log.error(type(exc).__name__, extra={"fields": {"message": str(exc), "exit_code": exc.exit_code}})
        sys.stderr.write(f"mixtrace: {exc}\n")
        return exc.exit_code
    except FileNotFoundError as exc:
        sys.stderr.write(f"mixtrace: missing input: {exc.filename}\n")
        return UsageError.exit_code


if __name__ == "__main__":
    sys.exit(main())
