"""Command line: ``hoplearn {graphflat,graphtrainer,graphinfer,gen}``.

Each stage is also installed as its own command (``graphflat`` etc.).

Exit codes: 0 ok, 1 unexpected failure, 2 usage, 3 bad input data,
4 engine failure, 5 model or checkpoint problem, 6 numerical failure,
7 shard or metric problem.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import HoplearnError, InputError, SchemaError
from .graph_store import (SyntheticSpec, generate_synthetic, load_graph, parse_label,
                          read_triples, triple_line, write_graph)
from .graphflat import ReindexConfig, SamplingStrategy, graphfeature_texts
from .graphinfer import run_inference, segment_model
from .gnn.model import MODEL_DEFAULTS, ModelConfig
from .trainer import TrainConfig, evaluate, train

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("hoplearn")


def _kv(text: str | None, what: str) -> dict[str, str]:
    """``a=1,b=x`` -> {"a": "1", "b": "x"}."""
    out = {}
    for part in (text or "").split(","):
        if not part.strip():
            continue
        key, sep, val = part.partition("=")
        if not sep:
            raise SchemaError(f"{what}: expected key=value, got {part!r}")
        out[key.strip()] = val.strip()
    return out


def _typed(raw: dict[str, str], allowed: dict[str, type], what: str) -> dict:
    unknown = set(raw) - set(allowed)
    if unknown:
        raise SchemaError(f"{what}: unknown option(s) {', '.join(sorted(unknown))}")
    out = {}
    for key, val in raw.items():
        try:
            out[key] = allowed[key](val)
        except ValueError as exc:
            raise SchemaError(f"{what}: bad value for {key}: {val!r}") from exc
    return out


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"no such file or directory: {path}")
    return p


def _read_labels(path) -> dict[int, object]:
    labels = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        toks = line.split("\t")
        if len(toks) != 2:
            raise SchemaError(f"{path} line {lineno}: expected <node>\\t<label>")
        try:
            labels[int(toks[0])] = parse_label(toks[1])
        except ValueError as exc:
            raise SchemaError(f"{path} line {lineno}: bad label") from exc
    return labels


def _read_ids(path) -> list[int]:
    try:
        return [int(line.split("\t")[0]) for line in
                Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    except ValueError as exc:
        raise SchemaError(f"{path}: node ids must be integers") from exc


def _emit(text: str, out: str | None) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands

def cmd_graphflat(args) -> int:
    g = load_graph(_existing(args.node_table), _existing(args.edge_table))
    labels = _read_labels(_existing(args.labels)) if args.labels else {}
    targets = _read_ids(_existing(args.targets)) if args.targets else None
    sampling = SamplingStrategy.parse(args.sampling, seed=args.seed)
    reindex = ReindexConfig(threshold=args.reindex_threshold, suffixes=args.suffixes,
                            seed=args.seed)
    texts = graphfeature_texts(g, targets, args.hops, sampling, reindex, args.workers)
    missing = [t for t in texts if labels and t not in labels]
    if missing:
        raise SchemaError(f"no label for target {missing[0]}")
    _emit("".join(triple_line(t, labels.get(t, 0), texts[t]) for t in sorted(texts)), args.output)
    return EXIT_OK


_TRAIN_KEYS = {"batch_size": int, "epochs": int, "lr": float, "seed": int, "eval_every": int,
               "dropout": float, "weight_decay": float, "metric": str, "partitions": int,
               "prefetch": lambda s: s.lower() in ("1", "true", "yes")}
_DIST_KEYS = {"workers": int, "mode": str}
_MODEL_KEYS = {"hidden": int, "heads": int, "activation": str}


def parse_model_name(text: str) -> tuple[str, dict]:
    """``GCN`` or ``GAT:hidden=8,heads=8``."""
    kind, _, opts = text.partition(":")
    kind = kind.upper()
    if kind not in MODEL_DEFAULTS:
        raise SchemaError(f"unknown model {kind!r}; choose from {', '.join(MODEL_DEFAULTS)}")
    return kind, {**MODEL_DEFAULTS[kind], **_typed(_kv(opts, "model"), _MODEL_KEYS, "model")}


def cmd_graphtrainer(args) -> int:
    kind, mopts = parse_model_name(args.model)
    samples = [s for path in args.input for s in read_triples(_existing(path))]
    if not samples:
        raise SchemaError("no training triples")
    val = read_triples(_existing(args.val)) if args.val else None
    test = read_triples(_existing(args.test)) if args.test else None
    cfg = TrainConfig(**_typed(_kv(args.train_strategy, "train strategy"), _TRAIN_KEYS,
                               "train strategy"),
                      **_typed(_kv(args.dist_configs, "dist config"), _DIST_KEYS, "dist config"))
    gf0 = samples[0][2]
    multilabel = isinstance(samples[0][1], tuple)
    classes = args.classes or (len(samples[0][1]) if multilabel else
                               1 + max(int(y) for _, y, _ in samples + (val or []) + (test or [])))
    width = mopts["hidden"] * (mopts["heads"] if kind == "GAT" else 1)
    mcfg = ModelConfig(kind, (gf0.node_dim,) + (width,) * gf0.hop, classes, heads=mopts["heads"],
                       activation=mopts["activation"], multilabel=multilabel)
    result = train(samples, mcfg, cfg, val)
    result.model.save(args.output)
    if args.history:
        result.write_history(args.history)
    if test:
        score = evaluate(result.model, test, cfg.metric)
        print(f"test {cfg.metric} {score:.4f}")
    log.info("trained %s for %d epochs (best epoch %d)", kind, cfg.epochs, result.best_epoch)
    return EXIT_OK


_INFER_KEYS = {"workers": int, "sampling": str, "seed": int, "reindex_threshold": float,
               "suffixes": int}


def cmd_graphinfer(args) -> int:
    ckpt = _existing(args.model).read_text(encoding="utf-8")
    root = _existing(args.input)
    if root.is_dir():
        node_path, edge_path = root / "nodes.tsv", root / "edges.tsv"
    else:
        node_path, edge_path = root, _existing(args.edge_table or "")
    g = load_graph(_existing(str(node_path)), _existing(str(edge_path)))
    opts = {"workers": 1, "sampling": "none", "seed": 0, "reindex_threshold": 1000.0,
            "suffixes": 8, **_typed(_kv(args.infer_configs, "infer config"), _INFER_KEYS,
                                    "infer config")}
    sampling = SamplingStrategy.parse(opts["sampling"], seed=opts["seed"])
    reindex = ReindexConfig(threshold=opts["reindex_threshold"], suffixes=opts["suffixes"],
                            seed=opts["seed"])
    targets = _read_ids(_existing(args.targets)) if args.targets else None
    result = run_inference(g, segment_model(ckpt), opts["workers"], sampling, reindex, targets)
    _emit(result.to_text(), args.output)
    log.info("aggregation_ops=%d embedding_evals=%d", result.counter.aggregation_ops,
             result.counter.embedding_evals)
    return EXIT_OK


def cmd_gen(args) -> int:
    spec = SyntheticSpec(args.n, args.model, args.seed, node_dim=args.node_dim,
                         edge_dim=args.edge_dim, avg_degree=args.avg_degree,
                         classes=args.classes, weighted=args.weighted)
    g = generate_synthetic(spec)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    write_graph(g, out / "nodes.tsv", out / "edges.tsv")
    if spec.labels:
        (out / "labels.tsv").write_text(
            "".join(f"{v}\t{spec.labels[v]}\n" for v in sorted(spec.labels)), encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parsers

def _add_help(p: argparse.ArgumentParser) -> None:
    p.add_argument("--help", action="help", help="show this help message and exit")


def add_graphflat_args(p: argparse.ArgumentParser) -> None:
    _add_help(p)
    p.add_argument("-n", "--node-table", required=True, help="node table: <id>\\t<features...>")
    p.add_argument("-e", "--edge-table", required=True,
                   help="edge table: <src>\\t<dst>\\t<weight>\\t<features...>")
    p.add_argument("-h", "--hops", type=int, required=True, help="neighborhood depth K")
    p.add_argument("-s", "--sampling", default="none",
                   help="none, uniform:<fanout> or weighted:<fanout> (default: none)")
    p.add_argument("-l", "--labels", help="labels: <id>\\t<label or comma-separated 0/1 vector>")
    p.add_argument("-o", "--output", help="triple file to write (default: stdout)")
    p.add_argument("--targets", help="file whose first column lists target ids (default: all)")
    p.add_argument("--workers", type=int, default=1, help="engine threads (default: 1)")
    p.add_argument("--seed", type=int, default=0, help="sampling / re-index seed")
    p.add_argument("--reindex-threshold", type=float, default=1000,
                   help="in-degree above which a node is split over sub-keys (default: 1000)")
    p.add_argument("--suffixes", type=int, default=8, help="sub-keys per split node (default: 8)")


def add_graphtrainer_args(p: argparse.ArgumentParser) -> None:
    _add_help(p)
    p.add_argument("-m", "--model", required=True,
                   help="GCN, SAGE or GAT, optionally with options, e.g. GAT:hidden=8,heads=8")
    p.add_argument("-i", "--input", required=True, action="append",
                   help="training triple file (repeatable)")
    p.add_argument("-t", "--train-strategy", default="",
                   help="key=value list: " + ", ".join(_TRAIN_KEYS))
    p.add_argument("-c", "--dist-configs", default="", help="key=value list: workers, mode")
    p.add_argument("-o", "--output", default="model.ckpt", help="checkpoint path")
    p.add_argument("--val", help="validation triples (best epoch is kept)")
    p.add_argument("--test", help="test triples, scored after training")
    p.add_argument("--history", help="write metric history CSV here")
    p.add_argument("--classes", type=int, help="class count (default: inferred from labels)")


def add_graphinfer_args(p: argparse.ArgumentParser) -> None:
    _add_help(p)
    p.add_argument("-m", "--model", required=True, help="checkpoint written by graphtrainer")
    p.add_argument("-i", "--input", required=True,
                   help="directory with nodes.tsv and edges.tsv, or a node table")
    p.add_argument("-e", "--edge-table", help="edge table when -i names a node table")
    p.add_argument("-c", "--infer-configs", default="",
                   help="key=value list: " + ", ".join(_INFER_KEYS))
    p.add_argument("-o", "--output", help="score file (default: stdout)")
    p.add_argument("--targets", help="file whose first column lists ids to score (default: all)")


def add_gen_args(p: argparse.ArgumentParser) -> None:
    _add_help(p)
    p.add_argument("--model", default="power_law",
                   help="path, star, power_law, random or planted (default: power_law)")
    p.add_argument("--n", type=int, required=True, help="node count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--node-dim", type=int, default=4)
    p.add_argument("--edge-dim", type=int, default=0)
    p.add_argument("--avg-degree", type=float, default=3.0)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--weighted", action="store_true")
    p.add_argument("-o", "--output", default=".", help="directory for nodes.tsv / edges.tsv")


COMMANDS = {
    "graphflat": (add_graphflat_args, cmd_graphflat, "build k-hop GraphFeature triples"),
    "graphtrainer": (add_graphtrainer_args, cmd_graphtrainer, "train a GNN on triples"),
    "graphinfer": (add_graphinfer_args, cmd_graphinfer, "score every node of a graph"),
    "gen": (add_gen_args, cmd_gen, "write a synthetic graph fixture"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hoplearn", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (add, _, desc) in COMMANDS.items():
        add(sub.add_parser(name, add_help=False, help=desc, description=desc))
    return parser


def _run(parser: argparse.ArgumentParser, argv, handler=None) -> int:
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:   # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = handler or COMMANDS[args.command][1]
    try:
        return handler(args)
    except HoplearnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return InputError.exit_code
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to a stable code
        print(f"error: unexpected {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def main(argv=None) -> int:
    return _run(build_parser(), argv)


def _stage(name: str):
    def entry(argv=None) -> int:
        add, handler, desc = COMMANDS[name]
        parser = argparse.ArgumentParser(prog=name, description=desc, add_help=False)
        add(parser)
        parser.add_argument("-v", "--verbose", action="store_true")
        return _run(parser, argv, handler)
    entry.__name__ = f"{name}_main"
    return entry


graphflat_main = _stage("graphflat")
graphtrainer_main = _stage("graphtrainer")
graphinfer_main = _stage("graphinfer")
gen_main = _stage("gen")


if __name__ == "__main__":
    sys.exit(main())
