"""Orchestration of the stages: purify, build, feature mapping, training,
evaluation and prediction."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from . import edgegcn, evalx, mixtag, txio, txmap, windgrad
from . import ndcore as nd
from .config import RunConfig
from .errors import IntegrityError, SchemaError, TrainingError, ValidationError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


# ------------------------------------------------------------------ files

def atomic_write(path: str, data: str | bytes) -> None:
    """Write via a temporary sibling file and rename into place."""
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8"})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_jsonl(path: str) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# --------------------------------------------------------------- dimensions

def map_dims(cfg: RunConfig) -> txmap.MapDims:
    return txmap.MapDims(cfg.value_dim, cfg.category_dim, cfg.noise_dim, cfg.time_dim,
                         cfg.position_dim, cfg.max_positions)


def encoder_dims(cfg: RunConfig) -> edgegcn.EncoderDims:
    return edgegcn.EncoderDims(cfg.node_dim, cfg.hidden_dim, cfg.out_dim, cfg.layers, cfg.head_hidden)


def encoder_options(cfg: RunConfig, training: bool = False) -> edgegcn.EncoderOptions:
    return edgegcn.EncoderOptions(edge_aware=not cfg.no_edge_aware,
                                  dropout=cfg.dropout if training else 0.0)


def ablation_flags(cfg: RunConfig, *flags: str) -> RunConfig:
    """Switch on the named ablations. ``no_window`` implies a unit window."""
    unknown = set(flags) - {"no_edge_aware", "no_mapping", "no_mixtag", "no_intra", "no_window"}
    if unknown:
        raise ValidationError(f"{sorted(unknown)[0]}: unknown ablation")
    cfg = cfg.replace(**{f: True for f in flags})
    return cfg


def effective_window(cfg: RunConfig) -> int:
    return 1 if cfg.no_window else cfg.window


def _seed(cfg: RunConfig, *tags) -> np.random.SeedSequence:
    return np.random.SeedSequence([cfg.seed, *[int(t) for t in tags]])


# ------------------------------------------------------------------- build

def purify_stage(raw_lines, mixers: dict, relayers) -> list:
    txs = txio.parse_records(raw_lines)
    pools = {a: txio.Pool(p) for a, p in mixers.items() if p is not None}
    return txio.purify_all(txs, mixers.keys(), relayers, pools)


def build_stage(purified: list, label_records: list, cfg: RunConfig) -> tuple:
    """(graph, slices) with composition labels turned into association edges."""
    comp, sup = mixtag.split_labels(list(label_records), cfg.composition_ratio, cfg.seed)
    graph = mixtag.build_graph(purified, sup, comp)
    slices = mixtag.slice_graph(graph, cfg.strategy, cfg.num_slices, cfg.anchor)
    return graph, slices


def bundle_meta(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.hash, "seed": cfg.seed, "num_slices": cfg.num_slices,
            "strategy": cfg.strategy, "composition_ratio": cfg.composition_ratio}


# ------------------------------------------------------------------ splits

def label_slices(slices: list) -> dict:
    return {n: s.index for s in slices for n in s.supervision}


def split_supervision(graph: mixtag.MixTag, slices: list, cfg: RunConfig) -> dict:
    """Time-respecting split of supervision label indices."""
    where = label_slices(slices)
    anchor = mixtag.pair_anchor_times(graph, cfg.anchor)
    order = sorted(range(len(graph.labels)),
                   key=lambda n: (where[n], anchor(graph.labels[n].i, graph.labels[n].j)[0], n))
    n = len(order)
    n_train = int(round(cfg.train_fraction * n))
    n_val = int(round(cfg.val_fraction * n))
    return {"train": order[:n_train], "val": order[n_train:n_train + n_val],
            "test": order[n_train + n_val:]}


# ---------------------------------------------------------------- features

@dataclass
class Features:
    X: np.ndarray
    map_params: nd.ParamSet
    pretrain_losses: list = field(default_factory=list)


def node_features(graph: mixtag.MixTag, cfg: RunConfig, map_params: nd.ParamSet | None = None) -> Features:
    dims = map_dims(cfg)
    if cfg.no_mapping:
        rng = np.random.default_rng(_seed(cfg, 101))
        return Features(rng.normal(0.0, 1.0, size=(graph.num_nodes, dims.total)), {})
    losses = []
    if map_params is None:
        params = txmap.init_params(dims, _seed(cfg, 102))
        m = len(graph.transactions)
        feats = txmap.tx_features(graph.transactions, [graph.edges[k].time for k in range(m)],
                                  dims.max_positions)
        params, losses = txmap.pretrain(params, feats, dims, epochs=cfg.pretrain_epochs,
                                        lr=cfg.pretrain_lr, sigma=cfg.sigma, seed=[cfg.seed, 103])
        map_params = params
    X = txmap.account_features(graph, map_params, dims)
    return Features(X, map_params, losses)


# -------------------------------------------------------------- slice data

class SliceData:
    """Cached compact batches per slice plus fixed evaluation pair sets."""

    def __init__(self, graph, slices, X, cfg: RunConfig, split: dict):
        self.graph, self.slices, self.cfg, self.split = graph, slices, cfg, split
        include = (mixtag.EdgeType.ASSOCIATION,) if cfg.no_mixtag else None
        where = label_slices(slices)
        self.split_of = {n: name for name, idx in split.items() for n in idx}
        self.by_slice = {name: [[] for _ in slices] for name in SPLITS}
        for n, k in where.items():
            self.by_slice[self.split_of[n]][k].append(n)
        self.batches = []
        for s in slices:
            ends = [v for n in s.supervision for v in (graph.labels[n].i, graph.labels[n].j)]
            extra = np.concatenate([s.active_eoas, np.asarray(ends, dtype=np.int64)])
            self.batches.append(edgegcn.make_batch(graph, s.edges, X, include=include, extra_nodes=extra))
        self.positive_keys = graph.positive_keys()
        self._eval_cache: dict = {}

    def positives(self, split: str, k: int) -> list:
        return [(self.graph.labels[n].i, self.graph.labels[n].j) for n in self.by_slice[split][k]]

    def train_pairs(self, k: int, epoch: int) -> tuple:
        pos = self.positives("train", k)
        if not pos:
            return None
        neg = mixtag.sample_slice_negatives(self.slices[k], self.graph, self.cfg.train_negative_ratio,
                                            _seed(self.cfg, 201, epoch, k), positives=pos)
        pairs = pos + [(i, j) for i, j, _ in neg]
        return pairs, [1.0] * len(pos) + [0.0] * len(neg)

    def eval_set(self, split: str) -> list:
        """Per slice: (pairs, labels, query spans). Pairs start with the
        balanced classification set; each query is (offset, count) into the
        candidate list that follows, positive first."""
        if split in self._eval_cache:
            return self._eval_cache[split]
        cfg, out = self.cfg, []
        for k, s in enumerate(self.slices):
            pos = self.positives(split, k)
            if not pos:
                continue
            neg = mixtag.sample_slice_negatives(s, self.graph, cfg.negative_ratio, _seed(cfg, 301, k),
                                                positives=pos)
            pairs = pos + [(i, j) for i, j, _ in neg]
            labels = [1] * len(pos) + [0] * len(neg)
            pool = s.active_eoas if s.active_eoas.size >= 2 else self.graph.eoas
            queries = []
            for q, (i, j) in enumerate(pos):
                cands = [int(c) for c in pool
                         if c != i and c != j and frozenset((i, int(c))) not in self.positive_keys]
                rng = np.random.default_rng(_seed(cfg, 302, k, q))
                if len(cands) > cfg.mrr_candidates:
                    cands = sorted(rng.choice(cands, size=cfg.mrr_candidates, replace=False).tolist())
                queries.append((len(pairs), 1 + len(cands)))
                pairs += [(i, j)] + [(i, c) for c in cands]
            out.append((k, pairs, labels, queries))
        self._eval_cache[split] = out
        return out


# ------------------------------------------------------------------ train

def _slice_objective(params, batch, dims, opts, masks):
    return edgegcn.slice_loss(params, batch, dims, opts, masks)


def make_grad_fn(data: SliceData, cfg: RunConfig):
    dims, opts = encoder_dims(cfg), encoder_options(cfg, training=True)

    def grad_fn(theta, k, key):
        epoch = key[0]
        chosen = data.train_pairs(k, epoch)
        if chosen is None:
            return None
        batch = data.batches[k].with_pairs(*chosen)
        rng = np.random.default_rng(_seed(cfg, 202, epoch, k))
        masks = edgegcn.draw_dropout_masks(batch.num_nodes, dims, opts.dropout, rng)
        return nd.value_and_grad(_slice_objective, theta, batch, dims, opts, masks)

    return grad_fn


def train_config(cfg: RunConfig) -> windgrad.TrainConfig:
    return windgrad.TrainConfig(window=effective_window(cfg), epochs=cfg.epochs, lr=cfg.lr,
                                meta_lr=cfg.meta_lr, rho=cfg.rho, delta=cfg.delta,
                                keep_prob=cfg.keep_prob, combine=cfg.window_combine,
                                intra_window=not cfg.no_intra,
                                patience=cfg.patience, seed=cfg.seed)


# ------------------------------------------------------------------- score

def score_split(theta, data: SliceData, split: str, cfg: RunConfig) -> dict:
    """Scores from the link head and from the embedding similarity for every
    evaluation pair of ``split``."""
    dims, opts = encoder_dims(cfg), encoder_options(cfg)
    head, sim, labels, ranks_h, ranks_s, pairs = [], [], [], [], [], []
    for k, kp, kl, queries in data.eval_set(split):
        batch = data.batches[k].with_pairs(kp, np.zeros(len(kp)))
        prob, h = edgegcn.pair_probabilities(theta, batch, dims, opts)
        cp = batch.pairs
        sp = evalx.link_probability(h[cp[:, 0]], h[cp[:, 1]], cfg.similarity_scale, cfg.similarity)
        sp = np.atleast_1d(sp)
        n = len(kl)
        head.append(prob[:n])
        sim.append(sp[:n])
        labels.append(np.asarray(kl))
        pairs.append(np.asarray(kp[:n], dtype=np.int64).reshape(-1, 2))
        for off, cnt in queries:
            ranks_h.append(evalx.query_rank(prob[off], prob[off + 1:off + cnt]))
            ranks_s.append(evalx.query_rank(sp[off], sp[off + 1:off + cnt]))
    if not labels:
        raise ValidationError(f"{split} split has no supervision pairs")
    return {"head": np.concatenate(head), "sim": np.concatenate(sim), "labels": np.concatenate(labels),
            "pairs": np.concatenate(pairs), "ranks_head": np.asarray(ranks_h), "ranks_sim": np.asarray(ranks_s)}


def report(theta, data: SliceData, split: str, cfg: RunConfig) -> evalx.PredictionReport:
    s = score_split(theta, data, split, cfg)
    rep = evalx.PredictionReport(s["pairs"], s["head"], s["labels"], s["ranks_head"], cfg.threshold)
    rep.metrics = evalx.metric_suite(s["head"], s["labels"], s["ranks_head"], cfg.threshold)
    rep.similarity = evalx.metric_suite(s["sim"], s["labels"], s["ranks_sim"], cfg.threshold)
    return rep


def val_mrr(theta, data: SliceData, cfg: RunConfig) -> float:
    s = score_split(theta, data, "val", cfg)
    return evalx.mrr_from_ranks(s["ranks_head"])


# ------------------------------------------------------------- experiments

@dataclass
class Experiment:
    cfg: RunConfig
    params: nd.ParamSet
    map_params: nd.ParamSet
    loss_trace: list
    val_trace: list
    best_epoch: int
    epochs_run: int
    report: evalx.PredictionReport | None = None
    val_report: evalx.PredictionReport | None = None
    seconds: float = 0.0

    def summary(self) -> dict:
        out = {"config_hash": self.cfg.hash, "seed": self.cfg.seed, "best_epoch": self.best_epoch,
               "epochs_run": self.epochs_run, "loss_trace": self.loss_trace, "val_trace": self.val_trace}
        if self.report is not None:
            out.update(metrics=self.report.metrics, similarity_metrics=self.report.similarity)
        if self.val_report is not None:
            out["val_metrics"] = self.val_report.metrics
        return out


def prepare(graph, slices, cfg: RunConfig, map_params=None) -> tuple:
    feats = node_features(graph, cfg, map_params)
    split = split_supervision(graph, slices, cfg)
    return feats, SliceData(graph, slices, feats.X, cfg, split)


def fit(graph, slices, cfg: RunConfig) -> tuple:
    """Pretrain the mapping, then train the encoder. Returns (Experiment, SliceData)."""
    t0 = time.perf_counter()
    feats, data = prepare(graph, slices, cfg)
    if not any(data.by_slice["train"]):
        raise TrainingError("no training supervision in any slice")
    params = edgegcn.init_params(encoder_dims(cfg), _seed(cfg, 104))
    log.info("training", extra={"fields": {"config_hash": cfg.hash, "window": effective_window(cfg)}})
    result = windgrad.train(params, len(slices), make_grad_fn(data, cfg), train_config(cfg),
                            evaluate=lambda th: val_mrr(th, data, cfg))
    exp = Experiment(cfg, result.params, feats.map_params, result.loss_trace, result.val_trace,
                     result.best_epoch, result.epochs_run, seconds=time.perf_counter() - t0)
    return exp, data


def run_experiment(graph, slices, cfg: RunConfig) -> Experiment:
    exp, data = fit(graph, slices, cfg)
    exp.report = report(exp.params, data, "test", cfg)
    exp.val_report = report(exp.params, data, "val", cfg)
    log.info("evaluated", extra={"fields": {"metrics": exp.report.metrics, "seconds": exp.seconds}})
    return exp


# -------------------------------------------------------------- checkpoint

def save_checkpoint(path: str, exp: Experiment) -> None:
    named = {**{f"encoder/{k}": v for k, v in exp.params.items()},
             **{f"mapping/{k}": v for k, v in exp.map_params.items()}}
    entries, chunks, offset = [], [], 0
    for name in sorted(named):
        arr = np.ascontiguousarray(named[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    blob = b"".join(chunks)
    manifest = {"dtype": "<f8", "params": entries, "sha256": hashlib.sha256(blob).hexdigest(),
                "seed": exp.cfg.seed, "config_hash": exp.cfg.hash, "config": exp.cfg.to_dict(),
                "loss_trace": exp.loss_trace, "val_trace": exp.val_trace, "best_epoch": exp.best_epoch}
    atomic_write(path, blob)
    atomic_write(path + ".json", json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(path: str) -> tuple:
    """(encoder params, mapping params, manifest)."""
    try:
        with open(path + ".json", encoding="utf-8") as fh:
            manifest = json.load(fh)
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError as exc:
        raise IntegrityError(f"checkpoint file missing: {exc.filename}") from exc
    if hashlib.sha256(blob).hexdigest() != manifest.get("sha256"):
        raise IntegrityError("checkpoint payload does not match its manifest digest")
    flat = np.frombuffer(blob, dtype=manifest["dtype"])
    enc, mp = {}, {}
    try:
        for e in manifest["params"]:
            size = int(np.prod(e["shape"])) if e["shape"] else 1
            arr = flat[e["offset"]:e["offset"] + size].astype(np.float64).reshape(e["shape"])
            prefix, name = e["name"].split("/", 1)
            (enc if prefix == "encoder" else mp)[name] = arr
    except (KeyError, ValueError) as exc:
        raise SchemaError(f"malformed checkpoint manifest: {exc}") from exc
    return enc, mp, manifest


# ----------------------------------------------------------------- predict

def predict_pairs(theta, map_params, graph, slices, cfg: RunConfig, address_pairs: list) -> list:
    """Head probability per (addr_a, addr_b), each encoded in the slice of
    the later account's first withdrawal (final slice when unknown)."""
    feats = node_features(graph, cfg, map_params or None)
    dims, opts = encoder_dims(cfg), encoder_options(cfg)
    include = (mixtag.EdgeType.ASSOCIATION,) if cfg.no_mixtag else None
    anchor = mixtag.pair_anchor_times(graph, cfg.anchor)
    edge_slice = {k: s.index for s in slices for k in s.edges}
    groups: dict = {}
    for n, (a, b) in enumerate(address_pairs):
        try:
            i, j = graph.index_of(a.lower()), graph.index_of(b.lower())
        except KeyError as exc:
            raise ValidationError(f"unknown address {exc.args[0]}") from None
        _, edge = anchor(i, j)
        k = edge_slice[edge] if edge is not None else len(slices) - 1
        groups.setdefault(k, []).append((n, i, j))
    out = [None] * len(address_pairs)
    for k, items in sorted(groups.items()):
        pairs = [(i, j) for _, i, j in items]
        batch = edgegcn.make_batch(graph, slices[k].edges, feats.X, pairs=pairs, labels=np.zeros(len(pairs)),
                                   include=include)
        prob, _ = edgegcn.pair_probabilities(theta, batch, dims, opts)
        for (n, _, _), p in zip(items, prob):
            out[n] = float(p)
    return out
