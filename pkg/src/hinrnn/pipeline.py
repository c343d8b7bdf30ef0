"""Stage functions behind the ``pipeline`` command.

Every stage reads its inputs from, and writes its outputs to, the output
directory named in the config. Shared stages (synthetic data, encoder,
candidate groups) write to the directory itself; model stages write to
``full/`` or ``feature_blind/`` and classification stages to a ``pruning/``
or ``no_pruning/`` subdirectory of that.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable

import numpy as np

from . import classifier, cogroups, corpus as corpus_mod, encoder, graph_model, wordvec
from .nn import save_params

log = logging.getLogger(__name__)


class UsageError(Exception):
    """Bad configuration or a stage run before its inputs exist."""


class DataError(Exception):
    """Malformed or inconsistent input data."""


@dataclass
class PipelineConfig:
    out_dir: str = "out"
    reviews: str = ""  # defaults to <out_dir>/reviews.jsonl
    groups: str = ""  # defaults to <out_dir>/groups.jsonl
    embeddings: str = ""  # pre-trained vectors; empty means train CBOW
    seed: int = 0
    split_ratio: float = 0.8
    # synthetic corpus
    synth_groups: int = 60
    synth_min_size: int = 3
    synth_max_size: int = 6
    synth_fraud_fraction: float = 0.5
    synth_camouflage_rate: float = 0.2
    synth_shared_token_rate: float = 0.3
    synth_class_vocab: int = 80
    synth_shared_vocab: int = 80
    synth_items_per_group: int = 3
    synth_background_reviews: int = 2
    synth_individuals: int = 20
    synth_min_sentences: int = 1
    synth_max_sentences: int = 3
    synth_min_words: int = 4
    synth_max_words: int = 10
    # word embeddings
    embed_dim: int = 100
    cbow_window: int = 2
    cbow_batch: int = 256
    cbow_epochs: int = 5
    cbow_lr: float = 0.05
    cbow_negatives: int = 5
    # reviewer encoder
    cnn_lr: float = 1e-4
    cnn_epochs: int = 30
    # co-review graph
    window_days: int = 28
    min_items: int = 2
    # graph model
    hinrnn_lr: float = 0.003
    hinrnn_epochs: int = 3000
    hinrnn_batch: int = 32
    graph_hidden: int = 128
    edge_hidden: int = 16
    input_embed: int = 64
    hinrnn_eval_every: int = 500
    # group head
    head_lr: float = 0.01
    head_epochs: int = 300
    # modes
    feature_blind: bool = False
    no_pruning: bool = False

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name.endswith("_lr") and not v > 0:
                raise UsageError(f"{f.name} must be > 0")
        if not 0.0 < self.split_ratio < 1.0:
            raise UsageError("split_ratio must be in (0, 1)")
        for name in ("synth_fraud_fraction", "synth_camouflage_rate", "synth_shared_token_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise UsageError(f"{name} must be in [0, 1]")
        for name in ("embed_dim", "cbow_window", "cbow_batch", "hinrnn_batch", "graph_hidden", "edge_hidden",
                     "input_embed", "window_days", "min_items"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1")
        for name in ("cbow_epochs", "cnn_epochs", "hinrnn_epochs", "head_epochs", "hinrnn_eval_every"):
            if getattr(self, name) < 0:
                raise UsageError(f"{name} must be >= 0")

    # -- paths ------------------------------------------------------------------

    @property
    def root(self) -> Path:
        return Path(self.out_dir)

    @property
    def reviews_path(self) -> Path:
        return Path(self.reviews) if self.reviews else self.root / "reviews.jsonl"

    @property
    def groups_path(self) -> Path:
        return Path(self.groups) if self.groups else self.root / "groups.jsonl"

    @property
    def model_dir(self) -> Path:
        return self.root / ("feature_blind" if self.feature_blind else "full")

    @property
    def classify_dir(self) -> Path:
        return self.model_dir / ("no_pruning" if self.no_pruning else "pruning")

    def sub_seed(self, stage: str) -> int:
        digest = hashlib.sha256(f"{self.seed}:{stage}".encode()).digest()
        return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF

    def as_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, kind, raw: str):
    try:
        if kind in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise UsageError(f"config key {name}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None
    return raw


def _read_config_file(path: Path, seen: set[Path]) -> dict[str, str]:
    path = path.resolve()
    if path in seen:
        raise UsageError(f"config include cycle at {path}")
    seen = seen | {path}
    if not path.is_file():
        raise UsageError(f"config file {path} not found")
    values: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include "):
            values.update(_read_config_file(path.parent / line[len("include "):].strip(), seen))
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = raw
    return values


def load_config(path: str | Path | None = None, **overrides) -> PipelineConfig:
    """Defaults, then the file (later lines and includes win in order), then overrides."""
    cfg = PipelineConfig()
    kinds = {f.name: f.type for f in fields(cfg)}
    if path is not None:
        for key, raw in _read_config_file(Path(path), set()).items():
            if key not in kinds:
                raise UsageError(f"unknown config key {key!r}")
            setattr(cfg, key, _coerce(key, kinds[key], raw))
    for key, value in overrides.items():
        if key not in kinds:
            raise UsageError(f"unknown config key {key!r}")
        if value is not None:
            setattr(cfg, key, value)
    cfg.validate()
    return cfg


# --- small I/O helpers -----------------------------------------------------

def _require(path: Path, command: str) -> Path:
    if not path.exists():
        raise UsageError(f"{path} is missing; run `pipeline {command}` first")
    return path


def _write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc.msg})") from exc


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_log(path: Path, rows: list[dict]) -> None:
    cols = ["epoch", "loss", "accuracy"]
    for row in rows:
        cols += [k for k in row if k not in cols]
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _echo_config(cfg: PipelineConfig, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.resolved").write_text(cfg.as_text(), encoding="utf-8")


def _load_corpus(cfg: PipelineConfig) -> corpus_mod.Corpus:
    _require(cfg.reviews_path, "synth")
    _require(cfg.groups_path, "synth")
    try:
        return corpus_mod.load_corpus(cfg.reviews_path, cfg.groups_path)
    except corpus_mod.CorpusError as exc:
        raise DataError(str(exc)) from exc


def _load_vectors(cfg: PipelineConfig) -> dict[str, np.ndarray]:
    rows = _read_jsonl(_require(cfg.root / "reviewer_vectors.jsonl", "train-encoder"))
    return {r["reviewer_id"]: np.asarray(r["vector"], dtype=np.float64) for r in rows}


def _load_networks(cfg: PipelineConfig) -> list[cogroups.CoReviewNetwork]:
    rows = _read_jsonl(_require(cfg.root / "candidate_groups.jsonl", "build-groups"))
    return [
        cogroups.CoReviewNetwork(r["group_id"], tuple(r["reviewer_ids"]), frozenset(tuple(e) for e in r["edges"]))
        for r in rows
    ]


def _load_candidate_labels(cfg: PipelineConfig) -> dict[str, dict]:
    rows = _read_jsonl(_require(cfg.root / "candidate_labels.jsonl", "build-groups"))
    return {r["group_id"]: r for r in rows}


# --- stages ----------------------------------------------------------------

def synth_config(cfg: PipelineConfig) -> corpus_mod.SynthConfig:
    return corpus_mod.SynthConfig(
        n_groups=cfg.synth_groups,
        min_group_size=cfg.synth_min_size,
        max_group_size=cfg.synth_max_size,
        fraud_fraction=cfg.synth_fraud_fraction,
        camouflage_rate=cfg.synth_camouflage_rate,
        shared_token_rate=cfg.synth_shared_token_rate,
        class_vocab_size=cfg.synth_class_vocab,
        shared_vocab_size=cfg.synth_shared_vocab,
        items_per_group=cfg.synth_items_per_group,
        background_reviews=cfg.synth_background_reviews,
        n_individuals=cfg.synth_individuals,
        sentences_per_review=(cfg.synth_min_sentences, cfg.synth_max_sentences),
        words_per_sentence=(cfg.synth_min_words, cfg.synth_max_words),
        seed=cfg.sub_seed("synth"),
    )


def cmd_synth(cfg: PipelineConfig) -> dict:
    scfg = synth_config(cfg)
    try:
        scfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    corp = corpus_mod.generate_synthetic(scfg)
    for p in (cfg.reviews_path, cfg.groups_path):
        p.parent.mkdir(parents=True, exist_ok=True)
    corpus_mod.write_reviews(corp, cfg.reviews_path)
    corpus_mod.write_groups(corp.group_labels, cfg.groups_path)
    _echo_config(cfg, cfg.root)
    return {"reviews": len(corp.reviews), "reviewers": len(corp.reviewer_ids()), "groups": len(corp.group_labels)}


def cmd_train_encoder(cfg: PipelineConfig) -> dict:
    corp = _load_corpus(cfg)
    if not corp.group_labels:
        raise DataError(f"{cfg.groups_path} holds no labeled groups")
    train_ids, test_ids = corpus_mod.split_ids(
        (g.group_id for g in corp.group_labels), cfg.split_ratio, cfg.sub_seed("split")
    )
    _write_json(cfg.root / "split.json", {"train": train_ids, "test": test_ids})

    if cfg.embeddings:
        if not Path(cfg.embeddings).is_file():
            raise UsageError(f"embeddings file {cfg.embeddings} not found")
        table = wordvec.load_embeddings(cfg.embeddings)
        cbow_losses: list[float] = []
    else:
        sentences = [s for r in corp.reviews for s in r.sentences()]
        table, cbow_losses = wordvec.train_cbow(
            sentences,
            dim=cfg.embed_dim,
            window=cfg.cbow_window,
            batch_size=cfg.cbow_batch,
            epochs=cfg.cbow_epochs,
            negatives=cfg.cbow_negatives,
            learning_rate=cfg.cbow_lr,
            seed=cfg.sub_seed("cbow"),
        )
    wordvec.save_embeddings(table, cfg.root / "embeddings.txt")

    labels = corp.labels_for_reviewers()
    train_corpus = corp.restrict(train_ids)
    inputs = {}
    for rid, reviews in sorted(train_corpus.by_reviewer().items()):
        try:
            inputs[rid] = encoder.prepare_reviewer(reviews, table)
        except encoder.NoUsableReviews:
            log.warning("skipping reviewer %s in encoder training: no usable reviews", rid)
    params, history = encoder.train_encoder(
        inputs, labels, table.dim, learning_rate=cfg.cnn_lr, epochs=cfg.cnn_epochs, seed=cfg.sub_seed("encoder")
    )
    save_params(cfg.root / "encoder.json", params, {"dim": table.dim})
    _write_log(cfg.root / "encoder_log.csv", history)
    if cbow_losses:
        _write_log(cfg.root / "cbow_log.csv", [{"epoch": i + 1, "loss": l, "accuracy": ""} for i, l in enumerate(cbow_losses)])

    vectors, dropped = encoder.encode_reviewers(corp, table, params)
    _write_jsonl(
        cfg.root / "reviewer_vectors.jsonl",
        ({"reviewer_id": r, "vector": [float(x) for x in v]} for r, v in sorted(vectors.items())),
    )
    _echo_config(cfg, cfg.root)
    return {"train_groups": len(train_ids), "test_groups": len(test_ids), "reviewers": len(vectors), "dropped": len(dropped)}


def match_candidates(
    networks: list[cogroups.CoReviewNetwork], gold: list[corpus_mod.GroupLabel], split: dict[str, list[str]]
) -> list[dict]:
    """Each candidate takes the label and split of the gold group it overlaps most.

    Ties go to the smaller gold id; candidates overlapping no gold group are
    left out.
    """
    side = {g: "train" for g in split["train"]} | {g: "test" for g in split["test"]}
    owner: dict[str, list[corpus_mod.GroupLabel]] = {}
    for g in gold:
        for r in g.reviewer_ids:
            owner.setdefault(r, []).append(g)
    rows = []
    for net in networks:
        counts: dict[str, int] = {}
        by_id = {}
        for r in net.reviewers:
            for g in owner.get(r, []):
                counts[g.group_id] = counts.get(g.group_id, 0) + 1
                by_id[g.group_id] = g
        if not counts:
            log.info("candidate %s overlaps no labeled group; left unlabeled", net.group_id)
            continue
        best = min(counts, key=lambda gid: (-counts[gid], gid))
        rows.append({
            "group_id": net.group_id,
            "gold_group_id": best,
            "label": by_id[best].label,
            "split": side.get(best, "train"),
            "gold_members": sorted(set(by_id[best].reviewer_ids) & set(net.reviewers)),
        })
    return rows


def cmd_build_groups(cfg: PipelineConfig) -> dict:
    corp = _load_corpus(cfg)
    split = json.loads(_require(cfg.root / "split.json", "train-encoder").read_text(encoding="utf-8"))
    networks = cogroups.build_networks(corp, cfg.window_days, cfg.min_items)
    _write_jsonl(
        cfg.root / "candidate_groups.jsonl",
        ({"group_id": n.group_id, "reviewer_ids": list(n.reviewers), "edges": sorted(list(e) for e in n.edges)}
         for n in networks),
    )
    rows = match_candidates(networks, corp.group_labels, split)
    _write_jsonl(cfg.root / "candidate_labels.jsonl", rows)
    _echo_config(cfg, cfg.root)
    return {"candidates": len(networks), "labeled": len(rows)}


def _samples(networks, vectors) -> list[graph_model.GraphSample]:
    out = []
    for net in networks:
        missing = [r for r in net.reviewers if r not in vectors]
        if missing:
            log.warning("candidate %s skipped: no vector for %s", net.group_id, ", ".join(missing))
            continue
        out.append(graph_model.make_sample(net, vectors))
    return out


def cmd_train_hinrnn(cfg: PipelineConfig) -> dict:
    vectors = _load_vectors(cfg)
    networks = _load_networks(cfg)
    labels = _load_candidate_labels(cfg)
    train_nets = [n for n in networks if labels.get(n.group_id, {}).get("split") == "train"]
    samples = _samples(train_nets, vectors)
    if not samples:
        raise DataError("no training candidate groups")
    dim = len(next(iter(vectors.values())))
    config = graph_model.HinRnnConfig(
        feature_dim=dim,
        graph_hidden=cfg.graph_hidden,
        edge_hidden=cfg.edge_hidden,
        input_embed=cfg.input_embed,
        feature_blind=cfg.feature_blind,
    )
    by_id = {n.group_id: n for n in train_nets}

    def evaluate_training(epoch: int, model: graph_model.HinRnn) -> dict:
        edge, node = [], []
        for s, m in zip(samples, model.infer(samples)):
            gold = graph_model.CollaborationMatrix(s.ordering, by_id[s.group_id].adjacency(s.ordering))
            edge.append(graph_model.edge_accuracy(m, gold))
            node.append(graph_model.node_accuracy(m, labels[s.group_id]["gold_members"] or s.ordering))
        return {"edge_accuracy": float(np.mean(edge)), "node_accuracy": float(np.mean(node))}

    model, history = graph_model.train_hinrnn(
        samples,
        config,
        learning_rate=cfg.hinrnn_lr,
        epochs=cfg.hinrnn_epochs,
        batch_size=cfg.hinrnn_batch,
        seed=cfg.sub_seed("hinrnn"),
        callback=evaluate_training,
        eval_every=cfg.hinrnn_eval_every,
    )
    cfg.model_dir.mkdir(parents=True, exist_ok=True)
    model.save(cfg.model_dir / "hinrnn.json")
    _write_log(cfg.model_dir / "hinrnn_log.csv", history)
    _echo_config(cfg, cfg.model_dir)
    return {"networks": len(samples), "final_loss": history[-1]["loss"] if history else None}


def cmd_infer(cfg: PipelineConfig) -> dict:
    model = graph_model.HinRnn.load(_require(cfg.model_dir / "hinrnn.json", "train-hinrnn"))
    vectors = _load_vectors(cfg)
    samples = _samples(_load_networks(cfg), vectors)
    mats = model.infer(samples)
    _write_jsonl(
        cfg.model_dir / "matrices.jsonl",
        ({"group_id": s.group_id, "ordering": list(m.ordering), "matrix": m.matrix.tolist()} for s, m in zip(samples, mats)),
    )
    _echo_config(cfg, cfg.model_dir)
    return {"matrices": len(mats)}


def cmd_classify(cfg: PipelineConfig) -> dict:
    vectors = _load_vectors(cfg)
    labels = _load_candidate_labels(cfg)
    rows = _read_jsonl(_require(cfg.model_dir / "matrices.jsonl", "infer"))
    train_X, train_y, test = [], [], []
    for row in rows:
        info = labels.get(row["group_id"])
        if info is None:
            continue
        mat = graph_model.CollaborationMatrix(tuple(row["ordering"]), np.asarray(row["matrix"]))
        group = classifier.Group(row["group_id"], tuple(sorted(mat.ordering)), info["label"])
        if not cfg.no_pruning:
            group = classifier.remove_deviants(group, mat)
        vec = classifier.group_vector(group.reviewer_ids, vectors)
        if info["split"] == "train":
            train_X.append(vec)
            train_y.append(info["label"])
        else:
            test.append((group, vec))
    if not train_X:
        raise DataError("no labeled training groups to fit the head")
    head, history = classifier.train_head(
        np.stack(train_X), train_y, learning_rate=cfg.head_lr, epochs=cfg.head_epochs, seed=cfg.sub_seed("head")
    )
    cfg.classify_dir.mkdir(parents=True, exist_ok=True)
    save_params(cfg.classify_dir / "head.json", head, {})
    _write_log(cfg.classify_dir / "head_log.csv", history)
    out = []
    for group, vec in test:
        label, score = classifier.classify(vec, head)
        out.append({"group_id": group.group_id, "pruned_reviewer_ids": list(group.reviewer_ids), "label": label, "score": score})
    _write_jsonl(cfg.classify_dir / "predictions.jsonl", out)
    _echo_config(cfg, cfg.classify_dir)
    return {"train_groups": len(train_X), "test_groups": len(out)}


def cmd_evaluate(cfg: PipelineConfig) -> dict:
    labels = _load_candidate_labels(cfg)
    preds = _read_jsonl(_require(cfg.classify_dir / "predictions.jsonl", "classify"))
    if not preds:
        raise DataError("no test predictions to evaluate")
    predicted = [p["label"] for p in preds]
    gold = [labels[p["group_id"]]["label"] for p in preds]
    metrics = classifier.evaluate(predicted, gold).as_dict()
    _write_json(cfg.classify_dir / "metrics.json", metrics)
    _echo_config(cfg, cfg.classify_dir)
    return metrics


STAGES = {
    "synth": cmd_synth,
    "train-encoder": cmd_train_encoder,
    "build-groups": cmd_build_groups,
    "train-hinrnn": cmd_train_hinrnn,
    "infer": cmd_infer,
    "classify": cmd_classify,
    "evaluate": cmd_evaluate,
}


def run_all(cfg: PipelineConfig, start: str = "synth") -> dict:
    """Runs the stages from ``start`` through ``evaluate``; returns the metrics."""
    names = list(STAGES)
    result: dict = {}
    for name in names[names.index(start):]:
        result = STAGES[name](cfg)
    return result


# --- report ----------------------------------------------------------------

def _eval_curve(log_path: Path) -> list[dict]:
    if not log_path.exists():
        return []
    with open(log_path, encoding="utf-8") as fh:
        return [
            {"epoch": int(r["epoch"]), "edge_accuracy": float(r["edge_accuracy"]), "node_accuracy": float(r["node_accuracy"])}
            for r in csv.DictReader(fh)
            if r.get("edge_accuracy")
        ]


def build_report(out_dir: str | Path) -> dict:
    root = Path(out_dir)
    runs = {}
    for path in sorted(root.glob("*/*/metrics.json")):
        mode = f"{path.parent.parent.name}/{path.parent.name}"
        entry = json.loads(path.read_text(encoding="utf-8"))
        entry["curve"] = _eval_curve(path.parent.parent / "hinrnn_log.csv")
        runs[mode] = entry
    report: dict = {"runs": runs}
    diffs = {}
    pairs = [
        ("full/pruning", "feature_blind/pruning", "feature conditioning"),
        ("full/pruning", "full/no_pruning", "pruning"),
    ]
    for a, b, name in pairs:
        if a in runs and b in runs:
            diffs[name] = {
                "with": a,
                "without": b,
                **{k: runs[a][k] - runs[b][k] for k in ("precision", "recall", "f1")},
            }
    if diffs:
        report["ablation"] = diffs
    return report


def format_report(report: dict) -> str:
    runs = report.get("runs", {})
    if not runs:
        return "nothing to report"
    lines = [f"{'run':<26}{'P':>8}{'R':>8}{'F1':>8}{'edge acc':>10}{'node acc':>10}"]
    for mode, m in runs.items():
        last = m["curve"][-1] if m.get("curve") else {}
        ea = f"{last['edge_accuracy']:.3f}" if last else "-"
        na = f"{last['node_accuracy']:.3f}" if last else "-"
        lines.append(f"{mode:<26}{m['precision']:>8.3f}{m['recall']:>8.3f}{m['f1']:>8.3f}{ea:>10}{na:>10}")
    curves = {mode: m["curve"] for mode, m in runs.items() if m.get("curve")}
    for mode, curve in curves.items():
        lines.append("")
        lines.append(f"{mode}: training edge/node accuracy by epoch")
        for c in curve:
            lines.append(f"  {c['epoch']:>6}  {c['edge_accuracy']:.3f}  {c['node_accuracy']:.3f}")
    if report.get("ablation"):
        lines.append("")
        lines.append(f"{'ablation':<22}{'dP':>8}{'dR':>8}{'dF1':>8}")
        for name, d in report["ablation"].items():
            lines.append(f"{name:<22}{d['precision']:>+8.3f}{d['recall']:>+8.3f}{d['f1']:>+8.3f}")
    return "\n".join(lines)


def cmd_report(cfg: PipelineConfig) -> dict:
    report = build_report(cfg.root)
    if report["runs"]:
        _write_json(cfg.root / "report.json", report)
    return report
