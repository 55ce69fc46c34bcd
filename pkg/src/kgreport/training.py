"""Training loop with resumable checkpoints, plus evaluation over a split.

Determinism contract: every source of randomness is a child generator seeded
from (run seed, epoch), so a run interrupted at any epoch boundary and resumed
from checkpoint_last.kgck produces byte-identical artifacts to an
uninterrupted run.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from .checkpoint import load_arrays, save_arrays
from .config import RunConfig, to_flat_toml
from .extraction import ClinicalGraph, build_clinical_graph, default_pipeline, tokenize
from .features import ingest_features
from .losses import (NegativeSampler, report_cross_entropy, total_loss,
                     triple_restoration_loss)
from .metrics import (auc, bleu, cider, corpus_meteor, corpus_rouge_l,
                      roc_micro, roc_to_csv)
from .model import CGTModel, parameter_count
from .optim import AdamState, adam_step, zero_grad
from .tensor import NonFiniteError
from .vocab import EOS, SOS, UNK, Vocabulary, build_vocab

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
LOSS_HEADER = "epoch,cross_entropy,triple_restoration,total"


# -- dataset loading -----------------------------------------------------------


def load_dataset(path) -> list[dict]:
    """Read a JSON-lines dataset; feature paths resolve relative to the file."""
    path = Path(path)
    base = path.parent
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        rec = dict(json.loads(line))
        text = rec.get("report_text", rec.get("report"))
        if text is None:
            raise ValueError(f"{path} line {lineno}: record has no report text")
        if "id" not in rec:
            raise ValueError(f"{path} line {lineno}: record has no id")
        split = rec.get("split", "train")
        if split not in SPLITS:
            raise ValueError(f"{path} line {lineno}: unknown split {split!r}")
        rec["report_text"] = text
        rec["split"] = split
        if "feature_path" in rec:
            rec["feature_source"] = str(base / rec["feature_path"])
        elif "synth_seed" in rec:
            rec["feature_source"] = int(rec["synth_seed"])
        else:
            raise ValueError(f"{path} line {lineno}: record needs feature_path "
                             "or synth_seed")
        records.append(rec)
    if not records:
        raise ValueError(f"dataset {path} is empty")
    return records


class CaseBundle:
    """Per-case tensors precomputed once before the epoch loop."""

    __slots__ = ("case_id", "features", "prefix", "targets", "gt_triples",
                 "gt_ids", "report_tokens")

    def __init__(self, case_id, features, prefix, targets, gt_triples, gt_ids,
                 report_tokens):
        self.case_id = case_id
        self.features = features
        self.prefix = prefix
        self.targets = targets
        self.gt_triples = gt_triples
        self.gt_ids = gt_ids
        self.report_tokens = report_tokens


def make_bundle(rec: dict, vocab: Vocabulary, pipeline, model_config) -> CaseBundle:
    feats = ingest_features(rec["feature_source"], rows=model_config.feature_rows,
                            cols=model_config.feature_dim)
    body = vocab.encode_text(rec["report_text"], add_sos_eos=False)
    body = body[: model_config.max_report_len]
    kept, ids = [], []
    for triple, _ in pipeline.extract(rec["report_text"]):
        enc = vocab.encode([triple.subject, triple.relation, triple.object])
        if UNK in enc:
            log.debug("case %s: dropping out-of-vocabulary triple %s",
                      rec["id"], triple)
            continue
        kept.append(triple)
        ids.append(enc)
    gt_ids = np.array(ids, dtype=int).reshape(len(ids), 3)
    return CaseBundle(rec["id"], feats, [SOS] + body, body + [EOS], kept,
                      gt_ids, [t.surface for t in tokenize(rec["report_text"])])


# -- checkpoint encoding -------------------------------------------------------


def _vocab_hash_array(vocab: Vocabulary) -> np.ndarray:
    digest = bytes.fromhex(vocab.content_hash())
    return np.frombuffer(digest, dtype=np.uint8).astype(np.float64)


def check_vocab_hash(arrays: dict, vocab: Vocabulary) -> None:
    stored = bytes(arrays["meta.vocab_hash"].astype(np.uint8)).hex()
    if stored != vocab.content_hash():
        raise ValueError("checkpoint was trained with a different vocabulary "
                         f"(checkpoint {stored[:12]}..., loaded "
                         f"{vocab.content_hash()[:12]}...)")


def _checkpoint_arrays(model: CGTModel, opt: AdamState, vocab: Vocabulary,
                       epoch: int, best_score: float) -> dict:
    arrays = {name: t.data for name, t in model.params.items()}
    for site, st in model.bn_states.items():
        arrays[f"bnstate.{site}.running_mean"] = st.running_mean
        arrays[f"bnstate.{site}.running_var"] = st.running_var
        arrays[f"bnstate.{site}.updates"] = np.array([float(st.updates)])
    for name in model.params:
        arrays[f"adam.m.{name}"] = opt.first_moment[name]
        arrays[f"adam.v.{name}"] = opt.second_moment[name]
    arrays["adam.step_count"] = np.array([float(opt.step_count)])
    arrays["meta.epoch"] = np.array([float(epoch)])
    arrays["meta.best_score"] = np.array([best_score])
    arrays["meta.vocab_hash"] = _vocab_hash_array(vocab)
    return arrays


def _apply_model_arrays(model: CGTModel, arrays: dict) -> None:
    for name, t in model.params.items():
        if name not in arrays:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        if arrays[name].shape != t.data.shape:
            raise ValueError(f"checkpoint parameter {name!r} has shape "
                             f"{arrays[name].shape}, expected {t.data.shape}")
        t.data[...] = arrays[name]
    for site, st in model.bn_states.items():
        st.running_mean[...] = arrays[f"bnstate.{site}.running_mean"]
        st.running_var[...] = arrays[f"bnstate.{site}.running_var"]
        st.updates = int(arrays[f"bnstate.{site}.updates"][0])


def _apply_optimizer_arrays(opt: AdamState, arrays: dict, names) -> None:
    for name in names:
        opt.first_moment[name][...] = arrays[f"adam.m.{name}"]
        opt.second_moment[name][...] = arrays[f"adam.v.{name}"]
    opt.step_count = int(arrays["adam.step_count"][0])


# -- training ------------------------------------------------------------------


def _negative_ids(sampler: NegativeSampler, bundle: CaseBundle,
                  vocab: Vocabulary) -> np.ndarray:
    rows = []
    for triple in bundle.gt_triples:
        corrupted = sampler.corrupt(triple)
        if corrupted is None:
            rows.append((-1, -1, -1))
            continue
        ids = vocab.encode([corrupted.subject, corrupted.relation,
                            corrupted.object])
        rows.append(tuple(ids) if UNK not in ids else (-1, -1, -1))
    return np.array(rows, dtype=int).reshape(len(rows), 3)


def _greedy_ids(model: CGTModel, memory) -> list[int]:
    ids = [SOS]
    for _ in range(model.config.max_report_len):
        nxt = int(np.argmax(model.decode_step(memory, ids)))
        if nxt == EOS:
            break
        ids.append(nxt)
    return ids[1:]


def _val_score(model: CGTModel, vocab: Vocabulary, val_bundles) -> float:
    candidates, references = [], []
    for b in val_bundles:
        ids = model.generate_greedy(b.features)
        candidates.append(vocab.decode(ids))
        references.append(b.report_tokens)
    return cider(candidates, references)


def _write_losses(path: Path, rows: list) -> None:
    lines = [LOSS_HEADER]
    lines += [f"{e},{ce!r},{tr!r},{tot!r}" for e, ce, tr, tot in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_losses(path: Path, before_epoch: int) -> list:
    rows = []
    if not path.exists():
        return rows
    for line in path.read_text(encoding="utf-8").splitlines()[1:]:
        epoch, ce, tr, tot = line.split(",")
        if int(epoch) < before_epoch:
            rows.append((int(epoch), float(ce), float(tr), float(tot)))
    return rows


def train(cfg: RunConfig, resume: bool = False) -> dict:
    """Run the full training loop; returns a summary of the run."""
    cfg.validate_paths()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = load_dataset(cfg.dataset)
    train_recs = [r for r in records if r["split"] == "train"]
    val_recs = [r for r in records if r["split"] == "val"]
    if not train_recs:
        raise ValueError("dataset has no train cases")

    vocab = build_vocab(train_recs, min_frequency=cfg.min_frequency)
    vocab.save(out / "vocab.json")
    pipeline = default_pipeline()
    graph = build_clinical_graph(train_recs, pipeline)
    graph.to_tsv(out / "graph.tsv")
    (out / "run_config.toml").write_text(to_flat_toml(cfg), encoding="utf-8")

    model_config = cfg.model_config(len(vocab))
    model = CGTModel(model_config, seed=cfg.seed)
    opt = AdamState(model.params, lr=cfg.lr)
    weights = cfg.loss_weights()
    bundles = [make_bundle(r, vocab, pipeline, model_config) for r in train_recs]
    val_bundles = [make_bundle(r, vocab, pipeline, model_config) for r in val_recs]
    allowed = set(vocab.id_to_token)

    start_epoch = 0
    best_score = -1.0
    last_path = out / "checkpoint_last.kgck"
    best_path = out / "checkpoint_best.kgck"
    if resume:
        if not last_path.exists():
            raise FileNotFoundError(f"nothing to resume from: {last_path}")
        arrays = load_arrays(last_path)
        check_vocab_hash(arrays, vocab)
        _apply_model_arrays(model, arrays)
        _apply_optimizer_arrays(opt, arrays, model.params)
        start_epoch = int(arrays["meta.epoch"][0]) + 1
        best_score = float(arrays["meta.best_score"][0])
        log.info("resuming at epoch %d (best validation score %.4f)",
                 start_epoch, best_score)
    loss_rows = _read_losses(out / "losses.csv", start_epoch)

    for epoch in range(start_epoch, cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(bundles))
        sampler = NegativeSampler(
            graph, np.random.default_rng([cfg.seed, epoch, 1]),
            allowed_entities=allowed)
        sums = np.zeros(3)
        try:
            for start in range(0, len(order), cfg.batch_size):
                batch = [bundles[i] for i in order[start:start + cfg.batch_size]]
                zero_grad(model.params)
                scale = 1.0 / len(batch)
                for b in batch:
                    enc = model.encode_case(b.features, training=True)
                    probs = model.slot_distributions(enc.slot_logits)
                    negatives = _negative_ids(sampler, b, vocab)
                    tr = triple_restoration_loss(
                        probs, model.params["token_table"], b.gt_ids, negatives,
                        gamma=cfg.gamma, mode=cfg.energy_mode)
                    logits = model.decode(enc.memory, b.prefix, training=True)
                    ce = report_cross_entropy(logits, b.targets)
                    loss = total_loss(ce, tr, weights)
                    (loss * scale).backward()
                    sums += (float(ce.data), float(tr.data), float(loss.data))
                adam_step(model.params, opt)
        except NonFiniteError as err:
            raise NonFiniteError(f"training diverged at epoch {epoch}: {err}") from err
        means = sums / len(bundles)
        loss_rows.append((epoch, float(means[0]), float(means[1]), float(means[2])))
        log.info("epoch %d: cross_entropy %.4f, triple_restoration %.4f, total %.4f",
                 epoch, *means)

        if val_bundles and ((epoch + 1) % cfg.val_every == 0
                            or epoch == cfg.epochs - 1):
            score = _val_score(model, vocab, val_bundles)
            log.info("epoch %d: validation score %.4f", epoch, score)
            if score > best_score:
                best_score = score
                save_arrays(best_path,
                            _checkpoint_arrays(model, opt, vocab, epoch, best_score))
        save_arrays(last_path,
                    _checkpoint_arrays(model, opt, vocab, epoch, best_score))
        _write_losses(out / "losses.csv", loss_rows)

    if best_score < 0:
        # no validation decision was ever made: the final state is the best
        # state, and rewriting it keeps resumed runs identical to straight ones
        save_arrays(best_path,
                    _checkpoint_arrays(model, opt, vocab, cfg.epochs - 1, best_score))
    return {"out_dir": str(out), "epochs": cfg.epochs, "best_score": best_score,
            "vocab_size": len(vocab), "parameters": parameter_count(model.params),
            "train_cases": len(bundles)}


# -- evaluation ----------------------------------------------------------------


def load_trained_model(cfg: RunConfig, checkpoint: str = "best"):
    """Rebuild the model plus vocabulary from a finished run directory."""
    if checkpoint not in ("best", "last"):
        raise ValueError(f"checkpoint must be 'best' or 'last', got {checkpoint!r}")
    out = Path(cfg.out_dir)
    vocab = Vocabulary.load(out / "vocab.json")
    arrays = load_arrays(out / f"checkpoint_{checkpoint}.kgck")
    check_vocab_hash(arrays, vocab)
    model = CGTModel(cfg.model_config(len(vocab)), seed=cfg.seed)
    _apply_model_arrays(model, arrays)
    return model, vocab


def restored_triples(model: CGTModel, vocab: Vocabulary, slot_ids) -> list:
    """Read consecutive slot id triplets back as unique (s, r, o) tuples."""
    tokens = [vocab.id_to_token[int(i)] for i in slot_ids]
    seen, out = set(), []
    for j in range(len(tokens) // 3):
        triple = (tokens[3 * j], tokens[3 * j + 1], tokens[3 * j + 2])
        if triple[0] == triple[2] or triple in seen:
            continue
        seen.add(triple)
        out.append(triple)
    return out


def _candidate_pool(graph: ClinicalGraph, vocab: Vocabulary):
    """Graph triples that survive vocabulary lookup, as (strings, ids) pairs."""
    pool = []
    for t in graph.triples:
        ids = vocab.encode([t.subject, t.relation, t.object])
        if UNK in ids:
            log.debug("dropping out-of-vocabulary candidate %s", t)
            continue
        pool.append(((t.subject, t.relation, t.object), np.array(ids)))
    return pool


def _energy_scores(expected: np.ndarray, table: np.ndarray,
                   candidate_ids: np.ndarray) -> np.ndarray:
    """-min over slot triplets of the L1 gap to each candidate's embeddings."""
    k = expected.shape[0] // 3
    slots = expected[: 3 * k].reshape(1, k, 3, -1)
    cands = table[candidate_ids]                       # (C, 3, d)
    gaps = np.abs(slots - cands[:, None]).sum(axis=(2, 3))
    return -gaps.min(axis=1)


def _probability_scores(probs: np.ndarray, candidate_ids: np.ndarray) -> np.ndarray:
    """max over slot triplets of the product of per-role token probabilities."""
    k = probs.shape[0] // 3
    grouped = probs[: 3 * k].reshape(k, 3, -1)
    cols = candidate_ids - 4                           # content-token columns
    per_role = np.empty((candidate_ids.shape[0], k, 3))
    for role in range(3):
        per_role[:, :, role] = grouped[:, role, :][:, cols[:, role]].T
    return per_role.prod(axis=2).max(axis=1)


def evaluate(cfg: RunConfig, checkpoint: str = "best", split: str = "test") -> dict:
    """Generate for one split, score text metrics and the retrieval ROC."""
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    cfg.validate_paths()
    out = Path(cfg.out_dir)
    model, vocab = load_trained_model(cfg, checkpoint)
    graph = ClinicalGraph.from_tsv(out / "graph.tsv")
    records = [r for r in load_dataset(cfg.dataset) if r["split"] == split]
    if not records:
        raise ValueError(f"dataset has no {split!r} cases")
    pipeline = default_pipeline()
    pool = _candidate_pool(graph, vocab)
    cand_ids = (np.stack([ids for _, ids in pool])
                if pool else np.zeros((0, 3), dtype=int))
    table = model.params["token_table"].data

    candidates, references, gen_rows = [], [], []
    scores, labels = [], []
    n_slot_triples = model.config.n_slots // 3
    for rec in records:
        feats = ingest_features(rec["feature_source"],
                                rows=model.config.feature_rows,
                                cols=model.config.feature_dim)
        enc = model.encode_case(feats, training=False)
        gen = _greedy_ids(model, enc.memory)
        hyp_tokens = vocab.decode(gen)
        ref_tokens = [t.surface for t in tokenize(rec["report_text"])]
        candidates.append(hyp_tokens)
        references.append(ref_tokens)

        gt = {(t.subject, t.relation, t.object)
              for t, _ in pipeline.extract(rec["report_text"])}
        restored = restored_triples(model, vocab, enc.slot_ids)
        tags = {"tp": [list(t) for t in restored if t in gt],
                "fp": [list(t) for t in restored if t not in gt],
                "fn": [list(t) for t in sorted(gt - set(restored))]}
        gen_rows.append({"case_id": rec["id"],
                         "report": " ".join(hyp_tokens),
                         "reference": " ".join(ref_tokens),
                         "restored_triples": [list(t) for t in restored],
                         "triple_tags": tags})

        if pool and n_slot_triples > 0:
            probs = model.slot_distributions(enc.slot_logits).data
            if cfg.score_mode == "energy":
                expected = probs @ table[4:]
                case_scores = _energy_scores(expected, table, cand_ids)
            else:
                case_scores = _probability_scores(probs, cand_ids)
            scores.extend(case_scores.tolist())
            labels.extend(strings in gt for strings, _ in pool)

    suffix = "" if split == "test" else f".{split}"
    metrics = {"split": split, "cases": len(records),
               "bleu_1": bleu(candidates, references, n=1),
               "bleu_2": bleu(candidates, references, n=2),
               "bleu_3": bleu(candidates, references, n=3),
               "bleu_4": bleu(candidates, references, n=4),
               "rouge_l": corpus_rouge_l(candidates, references),
               "meteor": corpus_meteor(candidates, references),
               "cider": cider(candidates, references)}
    if labels and len(set(labels)) == 2:
        points = roc_micro(scores, labels)
        metrics["auc"] = auc(points)
        roc_to_csv(points, out / f"roc{suffix}.csv")
    else:
        log.warning("retrieval labels contain a single class; no ROC written")
        metrics["auc"] = None

    (out / f"metrics{suffix}.json").write_text(
        json.dumps(metrics, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    (out / f"generations{suffix}.jsonl").write_text(
        "\n".join(json.dumps(row, sort_keys=True) for row in gen_rows) + "\n",
        encoding="utf-8")
    return metrics


def decode_case(cfg: RunConfig, feature_source, checkpoint: str = "best") -> str:
    """Generate one report from a feature file (or seed) using a finished run."""
    model, vocab = load_trained_model(cfg, checkpoint)
    feats = ingest_features(feature_source, rows=model.config.feature_rows,
                            cols=model.config.feature_dim)
    ids = model.generate_greedy(feats)
    return " ".join(vocab.decode(ids))
