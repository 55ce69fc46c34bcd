"""Deterministic synthetic corpus: grammar reports plus aligned feature files.

Each case is two sentences of two triples each.  The first sentence uses
the hedged-observation pattern (a parenthesized alternate subject shares
the object), the second links two entity pairs with spatial relations.
Features are derived injectively from the triple list, so restoring the
sub-graph from features is learnable in principle.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .extraction import Triple, default_dictionary
from .features import FEATURE_COLS, FEATURE_ROWS, synthesize_features, write_features

log = logging.getLogger(__name__)

LINK_RELATIONS = ("near", "under")
ADJECTIVES = ("mild", "severe", "diffuse", "focal", "obscured", "faint")
TAIL_WORDS = ("edge", "area", "border", "margin", "zone", "quadrant", "sector", "region")


@dataclass(frozen=True)
class Grammar:
    """Lexicons feeding the two sentence templates."""

    entities: tuple
    link_relations: tuple = LINK_RELATIONS
    adjectives: tuple = ADJECTIVES
    tails: tuple = TAIL_WORDS

    def __post_init__(self):
        distinct = set(self.entities)
        if len(distinct) < 4:
            raise ValueError("grammar needs at least four distinct entities "
                             "to fill both sentence templates")
        for word in distinct:
            if not word or " " in word:
                raise ValueError(f"grammar entities must be single tokens, got {word!r}")
        if not self.link_relations or not self.adjectives or not self.tails:
            raise ValueError("grammar lexicons must be non-empty")


def default_grammar() -> Grammar:
    """Single-word terms from the packaged dictionary."""
    singles = tuple(t[0] for t in default_dictionary() if len(t) == 1)
    return Grammar(entities=singles)


def generate_case(rng: np.random.Generator, grammar: Grammar):
    """One (report_text, triples) pair; triples are listed in extraction order."""
    g = grammar
    i1, i2, i3 = rng.choice(len(g.entities), size=3, replace=False)
    e1, e2, e3 = g.entities[i1], g.entities[i2], g.entities[i3]
    adj = g.adjectives[int(rng.integers(len(g.adjectives)))]
    tail = g.tails[int(rng.integers(len(g.tails)))]
    j1, j2, j3, j4 = rng.choice(len(g.entities), size=4, replace=False)
    b1, b2, b3, b4 = g.entities[j1], g.entities[j2], g.entities[j3], g.entities[j4]
    r1 = g.link_relations[int(rng.integers(len(g.link_relations)))]
    r2 = g.link_relations[int(rng.integers(len(g.link_relations)))]
    report = (f"{adj} {e1} ({e2}?) was seen at the {e3} {tail}. "
              f"the {b1} {r1} the {b2} and the {b3} {r2} the {b4}.")
    triples = [Triple(e1, "seen", e3), Triple(e2, "seen", e3),
               Triple(b1, r1, b2), Triple(b3, r2, b4)]
    return report, triples


def synthesize_corpus(seed: int, n_cases: int, out_dir, grammar: Grammar | None = None,
                      splits: tuple = (0.8, 0.1, 0.1),
                      feature_rows: int = FEATURE_ROWS,
                      feature_cols: int = FEATURE_COLS,
                      noise: float = 0.1) -> list[dict]:
    """Write dataset.jsonl plus one feature file per case; returns the records.

    The returned dicts additionally carry the generating ``triples`` (not
    serialized); everything on disk is a pure function of the arguments.
    """
    if n_cases <= 0:
        raise ValueError("n_cases must be positive; an empty dataset is useless")
    if seed < 0:
        raise ValueError("seed must be non-negative")
    if len(splits) != 3 or not np.isclose(sum(splits), 1.0):
        raise ValueError(f"splits must be three fractions summing to 1, got {splits}")
    grammar = grammar or default_grammar()
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    n_train = int(n_cases * splits[0])
    n_val = int(n_cases * splits[1])
    records, lines = [], []
    for idx in range(n_cases):
        rng = np.random.default_rng([seed, idx])
        report, triples = generate_case(rng, grammar)
        case_id = f"case{idx:05d}"
        split = ("train" if idx < n_train
                 else "val" if idx < n_train + n_val else "test")
        feats = synthesize_features(triples, case_seed=seed * 1_000_003 + idx,
                                    rows=feature_rows, cols=feature_cols, noise=noise)
        rel_path = f"features/{case_id}.ffaf"
        write_features(out / rel_path, feats)
        record = {"id": case_id, "split": split, "report": report,
                  "feature_path": rel_path, "n_images": int(rng.integers(12, 160))}
        lines.append(json.dumps(record, sort_keys=True))
        records.append({**record, "triples": triples})
    (out / "dataset.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    log.info("synthesized %d cases (%d train, %d val) under %s",
             n_cases, n_train, n_val, out)
    return records
