"""Generate synthetic report/graph cases and prove the extraction round trip."""

import json
import tempfile
from pathlib import Path

import numpy as np

from kgreport.extraction import default_pipeline
from kgreport.synth import default_grammar, generate_case, synthesize_corpus

grammar = default_grammar()
pipe = default_pipeline()

print("== three sampled cases ==")
for i in range(3):
    report, triples = generate_case(np.random.default_rng([2024, i]), grammar)
    print(f"\ncase {i}: {report}")
    for t in triples:
        print(f"  ({t.subject}, {t.relation}, {t.object})")
    # the grammar only emits sentences the pipeline parses back exactly
    extracted = [t for t, _ in pipe.extract(report)]
    assert extracted == triples
print("\nround trip holds: extraction returns each case's triples verbatim.")

print("\n== a corpus on disk ==")
out = Path(tempfile.mkdtemp(prefix="kgreport-demo-")) / "corpus"
records = synthesize_corpus(7, 10, out, feature_rows=4, feature_cols=16)
splits = [r["split"] for r in records]
print(f"wrote {len(records)} cases under {out}")
print(f"splits: {splits.count('train')} train, {splits.count('val')} val, "
      f"{splits.count('test')} test")
first = json.loads((out / "dataset.jsonl").read_text().splitlines()[0])
print("first record:", json.dumps(first, indent=2, sort_keys=True))
print("feature files:", sorted(p.name for p in (out / "features").iterdir())[:3],
      "...")
