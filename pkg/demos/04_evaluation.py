"""Score a trained run, then verify each metric on small hand-checkable inputs."""

import tempfile
from pathlib import Path

from kgreport.config import RunConfig
from kgreport.metrics import (auc, bleu, cider, corpus_meteor, corpus_rouge_l,
                              rank_auc, roc_micro)
from kgreport.synth import synthesize_corpus
from kgreport.training import evaluate, train

root = Path(tempfile.mkdtemp(prefix="kgreport-demo-"))
synthesize_corpus(5, 40, root / "data", feature_rows=4, feature_cols=16)
cfg = RunConfig(dataset=str(root / "data" / "dataset.jsonl"),
                out_dir=str(root / "run"), seed=1, epochs=20, batch_size=4,
                lr=3e-3, min_frequency=2, d_model=32, heads=2,
                encoder_layers=1, decoder_layers=1, n_slots=12, group_size=3,
                feature_rows=4, feature_dim=16, max_report_len=40,
                val_every=5, score_mode="probability")
print("training 20 epochs on 32 train cases ...")
train(cfg)

print("\n== test-split metrics ==")
metrics = evaluate(cfg, checkpoint="best", split="test")
for key in ("cases", "bleu_1", "bleu_4", "rouge_l", "meteor", "cider", "auc"):
    print(f"  {key:8} = {metrics[key]}")
print("written:", sorted(p.name for p in (root / "run").iterdir()
                         if "metrics" in p.name or "roc" in p.name))

print("\n== the same metrics on toy corpora ==")
cands = [["the", "macula", "shows", "leakage"], ["optic", "disc", "is", "clear"]]
refs = [["the", "macula", "shows", "leakage"], ["optic", "disc", "looks", "clear"]]
print(f"  bleu_1 = {bleu(cands, refs, 1):.4f}   (7 of 8 unigrams match)")
print(f"  bleu_4 = {bleu(cands, refs, 4):.4f}")
print(f"  rouge_l = {corpus_rouge_l(cands, refs):.4f}")
print(f"  meteor = {corpus_meteor(cands, refs):.4f}")
print(f"  cider = {cider(cands, refs):.4f}")

scores = [0.9, 0.8, 0.3, 0.1]
labels = [1, 0, 1, 0]
points = roc_micro(scores, labels)
print(f"\n  roc points = {[(round(p.fpr, 2), round(p.tpr, 2)) for p in points]}")
print(f"  trapezoid auc = {auc(points):.4f}")
print(f"  rank auc      = {rank_auc(scores, labels):.4f}  (same area, "
      "computed from pair orderings)")
