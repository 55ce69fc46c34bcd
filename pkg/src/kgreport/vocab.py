"""Report vocabulary with fixed special tokens and a frequency cutoff."""

from __future__ import annotations

import hashlib
import json
from collections import Counter

from .extraction import tokenize

PAD, SOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("[PAD]", "[SOS]", "[EOS]", "[UNK]")


class Vocabulary:
    """Bijective token/id maps; ids 0-3 are [PAD], [SOS], [EOS], [UNK]."""

    def __init__(self, tokens: list[str], min_frequency: int = 3,
                 train_ids_sha256: str = ""):
        self.min_frequency = min_frequency
        self.train_ids_sha256 = train_ids_sha256
        self.id_to_token = list(SPECIALS) + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens: list[str], add_sos_eos: bool = False) -> list[int]:
        """Token list to ids; out-of-vocabulary tokens become [UNK]."""
        ids = [self.token_to_id.get(t.lower(), UNK) for t in tokens]
        if add_sos_eos:
            ids = [SOS] + ids + [EOS]
        return ids

    def decode(self, ids, strip_specials: bool = True) -> list[str]:
        """Ids back to tokens, dropping specials by default."""
        toks = [self.id_to_token[i] for i in ids]
        if strip_specials:
            toks = [t for t in toks if t not in SPECIALS]
        return toks

    def encode_text(self, text: str, add_sos_eos: bool = True) -> list[int]:
        """Tokenize raw text with the shared tokenizer, then encode."""
        return self.encode([t.surface for t in tokenize(text)], add_sos_eos)

    def save(self, path) -> None:
        payload = {"min_frequency": self.min_frequency,
                   "train_ids_sha256": self.train_ids_sha256,
                   "tokens": self.id_to_token[len(SPECIALS):]}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=0, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        return cls(payload["tokens"], payload["min_frequency"],
                   payload.get("train_ids_sha256", ""))

    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(self.id_to_token).encode("utf-8")).hexdigest()


def build_vocab(reports, min_frequency: int = 3) -> Vocabulary:
    """Count lowercased word-level tokens over training reports.

    Reports are dicts with ``report_text`` and optional ``split``/``id``;
    non-train splits are refused.  Tokens below ``min_frequency`` are
    dropped; the rest are ordered by descending frequency, then
    lexicographically.
    """
    counts: Counter[str] = Counter()
    ids = []
    n = 0
    for report in reports:
        split = report.get("split")
        if split is not None and split != "train":
            raise ValueError(f"report {report.get('id')!r} has split {split!r}; "
                             "vocabulary is built from the train split only")
        counts.update(t.surface for t in tokenize(report["report_text"]))
        ids.append(str(report.get("id", n)))
        n += 1
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_frequency),
                  key=lambda t: (-counts[t], t))
    digest = hashlib.sha256("\n".join(sorted(ids)).encode("utf-8")).hexdigest()
    return Vocabulary(kept, min_frequency, digest)
