"""Rule-based clinical graph extraction from free-text reports.

Seven deterministic stages: tokenization, part-of-speech tagging,
lemmatization, sentence splitting, dictionary-assisted entity recognition,
nearest-entity relation linking, and graph construction.  The output is a
deduplicated graph of (subject, relation, object) lemma triples with
per-triple provenance.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources

log = logging.getLogger(__name__)

NOUN, VERB, ADJ, ADP, DET, PUNCT, OTHER = "NOUN", "VERB", "ADJ", "ADP", "DET", "PUNCT", "OTHER"

SENTENCE_ENDERS = {".", ";", "。", "；"}

_WORD_RE = re.compile(r"[A-Za-z0-9]+(?:-[A-Za-z0-9]+)*|[^\sA-Za-z0-9]", re.UNICODE)

POS_LEXICON = {
    DET: {"the", "a", "an", "this", "that", "these", "those", "no", "any", "some", "both", "each"},
    ADP: {"at", "of", "in", "on", "by", "with", "from", "to", "into", "during",
          "near", "under", "above", "below", "within", "around", "along", "across"},
    VERB: {"is", "was", "were", "are", "be", "been", "am", "has", "have", "had",
           "seen", "show", "shows", "showed", "shown", "observed", "noted", "present",
           "presents", "presented", "reveals", "revealed", "appears", "appeared"},
    ADJ: {"left", "right", "inferior", "superior", "temporal", "nasal", "central",
          "peripheral", "mild", "severe", "diffuse", "focal", "small", "large", "visible"},
    NOUN: {"patient", "finding", "findings"},
}

# Suffixes checked in order; clinical noun endings first so that words such
# as "fluorescence" resolve before the verbal -ence... -ed/-ing rules fire.
NOUN_SUFFIXES = ("ence", "ance", "tion", "sion", "ity", "osis", "itis", "emia",
                 "oma", "age", "ness", "ism", "pathy", "plasm")
VERB_SUFFIXES = ("ing", "ed")
ADJ_SUFFIXES = ("ous", "ive", "al", "ic")

LEMMA_EXCEPTIONS = {"was": "is", "were": "is", "been": "is", "am": "is", "are": "is"}

_DOUBLED = re.compile(r"([b-df-hj-np-tv-z])\1$")


@dataclass
class Token:
    """One word or punctuation mark with its tag, lemma and source span."""

    surface: str
    lemma: str = ""
    pos: str = OTHER
    char_span: tuple[int, int] = (0, 0)


@dataclass(frozen=True)
class Triple:
    """A (subject, relation, object) fact over lemmatized tokens."""

    subject: str
    relation: str
    object: str

    def __post_init__(self):
        if self.subject == self.object:
            raise ValueError(f"degenerate triple: subject equals object ({self.subject!r})")


@dataclass
class Mention:
    """An entity mention: token span, head token index, hedge flag."""

    start: int
    end: int
    head: int
    lemma: str
    parenthesized: bool = False


def tokenize(text: str) -> list[Token]:
    """Split text into lowercased word and punctuation tokens."""
    tokens = []
    for m in _WORD_RE.finditer(text):
        tokens.append(Token(surface=m.group(0).lower(), char_span=(m.start(), m.end())))
    return tokens


def pos_tag(tokens: list[Token]) -> list[Token]:
    """Assign one tag per token: lexicon lookup, then suffix rules, else OTHER."""
    for tok in tokens:
        tok.pos = _tag_word(tok.surface)
    return tokens


def _tag_word(word: str) -> str:
    if not any(c.isalnum() for c in word):
        return PUNCT
    for tag, words in POS_LEXICON.items():
        if word in words:
            return tag
    if len(word) > 4:
        for suf in NOUN_SUFFIXES:
            if word.endswith(suf):
                return NOUN
    if len(word) > 3:
        for suf in VERB_SUFFIXES:
            if word.endswith(suf):
                return VERB
        for suf in ADJ_SUFFIXES:
            if word.endswith(suf):
                return ADJ
    return OTHER


def lemmatize(token: Token, protected: frozenset[str] = frozenset()) -> str:
    """Lemma via exception table, then suffix stripping for open-class words.

    Words in ``protected`` (the user dictionary) are canonical terminology
    and keep their surface form.
    """
    word = token.surface
    if word in protected:
        return word
    if word in LEMMA_EXCEPTIONS:
        return LEMMA_EXCEPTIONS[word]
    if token.pos in (PUNCT, DET, ADP):
        return word
    for suf in ("ing", "ed", "s"):
        if word.endswith(suf) and len(word) - len(suf) >= 3:
            if suf == "s" and word.endswith(("ss", "us", "is")):
                continue
            stem = word[: -len(suf)]
            stem = _DOUBLED.sub(r"\1", stem)
            return stem
    return word


def lemmatize_all(tokens: list[Token], protected: frozenset[str] = frozenset()) -> list[Token]:
    """Fill the lemma field of every token in place."""
    for tok in tokens:
        tok.lemma = lemmatize(tok, protected)
    return tokens


def split_sentences(tokens: list[Token]) -> list[tuple[int, int]]:
    """Sentence spans [start, end) with boundaries after ., ;, and CJK equivalents."""
    spans = []
    start = 0
    for i, tok in enumerate(tokens):
        if tok.surface in SENTENCE_ENDERS:
            spans.append((start, i + 1))
            start = i + 1
    if start < len(tokens):
        spans.append((start, len(tokens)))
    return spans


def recognize_entities(tokens: list[Token], span: tuple[int, int],
                       user_dictionary: list[tuple[str, ...]]) -> list[Mention]:
    """Longest-match dictionary mentions plus uncovered NOUN tokens.

    Multi-word terms match on consecutive lemmas; the mention's head is its
    final token.  Mentions inside parentheses are flagged as hedges.
    """
    start, end = span
    depth = [0] * len(tokens)
    d = 0
    for i in range(start, end):
        if tokens[i].surface == "(":
            d += 1
        depth[i] = d
        if tokens[i].surface == ")":
            d = max(0, d - 1)

    by_first: dict[str, list[tuple[str, ...]]] = {}
    for term in user_dictionary:
        by_first.setdefault(term[0], []).append(term)
    for terms in by_first.values():
        terms.sort(key=len, reverse=True)

    mentions = []
    covered = [False] * len(tokens)
    i = start
    while i < end:
        lemma = tokens[i].lemma
        hit = None
        for term in by_first.get(lemma, ()):
            j = i + len(term)
            if j <= end and all(tokens[i + k].lemma == term[k] for k in range(len(term))):
                hit = term
                break
        if hit is not None:
            j = i + len(hit)
            mentions.append(Mention(start=i, end=j, head=j - 1,
                                    lemma=tokens[j - 1].lemma,
                                    parenthesized=depth[j - 1] > 0))
            for k in range(i, j):
                covered[k] = True
            i = j
        else:
            i += 1
    for i in range(start, end):
        if not covered[i] and tokens[i].pos == NOUN:
            mentions.append(Mention(start=i, end=i + 1, head=i,
                                    lemma=tokens[i].lemma,
                                    parenthesized=depth[i] > 0))
    mentions.sort(key=lambda m: m.start)
    return mentions


def link_entities(tokens: list[Token], span: tuple[int, int], mentions: list[Mention],
                  relation_lexicon: frozenset[str]) -> list[Triple]:
    """Nearest-entity linking around each relation word in one sentence.

    For a relation token, the subject is the nearest preceding
    non-parenthesized mention and the object the nearest following mention.
    Parenthesized mentions attached directly after the subject duplicate
    the subject role (hedge expansion).
    """
    start, end = span
    covered = set()
    for m in mentions:
        covered.update(range(m.start, m.end))
    triples = []
    for i in range(start, end):
        if i in covered or tokens[i].lemma not in relation_lexicon:
            continue
        preceding = [m for m in mentions if m.end <= i and not m.parenthesized]
        following = [m for m in mentions if m.start > i]
        if not preceding or not following:
            log.info("relation %r at token %d has no linkable entity pair", tokens[i].lemma, i)
            continue
        subj = preceding[-1]
        obj = following[0]
        if subj.lemma == obj.lemma:
            continue
        subjects = [subj]
        if subj.end < end and tokens[subj.end].surface == "(":
            close = next((k for k in range(subj.end, i) if tokens[k].surface == ")"), i)
            for m in mentions:
                if m.parenthesized and subj.end < m.start and m.end <= close:
                    subjects.append(m)
        for s in subjects:
            if s.lemma != obj.lemma:
                triples.append(Triple(s.lemma, tokens[i].lemma, obj.lemma))
    return triples


class ClinicalGraph:
    """Ordered, deduplicated triple collection with provenance and counts."""

    def __init__(self):
        self.triples: list[Triple] = []
        self.counts: dict[Triple, int] = {}
        self.provenance: dict[Triple, list[tuple[str, int]]] = {}

    def add(self, triple: Triple, report_id: str, sentence_index: int) -> None:
        if triple not in self.counts:
            self.triples.append(triple)
            self.counts[triple] = 0
            self.provenance[triple] = []
        self.counts[triple] += 1
        self.provenance[triple].append((report_id, sentence_index))

    @property
    def entity_set(self) -> set[str]:
        return {t.subject for t in self.triples} | {t.object for t in self.triples}

    @property
    def relation_set(self) -> set[str]:
        return {t.relation for t in self.triples}

    def __len__(self) -> int:
        return len(self.triples)

    def __contains__(self, triple: Triple) -> bool:
        return triple in self.counts

    def resolve_ids(self, vocab) -> list[tuple[int, int, int]]:
        """Map triples to vocabulary ids, dropping any with out-of-vocabulary tokens."""
        resolved = []
        dropped = 0
        for t in self.triples:
            ids = tuple(vocab.token_to_id.get(w) for w in (t.subject, t.relation, t.object))
            if None in ids:
                dropped += 1
                continue
            resolved.append(ids)
        if dropped:
            log.warning("dropped %d graph triples with out-of-vocabulary tokens", dropped)
        return resolved

    def to_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for t in self.triples:
                fh.write(f"{t.subject}\t{t.relation}\t{t.object}\t{self.counts[t]}\n")

    @classmethod
    def from_tsv(cls, path) -> "ClinicalGraph":
        graph = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                s, r, o, count = line.split("\t")
                triple = Triple(s, r, o)
                graph.triples.append(triple)
                graph.counts[triple] = int(count)
                graph.provenance[triple] = []
        return graph


@dataclass
class ExtractionPipeline:
    """The full report-to-triples pipeline with its dictionary and lexicon."""

    user_dictionary: list[tuple[str, ...]] = field(default_factory=list)
    relation_lexicon: frozenset[str] = frozenset()

    def __post_init__(self):
        words = {w for term in self.user_dictionary for w in term}
        self.protected = frozenset(words)

    def analyze(self, text: str) -> list[Token]:
        """Tokenize, tag and lemmatize one report."""
        return lemmatize_all(pos_tag(tokenize(text)), self.protected)

    def extract(self, text: str) -> list[tuple[Triple, int]]:
        """All triples in a report, each paired with its sentence index."""
        tokens = self.analyze(text)
        out = []
        for si, span in enumerate(split_sentences(tokens)):
            mentions = recognize_entities(tokens, span, self.user_dictionary)
            for triple in link_entities(tokens, span, mentions, self.relation_lexicon):
                out.append((triple, si))
        return out


def build_clinical_graph(reports, pipeline: ExtractionPipeline,
                         allowed_splits: tuple[str, ...] = ("train",)) -> ClinicalGraph:
    """Extract and merge triples from training reports into one graph.

    Reports are dicts with ``id``, ``report_text`` and an optional
    ``split``; any report labeled with a split outside ``allowed_splits``
    is refused outright, which keeps validation and test text out of the
    graph.
    """
    graph = ClinicalGraph()
    n = 0
    for report in reports:
        split = report.get("split")
        if split is not None and split not in allowed_splits:
            raise ValueError(f"report {report.get('id')!r} has split {split!r}; "
                             f"graph building accepts only {allowed_splits}")
        for triple, si in pipeline.extract(report["report_text"]):
            graph.add(triple, str(report.get("id", n)), si)
        n += 1
    if n == 0 or not graph.triples:
        log.warning("clinical graph is empty (%d reports scanned)", n)
    return graph


def graph_stats(graph: ClinicalGraph) -> tuple[int, int, int]:
    """(entity count, relation count, triple count)."""
    return len(graph.entity_set), len(graph.relation_set), len(graph.triples)


def graph_manifest(graph: ClinicalGraph, report_ids) -> dict:
    """Stats plus a hash of the contributing report ids, for leakage audits."""
    ids = sorted(str(r) for r in report_ids)
    digest = hashlib.sha256("\n".join(ids).encode("utf-8")).hexdigest()
    ents, rels, trips = graph_stats(graph)
    return {"entities": ents, "relations": rels, "triples": trips,
            "reports": len(ids), "train_ids_sha256": digest}


def load_term_file(path) -> list[tuple[str, ...]]:
    """One lowercase term per line; multi-word terms split on whitespace."""
    terms = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip().lower()
            if line and not line.startswith("#"):
                terms.append(tuple(line.split()))
    return terms


def _packaged_terms(name: str) -> list[tuple[str, ...]]:
    text = resources.files("kgreport").joinpath("data", name).read_text(encoding="utf-8")
    terms = []
    for line in text.splitlines():
        line = line.strip().lower()
        if line and not line.startswith("#"):
            terms.append(tuple(line.split()))
    return terms


def default_dictionary() -> list[tuple[str, ...]]:
    """The packaged starter user dictionary of ophthalmic terms."""
    return _packaged_terms("terms.txt")


def default_relations() -> frozenset[str]:
    """The packaged starter relation lexicon (lemmas)."""
    return frozenset(t[0] for t in _packaged_terms("relations.txt"))


def default_pipeline() -> ExtractionPipeline:
    """Pipeline wired with the packaged dictionary and relation lexicon."""
    return ExtractionPipeline(default_dictionary(), default_relations())


def manifest_to_json(manifest: dict) -> str:
    return json.dumps(manifest, indent=2, sort_keys=True)
