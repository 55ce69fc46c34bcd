"""Tests for the rule-based report-to-graph extraction pipeline."""

import pytest

from kgreport.extraction import (
    ADP,
    DET,
    NOUN,
    OTHER,
    PUNCT,
    VERB,
    ClinicalGraph,
    ExtractionPipeline,
    Triple,
    build_clinical_graph,
    default_dictionary,
    default_pipeline,
    default_relations,
    graph_manifest,
    graph_stats,
    lemmatize,
    lemmatize_all,
    link_entities,
    load_term_file,
    pos_tag,
    recognize_entities,
    split_sentences,
    tokenize,
)

# A hedged finding sentence exercising every pipeline stage at once.
HEDGED_SENTENCE = ("Spotted obscured fluorescence (hemorrhage?) was seen at the "
                   "inferior edge of the macular arch ring during left eye imaging.")


class TestTokenize:
    def test_hedged_fragment(self):
        """Parentheses and question marks become standalone tokens."""
        toks = tokenize("Spotted obscured fluorescence (hemorrhage?)")
        assert [t.surface for t in toks] == [
            "spotted", "obscured", "fluorescence", "(", "hemorrhage", "?", ")"]

    def test_empty_text(self):
        """Empty input gives an empty token list."""
        assert tokenize("") == []

    def test_trailing_period(self):
        """Word-level split with the terminal period separated."""
        toks = tokenize("macular arch ring.")
        assert [t.surface for t in toks] == ["macular", "arch", "ring", "."]

    def test_char_spans_within_source(self):
        """Every span indexes the original text and recovers the surface."""
        text = "The retina, (edema?) was seen."
        for tok in tokenize(text):
            s, e = tok.char_span
            assert 0 <= s < e <= len(text)
            assert text[s:e].lower() == tok.surface


class TestPosTag:
    def test_seen_is_verb(self):
        """'seen' is tagged VERB from the lexicon."""
        assert pos_tag(tokenize("seen"))[0].pos == VERB

    def test_period_is_punct(self):
        """Punctuation marks get PUNCT."""
        assert pos_tag(tokenize("."))[0].pos == PUNCT

    def test_suffix_rule_ence(self):
        """'fluorescence' resolves to NOUN via the -ence suffix rule."""
        assert pos_tag(tokenize("fluorescence"))[0].pos == NOUN

    def test_unknown_word_is_other(self):
        """Out-of-lexicon words with no matching suffix fall back to OTHER."""
        assert pos_tag(tokenize("zzyzx"))[0].pos == OTHER

    def test_closed_classes(self):
        """Determiners and prepositions come from the closed lexicon."""
        toks = pos_tag(tokenize("the edema at rest"))
        assert toks[0].pos == DET
        assert toks[2].pos == ADP

    def test_exactly_one_tag_each(self):
        """Every token receives exactly one tag from the closed set."""
        toks = pos_tag(tokenize(HEDGED_SENTENCE))
        valid = {NOUN, VERB, "ADJ", ADP, DET, PUNCT, OTHER}
        assert all(t.pos in valid for t in toks)


class TestLemmatize:
    def test_was_maps_to_is(self):
        """The exception table sends 'was' to 'is'."""
        assert lemmatize(pos_tag(tokenize("was"))[0]) == "is"

    def test_is_fixed_point(self):
        """'is' lemmatizes to itself."""
        assert lemmatize(pos_tag(tokenize("is"))[0]) == "is"

    def test_spotted_strips_to_spot(self):
        """-ed stripping plus consonant undoubling gives 'spot'."""
        assert lemmatize(pos_tag(tokenize("spotted"))[0]) == "spot"

    def test_plural_strips(self):
        """'shows' loses the -s."""
        assert lemmatize(pos_tag(tokenize("shows"))[0]) == "show"

    def test_dictionary_words_are_protected(self):
        """Canonical terminology keeps its surface form."""
        tok = pos_tag(tokenize("staining"))[0]
        assert lemmatize(tok, protected=frozenset({"staining"})) == "staining"
        assert lemmatize(tok) == "stain"

    def test_closed_class_untouched(self):
        """Prepositions and determiners are never stripped."""
        toks = pos_tag(tokenize("during this"))
        assert lemmatize(toks[0]) == "during"
        assert lemmatize(toks[1]) == "this"


class TestSplitSentences:
    def test_two_periods(self):
        """Two period-terminated clauses give two spans."""
        toks = tokenize("edema seen. atrophy seen.")
        assert len(split_sentences(toks)) == 2

    def test_no_terminal_punctuation(self):
        """Unterminated text is one sentence."""
        toks = tokenize("edema was seen at the fovea")
        assert split_sentences(toks) == [(0, len(toks))]

    def test_three_semicolon_clauses(self):
        """Semicolons split clauses exactly like periods."""
        toks = tokenize("a near b; c under d; e near f")
        assert len(split_sentences(toks)) == 3

    def test_cjk_enders(self):
        """CJK period and semicolon are boundaries too."""
        toks = tokenize("edema seen。atrophy seen；more")
        assert len(split_sentences(toks)) == 3

    def test_spans_partition_tokens(self):
        """Spans are contiguous, ordered and cover every token once."""
        toks = tokenize("one two. three; four five. six")
        spans = split_sentences(toks)
        assert spans[0][0] == 0 and spans[-1][1] == len(toks)
        for (a, b), (c, d) in zip(spans, spans[1:]):
            assert b == c and a < b


def _prepared(text, pipeline):
    toks = lemmatize_all(pos_tag(tokenize(text)), pipeline.protected)
    return toks


class TestRecognizeEntities:
    def test_dictionary_mention(self):
        """A dictionary term inside noise words is found."""
        pipe = default_pipeline()
        toks = _prepared("macular arch ring", pipe)
        mentions = recognize_entities(toks, (0, len(toks)), pipe.user_dictionary)
        assert [m.lemma for m in mentions] == ["macular"]

    def test_empty_dictionary_noun_fallback(self):
        """With no dictionary, every NOUN becomes a candidate entity."""
        toks = _prepared("fluorescence near pigmentation", ExtractionPipeline())
        mentions = recognize_entities(toks, (0, len(toks)), [])
        assert [m.lemma for m in mentions] == ["fluorescence", "pigmentation"]

    def test_longest_match_wins(self):
        """Overlapping dictionary terms resolve to the longest one."""
        dictionary = [("optic",), ("optic", "disc")]
        pipe = ExtractionPipeline(dictionary)
        toks = _prepared("the optic disc area", pipe)
        mentions = recognize_entities(toks, (0, len(toks)), dictionary)
        assert len(mentions) == 1
        assert (mentions[0].start, mentions[0].end) == (1, 3)
        assert mentions[0].lemma == "disc"

    def test_parenthesized_flag(self):
        """Mentions inside parentheses carry the hedge flag."""
        pipe = default_pipeline()
        toks = _prepared("fluorescence (hemorrhage?) was seen", pipe)
        mentions = recognize_entities(toks, (0, len(toks)), pipe.user_dictionary)
        flags = {m.lemma: m.parenthesized for m in mentions}
        assert flags == {"fluorescence": False, "hemorrhage": True}

    def test_non_overlapping(self):
        """Dictionary mentions never overlap each other."""
        dictionary = [("pigment", "epithelium"), ("epithelium",)]
        pipe = ExtractionPipeline(dictionary)
        toks = _prepared("pigment epithelium", pipe)
        mentions = recognize_entities(toks, (0, len(toks)), dictionary)
        assert len(mentions) == 1


class TestLinkEntities:
    def test_hedged_sentence_exact_triples(self):
        """The hedged sentence yields both subject variants, nothing else."""
        pipe = default_pipeline()
        triples = [t for t, _ in pipe.extract(HEDGED_SENTENCE)]
        assert set(triples) == {
            Triple("fluorescence", "seen", "macular"),
            Triple("hemorrhage", "seen", "macular"),
        }
        assert len(triples) == 2

    def test_no_relation_no_triples(self):
        """A sentence without relation words produces nothing."""
        pipe = default_pipeline()
        assert pipe.extract("the retina and the fovea.") == []

    def test_sentence_boundary_respected(self):
        """Triples never pair entities across a semicolon boundary."""
        pipe = default_pipeline()
        triples = {t for t, _ in pipe.extract("retina near fovea; cyst under choroid.")}
        assert triples == {Triple("retina", "near", "fovea"),
                           Triple("cyst", "under", "choroid")}

    def test_relation_without_pair_logs(self, caplog):
        """A relation lacking two entities emits no triple and logs it."""
        pipe = default_pipeline()
        with caplog.at_level("INFO", logger="kgreport.extraction"):
            out = pipe.extract("edema was seen.")
        assert out == []
        assert any("no linkable entity pair" in r.message for r in caplog.records)

    def test_degenerate_pair_skipped(self):
        """Subject and object with the same lemma never form a triple."""
        pipe = default_pipeline()
        assert pipe.extract("retina near retina.") == []


class TestClinicalGraph:
    def test_single_sentence_stats(self):
        """One hedged sentence gives 3 entities, 1 relation, 2 triples."""
        graph = build_clinical_graph(
            [{"id": "r0", "split": "train", "report_text": HEDGED_SENTENCE}],
            default_pipeline())
        assert graph_stats(graph) == (3, 1, 2)

    def test_duplicate_reports_idempotent(self):
        """Duplicated reports change counts but not the triple set."""
        pipe = default_pipeline()
        one = build_clinical_graph([{"id": "a", "report_text": HEDGED_SENTENCE}], pipe)
        two = build_clinical_graph([{"id": "a", "report_text": HEDGED_SENTENCE},
                                    {"id": "b", "report_text": HEDGED_SENTENCE}], pipe)
        assert one.triples == two.triples
        assert all(two.counts[t] == 2 * one.counts[t] for t in one.triples)

    def test_empty_corpus_warns(self, caplog):
        """An empty corpus produces an empty graph with a warning."""
        with caplog.at_level("WARNING", logger="kgreport.extraction"):
            graph = build_clinical_graph([], default_pipeline())
        assert graph_stats(graph) == (0, 0, 0)
        assert any("empty" in r.message for r in caplog.records)

    def test_leakage_guard(self):
        """Validation/test reports are refused outright."""
        with pytest.raises(ValueError, match="split"):
            build_clinical_graph(
                [{"id": "v0", "split": "val", "report_text": HEDGED_SENTENCE}],
                default_pipeline())

    def test_provenance_recorded(self):
        """Each triple remembers (report id, sentence index) origins."""
        pipe = default_pipeline()
        graph = build_clinical_graph(
            [{"id": "r7", "report_text": "retina near fovea. cyst under choroid."}], pipe)
        t = Triple("cyst", "under", "choroid")
        assert graph.provenance[t] == [("r7", 1)]

    def test_first_seen_order_deterministic(self):
        """Triple order is first-occurrence and stable across runs."""
        pipe = default_pipeline()
        reports = [{"id": i, "report_text": "retina near fovea. edema was seen at the macula."}
                   for i in range(3)]
        g1 = build_clinical_graph(reports, pipe)
        g2 = build_clinical_graph(reports, pipe)
        assert g1.triples == g2.triples
        assert g1.triples[0] == Triple("retina", "near", "fovea")

    def test_tsv_round_trip(self, tmp_path):
        """TSV export loads back into an identical triple list."""
        pipe = default_pipeline()
        graph = build_clinical_graph([{"id": 0, "report_text": HEDGED_SENTENCE}], pipe)
        path = tmp_path / "graph.tsv"
        graph.to_tsv(path)
        loaded = ClinicalGraph.from_tsv(path)
        assert loaded.triples == graph.triples
        assert loaded.counts == graph.counts

    def test_manifest_stats_and_hash(self):
        """The manifest reports stats and a stable id digest."""
        pipe = default_pipeline()
        graph = build_clinical_graph([{"id": 0, "report_text": HEDGED_SENTENCE}], pipe)
        m1 = graph_manifest(graph, [0])
        m2 = graph_manifest(graph, [0])
        assert (m1["entities"], m1["relations"], m1["triples"]) == (3, 1, 2)
        assert m1["train_ids_sha256"] == m2["train_ids_sha256"]

    def test_count_invariants(self):
        """entity count <= 2x triples and relation count <= triples."""
        pipe = default_pipeline()
        corpus = [
            {"id": 0, "report_text": HEDGED_SENTENCE},
            {"id": 1, "report_text": "retina near fovea; cyst under choroid."},
            {"id": 2, "report_text": "the scar shows edema in the periphery."},
            {"id": 3, "report_text": "atrophy was seen at the papilla zone."},
        ]
        graph = build_clinical_graph(corpus, pipeline=pipe)
        ents, rels, trips = graph_stats(graph)
        assert ents <= 2 * trips
        assert rels <= trips
        assert graph.entity_set == {t.subject for t in graph.triples} | {t.object for t in graph.triples}

    def test_triples_stay_inside_their_sentence(self):
        """Brute force: every triple's tokens appear in its own sentence."""
        pipe = default_pipeline()
        text = "retina near fovea. fluorescence (hemorrhage?) was seen at the macula; cyst under choroid."
        toks = pipe.analyze(text)
        spans = split_sentences(toks)
        for triple, si in pipe.extract(text):
            lemmas = {toks[i].lemma for i in range(*spans[si])}
            assert {triple.subject, triple.relation, triple.object} <= lemmas

    def test_degenerate_triple_rejected(self):
        """Constructing a subject==object triple is an error."""
        with pytest.raises(ValueError):
            Triple("retina", "near", "retina")


class TestTermFiles:
    def test_packaged_files_load(self):
        """Shipped dictionary and relation lexicon parse and are non-empty."""
        terms = default_dictionary()
        rels = default_relations()
        assert ("macular",) in terms
        assert ("optic", "disc") in terms
        assert {"seen", "spot", "near", "under", "show"} <= rels

    def test_term_file_parsing(self, tmp_path):
        """Comment and blank lines are skipped; terms are lowercased tuples."""
        path = tmp_path / "terms.txt"
        path.write_text("# header\n\nMacular\noptic disc\n", encoding="utf-8")
        assert load_term_file(path) == [("macular",), ("optic", "disc")]
