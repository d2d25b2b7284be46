import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prefixasr.metrics import (CmiInput, align_wer, cmi, cmi_of_tokens,
                               corpus_report, format_report, levenshtein_distance)


# ---------------------------------------------------------------------------
# alignment


def test_identity_alignment():
    c = align_wer(["a", "b", "c"], ["a", "b", "c"])
    assert (c.deletions, c.insertions, c.substitutions) == (0, 0, 0)
    assert c.wer == 0.0


def test_single_substitution():
    c = align_wer(["a", "b", "c"], ["a", "x", "c"])
    assert (c.deletions, c.insertions, c.substitutions) == (0, 0, 1)
    assert c.wer == pytest.approx(1 / 3)


def test_tie_break_gives_deletion_plus_insertion():
    c = align_wer(["a", "b", "c", "d"], ["a", "c", "d", "e"])
    assert (c.deletions, c.insertions, c.substitutions) == (1, 1, 0)
    assert c.wer == pytest.approx(0.5)


def test_empty_sides():
    c = align_wer(["a", "b"], [])
    assert (c.deletions, c.insertions, c.substitutions) == (2, 0, 0)
    c = align_wer([], ["a", "b", "c"])
    assert (c.deletions, c.insertions, c.substitutions) == (0, 3, 0)
    c = align_wer([], [])
    assert c.errors == 0 and c.wer == 0.0


def test_wer_can_exceed_one():
    c = align_wer(["a"], ["x", "y", "z"])
    assert c.wer > 1.0
    assert c.deletions + c.substitutions <= c.ref_len


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 4), max_size=8), st.lists(st.integers(0, 4), max_size=8))
def test_decomposition_total_matches_independent_distance(ref, hyp):
    c = align_wer(ref, hyp)
    assert c.errors == levenshtein_distance(ref, hyp)
    assert c.deletions + c.substitutions <= len(ref)


def test_randomized_against_distance_recursion():
    rng = np.random.default_rng(0)
    for _ in range(500):
        ref = list(rng.integers(0, 5, size=rng.integers(0, 9)))
        hyp = list(rng.integers(0, 5, size=rng.integers(0, 9)))
        assert align_wer(ref, hyp).errors == levenshtein_distance(ref, hyp)


# ---------------------------------------------------------------------------
# cmi


def test_cmi_fixed_case():
    val = cmi(CmiInput(n=10, u=2, lang_words={"a": 6, "b": 2}))
    assert val == pytest.approx(25.0, abs=0)


def test_cmi_all_untagged_is_zero():
    assert cmi(CmiInput(n=3, u=3, lang_words={})) == 0.0


def test_cmi_monolingual_is_zero():
    assert cmi(CmiInput(n=8, u=0, lang_words={"a": 8})) == 0.0


def test_cmi_rejects_more_untagged_than_tokens():
    with pytest.raises(ValueError, match="n="):
        CmiInput(n=2, u=3, lang_words={})


def test_cmi_requires_consistent_counts():
    with pytest.raises(ValueError, match="equal n"):
        CmiInput(n=5, u=1, lang_words={"a": 5})


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 50), st.integers(0, 10), st.integers(1, 4))
def test_cmi_scale_free_and_bounded(base, untagged, k):
    words = {"a": base, "b": max(base // 2, 1)}
    n = sum(words.values()) + untagged
    v1 = cmi(CmiInput(n=n, u=untagged, lang_words=words))
    scaled = {lang: k * w for lang, w in words.items()}
    v2 = cmi(CmiInput(n=k * n, u=k * untagged, lang_words=scaled))
    assert v1 == pytest.approx(v2, abs=1e-9)
    assert 0.0 <= v1 < 100.0


def test_cmi_zero_iff_single_language():
    assert cmi(CmiInput(n=5, u=1, lang_words={"a": 4})) == 0.0
    assert cmi(CmiInput(n=5, u=1, lang_words={"a": 3, "b": 1})) > 0.0


def test_cmi_of_tokens_uses_lexicon_and_unknowns():
    lex = {0: "a", 1: "a", 2: "b"}
    # token 9 is unknown: counts toward untagged
    assert cmi_of_tokens([0, 1, 9], lex) == 0.0
    assert cmi_of_tokens([0, 2, 9], lex) == pytest.approx(50.0)


# ---------------------------------------------------------------------------
# corpus report


def _tiny_setup():
    refs = {"u0": [0, 1], "u1": [2, 3], "u2": [4, 5]}
    langs = {"u0": "l0", "u1": "l0", "u2": "l1"}
    lex = {i: ("l0" if i < 4 else "l1") for i in range(6)}
    return refs, langs, lex


def test_report_perfect_hypotheses():
    refs, langs, lex = _tiny_setup()
    rows = corpus_report(refs, dict(refs), langs, lex)
    by_lang = {r.lang: r for r in rows}
    assert by_lang["l0"].wer == 0.0 and by_lang["l1"].wer == 0.0
    assert by_lang["avg"].wer == 0.0
    assert by_lang["l0"].ref_words == 4
    assert by_lang["avg"].ref_words == 6


def test_report_empty_hypotheses_are_deletions():
    refs, langs, lex = _tiny_setup()
    hyps = {k: [] for k in refs}
    rows = {r.lang: r for r in corpus_report(refs, hyps, langs, lex)}
    assert rows["l1"].deletions == 2
    assert rows["l1"].wer == 1.0
    assert rows["l1"].cmi == 0.0


def test_report_id_mismatch_rejected_with_names():
    refs, langs, lex = _tiny_setup()
    hyps = {"u0": [0], "u1": [2]}
    with pytest.raises(ValueError, match="u2"):
        corpus_report(refs, hyps, langs, lex)


def test_report_counts_cross_language_hypotheses_in_cmi():
    refs, langs, lex = _tiny_setup()
    hyps = {"u0": [0, 5], "u1": [2, 3], "u2": [4, 5]}  # one l1 token in l0 text
    rows = {r.lang: r for r in corpus_report(refs, hyps, langs, lex)}
    assert rows["l0"].cmi == pytest.approx(25.0)  # 4 words, max 3 in l0
    assert rows["l1"].cmi == 0.0
    assert rows["l0"].max_lang_words == 3


def test_report_formatting_includes_cmi_column():
    refs, langs, lex = _tiny_setup()
    text = format_report(corpus_report(refs, dict(refs), langs, lex))
    assert "cmi%" in text.splitlines()[0]
    assert len(text.splitlines()) == 2 + 3  # header, rule, l0, l1, avg


def test_generated_corpus_cmi_matches_injected_mix_rate():
    # two-language corpus with a known code-mix probability: the reference
    # CMI per language approximates 100 * q within one absolute point
    from prefixasr.corpus import CorpusSpec, generate_synthetic_corpus
    q = 0.05
    spec = CorpusSpec(languages=2, vocab=20, train_per_language=[600, 600],
                      test_per_language=[1, 1], feature_dim=2,
                      utt_len_range=(6, 10), frames_per_token_range=(1, 1),
                      noise_std=0.0, codemix_prob=q, seed=123)
    train, _ = generate_synthetic_corpus(spec)
    refs = {u.id: u.tokens for u in train}
    langs = {u.id: u.lang for u in train}
    rows = corpus_report(refs, dict(refs), langs, spec.lexicon())
    for row in rows:
        if row.lang == "avg":
            continue
        assert row.cmi == pytest.approx(100 * q, abs=1.0)
