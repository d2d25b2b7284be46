"""Word error rate with deletion/insertion/substitution split, and CMI.

The alignment is unit-cost Levenshtein with a fixed backtrace tie-break
(match > substitution > deletion > insertion) so the decomposition is
deterministic. The code-mixing index of an utterance or corpus slice is

    CMI = 100 * (1 - max_w / (n - u))   for n > u, else 0

with n total tokens, u tokens carrying no language tag, and max_w the
largest single-language word count. Monolingual text scores 0; values stay
in [0, 100).
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass


@dataclass
class EditCounts:
    deletions: int = 0
    insertions: int = 0
    substitutions: int = 0
    ref_len: int = 0

    @property
    def errors(self) -> int:
        return self.deletions + self.insertions + self.substitutions

    @property
    def wer(self) -> float:
        if self.ref_len == 0:
            return 0.0 if self.errors == 0 else float("inf")
        return self.errors / self.ref_len

    def __iadd__(self, other: "EditCounts") -> "EditCounts":
        self.deletions += other.deletions
        self.insertions += other.insertions
        self.substitutions += other.substitutions
        self.ref_len += other.ref_len
        return self


def align_wer(ref, hyp) -> EditCounts:
    """Minimal-cost alignment of hypothesis to reference, decomposed."""
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    dp = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dp[i][0] = i
    for j in range(1, m + 1):
        dp[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            if ref[i - 1] == hyp[j - 1]:
                dp[i][j] = dp[i - 1][j - 1]
            else:
                dp[i][j] = 1 + min(dp[i - 1][j - 1], dp[i - 1][j], dp[i][j - 1])
    counts = EditCounts(ref_len=n)
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and dp[i][j] == dp[i - 1][j - 1]:
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and dp[i][j] == dp[i - 1][j - 1] + 1:
            counts.substitutions += 1
            i, j = i - 1, j - 1
        elif i > 0 and dp[i][j] == dp[i - 1][j] + 1:
            counts.deletions += 1
            i -= 1
        else:
            counts.insertions += 1
            j -= 1
    return counts


def levenshtein_distance(a, b) -> int:
    """Independent distance-only recursion used to cross-check align_wer."""
    a, b = list(a), list(b)
    if len(a) > len(b):
        a, b = b, a
    row = list(range(len(a) + 1))
    for j, bj in enumerate(b, start=1):
        prev_diag = row[0]
        row[0] = j
        for i, ai in enumerate(a, start=1):
            cur = row[i]
            row[i] = prev_diag if ai == bj else 1 + min(prev_diag, row[i - 1], cur)
            prev_diag = cur
    return row[-1]


@dataclass
class CmiInput:
    n: int                      # tokens in the utterance (or corpus slice)
    u: int                      # tokens with other/neutral tags
    lang_words: dict[str, int]  # per-language word counts

    def __post_init__(self):
        if self.n < self.u:
            raise ValueError(f"cmi: n={self.n} < u={self.u}")
        if sum(self.lang_words.values()) + self.u != self.n:
            raise ValueError("cmi: language word counts plus untagged must equal n")


def cmi(inp: CmiInput) -> float:
    """Code-mixing percentage; 0 when nothing carries a language tag."""
    if inp.n == inp.u:
        return 0.0
    max_w = max(inp.lang_words.values(), default=0)
    return 100.0 * (1.0 - max_w / (inp.n - inp.u))


def cmi_of_tokens(tokens, lexicon: dict[int, str]) -> float:
    counts = Counter(lexicon.get(int(t)) for t in tokens)
    untagged = counts.pop(None, 0)
    return cmi(CmiInput(n=len(list(tokens)), u=untagged, lang_words=dict(counts)))


@dataclass
class LanguageReport:
    lang: str
    num_utterances: int
    ref_words: int
    deletions: int
    insertions: int
    substitutions: int
    wer: float
    hyp_words: int
    max_lang_words: int
    cmi: float

    def as_record(self) -> dict:
        return {
            "lang": self.lang,
            "num_utterances": self.num_utterances,
            "ref_words": self.ref_words,
            "deletions": self.deletions,
            "insertions": self.insertions,
            "substitutions": self.substitutions,
            "wer": self.wer,
            "hyp_words": self.hyp_words,
            "max_lang_words": self.max_lang_words,
            "cmi": self.cmi,
        }


def corpus_report(refs: dict[str, list[int]], hyps: dict[str, list[int]],
                  ref_langs: dict[str, str], lexicon: dict[int, str]) -> list[LanguageReport]:
    """Per-language rows plus a macro-average row (lang "avg").

    ``refs`` and ``hyps`` map utterance id to token list and must cover the
    same ids. CMI is aggregated per language over all hypothesis tokens:
    total words versus the largest single-language word count.
    """
    missing = sorted(set(refs) - set(hyps))
    extra = sorted(set(hyps) - set(refs))
    if missing or extra:
        raise ValueError(
            f"corpus_report: id mismatch (missing from hyps: {missing[:5]}, "
            f"unknown in hyps: {extra[:5]})")
    langs = sorted({ref_langs[i] for i in refs})
    per_lang: dict[str, list[str]] = {lang: [] for lang in langs}
    for utt_id in refs:
        per_lang[ref_langs[utt_id]].append(utt_id)
    rows = []
    for lang in langs:
        counts = EditCounts()
        hyp_tokens: list[int] = []
        for utt_id in sorted(per_lang[lang]):
            counts += align_wer(refs[utt_id], hyps[utt_id])
            hyp_tokens.extend(hyps[utt_id])
        tag_counts = Counter(lexicon.get(int(t)) for t in hyp_tokens)
        untagged = tag_counts.pop(None, 0)
        max_w = max(tag_counts.values(), default=0)
        lang_cmi = cmi(CmiInput(n=len(hyp_tokens), u=untagged, lang_words=dict(tag_counts)))
        rows.append(LanguageReport(
            lang=lang, num_utterances=len(per_lang[lang]),
            ref_words=counts.ref_len, deletions=counts.deletions,
            insertions=counts.insertions, substitutions=counts.substitutions,
            wer=counts.wer, hyp_words=len(hyp_tokens), max_lang_words=max_w,
            cmi=lang_cmi))
    if rows:
        rows.append(LanguageReport(
            lang="avg",
            num_utterances=sum(r.num_utterances for r in rows),
            ref_words=sum(r.ref_words for r in rows),
            deletions=sum(r.deletions for r in rows),
            insertions=sum(r.insertions for r in rows),
            substitutions=sum(r.substitutions for r in rows),
            wer=sum(r.wer for r in rows) / len(rows),
            hyp_words=sum(r.hyp_words for r in rows),
            max_lang_words=max(r.max_lang_words for r in rows),
            cmi=sum(r.cmi for r in rows) / len(rows)))
    return rows


def format_report(rows: list[LanguageReport]) -> str:
    header = f"{'lang':>6} {'utts':>6} {'ref_w':>7} {'del':>6} {'ins':>6} " \
             f"{'sub':>6} {'wer%':>8} {'hyp_w':>7} {'max_w':>7} {'cmi%':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r.lang:>6} {r.num_utterances:>6} {r.ref_words:>7} {r.deletions:>6} "
            f"{r.insertions:>6} {r.substitutions:>6} {100 * r.wer:>8.2f} "
            f"{r.hyp_words:>7} {r.max_lang_words:>7} {r.cmi:>8.2f}")
    return "\n".join(lines) + "\n"
