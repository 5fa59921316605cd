from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from lemmaforge.extract import (
    ExtractionRules,
    MarkerMissing,
    ParsedVerdict,
    SplitStats,
    extract_after_marker,
    last_code_block,
    parse_verdict,
    split_candidates,
    strip_reasoning_markup,
)

RULES = ExtractionRules(marker="brainstormed mathlib lemmas")


# ---------------------------------------------------------------------------
# Reasoning markup
# ---------------------------------------------------------------------------


def test_think_spans_are_removed():
    text = "<think>private plan</think>visible<THINK>more</THINK> tail"
    assert strip_reasoning_markup(text) == "visible tail"


def test_unbalanced_think_tag_truncates_to_open():
    text = "prefix <think>never closed ```lean\nlemma x```"
    assert strip_reasoning_markup(text) == "prefix "


def test_no_think_tags_is_identity():
    text = "plain response\nwith lines"
    assert strip_reasoning_markup(text) == text


# ---------------------------------------------------------------------------
# Fenced blocks
# ---------------------------------------------------------------------------


def test_last_code_block_prefers_last_fence_pair():
    text = "```lean\nfirst\n```\nchatter\n```lean\nsecond\n```\n"
    assert last_code_block(text) == "second"


def test_last_code_block_without_fence_trims_blank_edges():
    assert last_code_block("\n\n  lemma x : True := by sorry\n\n") == "  lemma x : True := by sorry"


def test_unterminated_fence_runs_to_end():
    text = "done:\n```lean\nlemma cut_off (n : Nat) :"
    assert last_code_block(text) == "lemma cut_off (n : Nat) :"


def test_indented_fence_counts():
    text = "  ```\ninner\n  ```"
    assert last_code_block(text) == "inner"


# ---------------------------------------------------------------------------
# Marker scanning
# ---------------------------------------------------------------------------


def test_extract_takes_payload_after_marker_line():
    response = "plan...\nbrainstormed mathlib lemmas\nlemma a : True := by sorry"
    assert extract_after_marker(response, RULES) == "lemma a : True := by sorry"


def test_extract_marker_case_insensitive():
    response = "Brainstormed Mathlib Lemmas\npayload"
    assert extract_after_marker(response, RULES) == "payload"


def test_extract_uses_last_marker_occurrence():
    response = (
        "brainstormed mathlib lemmas\nstale payload\n"
        "brainstormed mathlib lemmas\nfresh payload"
    )
    assert extract_after_marker(response, RULES) == "fresh payload"


def test_extract_prefers_fenced_block_after_marker():
    response = (
        "brainstormed mathlib lemmas\nprose first\n```lean\nlemma a : True := by sorry\n```"
    )
    assert extract_after_marker(response, RULES) == "lemma a : True := by sorry"


def test_marker_on_final_line_yields_empty_payload():
    assert extract_after_marker("text\nbrainstormed mathlib lemmas", RULES) == ""


def test_missing_marker_raises():
    with pytest.raises(MarkerMissing):
        extract_after_marker("no marker here\nlemma a : True := by sorry", RULES)


def test_rules_reject_empty_marker():
    with pytest.raises(ValueError):
        ExtractionRules(marker="")


# ---------------------------------------------------------------------------
# Candidate splitting
# ---------------------------------------------------------------------------


def test_split_two_declarations_share_context():
    snippet = (
        "import Mathlib\n\n"
        "lemma one (n : Nat) : n = n := by sorry\n\n"
        "theorem two (l : List Nat) : l = l := by sorry"
    )
    pairs = split_candidates(snippet)
    assert pairs == [
        ("import Mathlib", "lemma one (n : Nat) : n = n := by sorry"),
        ("import Mathlib", "theorem two (l : List Nat) : l = l := by sorry"),
    ]


def test_split_context_accumulates_between_declarations():
    snippet = (
        "import Mathlib\n"
        "lemma a : True := by sorry\n"
        "open Nat\n"
        "lemma b : True := by sorry"
    )
    pairs = split_candidates(snippet)
    assert pairs[0][0] == "import Mathlib"
    assert pairs[1][0] == "import Mathlib\nopen Nat"


def test_split_deduplicates_repeated_context():
    snippet = (
        "import Mathlib\n"
        "lemma a : True := by sorry\n"
        "import Mathlib\n"
        "lemma b : True := by sorry"
    )
    pairs = split_candidates(snippet)
    assert pairs[1][0] == "import Mathlib"


def test_split_multiline_bodies_and_attributes():
    snippet = (
        "@[simp]\n"
        "lemma with_attr (n : Nat) :\n"
        "    n + 0 = n := by\n"
        "  simp\n"
        "\n"
        "lemma plain : True := by sorry"
    )
    pairs = split_candidates(snippet)
    assert len(pairs) == 2
    assert pairs[0][1] == (
        "@[simp]\nlemma with_attr (n : Nat) :\n    n + 0 = n := by\n  simp"
    )
    assert pairs[1][1] == "lemma plain : True := by sorry"


def test_split_discards_def_blocks_and_counts_lines():
    snippet = (
        "def helper (n : Nat) : Nat :=\n"
        "  n + 1\n"
        "\n"
        "lemma kept : True := by sorry"
    )
    stats = SplitStats()
    pairs = split_candidates(snippet, stats)
    assert [p[1] for p in pairs] == ["lemma kept : True := by sorry"]
    assert stats.discarded_lines == 2


def test_split_counts_variable_context():
    stats = SplitStats()
    split_candidates("variable (n : Nat)\nlemma v : n = n := by sorry", stats)
    assert stats.variable_context_lines == 1
    assert stats.preamble_lines == ["variable (n : Nat)"]


def test_split_ignores_leading_prose():
    pairs = split_candidates("Here are some lemmas:\nlemma p : True := by sorry")
    assert pairs == [("", "lemma p : True := by sorry")]


def test_split_empty_input():
    assert split_candidates("") == []
    assert split_candidates("only prose, no declarations") == []


def test_split_round_trip_statements_are_substrings():
    snippet = (
        "import Mathlib\nopen List\n\n"
        "lemma a (l : List Nat) : l = l := by sorry\n\n"
        "@[simp]\n"
        "theorem b (n : Nat) : n + 0 = n := by\n  simp\n\n"
        "lemma c : True := by sorry"
    )
    pairs = split_candidates(snippet)
    assert len(pairs) == 3
    for _, statement in pairs:
        assert statement in snippet


# ---------------------------------------------------------------------------
# Judge verdicts
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "response,verdict",
    [
        ("the claim holds\ncorrect", ParsedVerdict.CORRECT),
        ("CORRECT", ParsedVerdict.CORRECT),
        ("reasoning...\ncorrect, modulo naming", ParsedVerdict.CORRECT),
        ("Wrong.", ParsedVerdict.WRONG),
        ("analysis\nwrong\n\n", ParsedVerdict.WRONG),
        ("The statement is correct.", ParsedVerdict.UNPARSEABLE),
        ("correct\nbut actually let me reconsider", ParsedVerdict.UNPARSEABLE),
        ("  correct", ParsedVerdict.UNPARSEABLE),
        ("", ParsedVerdict.UNPARSEABLE),
        ("\n\n", ParsedVerdict.UNPARSEABLE),
    ],
)
def test_parse_verdict_cases(response, verdict):
    assert parse_verdict(response) == verdict


@given(st.text(max_size=200))
def test_parse_verdict_matches_prefix_rule(response):
    lines = [
        ln for ln in response.replace("\r\n", "\n").replace("\r", "\n").split("\n") if ln.strip()
    ]
    got = parse_verdict(response)
    if not lines:
        assert got is ParsedVerdict.UNPARSEABLE
    elif lines[-1].lower().startswith("correct"):
        assert got is ParsedVerdict.CORRECT
    elif lines[-1].lower().startswith("wrong"):
        assert got is ParsedVerdict.WRONG
    else:
        assert got is ParsedVerdict.UNPARSEABLE


@given(st.sampled_from(["correct", "wrong", "unsure"]), st.text(max_size=60))
def test_parse_verdict_ignores_reasoning_above(verdict_line, chatter):
    response = f"{chatter}\n{verdict_line}"
    expected = {
        "correct": ParsedVerdict.CORRECT,
        "wrong": ParsedVerdict.WRONG,
        "unsure": ParsedVerdict.UNPARSEABLE,
    }[verdict_line]
    assert parse_verdict(response) == expected
