"""Question routing: category, NMS spacing, and search budgets.

A keyword heuristic maps each question to morphology, clinical, or other; the
category sets the minimum ROI spacing rho (level-0 pixels), the first-pass
search budget, and the pre-rerank pool budget. The default keyword lists are
engine-defined data, shipped as a replaceable text file.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable

from .core import CATEGORIES, EngineConfig, QuestionSpec

MORPHOLOGY_MIN_SPACING = 4096.0
CLINICAL_MIN_SPACING = 20480.0
OTHER_DIAG_FRACTION = 0.08

MORPHOLOGY_EXTRA_BUDGET = 2
CLINICAL_EXTRA_BUDGET = 3

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class KeywordTable:
    """Disjoint lowercase keyword lists for the two named categories."""

    morphology_keywords: tuple
    clinical_keywords: tuple

    def __post_init__(self):
        overlap = set(self.morphology_keywords) & set(self.clinical_keywords)
        if overlap:
            raise ValueError(f"keyword lists must be disjoint; shared: {sorted(overlap)}")
        for kw in list(self.morphology_keywords) + list(self.clinical_keywords):
            if kw != kw.lower() or not kw.strip():
                raise ValueError(f"keywords must be nonempty lowercase strings: {kw!r}")


@dataclass(frozen=True)
class RoutingDecision:
    category: str
    rho: float
    k_search: int
    k_pool: int
    matched_keywords: tuple

    def to_dict(self) -> dict:
        return {
            "category": self.category,
            "rho": self.rho,
            "k_search": self.k_search,
            "k_pool": self.k_pool,
            "matched_keywords": list(self.matched_keywords),
        }


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _keyword_matches(keyword: str, tokens: list[str]) -> bool:
    """Case-insensitive whole-token containment; multi-word keywords must
    appear as a contiguous token run."""
    kw_tokens = tokenize(keyword)
    if not kw_tokens:
        return False
    k = len(kw_tokens)
    if k == 1:
        return kw_tokens[0] in tokens
    return any(tokens[i : i + k] == kw_tokens for i in range(len(tokens) - k + 1))


def categorize(question: QuestionSpec, table: KeywordTable) -> tuple[str, list[str]]:
    """Category plus the matched keywords.

    More hits win; morphology wins nonzero ties; zero hits map to other. An
    explicit category_override is honored (matches still reported).
    """
    tokens = tokenize(question.text)
    morph_hits = [kw for kw in table.morphology_keywords if _keyword_matches(kw, tokens)]
    clin_hits = [kw for kw in table.clinical_keywords if _keyword_matches(kw, tokens)]
    matched = morph_hits + clin_hits
    if question.category_override is not None:
        return question.category_override, matched
    if len(morph_hits) == 0 and len(clin_hits) == 0:
        return "other", matched
    if len(morph_hits) >= len(clin_hits):
        return "morphology", matched
    return "clinical", matched


def route(
    category: str, d_min: float, slide_diag: float, cfg: EngineConfig
) -> RoutingDecision:
    """Spacing and budgets for one category; pure in (category, d_min, diag, cfg)."""
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}")
    if d_min <= 0 or slide_diag <= 0:
        raise ValueError("d_min and slide_diag must be positive")
    if category == "morphology":
        rho = max(d_min, MORPHOLOGY_MIN_SPACING)
        k_search = cfg.k0 + MORPHOLOGY_EXTRA_BUDGET
    elif category == "clinical":
        rho = max(d_min, CLINICAL_MIN_SPACING)
        k_search = cfg.k0 + CLINICAL_EXTRA_BUDGET
    else:
        rho = max(d_min, OTHER_DIAG_FRACTION * slide_diag)
        k_search = cfg.k0
    k_pool = max(cfg.pool_floor, k_search * cfg.r_max)
    return RoutingDecision(
        category=category,
        rho=float(rho),
        k_search=int(k_search),
        k_pool=int(k_pool),
        matched_keywords=(),
    )


def route_question(
    question: QuestionSpec, d_min: float, slide_diag: float, cfg: EngineConfig, table: KeywordTable
) -> RoutingDecision:
    category, matched = categorize(question, table)
    decision = route(category, d_min, slide_diag, cfg)
    return RoutingDecision(
        category=decision.category,
        rho=decision.rho,
        k_search=decision.k_search,
        k_pool=decision.k_pool,
        matched_keywords=tuple(matched),
    )


def split_rounds(remaining_targets: int, remaining_rounds: int) -> list[int]:
    """Split a target budget evenly across rounds, larger shares first."""
    if remaining_targets < 1 or remaining_rounds < 1:
        raise ValueError("targets and rounds must both be >= 1")
    q, r = divmod(remaining_targets, remaining_rounds)
    return [q + 1] * r + [q] * (remaining_rounds - r)


def parse_keyword_table(lines: Iterable[str]) -> KeywordTable:
    """Parse the two-section keyword file format ([morphology] / [clinical],
    one keyword per line, # comments allowed)."""
    sections: dict[str, list[str]] = {"morphology": [], "clinical": []}
    current = None
    for raw in lines:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip().lower()
            if name not in sections:
                raise ValueError(f"unknown keyword section {name!r}")
            current = name
            continue
        if current is None:
            raise ValueError(f"keyword {line!r} appears before any section header")
        sections[current].append(line.lower())
    return KeywordTable(
        morphology_keywords=tuple(sections["morphology"]),
        clinical_keywords=tuple(sections["clinical"]),
    )


def load_keyword_table(path) -> KeywordTable:
    return parse_keyword_table(Path(path).read_text(encoding="utf-8").splitlines())


def default_keyword_table() -> KeywordTable:
    text = resources.files("slidenav").joinpath("data/keywords_default.txt").read_text("utf-8")
    return parse_keyword_table(text.splitlines())
