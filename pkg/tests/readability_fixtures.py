"""Ten short texts with counts agreed by hand under the package's counting
rules (vowel-group syllables with silent-e, terminator sentence split with
abbreviations, easy-word list lookup without stemming).

Fields: words, sentences, letters, syllables, polysyllables, difficult_words,
linsear_words, linsear_easy, linsear_hard.
"""
from __future__ import annotations

FIXTURES = [
    ("The cat sat on the mat.", (6, 1, 17, 6, 0, 0, 6, 6, 0)),
    # Dr.=1 (abbrev, no split), returned = e/u/e = 3
    ("Dr. Smith left. He returned.", (5, 2, 21, 7, 1, 3, 5, 4, 1)),
    # pho-to-syn-the-sis
    ("Photosynthesis.", (1, 1, 14, 5, 1, 1, 1, 0, 1)),
    # people = eo/e, consonant+le keeps the e; tables not on the list (no stemming)
    ("People like tables. Strengths matter!", (5, 2, 31, 8, 0, 2, 5, 5, 0)),
    ("Is the company reducing emissions? Yes, it is.", (8, 2, 36, 14, 3, 2, 8, 5, 3)),
    # used = u/e (no silent e before d), every = e/e/y
    ("Water is used in the factory every day.", (8, 1, 31, 14, 2, 0, 8, 6, 2)),
    ("Governance, transparency, and accountability are essential.", (6, 1, 51, 18, 4, 4, 6, 2, 4)),
    ("The board met twice. It approved the plan. Everyone agreed.", (10, 3, 47, 15, 2, 2, 10, 8, 2)),
    ("Renewable energy adoption accelerated considerably.", (5, 1, 46, 20, 5, 5, 5, 0, 5)),
    ("Go now!", (2, 1, 5, 2, 0, 0, 2, 2, 0)),
]
