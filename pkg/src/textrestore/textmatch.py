"""Word-level text comparison utilities: normalization, edit distance, and
nearest-lexicon lookup. Shared by the guidance-classification rubric and the
lexicon-based recognition scoring."""

from __future__ import annotations


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance (insert/delete/substitute, unit costs)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def normalize_words(text: str) -> list[str]:
    """Lowercase and split on whitespace after mapping punctuation to spaces."""
    cleaned = "".join(c if c.isalnum() else " " for c in text.lower())
    return cleaned.split()


def words_match(a: str, b: str, *, typo_distance: int = 1,
                typo_distance_long: int = 2, long_word_len: int = 8) -> bool:
    """Whether two normalized words count as the same up to minor typos."""
    limit = typo_distance_long if max(len(a), len(b)) >= long_word_len else typo_distance
    if abs(len(a) - len(b)) > limit:
        return False
    return edit_distance(a, b) <= limit


def nearest_lexicon_entry(word: str, lexicon: list[str]) -> str:
    """Closest lexicon entry by case-insensitive edit distance.

    Ties break to the lexicographically smallest entry so results are
    independent of lexicon file order.
    """
    if not lexicon:
        raise ValueError("lexicon must be non-empty")
    best = min(sorted(lexicon), key=lambda e: edit_distance(word.lower(), e.lower()))
    return best
