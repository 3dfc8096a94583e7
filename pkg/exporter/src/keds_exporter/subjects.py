"""Subject noun-phrase span extraction over tokenized captions.

Preferred backend is a dependency parse (spacy, when installed): the
nominal-subject head plus its contiguous noun-phrase subtree. Without
spacy, a rule-based fallback takes the leading noun phrase: an optional
determiner/quantifier, modifiers, and the nouns up to the first verb-like
token. Both return a [start, end) interval over the word tokens, or None
when no subject can be found.
"""

from __future__ import annotations

from .tokenizer import tokenize

try:  # pragma: no cover - environment dependent
    import spacy

    try:
        _NLP = spacy.load("en_core_web_sm")
    except Exception:
        _NLP = None
except ImportError:  # pragma: no cover
    _NLP = None

DETERMINERS = {
    "a", "an", "the", "this", "that", "these", "those", "some", "two",
    "three", "four", "five", "several", "many", "one", "its", "his", "her",
}

# verb-shaped tokens that terminate the leading noun phrase
VERB_HINTS = {
    "is", "are", "was", "were", "sits", "sit", "stands", "stand", "runs",
    "run", "walks", "walk", "rides", "ride", "holds", "hold", "plays",
    "play", "looks", "look", "lies", "lie", "rests", "rest", "jumps",
    "jump", "flies", "fly", "swims", "swim", "eats", "eat", "sleeps",
    "sleep", "hangs", "hang", "leans", "lean", "drives", "drive", "sails",
    "sail", "grazes", "graze", "waits", "wait", "climbs", "climb",
    "crosses", "cross", "floats", "float", "glows", "glow", "perches",
    "perch", "gathers", "gather", "watches", "watch", "carries", "carry",
    "pulls", "pull", "drifts", "drift", "has", "have", "wears", "wear",
    "covers", "cover", "fills", "fill", "shows", "show", "faces", "face",
}

# "of" is deliberately absent: it usually lives inside the subject phrase
# ("a group of tourists", "a basket of apples")
PREPOSITIONS = {
    "in", "on", "at", "by", "with", "near", "under", "over", "behind",
    "beside", "between", "through", "against", "along", "across", "above",
    "below", "onto", "into", "around", "before", "after", "during", "next",
}


def _looks_verbal(word: str) -> bool:
    if word in VERB_HINTS:
        return True
    return len(word) > 4 and word.endswith("ing")


def _heuristic_span(words: list[str]) -> tuple[int, int] | None:
    if not words:
        return None
    end = len(words)
    for pos, word in enumerate(words):
        if pos > 0 and (_looks_verbal(word) or word in PREPOSITIONS):
            end = pos
            break
    # a bare determiner is not a subject
    while end > 0 and words[end - 1] in DETERMINERS and end - 1 == 0:
        return None if end == 1 else (0, end)
    if end == 0:
        return None
    return (0, min(end, len(words)))


def _spacy_span(text: str, words: list[str]) -> tuple[int, int] | None:  # pragma: no cover
    doc = _NLP(text)
    for token in doc:
        if token.dep_ in ("nsubj", "nsubjpass"):
            subtree = sorted(t.i for t in token.subtree)
            # contiguous prefix of the subtree containing the head
            lo, hi = subtree[0], subtree[-1] + 1
            phrase = [t.text.lower() for t in doc[lo:hi]]
            # map back onto the word tokenization by alignment search
            for start in range(len(words)):
                cand = words[start: start + len(phrase)]
                if cand == [w for w in map(str.lower, phrase)][: len(cand)] and cand:
                    return (start, start + len(cand))
            return None
    return None


def subject_span(text: str) -> tuple[int, int] | None:
    """[start, end) over word tokens of the subject noun phrase, or None."""
    words = tokenize(text)
    if not words:
        return None
    if _NLP is not None:  # pragma: no cover - needs the spacy model
        span = _spacy_span(text, words)
        if span is not None:
            return span
    span = _heuristic_span(words)
    if span is None:
        return None
    start, end = span
    if not (0 <= start < end <= len(words)):
        return None
    return span
