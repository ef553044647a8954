"""Parser backends.

A backend turns one sentence (a list of tokens) into a list of
(form, head, deprel) rows, 1-based heads, 0 for the root.  ``spacy`` wraps
the off-the-shelf statistical parser; ``heuristic`` is a deterministic
pattern parser for simple descriptive English (determiner/adjective/noun
phrases, copulas, prepositional attachment) meant for offline and test use,
not general text.
"""

from __future__ import annotations


class BackendError(RuntimeError):
    """A backend is unavailable or cannot parse a sentence."""


DETERMINERS = {"the", "a", "an", "this", "that", "these", "those"}
COPULAS = {"is", "are", "was", "were", "be", "seems", "looks"}
EXPLETIVES = {"there"}
PRONOUNS = {"it", "they", "he", "she", "one"}
PREPOSITIONS = {"near", "by", "beside", "behind", "above", "below", "under",
                "over", "on", "in", "at", "next", "to", "with", "against",
                "between", "opposite"}
ADJECTIVES = {
    # colors
    "red", "green", "blue", "yellow", "purple", "orange", "black", "white",
    "gray", "grey", "brown", "pink", "beige", "dark", "light",
    # size / shape / state
    "big", "small", "large", "tiny", "tall", "short", "wide", "narrow",
    "round", "square", "long", "low", "high", "empty", "full", "open",
    "closed", "wooden", "metal", "plastic", "leather", "soft",
}
CONJUNCTIONS = {"and", "or"}


def spacy_parse(sentences, model="en_core_web_sm"):
    """Parse with spaCy; raises an actionable error when unavailable."""
    try:
        import spacy
    except ImportError:
        raise BackendError(
            "the spacy backend needs the 'spacy' package and an English "
            "model; install with: pip install spacy && "
            f"python -m spacy download {model}")
    try:
        nlp = spacy.load(model)
    except OSError:
        raise BackendError(
            f"spaCy model {model!r} is not installed; run: "
            f"python -m spacy download {model}")
    out = []
    for tokens in sentences:
        doc = nlp(" ".join(tokens))
        rows = []
        for tok in doc:
            head = 0 if tok.head is tok else tok.head.i + 1
            rows.append((tok.text, head, tok.dep_.lower()))
        out.append(rows)
    return out


def heuristic_parse(sentences):
    """Deterministic pattern parser for simple descriptive sentences."""
    return [_heuristic_sentence(tokens) for tokens in sentences]


def _np_spans(tokens, start, stop):
    """Noun-phrase head positions in [start, stop): the last token of each
    maximal determiner/adjective/noun run."""
    heads = []
    i = start
    while i < stop:
        w = tokens[i]
        if w in DETERMINERS or w in ADJECTIVES or _nounish(tokens, i):
            j = i
            while j + 1 < stop and (
                    tokens[j + 1] in DETERMINERS
                    or tokens[j + 1] in ADJECTIVES
                    or _nounish(tokens, j + 1)):
                j += 1
            heads.append((i, j))
            i = j + 1
        else:
            i += 1
    return heads


def _nounish(tokens, i):
    w = tokens[i]
    return not (w in DETERMINERS or w in COPULAS or w in EXPLETIVES
                or w in PRONOUNS or w in PREPOSITIONS or w in CONJUNCTIONS
                or w in ADJECTIVES)


def _attach_np(rows, tokens, lo, hi, head_pos):
    """Attach determiners/adjectives inside [lo, hi] to the phrase head."""
    for i in range(lo, hi + 1):
        if i == head_pos:
            continue
        if tokens[i] in DETERMINERS:
            rows[i] = (tokens[i], head_pos + 1, "det")
        elif tokens[i] in ADJECTIVES:
            rows[i] = (tokens[i], head_pos + 1, "amod")
        else:
            rows[i] = (tokens[i], head_pos + 1, "compound")


def _heuristic_sentence(tokens):
    n = len(tokens)
    if n == 0:
        raise BackendError("empty sentence")
    rows = [None] * n

    cop_pos = next((i for i, w in enumerate(tokens) if w in COPULAS), None)
    prep_pos = next((i for i, w in enumerate(tokens)
                     if w in PREPOSITIONS), None)

    if cop_pos is not None and tokens[0] in EXPLETIVES:
        # "there is a red chair [near the table]"
        spans = _np_spans(tokens, cop_pos + 1,
                          prep_pos if prep_pos else n)
        if not spans:
            return _flat_fallback(tokens)
        lo, hi = spans[0]
        head = hi
        rows[cop_pos] = (tokens[cop_pos], 0, "root")
        rows[0] = (tokens[0], cop_pos + 1, "expl")
        _attach_np(rows, tokens, lo, hi, head)
        rows[head] = (tokens[head], cop_pos + 1, "nsubj")
        _attach_pp(rows, tokens, prep_pos, head, n)
        return _finish(rows, tokens)

    if cop_pos is not None:
        # "it is purple" / "the chair is near the table"
        subj_spans = _np_spans(tokens, 0, cop_pos)
        if tokens[0] in PRONOUNS:
            subj_head = 0
        elif subj_spans:
            lo, hi = subj_spans[0]
            subj_head = hi
            _attach_np(rows, tokens, lo, hi, subj_head)
        else:
            return _flat_fallback(tokens)
        if prep_pos is not None:
            spans = _np_spans(tokens, prep_pos + 1, n)
            if not spans:
                return _flat_fallback(tokens)
            lo, hi = spans[0]
            root = hi
            _attach_np(rows, tokens, lo, hi, root)
            rows[root] = (tokens[root], 0, "root")
            rows[prep_pos] = (tokens[prep_pos], root + 1, "case")
        else:
            tail = [i for i in range(cop_pos + 1, n) if rows[i] is None]
            if not tail:
                return _flat_fallback(tokens)
            root = tail[-1]
            rel = "amod" if tokens[root] in ADJECTIVES else "attr"
            rows[root] = (tokens[root], 0, "root")
            for i in tail[:-1]:
                rows[i] = (tokens[i], root + 1,
                           "det" if tokens[i] in DETERMINERS else "dep")
        rows[subj_head] = (tokens[subj_head], root + 1, "nsubj")
        rows[cop_pos] = (tokens[cop_pos], root + 1, "cop")
        return _finish(rows, tokens, root)

    # verbless: "the red chair [near the table]"
    spans = _np_spans(tokens, 0, prep_pos if prep_pos else n)
    if not spans:
        return _flat_fallback(tokens)
    lo, hi = spans[0]
    head = hi
    _attach_np(rows, tokens, lo, hi, head)
    rows[head] = (tokens[head], 0, "root")
    _attach_pp(rows, tokens, prep_pos, head, n)
    return _finish(rows, tokens)


def _attach_pp(rows, tokens, prep_pos, head_pos, n):
    if prep_pos is None:
        return
    spans = _np_spans(tokens, prep_pos + 1, n)
    if not spans:
        rows[prep_pos] = (tokens[prep_pos], head_pos + 1, "case")
        return
    lo, hi = spans[0]
    obj = hi
    _attach_np(rows, tokens, lo, hi, obj)
    rows[obj] = (tokens[obj], head_pos + 1, "nmod")
    rows[prep_pos] = (tokens[prep_pos], obj + 1, "case")


def _finish(rows, tokens, root=None):
    for i, row in enumerate(rows):
        if row is None:
            target = (root + 1) if root is not None else \
                next(j + 1 for j, r in enumerate(rows)
                     if r is not None and r[1] == 0)
            rows[i] = (tokens[i], target, "dep")
    roots = [r for r in rows if r[1] == 0]
    if len(roots) != 1:
        return _flat_fallback(tokens)
    return rows


def _flat_fallback(tokens):
    """Last resort: attach everything to the final token."""
    n = len(tokens)
    rows = []
    for i, w in enumerate(tokens[:-1]):
        rows.append((w, n, "dep"))
    rows.append((tokens[-1], 0, "root"))
    return rows


BACKENDS = {
    "spacy": spacy_parse,
    "heuristic": heuristic_parse,
}


def resolve_backend(name):
    if name == "auto":
        try:
            import spacy  # noqa: F401
            return "spacy"
        except ImportError:
            return "heuristic"
    if name not in BACKENDS:
        raise BackendError(
            f"unknown backend {name!r}; available: {sorted(BACKENDS)}")
    return name
