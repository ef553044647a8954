"""Text to CoNLL-U conversion: tokenize, sentence-split, parse, serialize."""

from __future__ import annotations

import re

from .backends import BACKENDS, BackendError, heuristic_parse, resolve_backend

_SENT_SPLIT = re.compile(r"[.!?;]+")
_TOKEN = re.compile(r"[a-zA-Z0-9'-]+")


def split_sentences(line):
    """Sentence strings from one input line; empty chunks dropped."""
    return [chunk.strip() for chunk in _SENT_SPLIT.split(line)
            if chunk.strip()]


def tokenize(sentence):
    return [t.lower() for t in _TOKEN.findall(sentence)]


def sentences_to_conllu(parsed):
    """Serialize (form, head, deprel) sentences into CoNLL-U text.

    Only ID, FORM, HEAD and DEPREL are meaningful; every other column is
    left underscored.
    """
    lines = []
    for sent in parsed:
        for i, (form, head, deprel) in enumerate(sent, start=1):
            lines.append(f"{i}\t{form}\t_\t_\t_\t_\t{head}\t{deprel}\t_\t_")
        lines.append("")
    return "\n".join(lines) + "\n" if lines else ""


def parse_text_to_conllu(lines, backend="auto", model="en_core_web_sm"):
    """Convert expression lines to CoNLL-U.

    Returns (conllu text, error log entries).  Each input line becomes one
    document (its sentences in order); empty or unparseable lines are
    recorded in the error log and processing continues.
    """
    name = resolve_backend(backend)
    out_chunks = []
    errors = []
    for line_no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            errors.append({"line": line_no, "error": "empty line, skipped"})
            continue
        sentences = [tokenize(s) for s in split_sentences(line)]
        sentences = [s for s in sentences if s]
        if not sentences:
            errors.append({"line": line_no,
                           "error": "no tokens after tokenization, skipped"})
            continue
        try:
            if name == "spacy":
                from .backends import spacy_parse
                parsed = spacy_parse(sentences, model=model)
            else:
                parsed = heuristic_parse(sentences)
        except BackendError as exc:
            if "install" in str(exc) or "model" in str(exc):
                raise  # missing backend is fatal and actionable
            errors.append({"line": line_no, "error": str(exc)})
            continue
        bad = [i for i, sent in enumerate(parsed)
               if sum(1 for (_, head, _) in sent if head == 0) != 1]
        if bad:
            errors.append({"line": line_no,
                           "error": f"sentence {bad[0] + 1} has no unique root"})
            continue
        out_chunks.append(f"# newdoc id = line-{line_no}\n"
                          + sentences_to_conllu(parsed))
    return "".join(out_chunks), errors
