"""depparse: raw expression text in, CoNLL-U out.

Exit codes: 0 success, 2 validation failure (missing input, unknown or
uninstalled backend), 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .backends import BackendError
from .convert import parse_text_to_conllu


def build_parser():
    parser = argparse.ArgumentParser(
        prog="depparse",
        description="Convert expression text (one per line) to CoNLL-U "
                    "dependency parses")
    parser.add_argument("--in", dest="input", required=True,
                        help="input text file, one expression per line")
    parser.add_argument("--out", dest="output", required=True,
                        help="output .conllu path")
    parser.add_argument("--backend", default="auto",
                        help="parser backend: auto, spacy or heuristic")
    parser.add_argument("--model", default="en_core_web_sm",
                        help="spaCy model name (spacy backend only)")
    parser.add_argument("--errors", default=None,
                        help="sidecar error log path "
                             "(default: <out>.errors.jsonl)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with open(args.input, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        print(f"error: cannot read input: {exc}", file=sys.stderr)
        return 2
    try:
        conllu, errors = parse_text_to_conllu(lines, backend=args.backend,
                                              model=args.model)
    except BackendError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1
    with open(args.output, "w", encoding="utf-8") as fh:
        fh.write(conllu)
    error_path = args.errors or args.output + ".errors.jsonl"
    if errors:
        with open(error_path, "w", encoding="utf-8") as fh:
            for entry in errors:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    print(json.dumps({"documents": conllu.count("# newdoc"),
                      "errors": len(errors),
                      "error_log": error_path if errors else None}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
