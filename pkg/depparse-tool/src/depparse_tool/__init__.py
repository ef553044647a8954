"""Expression text to CoNLL-U dependency parses."""

__version__ = "0.1.0"

from .convert import parse_text_to_conllu

__all__ = ["parse_text_to_conllu", "__version__"]
