"""Expression handling: CoNLL-U ingestion, ROOT-merged dependency graphs,
edge orientation, Laplacian positional encodings and token embedding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, gather_rows, uniform_init

MAX_EXPRESSION_WORDS = 80


class ConlluError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        suffix = f" (line {line})" if line is not None else ""
        super().__init__(message + suffix)


@dataclass
class Expression:
    tokens: list
    sentence_spans: list           # (start, end) pairs covering all tokens
    raw_text: str

    @property
    def n_words(self):
        return len(self.tokens)

    def __post_init__(self):
        n = len(self.tokens)
        if n < 1:
            raise ValueError("expression must contain at least one token")
        if n > MAX_EXPRESSION_WORDS:
            raise ValueError(
                f"expression has {n} tokens, maximum is {MAX_EXPRESSION_WORDS}")
        cursor = 0
        for start, end in self.sentence_spans:
            if start != cursor or end <= start:
                raise ValueError("sentence spans must partition the tokens")
            cursor = end
        if cursor != n:
            raise ValueError("sentence spans must cover every token")


@dataclass
class DependencyGraph:
    """Per-description parse forest merged at a single ROOT node (node 0).

    Edges are (src, dst, relation_id); in canonical form src is the head.
    ``n_relations`` is the size of the base relation vocabulary, which the
    bidirectional orientation doubles.
    """
    node_count: int
    edges: list
    direction_mode: str = "forward"
    n_relations: int = 0

    @property
    def n_words(self):
        return self.node_count - 1

    def in_neighborhoods(self):
        """(src_idx, dst_idx, rel_idx) arrays; dst receives from src."""
        if not self.edges:
            z = np.zeros(0, dtype=np.intp)
            return z, z, z
        arr = np.asarray(self.edges, dtype=np.intp)
        return arr[:, 0], arr[:, 1], arr[:, 2]

    def validate(self):
        expected = 2 * self.n_words if self.direction_mode == "bidirectional" \
            else self.n_words
        if len(self.edges) != expected:
            raise ValueError(
                f"graph in mode {self.direction_mode} must have {expected} "
                f"edges, found {len(self.edges)}")
        # connectivity and acyclicity ignoring direction: a tree on the
        # undirected skeleton
        parent = list(range(self.node_count))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        seen = set()
        for src, dst, _ in self.edges:
            key = (min(src, dst), max(src, dst))
            if key in seen:
                continue
            seen.add(key)
            ra, rb = find(src), find(dst)
            if ra == rb:
                raise ValueError("dependency graph contains an undirected cycle")
            parent[ra] = rb
        roots = {find(i) for i in range(self.node_count)}
        if len(roots) != 1:
            raise ValueError("dependency graph is not connected")


@dataclass
class RelationVocabulary:
    ids: dict = field(default_factory=dict)

    @classmethod
    def from_relations(cls, relations):
        """Stable sorted assignment of ids to relation label strings."""
        return cls({rel: i for i, rel in enumerate(sorted(set(relations)))})

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, relation):
        if relation not in self.ids:
            raise KeyError(f"unknown dependency relation {relation!r}")
        return self.ids[relation]

    def to_json(self):
        return dict(self.ids)

    @classmethod
    def from_json(cls, doc):
        return cls({str(k): int(v) for k, v in doc.items()})


def parse_conllu(text):
    """Parse CoNLL-U text into per-sentence (form, head, deprel) lists.

    Only the ID, FORM, HEAD and DEPREL columns are consumed; multiword
    ranges ("1-2") and empty nodes ("1.1") are skipped.  Each sentence must
    have exactly one token with HEAD=0 and an acyclic head structure.
    """
    sentences = []
    current = []
    first_line = {}

    def flush(at_line):
        if not current:
            return
        n = len(current)
        roots = [i for i, (_, head, _) in enumerate(current) if head == 0]
        if len(roots) != 1:
            raise ConlluError(
                f"sentence must have exactly one HEAD=0 token, found {len(roots)}",
                line=first_line.get("no", at_line))
        for i, (form, head, _) in enumerate(current):
            if head < 0 or head > n:
                raise ConlluError(
                    f"token {i + 1} ({form!r}) has dangling head {head}",
                    line=first_line.get("no", at_line))
        for i in range(n):
            slow = fast = i
            while True:
                fast = current[fast][1] - 1
                if fast < 0:
                    break
                fast = current[fast][1] - 1
                if fast < 0:
                    break
                slow = current[slow][1] - 1
                if slow == fast:
                    raise ConlluError("sentence contains a HEAD cycle",
                                      line=first_line.get("no", at_line))
        sentences.append(list(current))
        current.clear()
        first_line.clear()

    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            flush(line_no)
            continue
        if stripped.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) < 8:
            raise ConlluError(
                f"expected at least 8 tab-separated columns, found {len(cols)}",
                line=line_no)
        token_id = cols[0]
        if "-" in token_id or "." in token_id:
            continue  # multiword range or empty node
        try:
            idx = int(token_id)
        except ValueError:
            raise ConlluError(f"invalid token id {token_id!r}", line=line_no)
        if idx != len(current) + 1:
            raise ConlluError(
                f"token ids must be sequential, expected {len(current) + 1} "
                f"got {idx}", line=line_no)
        try:
            head = int(cols[6])
        except ValueError:
            raise ConlluError(f"invalid HEAD value {cols[6]!r}", line=line_no)
        if not current:
            first_line["no"] = line_no
        current.append((cols[1], head, cols[7]))
    flush(len(text.splitlines()))
    if not sentences:
        raise ConlluError("no sentences found in CoNLL-U input")
    return sentences


def serialize_conllu(sentences):
    """Canonical CoNLL-U text for (form, head, deprel) sentences."""
    lines = []
    for sent in sentences:
        for i, (form, head, deprel) in enumerate(sent, start=1):
            lines.append(f"{i}\t{form}\t_\t_\t_\t_\t{head}\t{deprel}\t_\t_")
        lines.append("")
    return "\n".join(lines) + "\n"


def merge_trees(trees, relations):
    """Combine per-sentence trees into one graph sharing a single ROOT.

    Node 0 is ROOT; token nodes are numbered 1..N_w in reading order.  Each
    sentence root attaches to node 0 under its own relation, giving exactly
    N_w edges for N_w+1 nodes.
    """
    if not trees:
        raise ValueError("merge_trees requires at least one sentence")
    edges = []
    offset = 0
    for sent in trees:
        for i, (_, head, deprel) in enumerate(sent):
            dep_node = offset + i + 1
            head_node = 0 if head == 0 else offset + head
            edges.append((head_node, dep_node, relations[deprel]))
        offset += len(sent)
    graph = DependencyGraph(node_count=offset + 1, edges=edges,
                            direction_mode="forward",
                            n_relations=len(relations))
    graph.validate()
    return graph


def orient_edges(graph, mode):
    """Re-orient the edge set: forward (head->dependent), reverse, or both.

    The bidirectional copy of each edge draws its relation id from a second,
    disjoint id range so the two directions remain distinguishable.
    """
    if mode not in ("forward", "reverse", "bidirectional"):
        raise ValueError(f"unknown direction mode {mode!r}")
    if mode == "forward":
        edges = list(graph.edges)
    elif mode == "reverse":
        edges = [(dst, src, rel) for src, dst, rel in graph.edges]
    else:
        edges = list(graph.edges) + [
            (dst, src, rel + graph.n_relations) for src, dst, rel in graph.edges]
    return DependencyGraph(node_count=graph.node_count, edges=edges,
                           direction_mode=mode, n_relations=graph.n_relations)


def effective_relation_count(graph):
    """Number of distinct relation ids the orientation mode can produce."""
    return 2 * graph.n_relations if graph.direction_mode == "bidirectional" \
        else graph.n_relations


def laplacian_pe(graph, k):
    """Eigenvectors of the combinatorial Laplacian as node position features.

    Uses the undirected, unweighted skeleton of the graph.  Columns hold the
    eigenvectors of the k smallest nontrivial eigenvalues in ascending order;
    missing columns (small graphs) are zero.  Signs are canonical: the first
    nonzero entry of each column is positive.
    """
    if k < 1:
        raise ValueError("positional encoding dimension must be >= 1")
    n = graph.node_count
    adj = np.zeros((n, n))
    for src, dst, _ in graph.edges:
        if src != dst:
            adj[src, dst] = 1.0
            adj[dst, src] = 1.0
    lap = np.diag(adj.sum(axis=1)) - adj
    eigvals, eigvecs = np.linalg.eigh(lap)
    pe = np.zeros((n, k))
    usable = min(k, n - 1)
    for col in range(usable):
        v = eigvecs[:, col + 1]  # skip the trivial constant eigenvector
        nz = np.flatnonzero(np.abs(v) > 1e-12)
        if nz.size and v[nz[0]] < 0:
            v = -v
        pe[:, col] = v
    return pe


def random_sign_flip(pe, rng):
    """Per-sample eigenvector sign randomization used during training."""
    flips = np.where(rng.uniform(size=pe.shape[1]) < 0.5, -1.0, 1.0)
    return pe * flips[None, :]


UNK_TOKEN = "<unk>"


class TokenEmbeddingTable:
    """Trainable word embeddings plus dedicated ROOT and CLS vectors."""

    def __init__(self, vocabulary, c_t, rng=None):
        rng = rng or np.random.default_rng(0)
        words = sorted(set(vocabulary) - {UNK_TOKEN})
        self.index = {UNK_TOKEN: 0, **{w: i + 1 for i, w in enumerate(words)}}
        self.c_t = c_t
        v = len(self.index)
        self.matrix = Tensor(uniform_init(rng, (v, c_t)), requires_grad=True)
        self.root_embedding = Tensor(uniform_init(rng, (1, c_t)), requires_grad=True)
        self.cls_embedding = Tensor(uniform_init(rng, (1, c_t)), requires_grad=True)

    def lookup(self, token):
        return self.index.get(token, 0)

    def parameters(self):
        return {"embed.table": self.matrix,
                "embed.root": self.root_embedding,
                "embed.cls": self.cls_embedding}

    def vocab_json(self):
        return dict(self.index)

    @classmethod
    def from_vocab_json(cls, doc, c_t):
        table = cls.__new__(cls)
        table.index = {str(k): int(v) for k, v in doc.items()}
        table.c_t = c_t
        v = len(table.index)
        table.matrix = Tensor(np.zeros((v, c_t)), requires_grad=True)
        table.root_embedding = Tensor(np.zeros((1, c_t)), requires_grad=True)
        table.cls_embedding = Tensor(np.zeros((1, c_t)), requires_grad=True)
        return table


def embed_tokens(expr, table):
    """(word matrix N_w x C_t, cls vector 1 x C_t); unknown words hit UNK."""
    idx = [table.lookup(tok) for tok in expr.tokens]
    return gather_rows(table.matrix, idx), table.cls_embedding
