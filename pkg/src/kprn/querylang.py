"""Query text handling: tokenizer, seven-slot attribute parser, vocabulary,
and the bi-directional LSTM query encoder.

The parser is a closed-lexicon template parser. Lexicons live in
``kprn/data/lexicons`` (one token per line): ``colors.txt``, ``sizes.txt``,
``locations.txt``, ``nouns.txt``. Parsing rules:

* a spatial preposition (``left of``, ``right of``, ``above``, ``below``,
  ``next to``, ``on``, ``near``) followed later by a noun splits the query
  into a subject phrase and a landmark phrase; the preposition fills
  ``rel_loc`` (multi-word forms joined with ``-``, e.g. ``left-of``);
* in the subject phrase, colors, sizes and location words fill ``color``,
  ``size`` and ``abs_loc``; the last noun of the first run of nouns is the
  ``category`` (subject word); other content words go to ``generic``;
* the landmark's head noun fills ``rel_obj``; its modifiers are part of the
  landmark phrase and fill no subject slot;
* attribute labels are the subject's color, size and generic words.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from importlib import resources

from kprn.diffmath import add_lstm_params, lstm_sequence
from kprn.diffmath import tensor as T
from kprn.errors import ContractViolation

log = logging.getLogger(__name__)

MAX_QUERY_LEN = 20
SLOTS = ("category", "color", "size", "abs_loc", "rel_loc", "rel_obj", "generic")

PAD, START, END, UNK = "<pad>", "<start>", "<end>", "<unk>"
RESERVED = (PAD, START, END, UNK)

# (surface tokens, slot value)
RELATIONS = (
    (("left", "of"), "left-of"),
    (("right", "of"), "right-of"),
    (("next", "to"), "next-to"),
    (("above",), "above"),
    (("below",), "below"),
    (("near",), "near"),
    (("on",), "on"),
)

FUNCTION_WORDS = frozenset(
    "a an the of to on in at by is are that this which who with and or its it "
    "from for one side".split()
)

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text):
    """Lowercase and split on anything that is not a letter or digit."""
    if not text or not text.strip():
        raise ContractViolation("tokenize: empty text")
    tokens = _TOKEN_RE.findall(text.lower())
    if not tokens:
        raise ContractViolation(f"tokenize: no tokens in {text!r}")
    return tokens


# --------------------------------------------------------------------------
# Attribute parsing
# --------------------------------------------------------------------------


def _read_lexicon(name):
    text = resources.files("kprn.data.lexicons").joinpath(name).read_text(encoding="utf-8")
    return frozenset(w.strip().lower() for w in text.splitlines() if w.strip())


@dataclass(frozen=True)
class Lexicon:
    colors: frozenset
    sizes: frozenset
    locations: frozenset
    nouns: frozenset

    @classmethod
    def default(cls):
        return cls(
            colors=_read_lexicon("colors.txt"),
            sizes=_read_lexicon("sizes.txt"),
            locations=_read_lexicon("locations.txt"),
            nouns=_read_lexicon("nouns.txt"),
        )

    @classmethod
    def from_dir(cls, path):
        from pathlib import Path

        def read(name):
            lines = (Path(path) / name).read_text(encoding="utf-8").splitlines()
            return frozenset(w.strip().lower() for w in lines if w.strip())

        return cls(read("colors.txt"), read("sizes.txt"), read("locations.txt"), read("nouns.txt"))


_DEFAULT_LEXICON = None


def default_lexicon():
    global _DEFAULT_LEXICON
    if _DEFAULT_LEXICON is None:
        _DEFAULT_LEXICON = Lexicon.default()
    return _DEFAULT_LEXICON


@dataclass
class ParsedQuery:
    category: str = ""
    color: str = ""
    size: str = ""
    abs_loc: str = ""
    rel_loc: str = ""
    rel_obj: str = ""
    generic: str = ""
    attr_labels: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def slots(self):
        return {name: getattr(self, name) for name in SLOTS}

    @property
    def subject(self):
        return self.category

    @property
    def has_object(self):
        return bool(self.rel_obj)


def _is_noun(tokens, k, lex):
    """A token is a noun if it is in the noun lexicon, except that words that
    are also colors/sizes count as nouns only when no later noun follows."""
    tok = tokens[k]
    if tok not in lex.nouns:
        return False
    if tok in lex.colors or tok in lex.sizes:
        return not any(t in lex.nouns and t not in lex.colors for t in tokens[k + 1 :])
    return True


def _find_relation(tokens, lex):
    for k in range(len(tokens)):
        for surface, value in RELATIONS:
            n = len(surface)
            if tuple(tokens[k : k + n]) == surface:
                rest = tokens[k + n :]
                if any(_is_noun(rest, j, lex) for j in range(len(rest))):
                    return k, n, value
    return None


def _head_noun(tokens, lex):
    """Index of the last noun in the first run of consecutive nouns."""
    head = None
    for k in range(len(tokens)):
        if _is_noun(tokens, k, lex):
            head = k
        elif head is not None:
            break
    return head


def parse_attributes(tokens, lexicon=None):
    lex = lexicon or default_lexicon()
    tokens = [t.lower() for t in tokens]
    out = ParsedQuery()
    rel = _find_relation(tokens, lex)
    if rel is None:
        subj, land = tokens, []
    else:
        k, n, value = rel
        subj, land = tokens[:k], tokens[k + n :]
        out.rel_loc = value

    slots = {"color": [], "size": [], "abs_loc": [], "generic": []}
    head = _head_noun(subj, lex)
    for k, tok in enumerate(subj):
        if k == head:
            continue
        if tok in lex.colors and not (tok in lex.nouns and _is_noun(subj, k, lex)):
            slots["color"].append(tok)
        elif tok in lex.sizes:
            slots["size"].append(tok)
        elif tok in lex.locations:
            slots["abs_loc"].append(tok)
        elif tok in FUNCTION_WORDS:
            continue
        else:
            slots["generic"].append(tok)

    if head is None:
        out.category = "unk"
        out.warnings.append("no subject noun")
        log.debug("no subject noun in %r", tokens)
    else:
        out.category = subj[head]
    land_head = _head_noun(land, lex)
    if land_head is not None:
        out.rel_obj = land[land_head]

    for name, words in slots.items():
        setattr(out, name, " ".join(words))
    out.attr_labels = slots["color"] + slots["size"] + slots["generic"]
    return out


# --------------------------------------------------------------------------
# Vocabulary
# --------------------------------------------------------------------------


class Vocab:
    def __init__(self, tokens=()):
        self._itos = list(RESERVED)
        self._stoi = {t: i for i, t in enumerate(self._itos)}
        for t in tokens:
            if t not in self._stoi:
                self._stoi[t] = len(self._itos)
                self._itos.append(t)

    @classmethod
    def build(cls, token_lists):
        """Vocabulary over all tokens, sorted for determinism."""
        words = sorted({t for toks in token_lists for t in toks} - set(RESERVED))
        return cls(words)

    def __len__(self):
        return len(self._itos)

    def __contains__(self, token):
        return token in self._stoi

    def index(self, token):
        return self._stoi.get(token, self._stoi[UNK])

    def token(self, index):
        return self._itos[index]

    def encode(self, tokens):
        return [self.index(t) for t in tokens]

    @property
    def tokens(self):
        return list(self._itos)

    pad = property(lambda self: self._stoi[PAD])
    start = property(lambda self: self._stoi[START])
    end = property(lambda self: self._stoi[END])
    unk = property(lambda self: self._stoi[UNK])


def clip_tokens(tokens, max_len=MAX_QUERY_LEN):
    if len(tokens) > max_len:
        log.warning("query of %d tokens truncated to %d", len(tokens), max_len)
        return list(tokens[:max_len])
    return list(tokens)


# --------------------------------------------------------------------------
# Bi-directional LSTM encoder
# --------------------------------------------------------------------------


def add_encoder_params(store, vocab_size, embed_dim, hidden, rng, prefix="enc"):
    store.add(f"{prefix}.embed", (vocab_size, embed_dim), rng, fan_in=embed_dim)
    add_lstm_params(store, f"{prefix}.fwd", embed_dim, hidden, rng)
    add_lstm_params(store, f"{prefix}.bwd", embed_dim, hidden, rng)


@dataclass
class EncodedQuery:
    states: list  # per-token (1, 2H) tensors, h_t = [forward; backward]
    pooled: T.Tensor  # (1, 2H): [final forward; final backward]


def encode_query(tokens, vocab, params, prefix="enc"):
    if len(tokens) == 0:
        raise ContractViolation("encode_query: empty token list")
    ids = vocab.encode(clip_tokens(tokens))
    xs = T.embedding(params[f"{prefix}.embed"], ids)
    n = len(ids)
    fwd = lstm_sequence(xs, params, f"{prefix}.fwd")
    rev = list(range(n - 1, -1, -1))
    # Run the backward direction on the reversed sequence, then restore order.
    bwd = T.take_rows(lstm_sequence(T.take_rows(xs, rev), params, f"{prefix}.bwd"), rev)
    both = T.concat([fwd, bwd])
    states = [T.take_rows(both, [k]) for k in range(n)]
    pooled = T.concat([T.take_rows(fwd, [n - 1]), T.take_rows(bwd, [0])])
    return EncodedQuery(states, pooled)
