"""Synthetic referring-expression data with exact ground truth.

Each scene holds a handful of coloured shapes placed without overlap. The
proposal set is the true object boxes plus jittered duplicates (IoU 0.3-0.7
with their source), shuffled. Surrogate CNN features are one-hot attribute
codes scaled by the proposal's overlap with its source object, plus Gaussian
noise; detector categories are the source shape with some label noise.

Queries come from three templates -- ``<color> <shape>``, ``<size> <shape>``
and ``<color> <shape> <relation> <color> <shape>`` -- and every emitted query
is checked by exhaustive search to pick out exactly one object.

Output layout of :func:`generate_dataset`::

    out/train.jsonl, out/val.jsonl   one scene per line
    out/embeddings.txt               d=16 word vectors, GloVe text layout
    out/attributes.txt               "<label> <training frequency>" per line
    out/lexicons/{colors,sizes,locations,nouns}.txt
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from kprn import querylang as ql
from kprn import scene as sc
from kprn import wordvec as wv
from kprn.errors import ConfigError

RELATION_TOKENS = {
    "left-of": ["left", "of"],
    "right-of": ["right", "of"],
    "above": ["above"],
    "below": ["below"],
    "near": ["near"],
}

BOX_SIDE = {"big": (58.0, 76.0), "small": (30.0, 42.0)}


@dataclass(frozen=True)
class SynthConfig:
    train_scenes: int = 500
    val_scenes: int = 125
    queries_per_scene: int = 4
    image_size: int = 320
    proposals: int = 8
    objects: int = 4
    shapes: tuple = ("square", "circle", "triangle", "star")
    colors: tuple = ("red", "green", "blue", "yellow")
    sizes: tuple = ("big", "small")
    relations: tuple = ("left-of", "right-of", "above", "below", "near")
    relation_fraction: float = 0.6
    twin_prob: float = 0.5
    noise: float = 0.05
    label_noise: float = 0.1
    # Scale a jittered duplicate's features by its IoU with the source object,
    # so partial crops respond more weakly than the object itself.
    crop_scaling: bool = True
    near_distance: float = 110.0
    embed_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in ("shapes", "colors", "sizes", "relations"):
            if not getattr(self, name):
                raise ConfigError(f"synth config: {name} lexicon is empty")
        for rel in self.relations:
            if rel not in RELATION_TOKENS:
                raise ConfigError(f"synth config: unknown relation {rel!r}")
        for s in self.sizes:
            if s not in BOX_SIDE:
                raise ConfigError(f"synth config: no box size for {s!r}")
        if self.objects < 1 or self.proposals < self.objects:
            raise ConfigError("synth config: need 1 <= objects <= proposals")
        if self.relation_fraction > 0 and self.objects < 2:
            raise ConfigError("synth config: relational queries need at least 2 objects per scene")
        if self.queries_per_scene > self.objects:
            raise ConfigError("synth config: queries_per_scene exceeds objects per scene")
        if not 0.0 <= self.relation_fraction <= 1.0:
            raise ConfigError("synth config: relation_fraction must lie in [0, 1]")

    @classmethod
    def from_mapping(cls, values):
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigError(f"unknown synth keys {sorted(unknown)}; valid keys: {sorted(known)}")
        kwargs = {}
        for k, v in values.items():
            default = known[k].default
            if isinstance(default, tuple):
                kwargs[k] = tuple(v.split(",")) if isinstance(v, str) else tuple(v)
            elif isinstance(default, bool):
                kwargs[k] = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes", "on")
            else:
                kwargs[k] = type(default)(v)
        return cls(**kwargs)


@dataclass
class SynthObject:
    shape: str
    color: str
    size: str
    box: sc.BBox


@dataclass
class SynthScene:
    objects: list
    queries: list = field(default_factory=list)  # (tokens, target index, landmark index or None)


# --------------------------------------------------------------------------
# Features
# --------------------------------------------------------------------------


def _one_hot(value, vocab):
    v = np.zeros(len(vocab))
    v[vocab.index(value)] = 1.0
    return v


def synth_cnn_feature(obj, config, rng=None, overlap=1.0):
    """``(c3, c4)``: c3 = [color; size] one-hots, c4 = [shape; color] one-hots,
    scaled by ``overlap`` and perturbed by N(0, noise)."""
    c3 = np.concatenate([_one_hot(obj.color, config.colors), _one_hot(obj.size, config.sizes)])
    c4 = np.concatenate([_one_hot(obj.shape, config.shapes), _one_hot(obj.color, config.colors)])
    c3, c4 = overlap * c3, overlap * c4
    if config.noise > 0:
        if rng is None:
            raise ConfigError("synth_cnn_feature: noise needs a generator")
        c3 = c3 + rng.normal(0.0, config.noise, c3.shape)
        c4 = c4 + rng.normal(0.0, config.noise, c4.shape)
    return c3, c4


# --------------------------------------------------------------------------
# Literal semantics and uniqueness
# --------------------------------------------------------------------------


def relation_holds(rel, a, b, near_distance=110.0):
    """Does box ``a`` stand in relation ``rel`` to box ``b``?"""
    if rel == "left-of":
        return a.x_br <= b.x_tl
    if rel == "right-of":
        return a.x_tl >= b.x_br
    if rel == "above":
        return a.y_br <= b.y_tl
    if rel == "below":
        return a.y_tl >= b.y_br
    if rel == "near":
        return sc.manhattan_center_distance(a, b) <= near_distance
    raise ConfigError(f"unknown relation {rel!r}")


def referents(tokens, objects, config):
    """All object indices a template query literally describes (brute force)."""
    rel = None
    for name, surface in RELATION_TOKENS.items():
        n = len(surface)
        for k in range(len(tokens) - n + 1):
            if tokens[k : k + n] == surface:
                rel, head, tail = name, tokens[:k], tokens[k + n :]
                break
        if rel:
            break

    def matches(words, o):
        mod, shape = words
        return o.shape == shape and mod in (o.color, o.size)

    if rel is None:
        return [i for i, o in enumerate(objects) if matches(tokens, o)]
    landmarks = [j for j, o in enumerate(objects) if matches(tail, o)]
    if len(landmarks) != 1:
        return []
    lm = landmarks[0]
    return [
        i
        for i, o in enumerate(objects)
        if i != lm and matches(head, o) and relation_holds(rel, o.box, objects[lm].box, config.near_distance)
    ]


def _candidate_queries(objects, target, config):
    o = objects[target]
    plain, relational = [], []
    for tokens in ([o.color, o.shape], [o.size, o.shape]):
        if referents(tokens, objects, config) == [target]:
            plain.append((tokens, None))
    for rel in config.relations:
        for lm, l in enumerate(objects):
            if lm == target:
                continue
            tokens = [o.color, o.shape] + RELATION_TOKENS[rel] + [l.color, l.shape]
            if referents(tokens, objects, config) == [target]:
                relational.append((tokens, lm))
    return plain, relational


# --------------------------------------------------------------------------
# Scene sampling
# --------------------------------------------------------------------------


def _place_objects(rng, config):
    W = float(config.image_size)
    objects = []
    for k in range(config.objects):
        if k > 0 and rng.random() < config.twin_prob:
            src = objects[rng.integers(len(objects))]
            shape, color = src.shape, src.color
        else:
            shape = config.shapes[rng.integers(len(config.shapes))]
            color = config.colors[rng.integers(len(config.colors))]
        size = config.sizes[rng.integers(len(config.sizes))]
        lo, hi = BOX_SIDE[size]
        for _ in range(200):
            w = rng.uniform(lo, hi)
            h = w * rng.uniform(0.85, 1.15)
            x = rng.uniform(0.0, W - w)
            y = rng.uniform(0.0, W - h)
            box = sc.BBox(x, y, x + w, y + h)
            gap = 6.0
            grown = sc.BBox(box.x_tl - gap, box.y_tl - gap, box.x_br + gap, box.y_br + gap)
            if all(sc.iou(grown, o.box) == 0.0 for o in objects):
                objects.append(SynthObject(shape, color, size, box))
                break
        else:
            return None
    return objects


def _jitter(box, rng, width, height):
    for _ in range(500):
        dx, dy = rng.uniform(-0.45, 0.45, 2) * np.array([box.width, box.height])
        sw, sh = rng.uniform(0.6, 1.5, 2)
        cx, cy = box.center
        w, h = box.width * sw, box.height * sh
        cand = sc.BBox(cx + dx - w / 2, cy + dy - h / 2, cx + dx + w / 2, cy + dy + h / 2)
        cand = cand.clamp(width, height)
        if not cand.is_valid() or cand.width < 4 or cand.height < 4:
            continue
        ov = sc.iou(box, cand)
        if 0.3 <= ov <= 0.7:
            return cand, ov
    raise RuntimeError("could not jitter a proposal box")  # unreachable for sane boxes


def _pick_queries(objects, rng, config):
    """Choose distinct targets and a template for each query slot."""
    options = [_candidate_queries(objects, t, config) for t in range(len(objects))]
    chosen, used = [], set()
    for _ in range(config.queries_per_scene):
        want_rel = rng.random() < config.relation_fraction
        pool = []
        for t, (plain, relational) in enumerate(options):
            if t in used:
                continue
            cands = relational if want_rel else plain
            if cands:
                pool.append((t, cands))
        if not pool:
            return None
        if want_rel:
            # Prefer targets whose colour-shape description alone is ambiguous.
            needy = [
                (t, c)
                for t, c in pool
                if len(referents([objects[t].color, objects[t].shape], objects, config)) > 1
            ]
            pool = needy or pool
        t, cands = pool[rng.integers(len(pool))]
        tokens, lm = cands[rng.integers(len(cands))]
        used.add(t)
        chosen.append((list(tokens), t, lm))
    return chosen


def sample_scene(rng, config, max_tries=500):
    for _ in range(max_tries):
        objects = _place_objects(rng, config)
        if objects is None:
            continue
        queries = _pick_queries(objects, rng, config)
        if queries is None:
            continue
        return SynthScene(objects, queries)
    raise ConfigError("synth config: could not sample a scene satisfying the query mix")


def build_scene_record(synth, image_id, rng, config, lexicon):
    W = float(config.image_size)
    entries = [(k, o.box, 1.0) for k, o in enumerate(synth.objects)]
    order = list(rng.permutation(len(synth.objects)))
    for m in range(config.proposals - len(synth.objects)):
        src = int(order[m % len(order)])
        box, ov = _jitter(synth.objects[src].box, rng, W, W)
        entries.append((src, box, ov))
    perm = rng.permutation(len(entries))
    proposals = []
    for pid, e in enumerate(perm):
        src, box, ov = entries[int(e)]
        obj = synth.objects[src]
        category = obj.shape
        if rng.random() < config.label_noise and len(config.shapes) > 1:
            others = [s for s in config.shapes if s != obj.shape]
            category = others[rng.integers(len(others))]
        c3, c4 = synth_cnn_feature(obj, config, rng, overlap=ov if config.crop_scaling else 1.0)
        proposals.append(sc.ProposalRecord(pid, box, category, c3, c4))

    queries = []
    for tokens, target, lm in synth.queries:
        parsed = ql.parse_attributes(tokens, lexicon)
        if parsed.category != synth.objects[target].shape:
            raise AssertionError(f"parser disagrees with generator on {tokens}")
        if lm is not None and parsed.rel_obj != synth.objects[lm].shape:
            raise AssertionError(f"parser disagrees with generator on {tokens}")
        queries.append(
            sc.QueryRecord(
                tokens=tokens,
                parsed=parsed.slots(),
                attr_labels=parsed.attr_labels,
                gt_box=synth.objects[target].box,
            )
        )
    return sc.SceneRecord(image_id, W, W, proposals, queries)


def scene_rng(seed, split, index):
    return np.random.default_rng(np.random.SeedSequence([seed, split, index]))


def generate_split(config, split, count, lexicon=None):
    """``split`` is 0 for train, 1 for validation."""
    lexicon = lexicon or synth_lexicon(config)
    prefix = "train" if split == 0 else "val"
    scenes = []
    for k in range(count):
        rng = scene_rng(config.seed, split, k)
        synth = sample_scene(rng, config)
        scenes.append(build_scene_record(synth, f"{prefix}-{k:05d}", rng, config, lexicon))
    return scenes


# --------------------------------------------------------------------------
# Lexicons and embeddings
# --------------------------------------------------------------------------


def synth_lexicon(config):
    base = ql.default_lexicon()
    return ql.Lexicon(
        colors=frozenset(config.colors) | base.colors,
        sizes=frozenset(config.sizes) | base.sizes,
        locations=base.locations,
        nouns=frozenset(config.shapes) | base.nouns,
    )


def fixture_words(config):
    words = list(config.shapes) + list(config.colors) + list(config.sizes)
    for rel in config.relations:
        words += [w for w in RELATION_TOKENS[rel] if w not in words]
    return words


def build_embedding_fixture(words, dim=16, seed=0, max_cos=0.3):
    """Deterministic vectors with pairwise |cosine| below ``max_cos`` plus a
    zero ``"unk"``. Built by repelling random unit vectors."""
    words = list(dict.fromkeys(w.lower() for w in words if w.lower() != wv.UNK))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1601]))
    X = rng.normal(size=(len(words), dim))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    for _ in range(3000):
        G = X @ X.T
        np.fill_diagonal(G, 0.0)
        if np.abs(G).max() < max_cos - 0.05:
            break
        X -= 0.05 * (G * (np.abs(G) > 0.15)) @ X
        X /= np.linalg.norm(X, axis=1, keepdims=True)
    G = X @ X.T
    np.fill_diagonal(G, 0.0)
    if len(words) > 1 and np.abs(G).max() >= max_cos:
        raise ConfigError(f"cannot separate {len(words)} words in {dim} dimensions")
    norms = rng.uniform(2.0, 5.0, size=(len(words), 1))
    vectors = {w: np.round(v, 6) for w, v in zip(words, X * norms)}
    vectors[wv.UNK] = np.zeros(dim)
    return wv.EmbeddingTable(vectors, dim)


def attribute_frequencies(scenes):
    """Fraction of queries carrying each attribute label, sorted by label."""
    counts, n = {}, 0
    for s in scenes:
        for q in s.queries:
            n += 1
            for a in set(q.attr_labels):
                counts[a] = counts.get(a, 0) + 1
    return {a: counts[a] / n for a in sorted(counts)} if n else {}


def write_attributes(path, freqs):
    Path(path).write_text("".join(f"{a} {f!r}\n" for a, f in freqs.items()), encoding="utf-8")


def read_attributes(path):
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            from kprn.errors import ParseError

            raise ParseError(f"{path}: expected '<label> <frequency>'", line=lineno)
        out[parts[0]] = float(parts[1])
    return out


def generate_dataset(config, out_dir):
    """Write train/val splits, embeddings, attribute frequencies and lexicons
    to ``out_dir``. Returns a summary dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lexicon = synth_lexicon(config)
    train = generate_split(config, 0, config.train_scenes, lexicon)
    val = generate_split(config, 1, config.val_scenes, lexicon)
    sc.write_dataset(out / "train.jsonl", train)
    sc.write_dataset(out / "val.jsonl", val)
    table = build_embedding_fixture(fixture_words(config), config.embed_dim, config.seed)
    (out / "embeddings.txt").write_text(table.dumps(), encoding="utf-8")
    write_attributes(out / "attributes.txt", attribute_frequencies(train))
    lex_dir = out / "lexicons"
    lex_dir.mkdir(exist_ok=True)
    locations = sorted({w for r in config.relations for w in RELATION_TOKENS[r]} - {"of"})
    for name, words in (
        ("colors.txt", config.colors),
        ("sizes.txt", config.sizes),
        ("locations.txt", locations),
        ("nouns.txt", config.shapes),
    ):
        (lex_dir / name).write_text("".join(w + "\n" for w in words), encoding="utf-8")
    (out / "synth_config.json").write_text(json.dumps(asdict(config), indent=1), encoding="utf-8")
    n_rel = sum(1 for s in train + val for q in s.queries if q.parsed.get("rel_obj"))
    return {
        "train_scenes": len(train),
        "val_scenes": len(val),
        "train_queries": sum(len(s.queries) for s in train),
        "val_queries": sum(len(s.queries) for s in val),
        "relational_queries": n_rel,
    }
