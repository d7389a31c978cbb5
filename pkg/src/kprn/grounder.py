"""Subject/object attention, filtering, pairwise attention and grounding.

Shapes used throughout (N proposals, P retained subject-object pairs):

* subject attention input: ``[c3; c4; emb_s]`` per proposal
* object attention input: ``[c4; emb_o]`` per proposal
* pair attention input: ``[h; v_s; v_o]`` per pair, where ``h`` is the pooled
  query encoding, ``v_s`` the full subject feature (CNN + 30 spatial) and
  ``v_o`` the object feature (object c4 + 5 offsets)

All three scorers are two-layer perceptrons ``W2 relu(W1 x + b1) + b2`` with a
scalar output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kprn import scene as sc
from kprn.diffmath import tensor as T
from kprn.errors import ContractViolation

NULL_OBJECT = -1
MODES = ("soft", "hard", "none")
PAIR_ACTIVATIONS = ("softplus", "linear")


@dataclass(frozen=True)
class GroundingConfig:
    mode: str = "soft"
    threshold: float = 0.10
    use_loc: bool = True
    use_obj: bool = True
    use_dist: bool = True
    use_attr: bool = True
    pair_activation: str = "softplus"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractViolation(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.pair_activation not in PAIR_ACTIVATIONS:
            raise ContractViolation(
                f"pair_activation must be one of {PAIR_ACTIVATIONS}, got {self.pair_activation!r}")


@dataclass
class AttentionScores:
    raw: T.Tensor  # (N,)
    normalized: T.Tensor  # (N,) softmax over proposals


# --------------------------------------------------------------------------
# Per-scene feature cache
# --------------------------------------------------------------------------


class SceneFeatures:
    """Numpy feature blocks for one scene, computed once."""

    def __init__(self, scene):
        props = scene.proposals
        self.scene = scene
        self.n = len(props)
        self.c3 = np.stack([p.feat_c3 for p in props])
        self.c4 = np.stack([p.feat_c4 for p in props])
        self.cnn = np.concatenate([self.c3, self.c4], axis=1)
        self.spatial = np.stack([sc.spatial_feature(p, scene) for p in props])
        self.boxes = [p.box for p in props]
        self.categories = [p.category for p in props]

    def subject_full(self, use_loc=True):
        spatial = self.spatial if use_loc else np.zeros_like(self.spatial)
        return np.concatenate([self.cnn, spatial], axis=1)

    def object_rows(self, subjects, obj):
        """Object features ``[c4_obj; offsets(subject -> obj)]`` for each subject."""
        return np.stack(
            [np.concatenate([self.c4[obj], sc.offset_block(self.boxes[i], self.boxes[obj])]) for i in subjects]
        )

    def distances(self, subjects, obj):
        return np.array([sc.manhattan_center_distance(self.boxes[i], self.boxes[obj]) for i in subjects])


# --------------------------------------------------------------------------
# Scorers
# --------------------------------------------------------------------------


def add_mlp_params(store, prefix, in_dim, hidden, rng):
    store.add(f"{prefix}.W1", (in_dim, hidden), rng)
    store.add(f"{prefix}.b1", (hidden,), rng, fan_in=in_dim)
    store.add(f"{prefix}.W2", (hidden, 1), rng)
    store.add(f"{prefix}.b2", (1,), rng, fan_in=hidden)


def mlp_score(x, params, prefix):
    """Scalar score per row of ``x``: (R, in) -> (R,)."""
    W1 = params[f"{prefix}.W1"]
    if x.data.ndim != 2 or x.shape[1] != W1.shape[0]:
        raise ContractViolation(f"{prefix}: input {x.shape} does not match W1 {W1.shape}")
    hidden = T.relu(T.add(T.matmul(x, W1), params[f"{prefix}.b1"]))
    out = T.add(T.matmul(hidden, params[f"{prefix}.W2"]), params[f"{prefix}.b2"])
    return T.reshape(out, (x.shape[0],))


def _with_word(features, emb):
    features = np.asarray(features, dtype=np.float64)
    emb = np.asarray(emb, dtype=np.float64).reshape(1, -1)
    return np.concatenate([features, np.repeat(emb, features.shape[0], axis=0)], axis=1)


def subject_scores(cnn_features, emb_s, params, prefix="att_sub"):
    """Subject attention over proposals from their CNN features (no spatial block)."""
    if len(cnn_features) == 0:
        raise ContractViolation("subject_scores: no proposals")
    raw = mlp_score(T.constant(_with_word(cnn_features, emb_s)), params, prefix)
    return AttentionScores(raw, T.softmax(raw))


def object_scores(c4_features, emb_o, params, prefix="att_obj"):
    if len(c4_features) == 0:
        raise ContractViolation("object_scores: no proposals")
    raw = mlp_score(T.constant(_with_word(c4_features, emb_o)), params, prefix)
    return AttentionScores(raw, T.softmax(raw))


def knowledge_losses(subject, obj, priors):
    """MSE between normalized attention scores and the similarity priors.
    ``obj`` may be None (no landmark), giving a zero object loss."""
    sim_s = np.asarray(priors.sim_subject, dtype=np.float64)
    if subject.normalized.shape != sim_s.shape:
        raise ContractViolation(
            f"knowledge_losses: {subject.normalized.shape[0]} scores vs {sim_s.shape[0]} priors"
        )
    loss_sub = T.mse(subject.normalized, T.constant(sim_s))
    if obj is None:
        return loss_sub, T.constant(0.0)
    sim_o = np.asarray(priors.sim_object, dtype=np.float64)
    if obj.normalized.shape != sim_o.shape:
        raise ContractViolation("knowledge_losses: object scores and priors differ in length")
    return loss_sub, T.mse(obj.normalized, T.constant(sim_o))


def select_object(obj):
    """Index of the highest object score (lowest index on ties), or
    ``NULL_OBJECT`` when there is no object attention."""
    if obj is None:
        return NULL_OBJECT
    return int(np.argmax(obj.normalized.data))


def apply_filter(mode, threshold, subject):
    """Retained subject indices and their pair weights.

    soft: every index, weighted by its normalized score. hard: indices whose
    normalized score reaches ``threshold``; if none do, the single argmax.
    none: every index, unit weight.
    """
    s = subject.normalized.data
    if mode == "soft":
        return list(range(s.size)), s.copy()
    if mode == "none":
        return list(range(s.size)), np.ones(s.size)
    if mode == "hard":
        keep = [i for i in range(s.size) if s[i] >= threshold]
        if not keep:
            keep = [int(np.argmax(s))]
        return keep, np.ones(len(keep))
    raise ContractViolation(f"unknown filter mode {mode!r}")


def distance_weight(dist):
    """100 / (dist + 100) for a pixel-scale Manhattan distance."""
    dist = np.asarray(dist, dtype=np.float64)
    if (dist < 0).any():
        raise ContractViolation("distance_weight: negative distance")
    out = 100.0 / (dist + 100.0)
    return float(out) if out.ndim == 0 else out


def broadcast_rows(row, n):
    """Repeat a (1, d) tensor to (n, d); gradients sum back over rows."""
    return T.mul(T.constant(np.ones((n, 1))), row)


def pair_scores(h, subject_rows, object_rows, params, prefix="att_pair"):
    """Pair attention on ``[h; v_s; v_o]`` per pair.

    ``h`` is a (1, 2H) tensor; ``subject_rows`` a (P, ds) array; ``object_rows``
    either a (P, do) array or a (1, do) tensor (the null-object sentinel),
    broadcast over pairs.
    """
    P = len(subject_rows)
    vo = object_rows if isinstance(object_rows, T.Tensor) else T.constant(object_rows)
    if vo.shape[0] != P:
        vo = broadcast_rows(vo, P)
    x = T.concat([broadcast_rows(h, P), T.constant(subject_rows), vo])
    return mlp_score(x, params, prefix)


def pair_strength(pair_raw, activation="softplus"):
    """Map raw pair scores to the factor that multiplies the distance and
    subject weights.

    The product only rewards near, well-attended subjects when this factor
    is positive. With raw (signed) scores, training can settle on all-negative
    scores, and the softmax then prefers the farthest, least-attended subject.
    ``softplus`` rules that out; ``linear`` keeps the raw score.
    """
    if activation == "softplus":
        return T.softplus(pair_raw)
    if activation == "linear":
        return pair_raw
    raise ContractViolation(f"unknown pair activation {activation!r}")


def final_scores(mode, omega, pair_raw, subject_weight=None):
    """Softmax over pairs of ``omega * Score_s * Score_pair`` (soft) or
    ``omega * Score_pair`` (hard/none). ``subject_weight`` is the (P,) tensor of
    normalized subject scores of the retained pairs, used in soft mode."""
    prod = T.mul(pair_raw, T.constant(np.asarray(omega, dtype=np.float64)))
    if mode == "soft":
        if subject_weight is None:
            raise ContractViolation("final_scores: soft mode needs subject scores")
        prod = T.mul(prod, subject_weight)
    return T.softmax(prod)


# --------------------------------------------------------------------------
# Full forward for one query
# --------------------------------------------------------------------------


@dataclass
class QueryInputs:
    """Everything the grounder needs about one query, precomputed."""

    tokens: list
    subject_word: str
    object_word: str
    emb_s: np.ndarray
    emb_o: np.ndarray
    priors: object  # wordvec.KnowledgePriors
    attr_targets: np.ndarray | None = None  # multi-hot over the attribute vocab
    gt_box: sc.BBox | None = None

    @property
    def has_object(self):
        return bool(self.object_word)


@dataclass
class GroundingPass:
    subject: AttentionScores
    object: AttentionScores | None
    object_index: int
    pair_subjects: list
    subject_rows: np.ndarray  # (P, ds) full subject features of the pairs
    object_rows: object  # (P, do) array, or the sentinel tensor
    omega: np.ndarray
    pair_raw: T.Tensor
    pair: T.Tensor  # pair_raw after the pair activation
    final: T.Tensor  # (P,) S_t
    loss_sub: T.Tensor
    loss_obj: T.Tensor

    @property
    def best_pair(self):
        return int(np.argmax(self.final.data))

    @property
    def subject_index(self):
        return self.pair_subjects[self.best_pair]


def _subjects_excluding(keep, obj, subject, n):
    """Drop the object itself from the subject list; never return empty."""
    if obj == NULL_OBJECT:
        return keep
    subs = [i for i in keep if i != obj]
    if subs:
        return subs
    if n == 1:
        return [obj]
    s = subject.normalized.data.copy()
    s[obj] = -np.inf
    return [int(np.argmax(s))]


def forward_query(feats, query, encoded_h, params, config):
    """Subject/object attention, pair scores and final scores for one query.

    ``feats`` is a :class:`SceneFeatures`, ``encoded_h`` the pooled query
    encoding (1, 2H) tensor.
    """
    subject = subject_scores(feats.cnn, query.emb_s, params)
    obj = None
    if config.use_obj and query.has_object:
        obj = object_scores(feats.c4, query.emb_o, params)
    loss_sub, loss_obj = knowledge_losses(subject, obj, query.priors)

    j = select_object(obj)
    keep, _ = apply_filter(config.mode, config.threshold, subject)
    subs = _subjects_excluding(keep, j, subject, feats.n)
    subject_rows = feats.subject_full(config.use_loc)[subs]
    if j == NULL_OBJECT:
        object_rows = T.reshape(params["null_object"], (1, -1))
        omega = np.ones(len(subs))
    else:
        object_rows = feats.object_rows(subs, j)
        omega = distance_weight(feats.distances(subs, j)) if config.use_dist else np.ones(len(subs))
        omega = np.atleast_1d(omega)

    pair_raw = pair_scores(encoded_h, subject_rows, object_rows, params)
    weight = None
    if config.mode == "soft":
        weight = T.reshape(T.take_rows(T.reshape(subject.normalized, (-1, 1)), subs), (len(subs),))
    pair = pair_strength(pair_raw, config.pair_activation)
    final = final_scores(config.mode, omega, pair, weight)
    return GroundingPass(
        subject=subject,
        object=obj,
        object_index=j,
        pair_subjects=subs,
        subject_rows=subject_rows,
        object_rows=object_rows,
        omega=omega,
        pair_raw=pair_raw,
        pair=pair,
        final=final,
        loss_sub=loss_sub,
        loss_obj=loss_obj,
    )


@dataclass
class GroundingResult:
    subject_index: int
    object_index: int
    subject_box: sc.BBox
    object_box: sc.BBox | None
    pair_subjects: list
    scores: np.ndarray


def ground(model, scene, query, config, feats=None):
    """Inference: the pair with the highest final score. Reconstruction is
    not involved."""
    feats = feats or SceneFeatures(scene)
    q = model.prepare_query(query, feats)
    h = model.encode(q.tokens).pooled
    gp = forward_query(feats, q, h, model.params, config)
    best = gp.best_pair
    i = gp.pair_subjects[best]
    j = gp.object_index
    return GroundingResult(
        subject_index=i,
        object_index=j,
        subject_box=feats.boxes[i],
        object_box=None if j == NULL_OBJECT else feats.boxes[j],
        pair_subjects=list(gp.pair_subjects),
        scores=gp.final.data.copy(),
    )
