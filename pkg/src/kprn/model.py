"""The trainable model: parameter layout plus the per-query loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from kprn import grounder as gr
from kprn import querylang as ql
from kprn import reconstructor as rc
from kprn import scene as sc
from kprn import wordvec as wv
from kprn.diffmath import ParamStore
from kprn.diffmath import tensor as T
from kprn.errors import ConfigError


@dataclass(frozen=True)
class ModelDims:
    word_embed: int = 64
    enc_hidden: int = 64
    att_hidden: int = 128
    rvis: int = 256
    dec_hidden: int = 256


class KPRN:
    """Parameters and vocabularies for one model instance.

    ``c3_dim``/``c4_dim`` are the dataset's CNN feature widths, ``word_dim``
    the frozen embedding table's dimension. ``attr_labels`` and
    ``attr_freqs`` describe the attribute head (may be empty).
    """

    def __init__(self, vocab, table, c3_dim, c4_dim, dims=None, attr_labels=(), attr_freqs=(), seed=0):
        self.vocab = vocab
        self.table = table
        self.dims = dims or ModelDims()
        self.c3_dim, self.c4_dim = int(c3_dim), int(c4_dim)
        self.attr_labels = list(attr_labels)
        self.attr_index = {a: k for k, a in enumerate(self.attr_labels)}
        self.attr_freqs = np.asarray(attr_freqs, dtype=np.float64)
        self.attr_weights = rc.label_weights(self.attr_freqs) if self.attr_labels else np.zeros(0)
        self.seed = seed
        self.params = self._build_params(np.random.default_rng(seed))

    @property
    def cnn_dim(self):
        return self.c3_dim + self.c4_dim

    @property
    def subject_dim(self):
        return self.cnn_dim + sc.SPATIAL_DIM

    @property
    def object_dim(self):
        return self.c4_dim + 5

    def _build_params(self, rng):
        d, store, wd = self.dims, ParamStore(), self.table.dim
        ql.add_encoder_params(store, len(self.vocab), d.word_embed, d.enc_hidden, rng)
        gr.add_mlp_params(store, "att_sub", self.cnn_dim + wd, d.att_hidden, rng)
        gr.add_mlp_params(store, "att_obj", self.c4_dim + wd, d.att_hidden, rng)
        gr.add_mlp_params(
            store, "att_pair", 2 * d.enc_hidden + self.subject_dim + self.object_dim, d.att_hidden, rng
        )
        store.add("null_object", (self.object_dim,), init="zeros")
        rc.add_fuse_params(store, self.subject_dim + self.object_dim, d.rvis, rng)
        rc.add_decoder_params(store, len(self.vocab), d.rvis, d.dec_hidden, rng)
        if self.attr_labels:
            rc.add_attribute_params(store, self.cnn_dim, len(self.attr_labels), rng)
        return store

    # ------------------------------------------------------------------
    def metadata(self):
        return {
            "vocab": self.vocab.tokens[len(ql.RESERVED) :],
            "c3_dim": self.c3_dim,
            "c4_dim": self.c4_dim,
            "dims": asdict(self.dims),
            "attr_labels": self.attr_labels,
            "attr_freqs": [float(f) for f in self.attr_freqs],
            "seed": self.seed,
        }

    @classmethod
    def from_metadata(cls, meta, table):
        return cls(
            vocab=ql.Vocab(meta["vocab"]),
            table=table,
            c3_dim=meta["c3_dim"],
            c4_dim=meta["c4_dim"],
            dims=ModelDims(**meta["dims"]),
            attr_labels=meta["attr_labels"],
            attr_freqs=meta["attr_freqs"],
            seed=meta["seed"],
        )

    def check_scene(self, feats):
        if feats.c3.shape[1] != self.c3_dim or feats.c4.shape[1] != self.c4_dim:
            raise ConfigError(
                f"scene features ({feats.c3.shape[1]}, {feats.c4.shape[1]}) do not match "
                f"model ({self.c3_dim}, {self.c4_dim})"
            )

    def prepare_query(self, query, feats):
        """Parse (when needed), look up embeddings and compute priors."""
        parsed = query.parsed or {}
        if not parsed.get("category"):
            parsed = ql.parse_attributes(query.tokens).slots()
        subject = parsed.get("category") or wv.UNK
        obj = parsed.get("rel_obj") or ""
        priors = wv.knowledge_priors(self.table, feats.categories, subject, obj)
        targets = None
        if self.attr_labels:
            targets = np.zeros(len(self.attr_labels))
            # Labels the head was not built with (held-out data) have no
            # output unit and are ignored.
            for a in query.attr_labels:
                k = self.attr_index.get(a)
                if k is not None:
                    targets[k] = 1.0
        return gr.QueryInputs(
            tokens=ql.clip_tokens(query.tokens),
            subject_word=subject,
            object_word=obj,
            emb_s=self.table.phrase(subject),
            emb_o=self.table.phrase(obj) if obj else np.zeros(self.table.dim),
            priors=priors,
            attr_targets=targets,
            gt_box=query.gt_box,
        )

    def encode(self, tokens):
        return ql.encode_query(tokens, self.vocab, self.params)

    def query_losses(self, feats, q, config):
        """Four differentiable losses for one prepared query."""
        h = self.encode(q.tokens).pooled
        gp = gr.forward_query(feats, q, h, self.params, config)
        r_vis = rc.fuse_pair(gp.subject_rows, gp.object_rows, self.params)
        f_vis = rc.aggregate(r_vis, gp.final)
        loss_lan = rc.reconstruction_loss(f_vis, self.vocab.encode(q.tokens), self.vocab, self.params)
        if config.use_attr and self.attr_labels and q.attr_targets is not None:
            cnn_rows = feats.cnn[gp.pair_subjects]
            loss_att = rc.attribute_loss(cnn_rows, gp.final, q.attr_targets, self.attr_weights, self.params)
        else:
            loss_att = T.constant(0.0)
        return gp.loss_sub, gp.loss_obj, loss_lan, loss_att

    def image_loss(self, feats, queries, config):
        """Losses averaged over the image's prepared queries."""
        sums = None
        for q in queries:
            parts = self.query_losses(feats, q, config)
            sums = list(parts) if sums is None else [T.add(a, b) for a, b in zip(sums, parts)]
        n = len(queries)
        return rc.total_loss(*[T.scale(s, 1.0 / n) for s in sums])
