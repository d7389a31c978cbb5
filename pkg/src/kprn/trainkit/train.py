"""End-to-end training: one image per step, Adam with step decay."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from kprn import querylang as ql
from kprn.diffmath import AdamState, adam_step, backward
from kprn.errors import NumericDomainError
from kprn.grounder import SceneFeatures
from kprn.model import KPRN
from kprn.synthgen import attribute_frequencies
from kprn.trainkit.checkpoint import save_checkpoint
from kprn.trainkit.config import lr_at
from kprn.trainkit.evaluate import evaluate

log = logging.getLogger(__name__)

METRICS_HEADER = ["iteration", "loss_sub", "loss_obj", "loss_lan", "loss_att", "total", "eval_acc", "seconds"]


@dataclass
class PreparedScene:
    image_id: str
    feats: SceneFeatures
    queries: list


def build_model(train_scenes, table, config, attr_freqs=None):
    """Fresh model whose vocabulary covers the training queries."""
    vocab = ql.Vocab.build(q.tokens for s in train_scenes for q in s.queries)
    freqs = attr_freqs if attr_freqs is not None else attribute_frequencies(train_scenes)
    p = train_scenes[0].proposals[0]
    return KPRN(
        vocab,
        table,
        c3_dim=p.feat_c3.size,
        c4_dim=p.feat_c4.size,
        dims=config.dims,
        attr_labels=list(freqs),
        attr_freqs=list(freqs.values()),
        seed=config.seed,
    )


def prepare_scenes(model, scenes):
    """Feature caches and prepared queries; scenes without queries are dropped."""
    out = []
    for s in scenes:
        if not s.queries:
            continue
        feats = SceneFeatures(s)
        model.check_scene(feats)
        out.append(PreparedScene(s.image_id, feats, [model.prepare_query(q, feats) for q in s.queries]))
    return out


def train_step(model, prepared, state, config, lr):
    """Average the losses over the image's queries and apply one Adam update."""
    bundle = model.image_loss(prepared.feats, prepared.queries, config.grounding)
    grads = backward(bundle.tensor, model.params)
    adam_step(model.params, grads, state, lr=lr)
    return bundle


def data_order(n, seed, epoch):
    return np.random.default_rng(np.random.SeedSequence([seed, 7, epoch])).permutation(n)


def scene_for_iteration(iteration, n, seed, _cache={}):
    """Index of the training image used at 1-based ``iteration``: images are
    visited cyclically, reshuffled every epoch from the seed."""
    epoch, pos = divmod(iteration - 1, n)
    key = (n, seed, epoch)
    order = _cache.get(key)
    if order is None:
        if len(_cache) > 64:
            _cache.clear()
        order = _cache[key] = data_order(n, seed, epoch)
    return int(order[pos])


@dataclass
class TrainResult:
    model: KPRN
    state: AdamState
    iteration: int
    rows: list = field(default_factory=list)


def _fmt(x):
    return "" if x is None else repr(float(x))


def train_loop(
    model,
    train_scenes,
    config,
    out_dir=None,
    eval_scenes=None,
    state=None,
    start_iter=0,
    prepared=None,
):
    """Train from ``start_iter`` to ``config.iters``.

    With ``out_dir`` set, writes ``checkpoint.json`` every
    ``config.checkpoint_every`` iterations and at the end, and appends to
    ``metrics.csv`` (created with a header when missing). ``eval_scenes``
    supplies the held-out slice scored every ``config.eval_every`` iterations.
    """
    prepared = prepared or prepare_scenes(model, train_scenes)
    if not prepared:
        raise ValueError("no training scenes with queries")
    state = state or AdamState.for_params(model.params, lr=config.lr)
    held_out = list(eval_scenes[: config.eval_scenes]) if eval_scenes else []
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics = out / "metrics.csv"
        fresh = not metrics.exists() or start_iter == 0
        fh = open(metrics, "w" if fresh else "a", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(METRICS_HEADER)
    rows = []
    t0 = time.perf_counter()
    iteration = start_iter
    try:
        if out is not None and start_iter == 0:
            save_checkpoint(out / "checkpoint.json", model, state, 0, config)
        for iteration in range(start_iter + 1, config.iters + 1):
            scene = prepared[scene_for_iteration(iteration, len(prepared), config.seed)]
            try:
                bundle = train_step(model, scene, state, config, lr_at(iteration, config))
            except NumericDomainError as exc:
                if out is not None:
                    (out / "failure.json").write_text(
                        json.dumps({"iteration": iteration, "image_id": scene.image_id, "error": str(exc)}),
                        encoding="utf-8",
                    )
                raise NumericDomainError(f"iteration {iteration}, image {scene.image_id}: {exc}") from exc
            acc = None
            if held_out and config.eval_every and iteration % config.eval_every == 0:
                acc = evaluate(model, held_out, config).accuracy
            row = [iteration, *bundle.as_row(), acc, time.perf_counter() - t0]
            rows.append(row)
            if writer is not None:
                writer.writerow([row[0]] + [_fmt(x) for x in row[1:]])
            if out is not None and config.checkpoint_every and iteration % config.checkpoint_every == 0:
                fh.flush()
                save_checkpoint(out / "checkpoint.json", model, state, iteration, config)
        if out is not None and (config.iters == 0 or iteration % max(config.checkpoint_every, 1) != 0):
            save_checkpoint(out / "checkpoint.json", model, state, iteration, config)
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(model, state, iteration, rows)


def read_metrics(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))
