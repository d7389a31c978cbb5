"""Checkpoint files.

A checkpoint is one JSON document::

    {"format": "kprn-checkpoint", "version": 1, "iteration": k,
     "config": {...TrainConfig fields...},
     "model": {vocab, c3_dim, c4_dim, dims, attr_labels, attr_freqs, seed},
     "params": {name: {"shape": [...], "values": [...]}, ...},
     "adam": {"lr", "beta1", "beta2", "eps", "step",
              "m": {name: {shape, values}}, "v": {...}}}

Floats are written with Python's shortest round-trip repr, so loading and
saving again reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from kprn.diffmath import AdamState
from kprn.diffmath.params import arrays_to_document, document_to_arrays
from kprn.errors import CheckpointError, ContractViolation
from kprn.model import KPRN
from kprn.trainkit.config import TrainConfig

FORMAT = "kprn-checkpoint"
VERSION = 1


def checkpoint_document(model, state, iteration, config):
    return {
        "format": FORMAT,
        "version": VERSION,
        "iteration": int(iteration),
        "config": config.as_dict(),
        "model": model.metadata(),
        "params": arrays_to_document((n, t.data) for n, t in model.params.items()),
        "adam": {
            "lr": state.lr,
            "beta1": state.beta1,
            "beta2": state.beta2,
            "eps": state.eps,
            "step": state.step,
            "m": arrays_to_document(state.m.items()),
            "v": arrays_to_document(state.v.items()),
        },
    }


def save_checkpoint(path, model, state, iteration, config):
    """Write atomically: a failed write leaves any previous checkpoint intact."""
    path = Path(path)
    text = json.dumps(checkpoint_document(model, state, iteration, config))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def load_checkpoint(path, table):
    """Returns ``(model, adam_state, iteration, config)``; raises
    :class:`CheckpointError` without touching any live state on failure."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {doc.get('version')} != supported {VERSION}")
    try:
        config = TrainConfig.from_mapping(doc["config"])
        model = KPRN.from_metadata(doc["model"], table)
        arrays = document_to_arrays(doc["params"])
        if list(arrays) != model.params.names():
            raise CheckpointError(f"{path}: parameter names do not match the model layout")
        for name, arr in arrays.items():
            model.params.assign(name, arr)
        a = doc["adam"]
        state = AdamState(
            lr=float(a["lr"]),
            beta1=float(a["beta1"]),
            beta2=float(a["beta2"]),
            eps=float(a["eps"]),
            step=int(a["step"]),
            m=document_to_arrays(a["m"]),
            v=document_to_arrays(a["v"]),
        )
        iteration = int(doc["iteration"])
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError, ContractViolation) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    return model, state, iteration, config
