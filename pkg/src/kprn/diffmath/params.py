"""Named trainable parameters and their text serialization."""

from __future__ import annotations

import json
import math

import numpy as np

from kprn.diffmath.tensor import Tensor
from kprn.errors import CheckpointError, ContractViolation


class ParamStore:
    """Ordered name -> Tensor map.

    Iteration order is insertion order, so two stores built by the same code
    path line up exactly. Shapes are fixed at creation; :meth:`assign` checks.
    """

    def __init__(self):
        self._tensors = {}

    def add(self, name, shape, rng=None, fan_in=None, init="uniform"):
        """Create a parameter.

        ``init="uniform"`` draws from U(-1/sqrt(fan_in), 1/sqrt(fan_in));
        ``fan_in`` defaults to ``shape[0]``. ``init="zeros"`` ignores ``rng``.
        """
        if name in self._tensors:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ContractViolation(f"parameter {name!r}: extents must be positive, got {shape}")
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "uniform":
            if rng is None:
                raise ContractViolation("uniform init needs a seeded generator")
            bound = 1.0 / math.sqrt(fan_in or shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        else:
            raise ContractViolation(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self._tensors[name] = t
        return t

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def __iter__(self):
        return iter(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def assign(self, name, values):
        t = self._tensors[name]
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != t.shape:
            raise ContractViolation(f"parameter {name!r}: shape {arr.shape} != {t.shape}")
        t.data = arr.copy()

    def num_values(self):
        return sum(t.data.size for t in self._tensors.values())

    def copy(self):
        out = ParamStore()
        for name, t in self._tensors.items():
            out._tensors[name] = Tensor(t.data.copy(), requires_grad=True, name=name)
        return out

    def zero_(self):
        for t in self._tensors.values():
            t.data = np.zeros_like(t.data)
        return self

    def equal(self, other):
        """Bitwise equality of names, shapes and values."""
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[n].data, other[n].data) for n in self)


def arrays_to_document(arrays):
    """name -> array mapping as a JSON-ready ``{name: {shape, values}}`` dict.

    Python's float repr is the shortest string that parses back to the same
    double, so the JSON round trip is exact.
    """
    return {
        name: {"shape": list(arr.shape), "values": [float(v) for v in np.asarray(arr).reshape(-1)]}
        for name, arr in arrays
    }


def document_to_arrays(doc):
    out = {}
    for name, entry in doc.items():
        try:
            shape = tuple(int(s) for s in entry["shape"])
            values = np.array(entry["values"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"parameter {name!r}: malformed entry ({exc})") from None
        if values.size != int(np.prod(shape)):
            raise CheckpointError(
                f"parameter {name!r}: {values.size} values for shape {list(shape)}"
            )
        out[name] = values.reshape(shape)
    return out


def dumps_params(store):
    return json.dumps(arrays_to_document((n, t.data) for n, t in store.items()))


def loads_params(text):
    """Rebuild a ParamStore from :func:`dumps_params` output."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"not a parameter document: {exc}") from None
    store = ParamStore()
    for name, arr in document_to_arrays(doc).items():
        store._tensors[name] = Tensor(arr, requires_grad=True, name=name)
    return store
