"""Small reverse-mode autodiff engine: tensors, Adam, LSTM cell."""

from kprn.diffmath.lstm import add_lstm_params, lstm_sequence, lstm_step
from kprn.diffmath.optim import AdamState, adam_step
from kprn.diffmath.params import ParamStore, dumps_params, loads_params
from kprn.diffmath.tensor import *  # noqa: F401,F403
from kprn.diffmath.tensor import __all__ as _tensor_all

__all__ = [
    "ParamStore",
    "AdamState",
    "adam_step",
    "lstm_step",
    "lstm_sequence",
    "add_lstm_params",
    "dumps_params",
    "loads_params",
    *_tensor_all,
]
