"""Training configuration and the flat ``key=value`` config format.

Config files hold one ``key = value`` per line; ``#`` starts a comment.
Booleans accept true/false, on/off, yes/no, 1/0. Keys are the fields of
:class:`TrainConfig`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

from kprn.errors import ConfigError
from kprn.grounder import MODES, PAIR_ACTIVATIONS, GroundingConfig
from kprn.model import ModelDims

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "soft"
    threshold: float = 0.10
    attr: bool = True
    loc: bool = True
    obj: bool = True
    dist: bool = True
    pair_activation: str = "softplus"
    lr: float = 4e-4
    lr_decay: float = 0.1
    lr_step: int = 8000
    iters: int = 30000
    seed: int = 0
    checkpoint_every: int = 1000
    eval_every: int = 1000
    eval_scenes: int = 25
    word_embed: int = 64
    enc_hidden: int = 64
    att_hidden: int = 128
    rvis: int = 256
    dec_hidden: int = 256

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.pair_activation not in PAIR_ACTIVATIONS:
            raise ConfigError(f"pair_activation must be one of {PAIR_ACTIVATIONS}, got {self.pair_activation!r}")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.iters < 0 or self.lr_step <= 0:
            raise ConfigError("iters must be >= 0 and lr_step > 0")
        for name in ("word_embed", "enc_hidden", "att_hidden", "rvis", "dec_hidden"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def grounding(self):
        return GroundingConfig(
            mode=self.mode,
            threshold=self.threshold,
            use_loc=self.loc,
            use_obj=self.obj,
            use_dist=self.dist,
            use_attr=self.attr,
            pair_activation=self.pair_activation,
        )

    @property
    def dims(self):
        return ModelDims(self.word_embed, self.enc_hidden, self.att_hidden, self.rvis, self.dec_hidden)

    @property
    def label(self):
        """Flag-concatenation row name, e.g. ``attr+loc+obj+soft+dist``."""
        parts = [name for name in ("attr", "loc", "obj") if getattr(self, name)]
        if self.mode != "none":
            parts.append(self.mode)
        if self.dist:
            parts.append("dist")
        return "+".join(parts) or "base"

    def with_overrides(self, values):
        return replace(self, **coerce(values))

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_mapping(cls, values):
        return cls(**coerce(values))


def lr_at(iteration, config):
    """Learning rate used for 1-based ``iteration``."""
    return config.lr * config.lr_decay ** (iteration // config.lr_step)


def valid_keys():
    return [f.name for f in fields(TrainConfig)]


def _coerce_value(name, default, value):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        s = str(value).strip().lower()
        if s in _TRUE:
            return True
        if s in _FALSE:
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    try:
        return type(default)(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot read {value!r} as {type(default).__name__}") from None


def coerce(values):
    known = {f.name: f.default for f in fields(TrainConfig)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}; valid keys: {sorted(known)}")
    return {k: _coerce_value(k, known[k], v) for k, v in values.items()}


def parse_key_values(text):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def dumps_config(config):
    return "".join(f"{k} = {v}\n" for k, v in config.as_dict().items())


def load_config(path, overrides=None):
    """Read a config file (optional) and apply ``key=value`` overrides after it."""
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_key_values(fh.read()))
    values.update(overrides or {})
    return TrainConfig.from_mapping(values)
