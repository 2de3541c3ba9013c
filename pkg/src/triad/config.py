"""Run configuration: defaults < key=value file < command-line overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

VARIANTS = {
    "SV": dict(use_multiview=False, use_history=False, use_interpreter=False),
    "MV": dict(use_multiview=True, use_history=False, use_interpreter=False),
    "MV+T": dict(use_multiview=True, use_history=True, use_interpreter=False),
    "MV+T+I": dict(use_multiview=True, use_history=True, use_interpreter=True),
}


@dataclass
class RunConfig:
    seed: int = 0
    grammar: str = "synthetic6"

    # model dims; n and v of 0 are taken from the grammar
    c: int = 64
    e: int = 64
    n: int = 0
    k: int = 4
    v: int = 0
    layers: int = 3
    heads: int = 4
    ff_mult: int = 2
    max_len: int = 80
    history_len: int = 32
    image_size: int = 32

    # loss weights
    w_c: float = 1.0
    w_g: float = 1.0
    w_i: float = 1.0

    # ablations
    use_history: bool = True
    use_multiview: bool = True
    use_interpreter: bool = True
    drop_states: bool = False
    drop_topics: bool = False
    drop_fused: bool = False

    # modelling switches
    positional: bool = True
    scale_text_logits: bool = False
    detach_states: bool = False
    share_state_embedding: bool = False
    finetune_states: str = "truth"

    # optimisation
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    warmup: int = 100
    clip: float = 1.0
    steps: int = 2000
    finetune_steps: int = 0
    batch_size: int = 32
    eval_every: int = 200
    decode_len: int = 0

    # corpus generation
    corpus_size: int = 2000
    val_ratio: float = 0.1
    test_ratio: float = 0.25

    # paths
    corpus: str = "corpus"
    out: str = "run"
    checkpoint: str = ""

    def validate(self) -> "RunConfig":
        for name in ("c", "e", "k", "layers", "heads", "max_len", "history_len", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.e % self.heads:
            raise ConfigError(f"e={self.e} must be divisible by heads={self.heads}")
        if self.image_size % 8:
            raise ConfigError("image_size must be a multiple of 8")
        if self.finetune_states not in ("truth", "predicted"):
            raise ConfigError("finetune_states must be 'truth' or 'predicted'")
        if not 0 <= self.val_ratio < 1 or not 0 <= self.test_ratio < 1 or self.val_ratio + self.test_ratio >= 1:
            raise ConfigError("split ratios must leave room for a training split")
        if min(self.w_c, self.w_g, self.w_i) < 0:
            raise ConfigError("loss weights must be non-negative")
        return self

    @property
    def loss_weights(self) -> tuple[float, float, float]:
        return (self.w_c, self.w_g, self.w_i if self.use_interpreter else 0.0)

    @property
    def variant(self) -> str:
        for name, flags in VARIANTS.items():
            if all(getattr(self, k) == v for k, v in flags.items()):
                return name
        return "custom"

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(name: str, kind, raw):
    if not isinstance(raw, str):
        return raw
    try:
        if kind in (bool, "bool"):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw.strip()


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_key_values(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def config_from_text(text: str, source: str = "<config>") -> RunConfig:
    values = parse_key_values(text, source)
    return RunConfig(**{k: _coerce(k, _FIELD_TYPES[k], v) for k, v in values.items()}).validate()


def build_config(file: str | os.PathLike | None = None, overrides: dict | None = None,
                 env: dict | None = None, variant: str | None = None) -> RunConfig:
    """Defaults, then the file, then a named variant, then overrides.

    ``TRIAD_SEED`` in the environment replaces the seed from any source.
    """
    values: dict = {}
    if file:
        path = Path(file)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_key_values(path.read_text(), str(path)))
    if variant:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        values.update(VARIANTS[variant])
    for key, value in (overrides or {}).items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        if value is not None:
            values[key] = value
    env = os.environ if env is None else env
    if env.get("TRIAD_SEED"):
        values["seed"] = env["TRIAD_SEED"]
    typed = {k: _coerce(k, _FIELD_TYPES[k], v) for k, v in values.items()}
    return RunConfig(**typed).validate()


def apply_variant(config: RunConfig, variant: str) -> RunConfig:
    try:
        return config.replace(**VARIANTS[variant])
    except KeyError:
        raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}") from None
