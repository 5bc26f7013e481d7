"""Model/training hyperparameters and the key=value config format."""
import dataclasses
import json
import warnings
from dataclasses import dataclass, field, fields

from .errors import ConfigError

GRIDS = {
    "d_w": (16, 32, 64, 128, 256),
    "hidden": (16, 32, 64, 128),
    "stack_depth": (1, 2, 3),
    "d_b": (2, 4, 8, 16, 32, 64),
    "lr": (1e-1, 1e-2, 1e-3, 1e-4, 1e-5),
    "init_std": (0.01, 0.05, 0.1, 0.2),
}
SVM_C_GRID = (1e3, 1e2, 1e1, 1.0, 1e-1, 1e-2, 1e-3)
SVM_EMBEDDING_GRID = (50, 100, 200, 500)

ATTENTION_KINDS = ("dwdl", "standard", "none")
CELL_KINDS = ("ln", "plain")


@dataclass
class ModelConfig:
    d_w: int = 32
    hidden: int = 32
    stack_depth: int = 1
    d_b: int = 8
    lr: float = 1e-2
    init_std: float = 0.1
    mlp_depth: int = 2
    mlp_hidden: int = 0  # 0 -> hidden
    merge_dim: int = 0  # 0 -> hidden
    batch_size: int = 32
    max_len: int = 20
    max_words: int = 100
    seed: int = 0
    rho: float = 0.9
    rms_eps: float = 1e-8
    max_epochs: int = 30
    patience: int = 3
    min_delta: float = 1e-4
    attention: str = "dwdl"
    cell: str = "ln"
    use_context: bool = True
    bn_momentum: float = 0.9
    bn_eps: float = 1e-8
    pos_weight: float = 1.0
    # filled in from the prepared data
    vocab_size: int = 0
    d_context: int = 0
    n_backgrounds: int = 0
    extra: dict = field(default_factory=dict)

    def validate(self):
        for name in ("d_w", "hidden", "stack_depth", "mlp_depth", "batch_size", "max_len", "max_words", "max_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.hidden < 2:
            raise ConfigError("hidden must be >= 2 (layer norm needs two units)")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not self.init_std > 0:
            raise ConfigError("init_std must be positive")
        if not 0 <= self.rho < 1:
            raise ConfigError("rho must be in [0, 1)")
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"attention must be one of {ATTENTION_KINDS}")
        if self.cell not in CELL_KINDS:
            raise ConfigError(f"cell must be one of {CELL_KINDS}")
        for name, grid in GRIDS.items():
            value = getattr(self, name)
            if not any(abs(value - g) <= 1e-12 * max(1.0, abs(g)) for g in grid):
                warnings.warn(f"{name}={value} is off the grid {grid}", stacklevel=2)
        return self

    @property
    def mlp_width(self):
        return self.mlp_hidden or self.hidden

    @property
    def merge_width(self):
        return self.merge_dim or self.hidden

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def _coerce(cls, key, raw):
    types = {f.name: f.type for f in fields(cls)}
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    kind = types[key]
    raw = raw.strip()
    try:
        if kind in (bool, "bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            try:
                return int(raw)
            except ValueError:
                as_float = float(raw)
                if not as_float.is_integer():
                    raise
                return int(as_float)
        if kind in (float, "float"):
            return float(raw)
        if kind in (dict, "dict"):
            return json.loads(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_kv(text, cls=ModelConfig):
    """Parse ``key=value`` lines (``#`` comments allowed) into a dict of overrides."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        out[key] = _coerce(cls, key, value)
    return out


def load_kv(path, base=None, cls=ModelConfig):
    with open(path, encoding="utf-8") as fh:
        overrides = parse_kv(fh.read(), cls)
    base = base if base is not None else cls()
    return dataclasses.replace(base, **overrides)


@dataclass
class LinearConfig:
    """Hyperparameters of the hashed-feature linear baseline."""

    C: float = 1.0
    epochs: int = 10
    hash_dim: int = 2 ** 18
    bg_dim: int = 2 ** 10
    ngram_orders: str = "1,2,3"
    max_len: int = 20
    seed: int = 0

    def validate(self):
        if not self.C > 0:
            raise ConfigError("C must be positive")
        if self.epochs < 1 or self.hash_dim < 1 or self.bg_dim < 1 or self.max_len < 1:
            raise ConfigError("epochs, hash_dim, bg_dim and max_len must be >= 1")
        if not set(self.orders) <= {1, 2, 3} or not self.orders:
            raise ConfigError("ngram_orders must be a non-empty subset of 1,2,3")
        return self

    @property
    def orders(self):
        try:
            return tuple(sorted({int(x) for x in str(self.ngram_orders).split(",") if x.strip()}))
        except ValueError:
            raise ConfigError(f"bad ngram_orders {self.ngram_orders!r}") from None

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)
