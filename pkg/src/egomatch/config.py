"""Run configuration and the key-value config file format.

Config files are plain text, one ``key = value`` per line, ``#`` comments
and blank lines ignored. Values parse as int, then float, then true/false,
else string. Unknown keys are rejected so typos fail fast. See README for
the full key table.
"""

from dataclasses import dataclass, fields

from .errors import ConfigError
from .world import GeneratorConfig


@dataclass
class RunConfig:
    # model dimensions
    d: int = 256                 # embedding width
    d_f: int = 32                # raw feature width
    heads: int = 4
    layers_high: int = 2         # matcher encoder depth
    layers_low: int = 4          # cross-attention depth
    consensus_r: int = 16        # random coloring columns
    consensus_width: int = 32    # consensus encoder working width
    consensus_layers: int = 2
    consensus_heads: int = 4
    n_max: int = 64              # position-table capacity
    gate_hidden: int = 64
    head_hidden: int = 128
    tau: float = 0.65            # acceptance threshold on S + D
    # optimizer / schedule
    lr: float = 0.001
    epochs: int = 50
    batch: int = 16
    beta: float = 10.0           # matching-loss logistic sharpness
    dropout_attn: float = 0.5
    dropout_mlp: float = 0.2
    seed: int = 0
    # synthetic world
    object_count: int = 12
    view_extent: float = 60.0
    covisible_fraction: float = 0.5
    feature_noise: float = 0.1
    distractor_rate: float = 0.2
    distractor_similarity: float = 1.0
    view_feature_weight: float = 0.5
    view_feature_dims: int = 4
    fov_deg: float = 120.0
    arena: float = 100.0
    nonoverlap_mix: float = 0.3

    def validate(self) -> "RunConfig":
        positive = ("d", "d_f", "heads", "layers_high", "layers_low",
                    "consensus_r", "consensus_width", "consensus_layers",
                    "consensus_heads", "n_max", "gate_hidden", "head_hidden",
                    "epochs", "batch", "object_count")
        for name in positive:
            if getattr(self, name) < (0 if name == "epochs" else 1):
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must be in (0, 1], got {self.tau}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.d % self.heads or self.consensus_width % self.consensus_heads:
            raise ConfigError("widths must be divisible by their head counts")
        for name in ("dropout_attn", "dropout_mlp"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {v}")
        return self

    def generator(self, disjoint: bool = False) -> GeneratorConfig:
        return GeneratorConfig(
            object_count=self.object_count,
            view_extent=self.view_extent,
            covisible_fraction=self.covisible_fraction,
            feature_noise=self.feature_noise,
            distractor_rate=self.distractor_rate,
            distractor_similarity=self.distractor_similarity,
            disjoint=disjoint,
            feature_dim=self.d_f,
            view_feature_dims=self.view_feature_dims,
            view_feature_weight=self.view_feature_weight,
            fov_deg=self.fov_deg,
            arena=self.arena,
        )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        known = {f.name for f in fields(RunConfig)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return RunConfig(**d).validate()


def _parse_value(text: str):
    t = text.strip()
    for caster in (int, float):
        try:
            return caster(t)
        except ValueError:
            pass
    if t.lower() in ("true", "false"):
        return t.lower() == "true"
    return t


def parse_config_text(text: str) -> dict:
    out = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = _parse_value(val)
    return out


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(parse_config_text(text))
