"""Run configuration and deterministic seed streams.

One YAML file with per-stage sections drives the whole pipeline; every
field has a default matching the bundled linear benchmark. Unknown keys
are rejected so typos fail loudly.

Seed discipline: a single master seed is split into named streams via
``numpy`` SeedSequence spawn keys, so plant noise, data shuffling, model
init, and campaign replicates never share a stream. Changing how one
stage consumes randomness leaves the other stages' draws untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
import yaml


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


# Fixed stream identifiers; appending new names is safe, reordering is not.
STREAMS = {"data": 0, "train": 1, "plant": 2, "campaign": 3}


def seed_stream(master_seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named stream of the master seed.

    ``extra`` indices open sub-streams (e.g. one per campaign replicate).
    """
    if name not in STREAMS:
        raise ConfigError(f"unknown seed stream {name!r}")
    key = (STREAMS[name],) + tuple(int(e) for e in extra)
    return np.random.default_rng(
        np.random.SeedSequence(entropy=int(master_seed), spawn_key=key)
    )


def _from_dict(cls, data: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in '{where}' section")
    return cls(**data)


@dataclass
class PlantConfig:
    kind: str = "lti"  # lti | saturating
    a: list = field(default_factory=lambda: [[0.3, 0.1], [0.1, 0.2]])
    b: list = field(default_factory=lambda: [0.5, 1.0])
    sigma_eps: float = 0.1
    x0: list = field(default_factory=lambda: [0.0, 0.0])
    saturation: float = 5.0

    def __post_init__(self):
        if self.kind not in ("lti", "saturating"):
            raise ConfigError(f"unknown plant kind {self.kind!r}")


@dataclass
class DataConfig:
    n_samples: int = 50_000
    u_low: float = -5.0
    u_high: float = 5.0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigError("data.n_samples must be >= 1")
        if not self.u_low < self.u_high:
            raise ConfigError("data.u_low must be < data.u_high")


@dataclass
class ForecasterSection:
    window: int = 10
    horizon: int = 10
    quantile_levels: list = field(default_factory=lambda: [0.05, 0.5, 0.95])
    encoder_layers: int = 1
    decoder_layers: int = 1
    hidden_size: int = 128
    decoder_hidden: int = 32
    decoder_output_dim: int = 16
    dropout: float = 0.2
    layer_norm: bool = True


@dataclass
class TrainingSection:
    learning_rate: float = 0.001
    weight_decay: float = 0.002
    lr_step_size: int = 10
    lr_decay: float = 0.95
    epochs: int = 200
    batch_size: int = 64
    shuffle: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("training.learning_rate must be > 0")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("training.lr_decay must be in (0, 1]")
        if self.batch_size < 1:
            raise ConfigError("training.batch_size must be >= 1")


@dataclass
class PenaltySection:
    mu0: float = 1.0
    growth: float = 2.0
    max_outer: int = 8
    max_inner: int = 100
    grad_tol: float = 1.0e-5
    constraint_tol: float = 1.0e-3
    lbfgs_memory: int = 10

    def __post_init__(self):
        if self.growth <= 1:
            raise ConfigError("penalty.growth must be > 1")
        if self.grad_tol <= 0 or self.constraint_tol <= 0:
            raise ConfigError("penalty tolerances must be > 0")


@dataclass
class MpcSection:
    horizon: int = 10
    q: list = field(default_factory=lambda: [[1.0]])
    r: list = field(default_factory=lambda: [[1.0]])
    tracked_dims: list = field(default_factory=lambda: [0])
    state_lower: list = field(default_factory=lambda: [-2.0, -3.5])
    state_upper: list = field(default_factory=lambda: [2.5, 3.5])
    input_bounds: list = field(default_factory=lambda: [-5.0, 5.0])
    ancillary_gain: list = field(default_factory=lambda: [-0.0621, -0.2027])
    tighten_inputs: bool = True
    penalize_increments: bool = False
    startup_input: float = 0.0
    penalty: PenaltySection = field(default_factory=PenaltySection)


@dataclass
class ReferenceSection:
    kind: str = "steps"  # steps | constant
    high: float = 2.5
    low: float = -2.0
    dwell: int = 40
    value: float = 0.0  # constant reference only

    def build(self, length: int) -> np.ndarray:
        if self.kind == "constant":
            return np.full(length, self.value)
        if self.kind != "steps":
            raise ConfigError(f"unknown reference kind {self.kind!r}")
        levels = [self.high, self.low]
        ref = np.empty(length)
        for start in range(0, length, self.dwell):
            ref[start:start + self.dwell] = levels[(start // self.dwell) % 2]
        return ref


@dataclass
class CampaignSection:
    controllers: list = field(default_factory=lambda: ["nominal", "robust", "tube"])
    replicates: int = 200
    episode_length: int = 160
    reference: ReferenceSection = field(default_factory=ReferenceSection)
    tube_confidence: float = 0.95
    workers: int = 1


@dataclass
class RunConfig:
    master_seed: int = 0
    plant: PlantConfig = field(default_factory=PlantConfig)
    data: DataConfig = field(default_factory=DataConfig)
    forecaster: ForecasterSection = field(default_factory=ForecasterSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    mpc: MpcSection = field(default_factory=MpcSection)
    campaign: CampaignSection = field(default_factory=CampaignSection)


_SECTION_TYPES = {
    "plant": PlantConfig,
    "data": DataConfig,
    "forecaster": ForecasterSection,
    "training": TrainingSection,
    "mpc": MpcSection,
    "campaign": CampaignSection,
}


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(raw) - set(_SECTION_TYPES) - {"master_seed"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}")
    kwargs = {}
    if "master_seed" in raw:
        kwargs["master_seed"] = int(raw["master_seed"])
    for name, cls in _SECTION_TYPES.items():
        if name not in raw:
            continue
        section = dict(raw[name])
        if name == "mpc" and "penalty" in section:
            section["penalty"] = _from_dict(
                PenaltySection, dict(section["penalty"]), "mpc.penalty")
        if name == "campaign" and "reference" in section:
            section["reference"] = _from_dict(
                ReferenceSection, dict(section["reference"]), "campaign.reference")
        kwargs[name] = _from_dict(cls, section, name)
    return RunConfig(**kwargs)


def load_config(path=None) -> RunConfig:
    """Load a YAML config; None gives the benchmark defaults."""
    if path is None:
        return RunConfig()
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    return config_from_dict(raw if raw is not None else {})
