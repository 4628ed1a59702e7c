"""Pipeline configuration: flat key = value files with env overrides.

Config files hold one ``key = value`` per line; blank lines and ``#``
comments are ignored.  Any key can also be overridden through the
environment using the ``DEFECTGEN_`` prefix (e.g. ``DEFECTGEN_SIGMA=0.5``),
which is applied after the file and before CLI flags.
"""

import os
from dataclasses import dataclass, fields

from .denoiser import ArchConfig, LatentCodec
from .errors import ConfigError
from .metrics import FeatureConfig
from .prompt import GppConfig
from .schedule import NoiseSchedule, make_linear_schedule

ENV_PREFIX = "DEFECTGEN_"


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("on", "true", "1", "yes"):
        return True
    if t in ("off", "false", "0", "no"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


@dataclass
class PipelineConfig:
    """Every tunable of the pipeline, with desk-scale defaults."""

    # conditioning perturbation
    sigma: float = 1.0
    embed_dim: int = 16
    embed_seed: int = 0
    # localized noise
    a_min: float = 0.0
    a_max: float = 0.6
    t_min: float = 0.6
    # schedule
    ddim_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # training
    train_steps: int = 500
    lr: float = 1e-3
    batch: int = 4
    weight_decay: float = 1e-4
    train_seed: int = 0
    # model
    hidden: int = 16
    blocks: int = 2
    time_freqs: int = 4
    codec: str = "identity"
    codec_factor: int = 2
    # pipeline
    image_size: int = 0
    cama: bool = True
    retry_limit: int = 3
    patch_size: int = 7
    # features / metrics
    feature_grid: int = 2
    feature_bins: int = 6
    feature_scales: tuple[int, ...] = (1, 2)

    def make_schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.ddim_steps, self.beta_start, self.beta_end)

    def make_gpp(self) -> GppConfig:
        return GppConfig(sigma=self.sigma)

    def make_codec(self) -> LatentCodec:
        if self.codec == "identity":
            return LatentCodec()
        if self.codec == "pool":
            return LatentCodec(mode="pool", factor=self.codec_factor)
        raise ConfigError(f"unknown codec {self.codec!r} (use identity or pool)")

    def make_arch(self, latent_channels: int) -> ArchConfig:
        return ArchConfig(
            latent_channels=latent_channels,
            hidden=self.hidden,
            blocks=self.blocks,
            embed_dim=self.embed_dim,
            time_freqs=self.time_freqs,
            num_steps=self.ddim_steps,
        )

    def make_feature_config(self) -> FeatureConfig:
        return FeatureConfig(grid=self.feature_grid, bins=self.feature_bins,
                             scales=self.feature_scales)

    @property
    def schedule_id(self) -> str:
        return f"linear:{self.ddim_steps}:{self.beta_start:g}:{self.beta_end:g}"


_PARSERS = {
    float: float,
    int: int,
    str: str,
    bool: _parse_bool,
    tuple[int, ...]: _parse_int_tuple,
}


def _field_parsers() -> dict:
    return {f.name: _PARSERS[f.type] for f in fields(PipelineConfig)}


def load_config(path=None, overrides: dict | None = None, env: dict | None = None) -> PipelineConfig:
    """Build a config from an optional file, the environment, and
    explicit overrides (in that order of precedence, lowest first)."""
    parsers = _field_parsers()
    values: dict = {}
    if path is not None:
        try:
            text = open(path).read()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in parsers:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                values[key] = parsers[key](val.strip())
            except ValueError as e:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {e}") from e
    env = os.environ if env is None else env
    for key, parser in parsers.items():
        env_key = ENV_PREFIX + key.upper()
        if env_key in env:
            try:
                values[key] = parser(env[env_key])
            except ValueError as e:
                raise ConfigError(f"env {env_key}: {e}") from e
    if overrides:
        for key, val in overrides.items():
            if key not in parsers:
                raise ConfigError(f"unknown config key {key!r}")
            if val is not None:
                values[key] = val
    return PipelineConfig(**values)
