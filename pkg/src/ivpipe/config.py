"""Pipeline configuration: per-stage sections, parsing, dumping, validation.

The config file is a flat key = value format inside [stage] sections.
Values are parsed as booleans (true/false), integers, floats or strings
(quotes optional). Every default is printable via `ivpipe config --dump`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class FrontendSection:
    feature_type: str = "mfcc"          # mfcc | plp | fusion
    sample_rate: int = 8000
    mfcc_num_ceps: int = 20
    mfcc_num_filters: int = 23
    mfcc_include_deltas: bool = False   # desk variant; full scale turns this on
    plp_num_ceps: int = 13
    plp_lpc_order: int = 12
    plp_include_deltas: bool = False
    cmvn_window: float = 3.0
    window: str = "hamming"
    sad_num_filters: int = 40
    sad_context: int = 7
    sad_self_loop: float = 0.99
    sad_speech_prior: float = 0.5
    sad_temperature: float = 1.0


@dataclass
class GmmSection:
    components: int = 64
    iters: int = 8
    seed: int = 100
    covariance_floor_scale: float = 1e-4
    min_occupancy: float = 1e-3


@dataclass
class IvectorSection:
    rank: int = 60
    iters: int = 5
    seed: int = 200
    stats_scale: float = 0.33


@dataclass
class TransformsSection:
    nda_k: int = 10
    nda_out_dim: int = 40
    use_lda_instead_of_nda: bool = False
    shortcomp_enabled: bool = True
    shortcomp_out_dim: int = 39
    shortcomp_excerpt_seconds: float = 10.0
    shortcomp_seed: int = 300
    lnlda_enabled: bool = True
    lnlda_out_dim: int = 30
    center_with_dev: bool = True        # centering/whitening use training + dev
    wccn_after_projection: bool = True


@dataclass
class PldaSection:
    factors: int = 10
    iters: int = 10
    seed: int = 400
    alpha: float = 0.10
    adapt_enabled: bool = True
    interpolate_mean: bool = False
    enrol_segments: int = 1             # 1 or 3


@dataclass
class PostprocessSection:
    snorm_mode: str = "sum"
    qmf_enabled: bool = True
    qmf_coeff: float = -0.2
    p_tar: float = 0.0001
    c_miss: float = 1.0
    c_fa: float = 1.0


@dataclass
class PipelineConfig:
    frontend: FrontendSection = field(default_factory=FrontendSection)
    gmm: GmmSection = field(default_factory=GmmSection)
    ivector: IvectorSection = field(default_factory=IvectorSection)
    transforms: TransformsSection = field(default_factory=TransformsSection)
    plda: PldaSection = field(default_factory=PldaSection)
    postprocess: PostprocessSection = field(default_factory=PostprocessSection)

    def validate(self) -> "PipelineConfig":
        t = self.transforms
        ladder = [self.ivector.rank, t.nda_out_dim]
        if t.shortcomp_enabled:
            ladder.append(t.shortcomp_out_dim)
        # the final projection runs as plain LDA when lnlda is disabled
        ladder.append(t.lnlda_out_dim)
        for i in range(1, len(ladder)):
            if ladder[i] > ladder[i - 1]:
                raise ConfigError(
                    f"dimension ladder must not grow: {ladder[i - 1]} -> {ladder[i]}"
                )
        if min(ladder) < 1:
            raise ConfigError(f"dimension ladder has a non-positive entry: {ladder}")
        if self.ivector.rank > self.gmm.components * feature_dim(self):
            raise ConfigError(
                f"i-vector rank {self.ivector.rank} exceeds supervector size "
                f"{self.gmm.components} x {feature_dim(self)}"
            )
        if self.plda.factors > ladder[-1]:
            raise ConfigError(
                f"speaker factors {self.plda.factors} exceed final dimension {ladder[-1]}"
            )
        if self.plda.enrol_segments not in (1, 3):
            raise ConfigError("enrol_segments must be 1 or 3")
        if self.frontend.feature_type not in ("mfcc", "plp", "fusion"):
            raise ConfigError(f"unknown feature_type '{self.frontend.feature_type}'")
        if not 0.0 < self.postprocess.p_tar < 1.0:
            raise ConfigError("p_tar must lie in (0, 1)")
        if not 0.0 <= self.plda.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        return self


def feature_dim(config: PipelineConfig, feature_type: str | None = None) -> int:
    ft = feature_type or config.frontend.feature_type
    f = config.frontend
    if ft == "mfcc":
        return f.mfcc_num_ceps * (3 if f.mfcc_include_deltas else 1)
    if ft == "plp":
        return f.plp_num_ceps * (3 if f.plp_include_deltas else 1)
    raise ConfigError(f"no single feature dimension for type '{ft}'")


def full_scale_config() -> PipelineConfig:
    """The published-scale configuration: 2048 Gaussians, 600-dim i-vectors,
    600 -> 400 -> 390 -> 300 ladder, 200 speaker factors."""
    cfg = PipelineConfig()
    cfg.frontend.mfcc_include_deltas = True
    cfg.frontend.plp_include_deltas = True
    cfg.gmm.components = 2048
    cfg.ivector.rank = 600
    cfg.transforms.nda_out_dim = 400
    cfg.transforms.shortcomp_out_dim = 390
    cfg.transforms.lnlda_out_dim = 300
    cfg.plda.factors = 200
    return cfg


_SECTIONS = {f.name: f.type for f in fields(PipelineConfig)}


def parse_value(raw: str):
    raw = raw.strip()
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    if (raw.startswith('"') and raw.endswith('"')) or (raw.startswith("'") and raw.endswith("'")):
        return raw[1:-1]
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def _coerce(value, target_type):
    if target_type is float and isinstance(value, int):
        return float(value)
    return value


def parse_config_text(text: str, config: PipelineConfig | None = None) -> PipelineConfig:
    config = config if config is not None else PipelineConfig()
    section_name = None
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section_name = line[1:-1].strip()
            if not hasattr(config, section_name):
                raise ConfigError(f"line {ln}: unknown section [{section_name}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value', got {line!r}")
        if section_name is None:
            raise ConfigError(f"line {ln}: key outside any [section]")
        key, raw = (part.strip() for part in line.split("=", 1))
        section = getattr(config, section_name)
        if not any(f.name == key for f in fields(section)):
            raise ConfigError(f"line {ln}: unknown key '{key}' in [{section_name}]")
        current = getattr(section, key)
        value = _coerce(parse_value(raw), type(current))
        if not isinstance(value, type(current)) and not (
            isinstance(current, float) and isinstance(value, (int, float))
        ):
            raise ConfigError(
                f"line {ln}: key '{key}' expects {type(current).__name__}, got {value!r}"
            )
        setattr(section, key, float(value) if isinstance(current, float) else value)
    return config


def load_config(path) -> PipelineConfig:
    return parse_config_text(Path(path).read_text()).validate()


def dump_config(config: PipelineConfig) -> str:
    lines = []
    for section_field in fields(config):
        section = getattr(config, section_field.name)
        lines.append(f"[{section_field.name}]")
        for f in fields(section):
            value = getattr(section, f.name)
            if isinstance(value, bool):
                rendered = "true" if value else "false"
            elif isinstance(value, str):
                rendered = f'"{value}"'
            else:
                rendered = repr(value)
            lines.append(f"{f.name} = {rendered}")
        lines.append("")
    return "\n".join(lines)


def config_to_dict(config: PipelineConfig) -> dict:
    return dataclasses.asdict(config)
