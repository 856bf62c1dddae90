"""
Config Manager - Versioned experiment configuration
Loads config.json into a typed ExperimentConfig tree, rejects unknown keys and derives every seed stream
"""

import collections.abc
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, ClassVar, Dict, Optional, Tuple, Union, get_args, get_origin, get_type_hints

import aiofiles
import numpy as np

from cevae import CevaeSearchSpace, CevaeSpec, build_cevae_spec
from data_model import SemConfig, build_sem_config
from error_handler import ConfigurationError, get_error_handler
from fair_trainer import BaselineSearchSpace, FairTrainConfig
from fairness_metrics import UtilitySpec

SCHEMA_VERSION = 1
DATASET_SOURCES = ("synthetic", "file")


def derive_seed(master_seed: int, stage: str, index: int = 0) -> int:
    """Independent stream per (master seed, stage name, index)"""
    stage_code = int.from_bytes(stage.encode("utf-8"), "little")
    state = np.random.SeedSequence([int(master_seed), stage_code, int(index)]).generate_state(1, np.uint64)
    return int(state[0] >> np.uint64(1))


@dataclass
class SemSection:
    latent_dim: int = 8
    feature_dim: int = 50
    group_count: int = 2
    group_marginals: Optional[Tuple[float, ...]] = None
    feature_bias: float = -2.0
    latent_feature_scale: float = 1.5
    group_feature_scale: float = 0.5
    latent_outcome_scale: float = 1.5
    group_outcome_effects: Optional[Tuple[float, ...]] = None
    outcome_bias: float = 0.0


@dataclass
class DatasetSection:
    source: str = "synthetic"
    path: Optional[str] = None
    samples: int = 2000
    sem: SemSection = field(default_factory=SemSection)

    _nested: ClassVar[Dict[str, type]] = {"sem": SemSection}


@dataclass
class SplitSection:
    fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)


@dataclass
class CevaeSearchSection:
    """Empty lists fall back to the fixed architecture in the parent section"""
    iterations: int = 1
    hidden_dims: Tuple[int, ...] = ()
    num_hidden_layers: Tuple[int, ...] = ()
    dropout_probs: Tuple[float, ...] = ()
    layer_norm: Tuple[bool, ...] = ()
    group_embedding_dims: Tuple[int, ...] = ()
    learning_rates: Tuple[float, ...] = ()


@dataclass
class CevaeSection:
    latent_dim: int = 128
    group_embedding_dim: int = 64
    hidden_dim: int = 128
    num_hidden_layers: int = 1
    dropout_prob: float = 0.0
    layer_norm: bool = False
    lambda_x: float = 1000.0
    lambda_y: float = 10.0
    lambda_mmd: float = 10000.0
    lambda_mmd_group: float = 1000.0
    bandwidth: Optional[float] = None
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 512
    patience: Optional[int] = None
    search: CevaeSearchSection = field(default_factory=CevaeSearchSection)

    _nested: ClassVar[Dict[str, type]] = {"search": CevaeSearchSection}

    def spec(self, feature_dim: int, group_count: int) -> CevaeSpec:
        return build_cevae_spec(
            feature_dim=feature_dim, group_count=group_count, latent_dim=self.latent_dim,
            group_embedding_dim=self.group_embedding_dim, hidden_dim=self.hidden_dim,
            num_hidden_layers=self.num_hidden_layers, dropout_prob=self.dropout_prob, layer_norm=self.layer_norm,
            lambda_x=self.lambda_x, lambda_y=self.lambda_y, lambda_mmd=self.lambda_mmd,
            lambda_mmd_group=self.lambda_mmd_group, bandwidth=self.bandwidth)

    def search_space(self) -> CevaeSearchSpace:
        search = self.search
        return CevaeSearchSpace(
            hidden_dims=search.hidden_dims or (self.hidden_dim,),
            num_hidden_layers=search.num_hidden_layers or (self.num_hidden_layers,),
            dropout_probs=search.dropout_probs or (self.dropout_prob,),
            layer_norm=search.layer_norm or (self.layer_norm,),
            group_embedding_dims=search.group_embedding_dims or (self.group_embedding_dim,),
            learning_rates=search.learning_rates or (self.learning_rate,),
        )


@dataclass
class BaselineSection:
    iterations: int = 20
    epochs: int = 50
    batch_size: int = 512
    patience: Optional[int] = 10
    hidden_dims: Tuple[int, ...] = (128,)
    num_hidden_layers: Tuple[int, ...] = (2, 3)
    dropout_probs: Tuple[float, ...] = (0.5, 0.75)
    layer_norm: Tuple[bool, ...] = (True,)
    learning_rates: Tuple[float, ...] = (1e-5, 1e-4)

    def search_space(self) -> BaselineSearchSpace:
        return BaselineSearchSpace(hidden_dims=self.hidden_dims, num_hidden_layers=self.num_hidden_layers,
                                   dropout_probs=self.dropout_probs, layer_norm=self.layer_norm,
                                   learning_rates=self.learning_rates)


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    output_dir: str = "runs/default"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    split: SplitSection = field(default_factory=SplitSection)
    cevae: CevaeSection = field(default_factory=CevaeSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    fair: FairTrainConfig = field(default_factory=FairTrainConfig)
    utility: UtilitySpec = field(default_factory=UtilitySpec)

    _nested: ClassVar[Dict[str, type]] = {
        "dataset": DatasetSection,
        "split": SplitSection,
        "cevae": CevaeSection,
        "baseline": BaselineSection,
        "fair": FairTrainConfig,
        "utility": UtilitySpec,
    }

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigurationError(f"schema_version must be {SCHEMA_VERSION} (got {self.schema_version})")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigurationError(f"seed must be a nonnegative integer (got {self.seed!r})")
        dataset = self.dataset
        if dataset.source not in DATASET_SOURCES:
            raise ConfigurationError(f"dataset.source must be one of {DATASET_SOURCES} (got '{dataset.source}')")
        if dataset.source == "file" and not dataset.path:
            raise ConfigurationError("dataset.path is required when dataset.source is 'file'")
        if dataset.source == "synthetic":
            if dataset.samples < 1:
                raise ConfigurationError(f"dataset.samples must be >= 1 (got {dataset.samples})")
            self.sem_config().validate()
        fractions = self.split.fractions
        if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
            raise ConfigurationError(f"split.fractions must be 3 nonnegative values summing to 1 (got {list(fractions)})")
        if self.cevae.epochs < 0 or self.cevae.batch_size < 1 or self.cevae.search.iterations < 1:
            raise ConfigurationError("cevae needs epochs >= 0, batch_size >= 1 and search.iterations >= 1")
        if self.baseline.iterations < 1 or self.baseline.epochs < 0 or self.baseline.batch_size < 1:
            raise ConfigurationError("baseline needs iterations >= 1, epochs >= 0 and batch_size >= 1")
        self.fair.validate()
        self.utility.validate()

    def sem_config(self) -> SemConfig:
        """SEM coefficients and the sampling stream come from separate 'generate' seeds"""
        sem = self.dataset.sem
        config = build_sem_config(
            latent_dim=sem.latent_dim, feature_dim=sem.feature_dim, group_count=sem.group_count,
            group_marginals=sem.group_marginals, feature_bias=sem.feature_bias,
            latent_feature_scale=sem.latent_feature_scale, group_feature_scale=sem.group_feature_scale,
            latent_outcome_scale=sem.latent_outcome_scale, group_outcome_effects=sem.group_outcome_effects,
            outcome_bias=sem.outcome_bias, seed=derive_seed(self.seed, "generate", 0))
        return replace(config, seed=derive_seed(self.seed, "generate", 1))

    def to_dict(self) -> Dict[str, Any]:
        return _to_plain(asdict(self))


def _to_plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {key: _to_plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_plain(item) for item in value]
    return value


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


_TYPE_NOUNS = {bool: "boolean", int: "integer", float: "number", str: "string"}


def _describe(hint: Any) -> str:
    origin, args = get_origin(hint), get_args(hint)
    if origin is Union:
        options = [_describe(arg) for arg in args if arg is not type(None)]
        return " or ".join(options) + (" or null" if type(None) in args else "")
    if origin in (tuple, collections.abc.Sequence):
        if not args:
            return "a list"
        count = f"{len(args)} " if origin is tuple and args[-1] is not Ellipsis else ""
        return f"a list of {count}{_TYPE_NOUNS.get(args[0], 'value')}s"
    noun = _TYPE_NOUNS.get(hint, str(hint))
    return f"an {noun}" if noun[0] in "aeiou" else f"a {noun}"


def _matches(value: Any, hint: Any) -> bool:
    origin, args = get_origin(hint), get_args(hint)
    if origin is Union:
        return any(_matches(value, arg) for arg in args)
    if hint is type(None):
        return value is None
    if origin in (tuple, collections.abc.Sequence):
        if not isinstance(value, tuple):
            return False
        if origin is tuple and args and args[-1] is not Ellipsis:
            return len(value) == len(args) and all(_matches(v, a) for v, a in zip(value, args))
        return not args or all(_matches(v, args[0]) for v in value)
    if hint is bool:
        return isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if hint is str:
        return isinstance(value, str)
    return True


def _from_dict(cls: type, data: Any, path: str = "") -> Any:
    """Build a config dataclass, naming the dotted path of any unknown or wrongly typed key"""
    if not isinstance(data, dict):
        raise ConfigurationError(f"Config section '{path or '<root>'}' must be a JSON object")
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigurationError(f"Unknown config key '{_join(path, key)}'")
    hints = get_type_hints(cls)
    nested = getattr(cls, "_nested", {})
    kwargs = {}
    for key, value in data.items():
        if key in nested:
            value = _from_dict(nested[key], value, _join(path, key))
        else:
            if isinstance(value, list):
                value = tuple(value)
            if not _matches(value, hints[key]):
                raise ConfigurationError(f"Config key '{_join(path, key)}' must be {_describe(hints[key])} "
                                         f"(got {json.dumps(_to_plain(value))})")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigurationError(f"Invalid config section '{path or '<root>'}': {e}") from e


def parse_config(data: Dict[str, Any]) -> ExperimentConfig:
    config = _from_dict(ExperimentConfig, data)
    config.validate()
    return config


class ConfigManager:
    def __init__(self, config_path: str = "config.json"):
        self.config_path = Path(config_path)
        self.config: Optional[ExperimentConfig] = None
        self.error_handler = get_error_handler()

    async def initialize(self, seed: Optional[int] = None, output_dir: Optional[str] = None) -> ExperimentConfig:
        """Load and validate; command-line seed and output directory override the file"""
        await self._load_config()
        overrides: Dict[str, Any] = {}
        if seed is not None:
            overrides["seed"] = seed
        if output_dir is not None:
            overrides["output_dir"] = output_dir
        if overrides:
            self.config = replace(self.config, **overrides)
            self.config.validate()
        return self.config

    async def _load_config(self) -> None:
        if not self.config_path.exists():
            raise ConfigurationError(f"Config file not found: {self.config_path}")
        async with aiofiles.open(self.config_path, 'r') as f:
            content = await f.read()
        try:
            data = json.loads(content)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Config {self.config_path} is not valid JSON: {e}") from e
        self.config = parse_config(data)
        self.error_handler.log_info(f"Loaded config {self.config_path} (schema v{self.config.schema_version})")

    def get_config(self) -> ExperimentConfig:
        if self.config is None:
            raise ConfigurationError("Config not loaded; call initialize() first")
        return self.config

    def config_digest_payload(self) -> str:
        """Canonical JSON of the effective config, stored next to the artifacts"""
        return json.dumps(self.get_config().to_dict(), indent=2, sort_keys=True) + "\n"
