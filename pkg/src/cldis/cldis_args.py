"""
Module containing the cldis command line argument definitions and the
plain-text ``key=value`` run configuration built from them.
"""
import logging
import os
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

from transformers import HfArgumentParser

from .cldis_errors import ConfigError

logger = logging.getLogger(__name__)

CONFIG_FILE_NAME = 'config.txt'

cldis_metrics = ['flow', 'factor_vae', 'dci', 'locality']


def _to_dict(args) -> Dict[str, Any]:
    # adapted from transformers.TrainingArguments.to_dict()
    # filter out fields that are defined as field(init=False)
    d = {f.name: getattr(args, f.name) for f in fields(args) if f.init}
    for k, v in d.items():
        if isinstance(v, Enum):
            d[k] = v.value
    return d


@dataclass
class DataArguments:
    """
    Arguments describing the procedurally generated factor dataset.
    See all possible arguments by passing the ``--help`` flag to this script.
    """
    data_dir: Optional[str] = field(
        default=None, metadata={"help": "An exported dataset directory to train on. If not given, the dataset is generated in memory from the arguments below."}
    )
    cardinalities: List[int] = field(
        default_factory=lambda: [3, 4, 8, 8, 4],
        metadata={"help": "Cardinalities of the shape, scale, pos_x, pos_y and color factors, in that order"}
    )
    channels: int = field(
        default=3, metadata={"help": "Number of image channels (1 or 3)", "choices": [1, 3]}
    )
    image_height: int = field(
        default=32, metadata={"help": "Image height in pixels"}
    )
    image_width: int = field(
        default=32, metadata={"help": "Image width in pixels"}
    )
    num_samples: int = field(
        default=0, metadata={"help": "Draw this many factor tuples uniformly at random; 0 enumerates the full factor grid"}
    )
    data_seed: int = field(
        default=0, metadata={"help": "Seed for sampled dataset generation"}
    )

    def to_dict(self):
        return _to_dict(self)


@dataclass
class ModelArguments:
    """
    Arguments pertaining to the diffusion autoencoder, the co-pilot VAE,
    the closed-loop coupling and the direction navigator.
    """
    latent_dim: int = field(
        default=32, metadata={"help": "Dimension of the semantic latent (the VAE latent has the same size)"}
    )
    timesteps: int = field(
        default=1000, metadata={"help": "Number of diffusion timesteps"}
    )
    beta_start: float = field(
        default=1e-4, metadata={"help": "First value of the linear noise schedule"}
    )
    beta_end: float = field(
        default=0.02, metadata={"help": "Last value of the linear noise schedule"}
    )
    unet_channels: int = field(
        default=32, metadata={"help": "Base channel count of the conditional denoiser"}
    )
    encoder_channels: int = field(
        default=32, metadata={"help": "Base channel count of the semantic and VAE encoders"}
    )
    vae_beta: float = field(
        default=4.0, metadata={"help": "Weight of the KL term of the VAE objective"}
    )
    c_base: float = field(
        default=10.0, metadata={"help": "Base capacity of the dynamic capacity controller"}
    )
    c_max: float = field(
        default=25.0, metadata={"help": "Maximum capacity of the dynamic capacity controller"}
    )
    lambda_dt: float = field(
        default=1.0, metadata={"help": "Weight of the latent distillation loss in the closed-loop phase"}
    )
    lambda_fd: float = field(
        default=1.0, metadata={"help": "Weight of the capacity feedback loss in the closed-loop phase"}
    )
    num_directions: int = field(
        default=5, metadata={"help": "Number of latent directions to discover"}
    )
    lambda_reg: float = field(
        default=0.25, metadata={"help": "Weight of the shift magnitude regression term of the navigation loss"}
    )
    sample_steps: int = field(
        default=50, metadata={"help": "Sampler steps for reconstructions, traversals and evaluation"}
    )
    navigation_sample_steps: int = field(
        default=20, metadata={"help": "Sampler steps used to generate navigation training pairs"}
    )

    def to_dict(self):
        return _to_dict(self)


@dataclass
class CldisTrainingArguments:
    """
    Optimizer and bookkeeping arguments shared by the three training phases.
    """
    out: str = field(
        default='runs/default', metadata={"help": "The run directory all artifacts are written to"}
    )
    seed: int = field(
        default=42, metadata={"help": "Random seed for initialization, batching and noise"}
    )
    learning_rate: float = field(
        default=2e-4, metadata={"help": "AdamW learning rate for phases 1 and 2"}
    )
    navigation_learning_rate: float = field(
        default=1e-3, metadata={"help": "AdamW learning rate for the direction matrix and shift predictor"}
    )
    batch_size: int = field(
        default=32, metadata={"help": "Training batch size"}
    )
    phase1_steps: int = field(
        default=2000, metadata={"help": "Total optimizer steps of the pre-training phase"}
    )
    phase2_steps: int = field(
        default=4000, metadata={"help": "Global step at which the closed-loop phase stops (continues the phase-1 step count)"}
    )
    phase3_steps: int = field(
        default=1000, metadata={"help": "Optimizer steps of the direction discovery phase"}
    )
    navigation_source: str = field(
        default='phase2', metadata={"help": "The checkpoint whose frozen model phase 3 learns directions on",
                                    "choices": ['phase1', 'phase2']}
    )
    log_every: int = field(
        default=100, metadata={"help": "Log a progress line every this many steps"}
    )
    checkpoint_every: int = field(
        default=0, metadata={"help": "Also checkpoint every this many steps during phases 1 and 2 (0 only checkpoints at the end)"}
    )
    device: str = field(
        default='cpu', metadata={"help": "Torch device to train on"}
    )
    resume: Optional[str] = field(
        default=None, metadata={"help": "A checkpoint directory to resume training from"}
    )
    overwrite: bool = field(
        default=False, metadata={"help": "Allow writing into an existing non-empty output directory"}
    )

    def to_dict(self):
        return _to_dict(self)


@dataclass
class EvaluationArguments:
    """
    Arguments for the disentanglement evaluation suite.
    """
    metrics: List[str] = field(
        default_factory=lambda: list(cldis_metrics),
        metadata={"help": "Metrics to compute", "choices": cldis_metrics}
    )
    pairs: int = field(
        default=100, metadata={"help": "Number of shift pairs scored by the flow metric"}
    )
    threshold: float = field(
        default=0.5, metadata={"help": "Normalized flow magnitude threshold of the flow-ratio metric"}
    )
    curve_thresholds: List[float] = field(
        default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        metadata={"help": "Thresholds of the score-vs-threshold curve"}
    )
    shift_magnitude: float = field(
        default=2.0, metadata={"help": "Latent shift magnitude used to build evaluation pairs and heatmaps"}
    )
    factor_vae_votes: int = field(
        default=800, metadata={"help": "Number of training votes of the FactorVAE score (half as many are held out)"}
    )
    factor_vae_group_size: int = field(
        default=64, metadata={"help": "Group size of one FactorVAE score vote"}
    )
    dci_samples: int = field(
        default=1000, metadata={"help": "Number of dataset samples the DCI regressors are fit on"}
    )
    eval_seed: int = field(
        default=0, metadata={"help": "Seed for evaluation sampling"}
    )
    checkpoint: str = field(
        default='phase2', metadata={"help": "Which diffusion autoencoder to evaluate", "choices": ['phase1', 'phase2']}
    )
    encoder: str = field(
        default='model', metadata={"help": "Encoder scored by the factor metrics; 'oracle' returns the true factors", "choices": ['model', 'oracle']}
    )
    x_t_mode: str = field(
        default='inverted', metadata={"help": "How the shared starting noise of shifted generations is chosen", "choices": ['inverted', 'noise']}
    )

    def to_dict(self):
        return _to_dict(self)


@dataclass
class TrainCommandArguments:
    phase: int = field(
        default=1, metadata={"help": "Training phase: 1 pre-training, 2 closed loop, 3 direction discovery", "choices": [1, 2, 3]}
    )


@dataclass
class GenerateCommandArguments:
    data_out: Optional[str] = field(
        default=None, metadata={"help": "Dataset output directory (defaults to <out>/dataset)"}
    )


@dataclass
class TraverseCommandArguments:
    image_index: int = field(
        default=0, metadata={"help": "Index of the dataset image to traverse from"}
    )
    image_file: Optional[str] = field(
        default=None, metadata={"help": "A PNG image to traverse from instead of a dataset image"}
    )
    direction: int = field(
        default=0, metadata={"help": "Index of the learned direction to traverse"}
    )
    magnitudes: List[float] = field(
        default_factory=lambda: [-3.0, -1.5, 0.0, 1.5, 3.0],
        metadata={"help": "Shift magnitudes, one grid row each"}
    )
    grid_name: str = field(
        default='traversal.png', metadata={"help": "File name of the grid written into the run directory"}
    )


@dataclass
class SweepCommandArguments:
    capacity_grid: List[str] = field(
        default_factory=lambda: ['2,5', '10,25'],
        metadata={"help": "Capacity bounds to sweep, each written as c_base,c_max"}
    )
    seeds: List[int] = field(
        default_factory=lambda: [0, 1, 2],
        metadata={"help": "Seeds every configuration is trained with"}
    )

    def parsed_grid(self) -> List[Tuple[float, float]]:
        grid = []
        for item in self.capacity_grid:
            try:
                c_base, c_max = (float(part) for part in item.split(','))
            except ValueError:
                raise ConfigError(f"Capacity grid entry {item!r} is not of the form c_base,c_max")
            grid.append((c_base, c_max))
        return grid


@dataclass
class RunConfig:
    """
    The resolved configuration of a run: the four argument groups every
    command shares. It is written verbatim as ``config.txt`` into each run
    directory and can be read back with :meth:`from_file`.
    """
    data: DataArguments = field(default_factory=DataArguments)
    model: ModelArguments = field(default_factory=ModelArguments)
    training: CldisTrainingArguments = field(default_factory=CldisTrainingArguments)
    evaluation: EvaluationArguments = field(default_factory=EvaluationArguments)

    def groups(self):
        return (self.data, self.model, self.training, self.evaluation)

    def to_entries(self) -> Dict[str, Any]:
        entries = {}
        for group in self.groups():
            entries.update(group.to_dict())
        return entries

    def write(self, directory: str) -> str:
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, CONFIG_FILE_NAME)
        with open(path, 'w') as writer:
            for key, value in self.to_entries().items():
                if value is None:
                    continue
                writer.write("%s=%s\n" % (key, format_config_value(value)))
        return path

    @classmethod
    def from_file(cls, path: str) -> 'RunConfig':
        parser = HfArgumentParser(RUN_CONFIG_GROUPS)
        args = config_file_to_args(path, parser)
        data, model, training, evaluation = parser.parse_args_into_dataclasses(args=args)
        return cls(data, model, training, evaluation)


RUN_CONFIG_GROUPS = (DataArguments, ModelArguments, CldisTrainingArguments, EvaluationArguments)


def format_config_value(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return ' '.join(format_config_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config_file(path: str) -> Dict[str, str]:
    """
    Read a plain-text ``key=value`` config file. Lines starting with ``#`` are
    comments; list values are whitespace-separated.

    :raises ConfigError: if the file is missing or a line cannot be parsed
    """
    if not os.path.isfile(path):
        raise ConfigError(f"Config file {path} does not exist")
    entries = {}
    with open(path) as reader:
        for line_no, line in enumerate(reader, start=1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            if '=' not in line:
                raise ConfigError(f"{path}:{line_no}: expected key=value, got {line!r}")
            key, value = line.split('=', 1)
            entries[key.strip()] = value.strip()
    return entries


def _known_keys(parser: HfArgumentParser) -> Dict[str, Any]:
    return {f.name: f for dtype in parser.dataclass_types for f in fields(dtype) if f.init}


def config_file_to_args(path: str, parser: HfArgumentParser) -> List[str]:
    """
    Turn a config file into command line arguments for ``parser``.

    :raises ConfigError: naming the first key no argument group knows
    """
    known = _known_keys(parser)
    args = []
    for key, value in read_config_file(path).items():
        if key not in known:
            raise ConfigError(f"{path}: unknown configuration key {key!r}")
        args.append('--' + key)
        args.extend(value.split())
    return args


def split_config_flag(argv: Sequence[str]) -> Tuple[Optional[str], List[str]]:
    """Remove ``--config <file>`` (or ``--config=<file>``) from ``argv``."""
    remaining = []
    config_path = None
    i = 0
    while i < len(argv):
        arg = argv[i]
        if arg == '--config':
            if i + 1 >= len(argv):
                raise ConfigError("--config expects a file path")
            config_path = argv[i + 1]
            i += 2
            continue
        if arg.startswith('--config='):
            config_path = arg.split('=', 1)[1]
        else:
            remaining.append(arg)
        i += 1
    return config_path, remaining


def parse_command_args(dataclass_types: Sequence[type], argv: Sequence[str]) -> Tuple[Any, ...]:
    """
    Parse ``argv`` into the given argument groups. Values from a ``--config``
    file are applied first and flags given on the command line override them.

    :param dataclass_types: the argument groups of the command
    :param argv: the command line without the program and verb
    :return: one populated dataclass per group
    """
    parser = HfArgumentParser(tuple(dataclass_types))
    config_path, remaining = split_config_flag(argv)
    args = config_file_to_args(config_path, parser) if config_path else []
    try:
        return tuple(parser.parse_args_into_dataclasses(args=args + list(remaining)))
    except SystemExit as e:
        if e.code in (0, None):
            raise
        raise ConfigError("Invalid command line arguments (see usage above)") from e
    except ValueError as e:
        raise ConfigError(str(e)) from e


def validate_run_config(config: RunConfig) -> None:
    """
    Check cross-field constraints that argparse cannot express.

    :raises ConfigError: on the first violated constraint
    """
    model, training, data = config.model, config.training, config.data
    if not 0 < model.beta_start <= model.beta_end < 1:
        raise ConfigError("Noise schedule requires 0 < beta_start <= beta_end < 1")
    if not 0 < model.c_base <= model.c_max:
        raise ConfigError("Capacity bounds require 0 < c_base <= c_max")
    if model.num_directions > model.latent_dim:
        raise ConfigError("num_directions cannot exceed latent_dim")
    if model.vae_beta <= 0:
        raise ConfigError("vae_beta must be positive")
    if len(data.cardinalities) != 5:
        raise ConfigError("cardinalities must list the shape, scale, pos_x, pos_y and color factors")
    if training.batch_size < 1 or training.log_every < 1:
        raise ConfigError("batch_size and log_every must be positive")
    if training.navigation_source not in ('phase1', 'phase2'):
        raise ConfigError("navigation_source must be phase1 or phase2")
    if not 0 < config.evaluation.threshold < 1:
        raise ConfigError("threshold must lie strictly between 0 and 1")
