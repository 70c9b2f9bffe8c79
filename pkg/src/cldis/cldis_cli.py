"""
Command line entry point of the ``cldis`` console script.

Usage::

    cldis <verb> [--config FILE] [--flag value ...]

Each verb accepts every run configuration flag (see ``cldis <verb> --help``)
plus its own flags. Values from ``--config`` are applied first and flags on
the command line override them.
"""
import logging
import sys
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from . import __version__
from .cldis_args import (
    RUN_CONFIG_GROUPS,
    GenerateCommandArguments,
    RunConfig,
    SweepCommandArguments,
    TrainCommandArguments,
    TraverseCommandArguments,
    parse_command_args,
)
from .cldis_errors import CldisError, EXIT_CODES
from .train_system import (
    configure_logging,
    evaluate_run,
    generate_data,
    sweep_ablation,
    sweep_capacity,
    train_phase,
    traverse_run,
)

logger = logging.getLogger(__name__)


def _generate(config: RunConfig, command: GenerateCommandArguments):
    return generate_data(config, command)


def _train(config: RunConfig, command: TrainCommandArguments):
    return train_phase(config, command.phase)


def _traverse(config: RunConfig, command: TraverseCommandArguments):
    return traverse_run(config, command)


def _evaluate(config: RunConfig, command):
    return evaluate_run(config)


def _sweep_capacity(config: RunConfig, command: SweepCommandArguments):
    return sweep_capacity(config, command)


def _sweep_ablation(config: RunConfig, command: SweepCommandArguments):
    return sweep_ablation(config, command)


# verb -> (extra argument group, handler, one-line description)
VERBS: Dict[str, Tuple[Optional[type], Callable, str]] = {
    'generate-data': (GenerateCommandArguments, _generate, "Generate and export the factor dataset"),
    'train': (TrainCommandArguments, _train, "Run training phase 1, 2 or 3"),
    'traverse': (TraverseCommandArguments, _traverse, "Write a traversal grid along a learned direction"),
    'evaluate': (None, _evaluate, "Score a checkpoint with the disentanglement metrics"),
    'sweep-capacity': (SweepCommandArguments, _sweep_capacity, "Compare capacity bounds over seeds"),
    'sweep-ablation': (SweepCommandArguments, _sweep_ablation, "Compare the closed-loop components over seeds"),
}


def usage() -> str:
    lines = [f"cldis {__version__}", "", "usage: cldis <verb> [--config FILE] [flags]", "", "verbs:"]
    lines.extend(f"  {verb:<16}{description}" for verb, (_, _, description) in VERBS.items())
    return '\n'.join(lines)


def parse_verb(verb: str, argv: Sequence[str]):
    """
    Parse the flags of ``verb``.

    :return: the run configuration and the verb's own argument group (or ``None``)
    """
    command_cls, _, _ = VERBS[verb]
    groups = RUN_CONFIG_GROUPS + ((command_cls,) if command_cls is not None else ())
    parsed = parse_command_args(groups, argv)
    config = RunConfig(*parsed[:len(RUN_CONFIG_GROUPS)])
    command = parsed[len(RUN_CONFIG_GROUPS)] if command_cls is not None else None
    return config, command


def main(argv: Optional[List[str]] = None) -> int:
    """
    Run one verb and return the process exit code: 0 on success, 2 for
    configuration errors, 3 for missing dependencies, 4 for numeric aborts
    and 1 for any other deliberate failure.
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ('-h', '--help'):
        print(usage())
        return EXIT_CODES['success'] if argv else EXIT_CODES['config']
    if argv[0] == '--version':
        print(__version__)
        return EXIT_CODES['success']
    verb, rest = argv[0], argv[1:]
    if verb not in VERBS:
        print(usage(), file=sys.stderr)
        print(f"\nunknown verb {verb!r}", file=sys.stderr)
        return EXIT_CODES['config']

    configure_logging()
    try:
        config, command = parse_verb(verb, rest)
        VERBS[verb][1](config, command)
    except SystemExit as e:
        # --help
        return e.code if isinstance(e.code, int) else EXIT_CODES['success']
    except CldisError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    return EXIT_CODES['success']


if __name__ == '__main__':
    sys.exit(main())
