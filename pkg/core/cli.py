"""Command registration for the ``gleasonrisk`` CLI.

Routers collect subcommands with ``@router.command(...)``; ``main.py`` mounts every router
on one argparse parser with ``include_router``. Handlers take the parsed namespace and return
a JSON-serializable summary (or None).
"""

import argparse
from pathlib import Path
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

from core.config import RunConfig, load_run_config

Handler = Callable[[argparse.Namespace], Optional[Dict[str, Any]]]
Argument = Tuple[Tuple[str, ...], Dict[str, Any]]


def arg(*flags: str, **kwargs) -> Argument:
    return flags, kwargs


class Command(NamedTuple):
    name: str
    handler: Handler
    help: str
    arguments: Tuple[Argument, ...]


class CommandRouter:
    def __init__(self, tags: Sequence[str] = ()):
        self.tags = list(tags)
        self.commands: List[Command] = []

    def command(self, name: str, help: str = "", arguments: Sequence[Argument] = ()):
        def register(handler: Handler) -> Handler:
            self.commands.append(Command(name, handler, help, tuple(arguments)))
            return handler

        return register


def include_router(subparsers, router: CommandRouter) -> None:
    for cmd in router.commands:
        parser = subparsers.add_parser(cmd.name, help=cmd.help, description=cmd.help)
        for flags, kwargs in cmd.arguments:
            parser.add_argument(*flags, **kwargs)
        parser.set_defaults(handler=cmd.handler, command=cmd.name)


def csv_floats(raw: str) -> Tuple[float, ...]:
    try:
        return tuple(float(p) for p in raw.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {raw!r}")


# RunConfig flags; destinations are RunConfig field names so they pass straight through as overrides
RUN_CONFIG_ARGUMENTS: Tuple[Argument, ...] = (
    arg("--config", type=Path, default=None, help="KEY=VALUE file with GLEASONRISK_* settings"),
    arg("--cohort", dest="cohort_path", type=Path, default=None, help="cohort CSV"),
    arg("--simulate", action="store_const", const=True, default=None, help="simulate the input cohort"),
    arg("--n-cases", dest="n_cases", type=int, default=None),
    arg("--sim-seed", dest="sim_seed", type=int, default=None),
    arg("--patch-grids", dest="patch_grid_path", type=Path, default=None),
    arg("--patch-manifest", dest="patch_manifest_path", type=Path, default=None),
    arg("--clinical", dest="clinical_path", type=Path, default=None),
    arg("--tissue-threshold", dest="tissue_threshold", type=float, default=None),
    arg("--validation-min-year", dest="validation_min_year", type=int, default=None),
    arg("--sensitivity-min-year", dest="sensitivity_min_year", type=int, default=None),
    arg("--train-max-year", dest="temporal_train_max_year", type=int, default=None),
    arg("--outcome", choices=["DSS", "OS"], default=None),
    arg("--reference", default=None, help="'pathologist' or five comma-separated counts"),
    arg("--grade-coding", dest="grade_coding", choices=["categorical", "ordinal"], default=None),
    arg("--ci-method", dest="ci_method", choices=["log-log", "plain"], default=None),
    arg("--interval", choices=["percentile", "basic"], default=None),
    arg("--n-bootstrap", dest="n_bootstrap", type=int, default=None),
    arg("--seed", type=int, required=True),
    arg("--alpha", type=float, default=None),
    arg("--ridge", type=float, default=None),
    arg("--horizon", dest="horizon_years", type=float, default=None),
    arg("--workers", dest="n_workers", type=int, default=None),
    arg("--dump-replicates", dest="dump_replicates", action="store_const", const=True, default=None),
    arg("--out", dest="out_dir", type=Path, required=True, help="output directory"),
)


def run_config_from_args(args: argparse.Namespace) -> RunConfig:
    fields = RunConfig.model_fields
    overrides = {k: v for k, v in vars(args).items() if k in fields}
    return load_run_config(args.config, **overrides)
