import json
from pathlib import Path

from core.cli import RUN_CONFIG_ARGUMENTS, CommandRouter, arg, run_config_from_args
from core.errors import DataError
from core.pipeline import run_pipeline, validate_bundle

router = CommandRouter(tags=["reports"])


@router.command("pipeline", help="Run every analysis and write the report bundle", arguments=RUN_CONFIG_ARGUMENTS)
def pipeline(args):
    config = run_config_from_args(args)
    bundle = run_pipeline(config)
    return {
        "out_dir": str(config.out_dir),
        "config_sha256": bundle.manifest["config_sha256"],
        "table2": [row.model_dump() for row in bundle.table2],
    }


@router.command(
    "report",
    help="Check a finished run directory and summarize it",
    arguments=[arg("--out", type=Path, required=True, help="run directory")],
)
def report(args):
    problems = validate_bundle(args.out)
    if problems:
        raise DataError(f"report bundle at {args.out} is invalid: " + "; ".join(problems))
    manifest = json.loads((args.out / "manifest.json").read_text(encoding="utf-8"))
    return {
        "out_dir": str(args.out),
        "seed": manifest["seed"],
        "config_sha256": manifest["config_sha256"],
        "n_cases": manifest["n_cases"],
        "files": len(manifest["files"]),
        "km_curves": len(manifest["km_curves"]),
    }
