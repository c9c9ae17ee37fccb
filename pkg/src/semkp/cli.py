"""Command line front end for the pipeline stages and the review API.

Configuration precedence, lowest to highest: built-in defaults, the
config.json found in the stage's input directory (each stage writes one,
so chained runs inherit their settings automatically), an explicit
--config file, repeated --set key=value pairs, and finally dedicated
flags like --seed or --alpha.  The effective config lands in the output
directory either way, which makes any artifact tree self-reproducing.

Exit codes: 0 success, 2 usage error (argparse), 3 invalid
configuration (the message lists every offending key), 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__
from .errors import ConfigError, SemkpError
from .pipeline import (
    PipelineConfig,
    run_aggregate,
    run_evaluate,
    run_project,
    run_synth,
    run_train_embed,
)


def _config_options(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", metavar="FILE",
                     help="JSON file of config fields (partial is fine)")
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override one config field; value parsed as JSON, "
                          "bare words stay strings; repeatable")
    sub.add_argument("--seed", type=int, default=None, help="root seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semkp",
        description="consensus keypoints: synthesize, aggregate, embed, project, evaluate, serve",
    )
    parser.add_argument("--version", action="version", version=f"semkp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic annotated dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--kind", default=None, help="shape family (table, chair, airplane-toy)")
    p.add_argument("--models", type=int, default=None, help="number of models")
    p.add_argument("--annotators", type=int, default=None, help="simulated annotators per model")
    p.add_argument("--noise", type=float, default=None, help="annotator click noise sigma")
    _config_options(p)

    p = sub.add_parser("aggregate", help="aggregate annotations into consensus keypoints")
    p.add_argument("--in", dest="in_dir", required=True, help="synth dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--cluster-eps", type=float, default=None,
                   help="DBSCAN radius in t-SNE layout units")
    _config_options(p)

    p = sub.add_parser("train-embed", help="train the dense contrastive embedding")
    p.add_argument("--in", dest="in_dir", required=True, help="synth dataset directory")
    p.add_argument("--agg", required=True, help="aggregate output directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int, default=None, help="contrastive epochs")
    _config_options(p)

    p = sub.add_parser("project", help="estimate viewpoints and transfer keypoints to images")
    p.add_argument("--in", dest="in_dir", required=True, help="synth dataset directory")
    p.add_argument("--agg", required=True, help="aggregate output directory")
    p.add_argument("--net", required=True, help="embedding checkpoint (net.json)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resolution", type=int, default=None, help="render resolution")
    _config_options(p)

    p = sub.add_parser("evaluate", help="score projected keypoints (PCK)")
    p.add_argument("--in", dest="in_dir", required=True, help="project output directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--alpha", type=float, default=None, help="PCK tolerance fraction")
    p.add_argument("--symmetry", action="store_true",
                   help="score distances against recorded symmetry orbits")
    _config_options(p)

    p = sub.add_parser("serve", help="run the annotation/review HTTP API")
    p.add_argument("--data", required=True, help="dataset directory to serve")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    _config_options(p)

    return parser


def _read_json_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return obj


def effective_config(args, inherit_dir: str | None = None) -> PipelineConfig:
    """Merge config sources in precedence order and validate once."""
    obj = {}
    if inherit_dir is not None and args.config is None:
        inherited = os.path.join(inherit_dir, "config.json")
        if os.path.exists(inherited):
            obj.update(_read_json_file(inherited))
    if args.config is not None:
        obj.update(_read_json_file(args.config))
    for pair in args.set:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        try:
            obj[key] = json.loads(value)
        except json.JSONDecodeError:
            obj[key] = value
    if args.seed is not None:
        obj["seed"] = args.seed
    for field, attr in _FLAG_FIELDS.get(args.command, ()):
        value = getattr(args, attr, None)
        if value is not None:
            obj[field] = value
    return PipelineConfig.from_json(obj)


_FLAG_FIELDS = {
    "synth": (("kind", "kind"), ("n_models", "models"),
              ("n_annotators", "annotators"), ("noise_sigma", "noise")),
    "aggregate": (("cluster_eps", "cluster_eps"),),
    "train-embed": (("contrastive_epochs", "epochs"),),
    "project": (("resolution", "resolution"),),
    "evaluate": (("alpha", "alpha"),),
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            run_synth(effective_config(args), args.out)
        elif args.command == "aggregate":
            cfg = effective_config(args, inherit_dir=args.in_dir)
            run_aggregate(cfg, args.in_dir, args.out)
        elif args.command == "train-embed":
            cfg = effective_config(args, inherit_dir=args.agg)
            run_train_embed(cfg, args.in_dir, args.agg, args.out)
        elif args.command == "project":
            cfg = effective_config(args, inherit_dir=args.agg)
            run_project(cfg, args.in_dir, args.agg, args.net, args.out)
        elif args.command == "evaluate":
            cfg = effective_config(args, inherit_dir=args.in_dir)
            run_evaluate(cfg, args.in_dir, args.out, use_symmetry=args.symmetry)
        elif args.command == "serve":
            cfg = effective_config(args, inherit_dir=args.data)
            from .server import create_app
            import uvicorn

            app = create_app(args.data, cfg)
            uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    except ConfigError as exc:
        print(f"invalid configuration:\n{exc}", file=sys.stderr)
        return 3
    except SemkpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0
