import argparse
import logging
import sys
from typing import List, Optional

from src.config_loader import RunConfig, load_config
from src.errors import ConfigError, StageError
from src.pipeline import STAGES, Pipeline

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3

logger = logging.getLogger("deid_audit")


def _setup_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Memorization audit of a de-identification tagger")
    parser.add_argument("command", choices=list(STAGES) + ["all"],
                        help="stage to run (its prerequisites run first unless already checkpointed)")
    parser.add_argument("--config", default="config.yaml")
    parser.add_argument("--seed", type=int, default=None, help="master seed (overrides runtime.seed)")
    parser.add_argument("--stage", choices=list(STAGES), default=None, help="same as the positional command")
    parser.add_argument("--out", default=None, help="output directory (overrides runtime.out_dir)")
    parser.add_argument("--crf", choices=["on", "off", "both"], default=None)
    parser.add_argument("--overfit-dial", type=int, default=None, metavar="N",
                        help="truncate the training split to N reports")
    parser.add_argument("--fresh", action="store_true", help="ignore checkpoints and rerun every stage")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.from_dict(load_config(args.config))
        cfg = cfg.with_overrides(seed=args.seed, out_dir=args.out, crf=args.crf, overfit_dial=args.overfit_dial)
    except ConfigError as e:
        _setup_logging("INFO")
        logger.error("config error: %s", e)
        return EXIT_CONFIG
    _setup_logging(cfg.log_level)

    target = args.stage or ("report" if args.command == "all" else args.command)
    pipeline = Pipeline(cfg)
    if args.fresh:
        pipeline.store.reset()
    logger.info("run %s -> %s (seed %d, config %s)", args.command, cfg.out_dir, cfg.seed, cfg.hash[:12])
    try:
        bundle = pipeline.run(target)
    except StageError as e:
        logger.error("%s", e)
        return EXIT_STAGE
    logger.info("done: %d artifacts under %s", len(bundle.paths()), bundle.out_dir)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
