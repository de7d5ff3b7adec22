"""
Loss-Landscape Workbench - command-line entry point
"""
import argparse
import logging
import os
import sys
from typing import List, Optional

# Configure logging
logging.basicConfig(
    level=os.environ.get('LLAB_LOG_LEVEL', '').upper()
    or (logging.DEBUG if os.environ.get('ENV') == 'development' else logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

from controllers import (cka_bp, corrupt_bp, hessian_bp, landscape_bp, modeconn_bp,  # noqa: E402
                         report_bp, sweep_bp, train_bp)
from services.errors import CheckpointError, WorkbenchError  # noqa: E402

BLUEPRINTS = [train_bp, landscape_bp, hessian_bp, cka_bp, modeconn_bp, corrupt_bp, sweep_bp, report_bp]

IO_EXIT_CODE = CheckpointError.exit_code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='llab', description='Loss-landscape and robustness metrics for '
                                                              'quantized networks')
    subparsers = parser.add_subparsers(dest='command', metavar='command', required=True)
    for blueprint in BLUEPRINTS:
        blueprint.attach(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    args.argv = ['llab'] + argv

    try:
        return args.handler(args)
    except WorkbenchError as e:
        logger.error(f"{args.command} failed: {e}")
        print(e.diagnostic(), file=sys.stderr)
        return e.exit_code
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        wrapped = CheckpointError(str(e))
        print(wrapped.diagnostic(), file=sys.stderr)
        return IO_EXIT_CODE


if __name__ == '__main__':
    sys.exit(main())
