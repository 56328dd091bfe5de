import argparse
import sys
from pathlib import Path

from .loader import CandidateError, load_candidate
from .serve import DEFAULT_TIME_SLICE, emit_failed_handshake, serve


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mechrunner",
                                     description="serve one candidate mechanism over stdio")
    parser.add_argument("--source", required=True, help="path to the candidate source file")
    parser.add_argument("--time-slice", type=float, default=DEFAULT_TIME_SLICE,
                        help="per-request watchdog in seconds (0 disables)")
    args = parser.parse_args(argv)

    try:
        source = Path(args.source).read_text(encoding="utf-8")
    except OSError as exc:
        emit_failed_handshake("spawn", f"cannot read source: {exc}")
        return 1
    try:
        module = load_candidate(source)
    except CandidateError as exc:
        emit_failed_handshake(exc.kind, exc.message)
        return 1
    return serve(module, time_slice=args.time_slice)


if __name__ == "__main__":
    sys.exit(main())
