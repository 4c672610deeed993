"""Entry point: serve on standard streams (default) or a TCP port."""

import argparse
import socket
import sys

from .model import bundled_model_path, load_model
from .serve import serve


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sidecar-classifier", description=__doc__)
    parser.add_argument("--model", default=None,
                        help="checkpoint path (default: the bundled tiny model)")
    parser.add_argument("--port", type=int, default=None,
                        help="listen on this TCP port instead of stdio")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        model = load_model(args.model or bundled_model_path())
    except Exception as exc:  # unrecoverable model error -> nonzero exit
        print(f"error: cannot load model: {exc}", file=sys.stderr)
        return 2
    if args.port is None:
        serve(model, sys.stdin, sys.stdout)
        return 0
    with socket.create_server(("127.0.0.1", args.port)) as server:
        print(f"listening on 127.0.0.1:{server.getsockname()[1]}", file=sys.stderr)
        conn, _ = server.accept()
        with conn, conn.makefile("r", encoding="utf-8") as reader, \
                conn.makefile("w", encoding="utf-8") as writer:
            serve(model, reader, writer)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
