"""Command line front door.

Thin client over the HTTP service: every subcommand issues requests to the
FastAPI app, in-process by default (no sockets, single process) or against
a remote daemon with --server.  Heavy imports happen after argument
parsing so --threads can pin the BLAS pool before numpy loads.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O or
format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

log = logging.getLogger("debiformer.cli")

# service error code -> process exit code
_EXIT_BY_CODE = {
    "bad_request": 2,
    "not_found": 3,
    "format": 3,
    "config": 3,
    "io": 3,
    "internal": 1,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="debiformer",
        description="Deformable bi-level routing attention backbone: "
                    "init, forward, verify, and report tooling.",
    )
    ap.add_argument("--server", metavar="URL",
                    help="base URL of a running service (default: in-process)")
    ap.add_argument("--threads", type=int, metavar="N",
                    help="pin BLAS thread pools to N threads (1 = bitwise deterministic)")
    ap.add_argument("--deterministic", action="store_true",
                    help="shorthand for --threads 1")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="write a config JSON and an initialized weight archive")
    p.add_argument("variant")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    p.add_argument("--out", required=True, metavar="DIR",
                   help="output directory for config.json and weights.dbt")

    p = sub.add_parser("forward", help="run a forward pass, write logits, print a summary")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="DBT1 file holding one [H, W, 3] tensor in [0, 1]")
    src.add_argument("--random", action="store_true", help="use a seeded random input")
    p.add_argument("--seed", type=int, default=0, help="seed for --random")
    p.add_argument("--out", help="write logits as a DBT1 archive here")
    p.add_argument("--dtype", choices=("f32", "f64"))
    p.add_argument("--stats", action="store_true",
                   help="include attention row-sum extrema in the summary")

    p = sub.add_parser("verify", help="run verification suites")
    p.add_argument("suites", nargs="*", metavar="SUITE",
                   help="subset of: gradcheck oracle invariants flops (default all)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the JSON report here")

    p = sub.add_parser("routes", help="dump routing indices as JSON lines")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input")
    src.add_argument("--random", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=("f32", "f64"))
    p.add_argument("--out", help="write JSON lines here instead of stdout")

    for name, help_ in (("flops", "compute-cost report"), ("params", "parameter-count report")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("variant", nargs="?", help="preset name (or use --config)")
        p.add_argument("--config", help="config JSON path")
        p.add_argument("--out", help="write the JSON report here")

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return ap


def _pin_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


class _InProcessClient:
    """Sync facade over the ASGI app; each request runs its own event loop."""

    def __init__(self, app):
        self._app = app

    def _request(self, method: str, path: str, json=None):
        import asyncio

        import httpx

        async def go():
            transport = httpx.ASGITransport(app=self._app)
            async with httpx.AsyncClient(
                transport=transport, base_url="http://debiformer.local", timeout=None
            ) as client:
                return await client.request(method, path, json=json)

        return asyncio.run(go())

    def post(self, path: str, json=None):
        return self._request("POST", path, json=json)

    def get(self, path: str):
        return self._request("GET", path)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def _client(args):
    if args.server:
        import httpx

        return httpx.Client(base_url=args.server, timeout=600.0)
    from .service import app

    return _InProcessClient(app)


class CommandError(Exception):
    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code


def _post(client, path: str, payload: dict) -> dict:
    log.debug("POST %s %s", path, payload)
    resp = client.post(path, json=payload)
    body = resp.json()
    if resp.status_code >= 400:
        err = body.get("error", {})
        code = err.get("code", "internal")
        raise CommandError(err.get("message", "request failed"),
                           _EXIT_BY_CODE.get(code, 1))
    return body


def _write_or_print(out, text: str) -> None:
    if out:
        try:
            with open(out, "w", encoding="utf-8") as fh:
                fh.write(text if text.endswith("\n") else text + "\n")
        except OSError as e:
            raise CommandError(f"cannot write {out}: {e}", 3)
    else:
        print(text)


def cmd_init(client, args) -> int:
    try:
        os.makedirs(args.out, exist_ok=True)
    except OSError as e:
        raise CommandError(f"cannot create {args.out}: {e}", 3)
    body = _post(client, "/v1/init", {
        "variant": args.variant,
        "seed": args.seed,
        "dtype": args.dtype,
        "config_out": os.path.join(args.out, "config.json"),
        "weights_out": os.path.join(args.out, "weights.dbt"),
    })
    print(json.dumps(body, indent=2))
    return 0


def cmd_forward(client, args) -> int:
    body = _post(client, "/v1/forward", {
        "config_path": args.config,
        "weights_path": args.weights,
        "input_path": args.input,
        "random_seed": args.seed if args.random else None,
        "out_path": args.out,
        "dtype": args.dtype,
        "stats": args.stats,
    })
    print(json.dumps(body, indent=2))
    return 0


def cmd_verify(client, args) -> int:
    body = _post(client, "/v1/verify", {"suites": args.suites or None, "seed": args.seed})
    for suite in body["results"]:
        for check in suite["checks"]:
            mark = "PASS" if check["passed"] else "FAIL"
            detail = f"  ({check['detail']})" if check["detail"] else ""
            print(f"{mark} {check['name']}: {check['value']:.3e} "
                  f"(threshold {check['threshold']:g}){detail}")
        print(f"{'PASS' if suite['passed'] else 'FAIL'} suite {suite['suite']} "
              f"in {suite['seconds']:.2f}s")
    if args.out:
        _write_or_print(args.out, json.dumps(body, indent=2))
    return 0 if body["passed"] else 1


def cmd_routes(client, args) -> int:
    body = _post(client, "/v1/routes", {
        "config_path": args.config,
        "weights_path": args.weights,
        "input_path": args.input,
        "random_seed": args.seed if args.random else None,
        "dtype": args.dtype,
    })
    lines = []
    for stage in body["stages"]:
        for block in stage["blocks"]:
            lines.append(json.dumps({
                "stage": stage["stage"],
                "block": block["block"],
                "kind": block["kind"],
                "S": block["S"],
                "k": block["k"],
                "tokens_per_query": block["tokens_per_query"],
                "idx": block["idx"],
            }, separators=(",", ":")))
    _write_or_print(args.out, "\n".join(lines))
    return 0


def _report_payload(args) -> dict:
    if (args.variant is None) == (args.config is None):
        raise CommandError("provide exactly one of VARIANT or --config", 2)
    return {"variant": args.variant, "config_path": args.config}


def cmd_flops(client, args) -> int:
    body = _post(client, "/v1/flops", _report_payload(args))
    if args.out:
        _write_or_print(args.out, json.dumps(body["report"], indent=2))
    print(body["text"])
    return 0


def cmd_params(client, args) -> int:
    body = _post(client, "/v1/params", _report_payload(args))
    width = max(len(g) for g in body["by_group"])
    for group, count in body["by_group"].items():
        print(f"{group.ljust(width)}  {count:>12,}")
    print(f"{'total'.ljust(width)}  {body['total']:>12,}")
    if args.out:
        _write_or_print(args.out, json.dumps(body, indent=2))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import app

    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.deterministic and args.threads is None:
        args.threads = 1
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 2
        _pin_threads(args.threads)
    logging.basicConfig(
        level=getattr(logging, os.environ.get("DEBIFORMER_LOG", "WARNING").upper(), logging.WARNING)
    )
    try:
        if args.command == "serve":
            return cmd_serve(args)
        with _client(args) as client:
            handler = {
                "init": cmd_init,
                "forward": cmd_forward,
                "verify": cmd_verify,
                "routes": cmd_routes,
                "flops": cmd_flops,
                "params": cmd_params,
            }[args.command]
            return handler(client, args)
    except CommandError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except Exception as e:  # no stack traces on stderr; DEBIFORMER_LOG=debug has them
        log.debug("unhandled error", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
