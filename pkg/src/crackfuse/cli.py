"""Command-line client for the segmentation service.

Commands talk to an in-process service instance by default, so no server
needs to be running; --server posts the identical request to a remote
instance instead. Config resolution order: preset, then --config file,
then individual flags (flags win). The only honored environment variable
is CRACKFUSE_THREADS, which caps the numeric thread pools and must take
effect before numpy first loads, hence the os.environ block above the
other imports.
"""

import os

_threads = os.environ.get("CRACKFUSE_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "VECLIB_MAXIMUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import asyncio
import dataclasses
import json
import sys
from pathlib import Path

import httpx

from .errors import ConfigError, DataError, DomainError, ShapeError
from .pipeline import CONFIG_CLASSES, PRESETS, build_config, parse_config_text

ENDPOINTS = {"synth": "/synth", "train": "/train", "eval": "/eval",
             "predict": "/predict", "bench-attn": "/bench-attn"}
EXIT_BY_KIND = {"config": 2, "data": 3, "io": 4}

COMMAND_HELP = {
    "synth": "generate a synthetic rgb/thermal/mask dataset",
    "train": "train the dual-branch segmentation model",
    "eval": "evaluate a checkpoint on a dataset split",
    "predict": "segment one rgb/thermal image pair",
    "bench-attn": "tabulate naive vs factorized attention costs",
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crackfuse",
        description="RGB-thermal crack segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, endpoint in ENDPOINTS.items():
        cmd = sub.add_parser(name, help=COMMAND_HELP[name])
        cmd.add_argument("--config", help="flat `key = value` config file")
        cmd.add_argument("--preset", default="desk",
                         choices=sorted(PRESETS[name]))
        cmd.add_argument("--server",
                         help="base URL of a running service "
                              "(default: run in process)")
        for f in dataclasses.fields(CONFIG_CLASSES[name]):
            cmd.add_argument("--" + f.name.replace("_", "-"),
                             dest="cfg_" + f.name, metavar=f.name.upper(),
                             help=f"override {f.name}")
        cmd.set_defaults(func=_cmd_run, command_name=name)

    serve = sub.add_parser("serve", help="start the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    serve.set_defaults(func=_cmd_serve, command_name="serve")
    return parser


async def _post_in_process(path: str, body: dict) -> httpx.Response:
    from .service import create_app
    transport = httpx.ASGITransport(app=create_app())
    async with httpx.AsyncClient(transport=transport, timeout=None,
                                 base_url="http://crackfuse.internal") as client:
        return await client.post(path, json=body)


def _call(path: str, body: dict, server: str | None) -> httpx.Response:
    if server:
        with httpx.Client(base_url=server, timeout=None) as client:
            return client.post(path, json=body)
    return asyncio.run(_post_in_process(path, body))


def _finish(resp: httpx.Response) -> int:
    try:
        body = resp.json()
    except ValueError:
        print(f"error (io): non-JSON response with status "
              f"{resp.status_code}", file=sys.stderr)
        return 4
    if resp.status_code == 200:
        print(json.dumps(body, indent=2, sort_keys=True))
        return 0
    kind = body.get("error_kind", "io")
    print(f"error ({kind}): {body.get('detail', body)}", file=sys.stderr)
    return EXIT_BY_KIND.get(kind, 4)


def _cmd_run(args) -> int:
    name = args.command_name
    layers = []
    if args.config:
        text = Path(args.config).read_text()
        layers.append(parse_config_text(text, source=args.config))
    layers.append({f.name: value
                   for f in dataclasses.fields(CONFIG_CLASSES[name])
                   if (value := getattr(args, "cfg_" + f.name)) is not None})
    # resolve client-side so bad values fail fast with exit code 2 and the
    # server receives a fully-typed config
    cfg = build_config(name, args.preset, *layers)
    body = {"preset": args.preset}
    body.update(dataclasses.asdict(cfg))
    resp = _call(ENDPOINTS[name], body, args.server)
    return _finish(resp)


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app
    uvicorn.run(create_app(), host=args.host, port=args.port,
                log_level="info")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error (config): {exc}", file=sys.stderr)
        return 2
    except (DataError, DomainError, ShapeError) as exc:
        print(f"error (data): {exc}", file=sys.stderr)
        return 3
    except httpx.HTTPError as exc:
        print(f"error (io): {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error (io): {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
