"""Command line entry point.

    perceiver-io run CONFIG [--seed N] [--out-dir DIR]
    perceiver-io flops (--preset NAME | --config FILE) [--json]
    perceiver-io gradcheck [--seed N]
    perceiver-io compare-decoders CONFIG [--seeds K] [--seed N] [--out-dir DIR]

Failures exit with status 1 and print one JSON object on stderr:
``{"error": <type>, "message": ..., "fields": [{"path": ..., "message": ...}]}``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import ops
from .attention import AttentionConfig, ConfigError
from .experiments import TrainingDiverged, compare_decoders, load_config, run
from .flops import PRESETS, arch_from_dict, count, preset_report
from .gradcheck import grad_check
from .model import PerceiverConfig, PerceiverIO
from .tensor import Tensor


def _error(exc: Exception) -> dict:
    body = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ValidationError):
        body["message"] = f"{exc.error_count()} validation error(s)"
        body["fields"] = [
            {"path": ".".join(str(p) for p in e["loc"]), "message": e["msg"]} for e in exc.errors()
        ]
    if isinstance(exc, TrainingDiverged):
        body["step"] = exc.step
    return body


def _overrides(args) -> dict:
    return {"seed": args.seed, "output_dir": args.out_dir}


def cmd_run(args) -> dict:
    cfg = load_config(args.config, **_overrides(args))
    out = run(cfg)
    return json.loads((out / "summary.json").read_text()) | {"run_dir": str(out)}


def cmd_flops(args) -> dict | str:
    if args.preset:
        report = preset_report(args.preset)
    else:
        report = count(arch_from_dict(json.loads(Path(args.config).read_text())))
    return report.to_dict() if args.json else report.table()


def gradcheck_model(seed: int = 0) -> float:
    """Full-model relative gradient error on a tiny random instance."""
    rng = np.random.default_rng(seed)
    cfg = PerceiverConfig(
        input_channels=5,
        num_latents=3,
        latent_channels=8,
        decoder_query_channels=6,
        output_channels=4,
        layers_per_block=2,
        encoder=AttentionConfig(num_heads=2),
        processor=AttentionConfig(num_heads=2),
        decoder=AttentionConfig(num_heads=2, use_query_residual=False),
    )
    model = PerceiverIO(cfg, rng)
    x = Tensor(rng.standard_normal((2, 7, 5)))
    q = Tensor(rng.standard_normal((2, 4, 6)))
    target = rng.standard_normal((2, 4, 4))

    def loss():
        diff = ops.sub(model(x, q), Tensor(target))
        return ops.mean(ops.mul(diff, diff))

    return grad_check(loss, model.parameters(), max_entries=4, rng=rng)


def cmd_gradcheck(args) -> dict:
    err = gradcheck_model(args.seed or 0)
    if not err < 1e-4:
        raise FloatingPointError(f"gradient check failed: max relative error {err:.3e}")
    return {"max_relative_error": err, "tolerance": 1e-4}


def cmd_compare(args) -> dict:
    cfg = load_config(args.config, **_overrides(args))
    result = compare_decoders(cfg, seeds=args.seeds)
    if cfg.output_dir:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare_decoders.json").write_text(json.dumps(result, indent=2) + "\n")
    return result


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="perceiver-io", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out-dir", default=None, help="override the output directory")

    p = sub.add_parser("run", help="train and evaluate one experiment config")
    p.add_argument("config")
    common(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("flops", help="FLOPs and parameter report")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--config", help="JSON architecture description")
    p.add_argument("--json", action="store_true", help="emit JSON instead of a table")
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("compare-decoders", help="attention vs average+project decoder")
    p.add_argument("config")
    p.add_argument("--seeds", type=int, default=5)
    common(p)
    p.set_defaults(fn=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.fn(args)
    except (ValidationError, ConfigError, TrainingDiverged, FloatingPointError, OSError, KeyError,
            ValueError) as exc:
        print(json.dumps(_error(exc)), file=sys.stderr)
        return 1
    print(result if isinstance(result, str) else json.dumps(result, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
