"""Command-line entry point.

Exit status 0 means the command ran to completion, whatever the attack
outcome; 2 is a usage/config error and 3 an infrastructure failure (oracle
unreachable, campaign aborted).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .asr.adapters import MalformedResponseError, OracleTransportError
from .campaign import (
    DEFAULT_SNRS,
    CampaignAborted,
    CampaignConfig,
    build_oracle,
    build_tts,
    emit_report,
    eval_defense,
    load_manifest,
    noise_robustness_report,
    read_corpus,
    recheck,
    robustness_markdown,
    run_campaign,
    synth_corpus,
)
from .defense import DefenseSpec

log = logging.getLogger("embattack")


def _load_config(args, mode: str | None = None) -> CampaignConfig:
    cfg = CampaignConfig.load(args.config) if getattr(args, "config", None) else CampaignConfig()
    overrides = {
        "corpus": args.corpus,
        "seed": args.seed,
        "thr": getattr(args, "thr", None),
        "alpha": getattr(args, "alpha", None),
        "beta": getattr(args, "beta", None),
        "gamma": getattr(args, "gamma", None),
        "epoch_max": getattr(args, "epoch_max", None),
        "workers": getattr(args, "workers", None),
    }
    if mode:
        overrides["mode"] = mode
    for key in ("num_candidates", "learning_rate", "query_policy", "optimizer", "k", "w", "c1", "c2", "eta"):
        overrides[key] = getattr(args, key, None)
    if getattr(args, "alpha", None) or getattr(args, "beta", None) or getattr(args, "gamma", None):
        overrides["hp_grid"] = None
    cfg = cfg.with_overrides(**overrides)
    oracle = dict(cfg.oracle)
    if getattr(args, "oracle_url", None):
        oracle = {"kind": "http", "endpoint": args.oracle_url}
    if getattr(args, "robustness_sigma", None) is not None:
        oracle["robustness_sigma"] = args.robustness_sigma
    if getattr(args, "tau", None) is not None:
        oracle["tau"] = args.tau
    cfg.oracle = oracle
    return cfg


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="campaign YAML file; flags below override its keys")
    p.add_argument("--corpus", help="corpus file, or builtin:corpus12 / builtin:corpus32")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--oracle-url", help="use an HTTP transcription endpoint instead of the mock recognizer")
    p.add_argument("--tau", type=float, help="mock recognizer acceptance threshold (default: calibrated)")
    p.add_argument("--robustness-sigma", type=float, help="mock recognizer feature smoothing")


def _attack_args(p: argparse.ArgumentParser) -> None:
    _common(p)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--alpha", type=float, nargs="+", help="low-band attenuation factor(s)")
    p.add_argument("--beta", type=int, nargs="+", help="number of zeroed lowest bands")
    p.add_argument("--gamma", type=float, nargs="+", help="uniform noise half-range(s)")
    p.add_argument("--thr", type=float, help="infinity-norm bound on the perturbation")
    p.add_argument("--epoch-max", type=int)
    p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="embattack", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render clean audio for every corpus command")
    _common(p)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("attack-otl", help="gradient-descent campaign")
    _attack_args(p)
    p.add_argument("--num-candidates", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--query-policy", choices=["online", "offline"])
    p.add_argument("--optimizer", choices=["gd", "momentum", "adam"])

    p = sub.add_parser("attack-ota", help="particle-swarm campaign with the noise condition")
    _attack_args(p)
    p.add_argument("--k", type=int, help="number of particles")
    p.add_argument("--w", type=float, help="inertia")
    p.add_argument("--c1", type=float)
    p.add_argument("--c2", type=float)
    p.add_argument("--eta", type=float, help="playback noise amplitude")

    p = sub.add_parser("recheck", help="re-transcribe the stored WAVs of a run")
    _common(p, config=False)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--date", help="label for the history entry (default: today, UTC)")

    p = sub.add_parser("eval-defense", help="success rates of stored samples before and after defenses")
    _common(p, config=False)
    p.add_argument("--run-dir", required=True)
    p.add_argument(
        "--defense",
        action="append",
        help="resample:<Hz>, low_pass:<Hz>[:order] or high_pass:<Hz>[:order]; repeatable",
    )

    p = sub.add_parser("robustness", help="WER increase of clean renderings under Gaussian noise")
    _common(p)
    p.add_argument("--snr", type=float, nargs="+", default=list(DEFAULT_SNRS))
    p.add_argument("--out", help="markdown output path (default: stdout)")

    p = sub.add_parser("report", help="render the success table of a run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--format", choices=["csv", "md"], default="md")

    p = sub.add_parser("serve", help="HTTP service: /synth, /transcribe, /attack/otl, /attack/ota")
    p.add_argument("--corpus", default="builtin:corpus12")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return parser


def _run_config(run_dir: str, args) -> CampaignConfig:
    """The run's own config, with oracle flags from the command line applied."""
    cfg = CampaignConfig.from_dict(load_manifest(run_dir)["config"])
    if args.corpus or args.seed is not None:
        cfg = cfg.with_overrides(corpus=args.corpus, seed=args.seed)
    oracle = dict(cfg.oracle)
    if args.oracle_url:
        oracle = {"kind": "http", "endpoint": args.oracle_url}
    if args.robustness_sigma is not None:
        oracle["robustness_sigma"] = args.robustness_sigma
    if args.tau is not None:
        oracle["tau"] = args.tau
    cfg.oracle = oracle
    return cfg


def _oracle_for(cfg: CampaignConfig):
    tts = build_tts(cfg.tts)
    return tts, build_oracle(cfg.oracle, tts, read_corpus(cfg.corpus)[0])


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (CampaignAborted, OracleTransportError, MalformedResponseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "synth":
        cfg = _load_config(args)
        paths = synth_corpus(build_tts(cfg.tts), read_corpus(cfg.corpus)[0], args.out_dir)
        print(f"wrote {len(paths)} files to {args.out_dir}")
    elif cmd in ("attack-otl", "attack-ota"):
        cfg = _load_config(args, mode=cmd.split("-")[1])
        run_dir = run_campaign(cfg, args.run_dir)
        print(Path(run_dir, "reports", "success.md").read_text(encoding="utf-8"), end="")
    elif cmd == "recheck":
        cfg = _run_config(args.run_dir, args)
        _, oracle = _oracle_for(cfg)
        table = recheck(args.run_dir, oracle, today=args.date)
        print(json.dumps(table.to_dict(), indent=2))
    elif cmd == "eval-defense":
        cfg = _run_config(args.run_dir, args)
        _, oracle = _oracle_for(cfg)
        specs = [DefenseSpec.parse(d) for d in (args.defense or ["resample:8000", "low_pass:6000", "high_pass:500"])]
        eval_defense(args.run_dir, oracle, specs)
        print(Path(args.run_dir, "reports", "defense.md").read_text(encoding="utf-8"), end="")
    elif cmd == "robustness":
        cfg = _load_config(args)
        tts, oracle = _oracle_for(cfg)
        rows = noise_robustness_report(oracle, tts, read_corpus(cfg.corpus)[0], args.snr, seed=cfg.seed)
        text = robustness_markdown(rows, oracle.oracle_id)
        if args.out:
            Path(args.out).write_text(text, encoding="utf-8")
        print(text, end="")
    elif cmd == "report":
        print(emit_report(args.run_dir, args.format).read_text(encoding="utf-8"), end="")
    elif cmd == "serve":
        import uvicorn

        from .service import create_app

        uvicorn.run(create_app(args.corpus), host=args.host, port=args.port)
    return 0


if __name__ == "__main__":
    sys.exit(main())
