"""Command-line entry point: ``iam <subcommand> [flags]``.

Every subcommand writes one JSON report (sorted keys, resolved
configuration included) to ``--out`` or stdout. Reports carry no
timestamps, so reruns with the same inputs are byte-identical.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile
from contextlib import nullcontext
from importlib.resources import files
from pathlib import Path

import numpy as np

from iam import analysis
from iam.engine import DualSession, baseline_generate, iam_generate
from iam.fixtures import DEFAULT_LARGE, FixtureSpec, HeadFit, copied_head_rows, make_fixture_pair
from iam.mapping import ConfigurationError, IamConfig, LayerSelectionStrategy, n_mapped_layers, pairwise_similarity
from iam.model import InputError, ModelLoadError, forward_prefill, load_model
from iam.similarity import DomainError, SimilarityMetric
from iam.tokenizer import decode, encode

log = logging.getLogger("iam")

METRICS = ("cosine", "minkowski1", "minkowski2", "pearson", "cosine-norm")
STRATEGIES = ("backend", "frontend", "most-similar", "two-region")


def bundled_text(name: str) -> bytes:
    return files("iam").joinpath(f"data/{name}").read_bytes()


def write_atomic(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


# --------------------------------------------------------------------------- argument parsing

def _models(p: argparse.ArgumentParser, small: bool = True) -> None:
    p.add_argument("--large", required=True, help="large model IAMW file")
    if small:
        p.add_argument("--small", required=True, help="small model IAMW file")


def _iam_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ratio", type=float, default=0.5)
    p.add_argument("--metric", choices=METRICS, default="cosine")
    p.add_argument("--strategy", choices=STRATEGIES, default="backend")
    p.add_argument("--tau-e", type=int, default=20)
    p.add_argument("--tau-t", type=int, default=100)
    p.add_argument("--max-tokens", type=int, default=512)
    p.add_argument("--rep-penalty", type=float, default=1.2)
    p.add_argument("--norm-compensation", action="store_true")
    p.add_argument("--renormalize", action="store_true")


def _text_input(p: argparse.ArgumentParser, default: str | None) -> None:
    p.add_argument("--input", help=f"UTF-8 text file (default: bundled {default})" if default else "UTF-8 text file")
    if default:
        p.set_defaults(default_input=default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iam", description="Attention-mapping inference on IAMW models.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    def command(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="report path (default: stdout)")
        return p

    p = command("make-fixtures", "write a related large/small model pair")
    p.add_argument("--large", required=True, help="output path of the large model")
    p.add_argument("--small", required=True, help="output path of the small model")
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--subset", type=int, default=2)
    p.add_argument("--layers", type=int, default=DEFAULT_LARGE.n_layers)
    p.add_argument("--head-fit-steps", type=int, default=300,
                   help="output-head refit steps on the bundled corpus (0 disables)")

    p = command("generate", "greedy generation with or without mapping")
    _models(p)
    _iam_flags(p)
    p.add_argument("--prompt", help="prompt text")
    _text_input(p, None)
    p.add_argument("--baseline", action="store_true", help="run the large model alone")

    p = command("ppl", "log perplexity of a text under mapping")
    _models(p)
    _iam_flags(p)
    _text_input(p, "heldout.txt")
    p.add_argument("--window", type=int, default=256)
    p.add_argument("--stride", type=int, default=None)

    p = command("scan-blocks", "map one block of layers at a time")
    _models(p)
    _iam_flags(p)
    _text_input(p, "heldout.txt")
    p.add_argument("--blocks", type=int, required=True)
    p.add_argument("--window", type=int, default=256)
    p.add_argument("--csv", help="also write block_index,metric rows here")

    p = command("consistency", "how often mapped heads keep their best match while decoding")
    _models(p)
    _iam_flags(p)
    p.add_argument("--prompt", help="prompt text")
    _text_input(p, None)

    p = command("memory-report", "KV-cache memory with and without mapping")
    p.add_argument("--large", help="large model IAMW file (default: Qwen2-72B shapes)")
    p.add_argument("--small", help="small model IAMW file (default: Qwen2-0.5B shapes)")
    p.add_argument("--ratio", type=float, default=0.5)
    p.add_argument("--seq", type=int, default=1)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--dtype-bytes", type=int, default=2)

    p = command("flops-report", "prefill attention FLOPs with and without mapping")
    p.add_argument("--large", help="large model IAMW file (default: Qwen2-72B shapes)")
    p.add_argument("--small", help="small model IAMW file (default: Qwen2-0.5B shapes)")
    p.add_argument("--ratio", type=float, default=0.5)
    p.add_argument("--prefill-len", type=int, default=1024)
    p.add_argument("--dense", action="store_true", help="count full N x N score matrices")

    p = command("simstats", "best-match similarity of every large head")
    _models(p)
    _iam_flags(p)
    _text_input(p, "heldout.txt")

    p = command("map-hist", "which small heads serve as sources across many texts")
    _models(p)
    _iam_flags(p)
    _text_input(p, "heldout.txt")
    p.add_argument("--chunk", type=int, default=128, help="tokens per establishment window")
    return parser


# --------------------------------------------------------------------------- helpers

def iam_config(args) -> IamConfig:
    n_layers = getattr(args, "_n_layers", 80)
    strategy = LayerSelectionStrategy.parse(args.strategy, n_layers)
    return IamConfig(
        ratio=args.ratio, tau_e=args.tau_e, tau_t=args.tau_t,
        metric=SimilarityMetric.parse(args.metric), strategy=strategy,
        max_tokens=args.max_tokens, repetition_penalty=args.rep_penalty,
        norm_compensation=args.norm_compensation, renormalize=args.renormalize,
        consistency_tracking=args.command == "consistency",
    )


def read_text(args) -> bytes:
    if getattr(args, "input", None):
        return Path(args.input).read_bytes()
    default = getattr(args, "default_input", None)
    if default:
        return bundled_text(default)
    raise InputError("no input text given")


def prompt_tokens(args) -> list[int]:
    if args.prompt is not None:
        text = args.prompt.encode("utf-8")
    else:
        text = read_text(args)
    return encode(text)


def resolved(args, cfg: IamConfig | None = None) -> dict:
    d = {k: v for k, v in vars(args).items() if not k.startswith("_") and k not in ("func", "verbose")}
    if cfg is not None:
        d["iam"] = cfg.to_dict()
    return d


def load_pair(args):
    large = load_model(args.large)
    small = load_model(args.small)
    args._n_layers = large.config.n_layers
    return large, small


# --------------------------------------------------------------------------- subcommands

def cmd_make_fixtures(args) -> dict:
    large_cfg = DEFAULT_LARGE
    if args.layers != large_cfg.n_layers:
        large_cfg = type(large_cfg)(**{**large_cfg.to_dict(), "n_layers": args.layers})
    fit = HeadFit(bundled_text("corpus.txt"), steps=args.head_fit_steps) if args.head_fit_steps > 0 else None
    spec = FixtureSpec(large=large_cfg, stride=args.stride, subset=args.subset, sigma=args.sigma,
                       seed=args.seed, head_fit=fit)
    large, small = make_fixture_pair(spec, args.large, args.small)
    return {
        "config": resolved(args),
        "fixture": spec.to_dict(),
        "large_config": large.config.to_dict(),
        "small_config": small.config.to_dict(),
        "copied_head_rows": copied_head_rows(spec),
    }


def cmd_generate(args) -> dict:
    large, small = load_pair(args)
    cfg = iam_config(args)
    prompt = prompt_tokens(args)
    if args.baseline:
        res = baseline_generate(large, prompt, cfg.max_tokens, cfg.repetition_penalty)
    else:
        res = iam_generate(large, small, prompt, cfg)
    out = {
        "config": resolved(args, cfg),
        "prompt_tokens": len(prompt),
        "tokens": res.tokens,
        "text": decode(res.tokens),
        "digests": res.digests,
        "established_at": res.established_at,
        "mapping": res.table.to_dict() if res.table is not None else None,
    }
    return out


def cmd_ppl(args) -> dict:
    large, small = load_pair(args)
    cfg = iam_config(args)
    tokens = encode(read_text(args))
    value = analysis.log_perplexity(analysis.iam_scorer(large, small, cfg), tokens, args.window, args.stride)
    return {"config": resolved(args, cfg), "n_tokens": len(tokens), "log_ppl": value,
            "ppl": float(np.exp(value))}


def cmd_scan_blocks(args) -> dict:
    large, small = load_pair(args)
    cfg = iam_config(args)
    tokens = encode(read_text(args))
    scan = analysis.subblock_scan(large, small, tokens, args.blocks, cfg, args.window)
    if args.csv:
        write_atomic(args.csv, scan.to_csv())
    return {"config": resolved(args, cfg), "scan": scan.to_dict()}


def cmd_consistency(args) -> dict:
    large, small = load_pair(args)
    cfg = iam_config(args)
    prompt = prompt_tokens(args)
    res = iam_generate(large, small, prompt, cfg)
    report = res.consistency.to_dict() if res.consistency is not None else None
    return {"config": resolved(args, cfg), "n_generated": res.n_generated,
            "established_at": res.established_at, "consistency": report}


def _report_configs(args):
    if args.large:
        cl = load_model(args.large).config
        cs = load_model(args.small).config if args.small else None
    else:
        cl, cs = analysis.QWEN2_72B, analysis.QWEN2_0_5B
    if not 0.0 <= args.ratio <= 1.0:
        raise ConfigurationError("ratio must lie in [0, 1]")
    return cl, cs, n_mapped_layers(args.ratio, cl.n_layers)


def cmd_memory_report(args) -> dict:
    cl, cs, mapped = _report_configs(args)
    rep = analysis.kv_memory_report(cl, cs, mapped, args.seq, args.batch, args.dtype_bytes)
    return {"config": resolved(args), "large_config": cl.to_dict(),
            "small_config": cs.to_dict() if cs else None, "report": rep.to_dict()}


def cmd_flops_report(args) -> dict:
    cl, cs, mapped = _report_configs(args)
    rep = analysis.attention_flops_report(cl, cs, mapped, args.prefill_len, causal=not args.dense)
    return {"config": resolved(args), "large_config": cl.to_dict(),
            "small_config": cs.to_dict() if cs else None, "report": rep.to_dict()}


def cmd_simstats(args) -> dict:
    large, small = load_pair(args)
    cfg = iam_config(args)
    tokens = encode(read_text(args))[: cfg.tau_t]
    cap_l = forward_prefill(large, tokens, capture=True).capture
    cap_s = forward_prefill(small, tokens, capture=True).capture
    sim = pairwise_similarity(cap_l, cap_s, cfg.metric)
    stats = analysis.similarity_stats(sim, large.config.n_query_heads)
    return {"config": resolved(args, cfg), "n_tokens": len(tokens), "stats": stats.to_dict()}


def cmd_map_hist(args) -> dict:
    large, small = load_pair(args)
    cfg = iam_config(args)
    tokens = encode(read_text(args))
    if args.chunk < cfg.tau_e:
        raise ConfigurationError("chunk must be at least tau_e tokens")
    tables = []
    for start in range(0, len(tokens) - args.chunk + 1, args.chunk):
        session = DualSession(large, small, cfg)
        session.establish(tokens[start:start + args.chunk])
        tables.append(session.table)
    cs = small.config
    hist = analysis.mapping_histogram(tables, cs.n_query_heads, cs.n_heads_total)
    return {"config": resolved(args, cfg), "histogram": hist.to_dict()}


COMMANDS = {
    "make-fixtures": cmd_make_fixtures,
    "generate": cmd_generate,
    "ppl": cmd_ppl,
    "scan-blocks": cmd_scan_blocks,
    "consistency": cmd_consistency,
    "memory-report": cmd_memory_report,
    "flops-report": cmd_flops_report,
    "simstats": cmd_simstats,
    "map-hist": cmd_map_hist,
}


def _thread_limit():
    n = os.environ.get("IAM_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            report = COMMANDS[args.command](args)
        report["command"] = args.command
        text = analysis.to_json(report) + "\n"
        if args.out:
            write_atomic(args.out, text)
        else:
            sys.stdout.write(text)
    except (OSError, ModelLoadError, InputError, ConfigurationError, DomainError, ValueError) as exc:
        print(f"iam {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
