"""Command-line harness: fit-lm, gen-data, train-head, bench, sweep, oracle-check.

Every subcommand accepts ``--config FILE`` (one JSON document). Flags
given on the command line override config fields, and the effective
configuration is echoed into each JSON summary. Relative paths in a
config file resolve against the file's directory.

Generation ``i`` of a run uses ``np.random.default_rng([seed, i])``, so
every policy sees the same per-prompt random streams and runs split
across workers reproduce the serial result. The worker count comes from
``ADASPEC_THREADS`` (default 1).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from adaspec.corpus import synthetic_bytes
from adaspec.errors import DomainError, SpecDecError
from adaspec.lm import (
    BYTE_VOCAB,
    bytes_to_sequences,
    fit_kgram,
    load_model,
    read_byte_corpus,
    read_token_corpus,
)
from adaspec.metrics import (
    CostModel,
    bench_point,
    latency,
    throughput,
    write_bench_csv,
)
from adaspec.oracle import (
    battery,
    battery_policies,
    check_threshold_condition,
    exact_output_dist,
    target_output_dist,
    write_report_csv,
)
from adaspec.policies import adaptive_threshold, fixed_k, parse_policy
from adaspec.predictor import ExampleSet, gen_dataset, load_head, train_head
from adaspec.specdec import generate, generation_rng, prepare_models

THREADS_ENV = "ADASPEC_THREADS"


@dataclass
class RunConfig:
    seed: int = 0
    target: Optional[str] = None
    draft: Optional[str] = None
    prompts: Optional[str] = None
    prompt_format: str = "bytes"  # "bytes": one prompt per line; "tokens": ints per line
    prompt_len: int = 4
    n_generations: int = 100
    max_len: int = 64
    k_cap: int = 20
    top_k: Optional[int] = None
    temperature: float = 1.0
    greedy: bool = False
    policies: List[str] = field(default_factory=lambda: ["fixed:4"])
    cost: List[float] = field(default_factory=lambda: [0.0234, 0.112])
    standalone_cost: Optional[List[float]] = None
    # sweep grids
    k_grid: List[int] = field(default_factory=lambda: [2, 4, 6, 8, 10, 12, 14])
    h_grid: List[float] = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
    w_rej_grid: List[float] = field(default_factory=lambda: [1.0])
    depth_grid: List[int] = field(default_factory=lambda: [3])
    head: Optional[str] = None
    data: Optional[str] = None
    width: int = 32
    epochs: int = 20
    step_size: float = 0.5
    # oracle-check
    battery_size: int = 20
    traces: Optional[str] = None

    PATH_FIELDS = ("target", "draft", "prompts", "head", "data")

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            raw = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise DomainError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(**raw)
        base = Path(path).resolve().parent
        for name in cls.PATH_FIELDS:
            val = getattr(cfg, name)
            if val is not None and not Path(val).is_absolute():
                setattr(cfg, name, str(base / val))
        return cfg

    def check_files(self, *names) -> None:
        for name in names:
            val = getattr(self, name)
            if val is None:
                raise DomainError(f"config field {name!r} is required")
            if not Path(val).exists():
                raise DomainError(f"{name}: file not found: {val}")

    def cost_model(self) -> CostModel:
        return CostModel(*self.cost)

    def standalone(self) -> Optional[CostModel]:
        return CostModel(*self.standalone_cost) if self.standalone_cost else None

    def to_dict(self) -> dict:
        return asdict(self)


def _override(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    for f in fields(cfg):
        val = getattr(args, f.name, None)
        if val is not None:
            setattr(cfg, f.name, val)
    return cfg


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    return _override(cfg, args)


def load_prompts(cfg: RunConfig) -> List[tuple]:
    cfg.check_files("prompts")
    if cfg.prompt_format == "bytes":
        seqs = read_byte_corpus(cfg.prompts)
        prompts = [tuple(s[: cfg.prompt_len]) for s in seqs]
    elif cfg.prompt_format == "tokens":
        prompts = [tuple(s) for s in read_token_corpus(cfg.prompts)]
    else:
        raise DomainError(f"unknown prompt_format {cfg.prompt_format!r}")
    prompts = [p for p in prompts if p]
    if not prompts:
        raise DomainError("no prompts found")
    return prompts


def _load_models(cfg: RunConfig):
    cfg.check_files("target", "draft")
    target, draft = load_model(cfg.target), load_model(cfg.draft)
    return prepare_models(target, draft, cfg.top_k, cfg.temperature, cfg.greedy)


# -- generation jobs --------------------------------------------------------


def _run_chunk(job):
    target, draft, policy, prompts, indices, cfg = job
    out = []
    for i in indices:
        prompt = prompts[i % len(prompts)]
        tr = generate(target, draft, prompt, policy, cfg.max_len, generation_rng(cfg.seed, i),
                      cfg.k_cap, greedy=cfg.greedy)
        out.append((i, tr))
    return out


def run_generations(target, draft, policy, prompts, cfg: RunConfig, threads: int = 1):
    """All ``n_generations`` traces of one policy, ordered by generation index."""
    idx = list(range(cfg.n_generations))
    if threads <= 1:
        pairs = _run_chunk((target, draft, policy, prompts, idx, cfg))
    else:
        chunks = [idx[j::threads] for j in range(threads)]
        jobs = [(target, draft, policy, prompts, c, cfg) for c in chunks if c]
        with ProcessPoolExecutor(max_workers=threads) as ex:
            pairs = [p for part in ex.map(_run_chunk, jobs) for p in part]
    pairs.sort(key=lambda p: p[0])
    return [t for _, t in pairs]


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise DomainError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def _split_describe(desc: str):
    kind, _, rest = desc.partition(":")
    return kind, rest


def _stats(values) -> dict:
    a = np.asarray(values, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std(ddof=1)) if len(a) > 1 else 0.0}


def bench_policies(policies, target, draft, prompts, cfg: RunConfig, trace_fh=None):
    cm = cfg.cost_model()
    threads = thread_count()
    points, summaries = [], []
    for pol in policies:
        traces = run_generations(target, draft, pol, prompts, cfg, threads)
        kind, params = _split_describe(pol.describe())
        pt = bench_point(kind, params, traces, cm, cfg.standalone())
        points.append(pt)
        live = [t for t in traces if t.n_tokens]
        summaries.append({
            "policy": kind,
            "params": params,
            "oracle": bool(pol.oracle),
            "pooled": pt.row(),
            "discard_rate": _stats([t.n_discarded / t.n_tokens for t in live]),
            "verification_rate": _stats([t.n_target / t.n_tokens for t in live]),
            "latency": _stats([latency(t, cm) for t in live]),
            "throughput": _stats([throughput(t, cm) for t in live]),
        })
        if trace_fh is not None:
            for i, t in enumerate(traces):
                d = t.to_dict()
                d["policy"], d["index"] = pol.describe(), i
                trace_fh.write(json.dumps(d) + "\n")
    return points, summaries


def _write_summary(path, cfg: RunConfig, results) -> None:
    with open(path, "w") as fh:
        json.dump({"config": cfg.to_dict(), "results": results}, fh, indent=2)
        fh.write("\n")


def _summary_path(args) -> Path:
    return Path(args.summary) if args.summary else Path(args.out).with_suffix(".json")


# -- subcommands ------------------------------------------------------------


def cmd_fit_lm(args) -> int:
    if args.synthetic is not None:
        seqs = bytes_to_sequences(synthetic_bytes(args.synthetic, args.seed or 0))
        vocab = BYTE_VOCAB
    elif args.corpus is None:
        raise DomainError("fit-lm needs --corpus or --synthetic")
    elif args.format == "bytes":
        seqs, vocab = read_byte_corpus(args.corpus), BYTE_VOCAB
    else:
        seqs, vocab = read_token_corpus(args.corpus), None
    model = fit_kgram(seqs, args.order, args.smoothing, vocab)
    model.save(args.out)
    print(f"wrote order-{args.order} model (V={model.vocab.size}) to {args.out}")
    return 0


def cmd_write_corpus(args) -> int:
    Path(args.out).write_bytes(synthetic_bytes(args.lines, args.seed))
    print(f"wrote {args.lines} lines to {args.out}")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    target, draft = _load_models(cfg)
    prompts = load_prompts(cfg)
    rng = np.random.default_rng(cfg.seed)
    ds = gen_dataset(target, draft, prompts, args.r, rng, cfg.max_len, cfg.k_cap)
    ds.save_jsonl(args.out)
    print(f"wrote {len(ds)} examples ({int(ds.mask.sum())} in loss) to {args.out}")
    return 0


def cmd_train_head(args) -> int:
    cfg = _config(args)
    cfg.check_files("data")
    ds = ExampleSet.load_jsonl(cfg.data)
    head = train_head(ds, w_rej=args.w_rej, depth=args.depth, width=cfg.width, epochs=cfg.epochs,
                      step_size=cfg.step_size, rng=np.random.default_rng(cfg.seed))
    head.save(args.out)
    info = head.info
    print(f"wrote D={args.depth} head to {args.out}: train_kl={info['train_kl']:.4f}"
          + (f" eval_kl={info['eval_kl']:.4f}" if "eval_kl" in info else ""))
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    if args.policy:
        cfg.policies = list(args.policy)
    target, draft = _load_models(cfg)
    prompts = load_prompts(cfg)
    policies = [parse_policy(s, target, draft) for s in cfg.policies]
    trace_fh = open(cfg.traces, "w") if cfg.traces else None
    try:
        points, summaries = bench_policies(policies, target, draft, prompts, cfg, trace_fh)
    finally:
        if trace_fh is not None:
            trace_fh.close()
    write_bench_csv(points, args.out)
    _write_summary(_summary_path(args), cfg, summaries)
    for p in points:
        print(f"{p.policy}:{p.params} discard={p.discard_rate:.4f} verify={p.verification_rate:.4f} "
              f"latency={p.latency:.5f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if not cfg.k_grid and not cfg.h_grid:
        raise DomainError("sweep needs a nonempty k_grid or h_grid")
    target, draft = _load_models(cfg)
    prompts = load_prompts(cfg)
    policies = [fixed_k(k) for k in cfg.k_grid]
    if cfg.h_grid:
        heads = []
        if cfg.data:
            cfg.check_files("data")
            if not cfg.w_rej_grid or not cfg.depth_grid:
                raise DomainError("training heads needs nonempty w_rej_grid and depth_grid")
            ds = ExampleSet.load_jsonl(cfg.data)
            for w in cfg.w_rej_grid:
                for d in cfg.depth_grid:
                    head = train_head(ds, w_rej=w, depth=d, width=cfg.width, epochs=cfg.epochs,
                                      step_size=cfg.step_size, rng=np.random.default_rng(cfg.seed))
                    heads.append((f"w_rej={w:g}:D={d}", head))
        elif cfg.head:
            cfg.check_files("head")
            heads.append((f"head={Path(cfg.head).name}", load_head(cfg.head)))
        else:
            raise DomainError("an h_grid needs either data (to train heads) or head")
        for tag, head in heads:
            for h in cfg.h_grid:
                policies.append(adaptive_threshold(head, h, head_path=tag))
    points, summaries = bench_policies(policies, target, draft, prompts, cfg)
    write_bench_csv(points, args.out)
    _write_summary(_summary_path(args), cfg, summaries)
    print(f"wrote {len(points)} sweep points to {args.out}")
    return 0


def cmd_oracle_check(args) -> int:
    cfg = _config(args)
    # short instances plus long-horizon ones where multi-candidate states are reachable
    mdps = battery(cfg.battery_size, cfg.seed) + battery(cfg.battery_size, cfg.seed, long=True)[:-1]
    worst, reports = 0.0, []
    for i, mdp in enumerate(mdps):
        ref = target_output_dist(mdp)
        for pol in battery_policies(mdp, cfg.seed + i):
            law = exact_output_dist(mdp, pol)
            keys = set(ref) | set(law)
            worst = max(worst, max(abs(ref.get(k, 0.0) - law.get(k, 0.0)) for k in keys))
            reports.append(check_threshold_condition(mdp, pol))
    write_report_csv(reports, args.out)
    n_fired = int(sum(r.n_fired for r in reports))
    n_viol = int(sum(r.n_violations for r in reports))
    worst = float(worst)
    unbiased = bool(worst <= args.tol)
    summary = {
        "config": cfg.to_dict(),
        "instances": len(mdps),
        "audits": len(reports),
        "max_law_difference": worst,
        "unbiased": unbiased,
        "states_audited": sum(len(r.rows) for r in reports),
        "condition_fired": n_fired,
        "violations": n_viol,
    }
    with open(_summary_path(args), "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(f"unbiasedness: max |law - target| = {worst:.3e} over {len(reports)} (instance, policy) pairs")
    print(f"threshold condition: fired on {n_fired} states, {n_viol} violations")
    if not unbiased or n_viol:
        print("oracle-check FAILED", file=sys.stderr)
        return 1
    if n_fired == 0:
        print("warning: threshold condition never fired", file=sys.stderr)
    return 0


# -- parser -----------------------------------------------------------------


def _add_run_flags(p, *extra):
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int)
    if "models" in extra:
        p.add_argument("--target", help="target model JSON")
        p.add_argument("--draft", help="draft model JSON")
        p.add_argument("--prompts", help="prompt file")
        p.add_argument("--prompt-format", dest="prompt_format", choices=["bytes", "tokens"])
        p.add_argument("--prompt-len", dest="prompt_len", type=int)
        p.add_argument("--max-len", dest="max_len", type=int)
        p.add_argument("--k-cap", dest="k_cap", type=int)
        p.add_argument("--top-k", dest="top_k", type=int)
        p.add_argument("--temperature", type=float)
        p.add_argument("--greedy", action="store_true", default=None)
    if "bench" in extra:
        p.add_argument("--n-generations", dest="n_generations", type=int)
        p.add_argument("--cost", type=float, nargs=2, metavar=("T_DRAFT", "T_TARGET"))
        p.add_argument("--standalone-cost", dest="standalone_cost", type=float, nargs=2,
                       metavar=("T_DRAFT", "T_TARGET"))
    if "train" in extra:
        p.add_argument("--width", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--step-size", dest="step_size", type=float)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="adaspec", description="Adaptive speculative decoding toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-lm", help="fit a k-gram model")
    p.add_argument("--corpus")
    p.add_argument("--synthetic", type=int, metavar="LINES", help="fit on generated text instead")
    p.add_argument("--format", choices=["bytes", "tokens"], default="bytes")
    p.add_argument("--order", type=int, default=2)
    p.add_argument("--smoothing", type=float, default=0.01)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_lm)

    p = sub.add_parser("write-corpus", help="write synthetic English-like text")
    p.add_argument("--lines", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_write_corpus)

    p = sub.add_parser("gen-data", help="build a token-mixed training set")
    _add_run_flags(p, "models")
    p.add_argument("--r", type=float, default=15.0, help="percent of positions taken from the target")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-head", help="train an acceptance prediction head")
    _add_run_flags(p, "train")
    p.add_argument("--data")
    p.add_argument("--w-rej", dest="w_rej", type=float, default=1.0)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_head)

    p = sub.add_parser("bench", help="benchmark policies")
    _add_run_flags(p, "models", "bench")
    p.add_argument("--policy", action="append", help="policy spec, repeatable (e.g. fixed:4)")
    p.add_argument("--traces", help="write every trace as JSON lines")
    p.add_argument("--out", required=True, help="CSV of bench points")
    p.add_argument("--summary", help="JSON summary (default: next to --out)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="cross fixed-K and adaptive grids")
    _add_run_flags(p, "models", "bench", "train")
    p.add_argument("--head")
    p.add_argument("--data")
    p.add_argument("--k-grid", dest="k_grid", type=int, nargs="*")
    p.add_argument("--h-grid", dest="h_grid", type=float, nargs="*")
    p.add_argument("--w-rej-grid", dest="w_rej_grid", type=float, nargs="*")
    p.add_argument("--depth-grid", dest="depth_grid", type=int, nargs="*")
    p.add_argument("--out", required=True)
    p.add_argument("--summary")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle-check", help="exact unbiasedness and threshold-condition audits")
    _add_run_flags(p)
    p.add_argument("--battery-size", dest="battery_size", type=int)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--out", required=True, help="CSV of audited states")
    p.add_argument("--summary")
    p.set_defaults(func=cmd_oracle_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SpecDecError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
