"""Command-line surface: corpus generation, training, generation, benchmarks.

Commands: make-corpus, train-target, train-draft, generate, bench, audit,
alpha-table.  Configuration lives in a strict JSON file (unknown keys are
rejected before any model loads); command-line flags override file values.
Exit codes: 0 success, 1 usage/config error, 2 runtime error, 3 statistical
audit failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bench import (
    AlphaReport,
    compute_alpha_n,
    format_table,
    lossless_audit,
    speedup_benchmark,
)
from .corpus import decode_tokens, encode_text, ingest_corpus, make_corpus, write_corpus
from .draft import DraftHead, DraftInputMode
from .drafting import TreeTopology
from .engine import Engine, GenerationParams
from .errors import UsageError, ValidationError
from .model import ModelConfig, TransformerWeights
from .training import TrainConfig, train_draft_head, train_target_toy, write_curve

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_AUDIT = 3

_MODE_ALIASES = {
    "shifted": DraftInputMode.FEATURE_SHIFTED_TOKEN,
    "unshifted": DraftInputMode.FEATURE_UNSHIFTED_TOKEN,
    "token": DraftInputMode.TOKEN_ONLY,
    "feature": DraftInputMode.FEATURE_ONLY,
}

_SCHEMA = {
    "model": {"vocab_size", "hidden_dim", "num_layers", "num_heads", "ffn_dim",
              "max_positions", "seed"},
    "target_checkpoint": None,
    "draft_checkpoint": None,
    "draft_checkpoints": None,   # optional per-ablation-mode map
    "corpus": None,
    "training": {"learning_rate", "betas", "weight_decay", "grad_clip",
                 "noise_magnitude", "w_cls", "epochs", "batch_size", "seed",
                 "data_mode"},
    "draft_training": {"learning_rate", "betas", "weight_decay", "grad_clip",
                       "noise_magnitude", "w_cls", "epochs", "batch_size", "seed",
                       "data_mode"},
    "generation": {"mode", "temperature", "max_new_tokens", "gamma", "seed"},
    "tree": {"branching", "budget"},
    "bench": {"prompts", "prompt_len", "repetitions", "trials", "alpha_trials",
              "min_prefix", "gamma", "seed"},
    "output_dir": None,
}


@dataclass
class EngineConfig:
    """Validated view of the JSON config file."""

    raw: dict
    path: Path
    model: ModelConfig
    training: TrainConfig
    tree: TreeTopology
    draft_training: TrainConfig | None = None
    generation: dict = field(default_factory=dict)
    bench: dict = field(default_factory=dict)

    @property
    def output_dir(self) -> Path:
        out = Path(self.raw.get("output_dir", "runs"))
        if not out.is_absolute():
            out = self.path.parent / out
        return out

    def file_path(self, key: str, must_exist: bool = False) -> Path:
        value = self.raw.get(key)
        if value is None:
            raise ValidationError(f"config key {key!r} is required for this command")
        path = Path(value)
        if not path.is_absolute():
            path = self.path.parent / path
        if must_exist and not path.exists():
            raise ValidationError(f"config {key!r} refers to a missing file: {path}")
        return path

    def draft_checkpoint_for(self, alias: str | None, must_exist: bool = False) -> Path:
        if alias is None:
            return self.file_path("draft_checkpoint", must_exist)
        mode = _MODE_ALIASES[alias]
        table = self.raw.get("draft_checkpoints") or {}
        if mode.value in table:
            path = Path(table[mode.value])
            if not path.is_absolute():
                path = self.path.parent / path
            if must_exist and not path.exists():
                raise ValidationError(f"draft checkpoint for {alias} missing: {path}")
            return path
        if alias == "shifted":
            return self.file_path("draft_checkpoint", must_exist)
        raise ValidationError(f"no draft checkpoint configured for input mode {alias!r}")


def _check_keys(obj: dict, allowed, where: str) -> None:
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ValidationError(f"unknown config key(s) in {where}: {sorted(unknown)}")


def load_config(path) -> EngineConfig:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    _check_keys(raw, _SCHEMA, str(path))
    for key, fields in _SCHEMA.items():
        if fields is not None and key in raw:
            if not isinstance(raw[key], dict):
                raise ValidationError(f"{path}: {key!r} must be an object")
            _check_keys(raw[key], fields, f"{path}:{key}")
    model = ModelConfig(**raw.get("model", {}))

    def _train_config(block: dict) -> TrainConfig:
        block = dict(block)
        if "betas" in block:
            block["betas"] = tuple(block["betas"])
        return TrainConfig(**block)

    training = _train_config(raw.get("training", {}))
    draft_training = _train_config(raw.get("draft_training", raw.get("training", {})))
    tree_raw = raw.get("tree", {"branching": [4, 2, 1], "budget": 10})
    tree = TreeTopology(tree_raw.get("branching", [4, 2, 1]), tree_raw.get("budget"))
    return EngineConfig(raw=raw, path=path, model=model, training=training,
                        draft_training=draft_training, tree=tree,
                        generation=dict(raw.get("generation", {})),
                        bench=dict(raw.get("bench", {})))


def _generation_params(config: EngineConfig, args) -> GenerationParams:
    gen = dict(config.generation)
    for key, attr in (("mode", "mode"), ("temperature", "temperature"),
                      ("max_new_tokens", "max_new_tokens"), ("gamma", "gamma"),
                      ("seed", "seed")):
        value = getattr(args, attr, None)
        if value is not None:
            gen[key] = value
    mode = gen.get("mode", "vanilla")
    return GenerationParams(
        mode=mode,
        temperature=float(gen.get("temperature", 0.0)),
        max_new_tokens=int(gen.get("max_new_tokens", 64)),
        gamma=int(gen.get("gamma", 4)),
        tree=config.tree if mode == "tree" else None,
        seed=int(gen.get("seed", 0)),
    )


def _load_pair(config: EngineConfig, draft_alias: str | None = None):
    target = TransformerWeights.load(config.file_path("target_checkpoint", must_exist=True))
    head_path = config.draft_checkpoint_for(draft_alias, must_exist=True)
    head = DraftHead.load(head_path, target)
    return target, head


def _bench_prompts(config: EngineConfig, count: int, length: int) -> list[list[int]]:
    corpus = ingest_corpus(config.file_path("corpus", must_exist=True),
                           config.model.vocab_size)
    rng = np.random.default_rng(int(config.bench.get("seed", 0)))
    prompts = []
    usable = [s for s in corpus.sequences if len(s) >= length]
    if not usable:
        raise ValidationError(f"no corpus sequence has >= {length} tokens for prompts")
    for _ in range(count):
        seq = usable[int(rng.integers(len(usable)))]
        prompts.append(list(seq[:length]))
    return prompts


def cmd_make_corpus(args) -> int:
    corpus = make_corpus(seed=args.seed, size_tokens=args.size)
    write_corpus(corpus, args.out)
    print(f"wrote {corpus.total_tokens} tokens in {len(corpus.sequences)} sequences to {args.out}")
    return EXIT_OK


def cmd_train_target(args) -> int:
    config = load_config(args.config)
    corpus = ingest_corpus(config.file_path("corpus", must_exist=True),
                           config.model.vocab_size)
    weights, curve = train_target_toy(corpus, config.model, config.training)
    config.output_dir.mkdir(parents=True, exist_ok=True)
    out = config.file_path("target_checkpoint")
    out.parent.mkdir(parents=True, exist_ok=True)
    weights.save(out)
    curve_path = config.output_dir / "target_curve.csv"
    write_curve(curve, curve_path)
    from .training import mean_predictive_entropy

    entropy = mean_predictive_entropy(weights, corpus, max_sequences=32)
    bound = float(np.log(config.model.vocab_size)) / 2.0
    print(f"target checkpoint: {out}")
    print(f"curve: {curve_path}")
    print(f"mean predictive entropy: {entropy:.3f} nats (bound {bound:.3f})")
    if entropy >= bound:
        print("error: trained target is still near-uniform; increase epochs or data",
              file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_train_draft(args) -> int:
    config = load_config(args.config)
    target = TransformerWeights.load(config.file_path("target_checkpoint", must_exist=True))
    corpus = ingest_corpus(config.file_path("corpus", must_exist=True),
                           config.model.vocab_size)
    mode = _MODE_ALIASES[args.draft_input]
    train_cfg = config.draft_training or config.training
    head, curve = train_draft_head(target, corpus, train_cfg, mode=mode)
    out = config.draft_checkpoint_for(args.draft_input)
    out.parent.mkdir(parents=True, exist_ok=True)
    head.save(out)
    config.output_dir.mkdir(parents=True, exist_ok=True)
    curve_path = config.output_dir / f"draft_curve_{mode.value}.csv"
    write_curve(curve, curve_path)
    print(f"draft checkpoint: {out}")
    print(f"curve: {curve_path}")
    print(f"final loss: {curve[-1].l_total:.4f} (from {curve[0].l_total:.4f})")
    return EXIT_OK


def cmd_generate(args) -> int:
    config = load_config(args.config)
    params = _generation_params(config, args)
    if params.mode == "vanilla":
        target = TransformerWeights.load(config.file_path("target_checkpoint", must_exist=True))
        engine = Engine(target)
    else:
        target, head = _load_pair(config, None)
        engine = Engine(target, head)
    if args.prompt_tokens:
        prompt = [int(t) for t in args.prompt_tokens.split(",")]
    elif args.prompt:
        prompt = encode_text(args.prompt)
    else:
        raise UsageError("provide --prompt or --prompt-tokens")
    tokens, log = engine.generate(prompt, params)
    print(decode_tokens(tokens))
    config.output_dir.mkdir(parents=True, exist_ok=True)
    runlog_path = config.output_dir / "runlog.jsonl"
    with open(runlog_path, "a") as fh:
        fh.write(json.dumps(log.to_dict(), sort_keys=True) + "\n")
    print(f"run log appended to {runlog_path}", file=sys.stderr)
    return EXIT_OK


def cmd_bench(args) -> int:
    config = load_config(args.config)
    target, head = _load_pair(config, args.draft_input)
    bench_cfg = config.bench
    prompts = _bench_prompts(config, int(bench_cfg.get("prompts", 4)),
                             int(bench_cfg.get("prompt_len", 16)))
    params = _generation_params(config, args)
    report = speedup_benchmark(
        target, head, prompts,
        max_new_tokens=params.max_new_tokens,
        temperature=params.temperature,
        gamma=int(bench_cfg.get("gamma", params.gamma)),
        topology=config.tree,
        repetitions=int(bench_cfg.get("repetitions", 5)),
        seed=params.seed,
    )
    config.output_dir.mkdir(parents=True, exist_ok=True)
    out = config.output_dir / "bench_report.json"
    out.write_text(report.to_json())
    print(format_table(report))
    print(f"report: {out}", file=sys.stderr)
    return EXIT_OK


def cmd_audit(args) -> int:
    from .bench import select_audit_prompt

    config = load_config(args.config)
    target, head = _load_pair(config, args.draft_input)
    bench_cfg = config.bench
    corpus = ingest_corpus(config.file_path("corpus", must_exist=True),
                           config.model.vocab_size)
    trials = int(args.trials or bench_cfg.get("trials", 100_000))
    temperature = args.temperature if args.temperature is not None else 1.0
    # The audited conditional must carry real entropy or the audit (and its
    # negative control) would be measuring a deterministic token.
    prompt = select_audit_prompt(target, corpus, float(temperature),
                                 prompt_len=int(bench_cfg.get("prompt_len", 16)),
                                 seed=int(bench_cfg.get("seed", 0)))
    report = lossless_audit(target, head, prompt, trials=trials,
                            temperature=float(temperature),
                            gamma=int(bench_cfg.get("gamma", 2)),
                            seed=int(bench_cfg.get("seed", 0)))
    config.output_dir.mkdir(parents=True, exist_ok=True)
    out = config.output_dir / "audit_report.json"
    out.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    for w in report.windows:
        print(f"prefix_len={w.prefix_len} trials={w.trials} "
              f"TVD={w.tvd:.5f} chi2={w.chi2_stat:.1f}/{w.chi2_dof} p={w.p_value:.4f}")
    print(f"report: {out}", file=sys.stderr)
    if not report.passed:
        print("AUDIT FAILED: output law deviates from the target's", file=sys.stderr)
        return EXIT_AUDIT
    print("audit passed")
    return EXIT_OK


def cmd_alpha_table(args) -> int:
    config = load_config(args.config)
    target, head = _load_pair(config, args.draft_input)
    corpus = ingest_corpus(config.file_path("corpus", must_exist=True),
                           config.model.vocab_size)
    bench_cfg = config.bench
    params = _generation_params(config, args)
    trials = int(bench_cfg.get("alpha_trials", 200))
    alphas: list[AlphaReport] = []
    for n in range(5):
        alphas.append(compute_alpha_n(target, head, corpus, n, params.temperature,
                                      trials, seed=int(bench_cfg.get("seed", 0)),
                                      min_prefix=int(bench_cfg.get("min_prefix", 32))))
    prompts = _bench_prompts(config, int(bench_cfg.get("prompts", 4)),
                             int(bench_cfg.get("prompt_len", 16)))
    report = speedup_benchmark(
        target, head, prompts,
        max_new_tokens=params.max_new_tokens,
        temperature=params.temperature,
        gamma=int(bench_cfg.get("gamma", 4)),
        topology=config.tree,
        repetitions=int(bench_cfg.get("repetitions", 5)),
        seed=params.seed,
    )
    report.alphas = {f"{a.n}-alpha": a.alpha for a in alphas}
    config.output_dir.mkdir(parents=True, exist_ok=True)
    out = config.output_dir / "alpha_table.json"
    out.write_text(report.to_json())
    print(format_table(report))
    print(f"report: {out}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specdec",
                                     description="speculative decoding toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", help="generate a synthetic grammar corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=100_000)
    p.set_defaults(fn=cmd_make_corpus)

    for name, fn, needs_mode in (
        ("train-target", cmd_train_target, False),
        ("train-draft", cmd_train_draft, True),
    ):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} from a config")
        p.add_argument("--config", required=True)
        if needs_mode:
            p.add_argument("--draft-input", choices=sorted(_MODE_ALIASES), default="shifted")
        p.set_defaults(fn=fn)

    p = sub.add_parser("generate", help="generate text with vanilla/chain/tree decoding")
    p.add_argument("--config", required=True)
    p.add_argument("--prompt")
    p.add_argument("--prompt-tokens")
    p.add_argument("--mode", choices=("vanilla", "chain", "tree"))
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-new-tokens", dest="max_new_tokens", type=int)
    p.add_argument("--gamma", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_generate)

    for name, fn in (("bench", cmd_bench), ("audit", cmd_audit),
                     ("alpha-table", cmd_alpha_table)):
        p = sub.add_parser(name, help=f"run {name}")
        p.add_argument("--config", required=True)
        p.add_argument("--draft-input", choices=sorted(_MODE_ALIASES), default=None)
        p.add_argument("--mode", choices=("vanilla", "chain", "tree"))
        p.add_argument("--temperature", type=float)
        p.add_argument("--max-new-tokens", dest="max_new_tokens", type=int)
        p.add_argument("--gamma", type=int)
        p.add_argument("--seed", type=int)
        if name == "audit":
            p.add_argument("--trials", type=int)
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except (UsageError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures get a distinct code
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
