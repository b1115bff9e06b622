"""``hybridnmt`` command line.

Exit status: 0 on success, 2 on a configuration or usage error, 1 on a
runtime error. Numbers are printed with 4 decimals.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import autograd as ag
from .bench import bench
from .config import ConfigError, RunConfig, load_config
from .data import Vocab, build_vocab, encode_pairs, gen_toy_corpus, toy_vocab, write_lines
from .decoding import NMTStepper, beam_search, corpus_bleu
from .model import (Batch, ModelConfig, Variant, init_params, load_checkpoint, loss_graph,
                    save_checkpoint)
from .parallel.placement import Strategy
from .parallel.strategies import plan_for, strategy_variant
from .simulator import calibrate, pipeline_report, simulate_strategy
from .tensor import Rng
from .trainer import train

GRAD_TOL = 1e-4


def _strategy(text: str) -> Strategy:
    try:
        return Strategy.parse(text)
    except ValueError:
        raise ConfigError(f"unknown strategy {text!r}; choose from"
                          f" {', '.join(s.value for s in Strategy)}") from None


def _fmt(x) -> str:
    return f"{x:.4f}" if isinstance(x, float) else str(x)


def _round(obj):
    if isinstance(obj, float):
        return float(f"{obj:.4f}")
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    return obj


def _dumps(obj) -> str:
    return json.dumps(_round(obj), sort_keys=True)


def _out_dir(args, cfg: RunConfig | None = None) -> Path | None:
    d = getattr(args, "out_dir", None) or (cfg.out_dir if cfg else "")
    if not d:
        return None
    p = Path(d)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ------------------------------------------------------------------ commands


def _corpus(cfg: RunConfig):
    if cfg.train_src:
        vocab = Vocab.load(cfg.vocab) if cfg.vocab else \
            build_vocab([cfg.train_src, cfg.train_tgt], cfg.vocab_size)
        tr = encode_pairs(cfg.train_src, cfg.train_tgt, vocab)
        dv = encode_pairs(cfg.dev_src, cfg.dev_tgt, vocab) if cfg.dev_src else tr[:200]
        return vocab, tr, dv
    vocab = toy_vocab(cfg.vocab_size)
    src, tgt = gen_toy_corpus(cfg.toy_task, cfg.toy_train + cfg.toy_dev, cfg.toy_max_len,
                              cfg.vocab_size, cfg.seed)
    pairs = encode_pairs(src, tgt, vocab)
    return vocab, pairs[:cfg.toy_train], pairs[cfg.toy_train:]


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    mc = cfg.model_config()
    strategy = cfg.strategy_enum
    if mc.variant is not strategy_variant(strategy, mc.variant):
        raise ConfigError(f"{strategy.value} runs the"
                          f" {strategy_variant(strategy, mc.variant).value} model")
    vocab, tr, dv = _corpus(cfg)
    if len(vocab) > mc.vocab_size:
        raise ConfigError(f"vocabulary has {len(vocab)} entries > vocab_size {mc.vocab_size}")
    plan = plan_for(strategy, mc, cfg.n_devices)
    out = _out_dir(args, cfg)
    metrics_path = cfg.metrics or (str(out / "metrics.jsonl") if out else "")
    sink = open(metrics_path, "w") if metrics_path else sys.stdout
    try:
        res = train(init_params(mc, cfg.seed), mc, plan, tr, dv, batch_size=cfg.batch_size,
                    epochs=cfg.epochs, seed=cfg.seed, lr=cfg.lr, eval_every=cfg.lr_decay_interval,
                    decay=cfg.lr_decay, clip_norm=cfg.clip_norm, max_batches=cfg.max_batches,
                    sink=lambda r: sink.write(_dumps(r) + "\n"))
    finally:
        if sink is not sys.stdout:
            sink.close()
    ckpt = cfg.checkpoint or (str(out / "model.ckpt") if out else "")
    if ckpt:
        save_checkpoint(ckpt, res.params, mc)
        vocab.save(ckpt + ".vocab")
    if out and res.records:
        from .plotting import plot_perplexity
        plot_perplexity(res.records, out / "perplexity.png")
    return 0


def _sim_config(cfg: RunConfig, full_size: bool) -> ModelConfig:
    return ModelConfig(variant=cfg.variant) if full_size else cfg.model_config()


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    if args.scenario == "pipeline":
        rep, n_dev = pipeline_report(args.src_len or 100, args.depth or 4)
    else:
        strategy = _strategy(args.strategy or cfg.strategy)
        mc = _sim_config(cfg, not args.config_sizes)
        rep = simulate_strategy(strategy, cfg.cost_model(), mc, args.src_len or cfg.src_len,
                                args.tgt_len or cfg.tgt_len, batch_size=args.batch_size)
        n_dev = 1 if strategy is Strategy.SERIAL else 4
    text = _dumps(rep.to_json())
    print(text)
    if out:
        (out / "simulate.json").write_text(text + "\n")
        from .plotting import plot_gantt
        plot_gantt(rep.tasks, n_dev, out / "gantt.png", rep.strategy)
    return 0


def _read_targets(path):
    targets = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").replace("=", " ").split()
        if len(parts) != 2:
            raise ConfigError(f"{path}:{lineno}: expected 'strategy value'")
        try:
            targets.append((_strategy(parts[0]), float(parts[1])))
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
    if not targets:
        raise ConfigError(f"{path}: no targets")
    return targets


def cmd_calibrate(args) -> int:
    cfg = load_config(args.config)
    try:
        targets = _read_targets(args.targets)
    except OSError as exc:
        raise ConfigError(f"cannot read targets: {exc}") from exc
    free = tuple(args.free.split(","))
    mc = _sim_config(cfg, not args.config_sizes)
    cal = calibrate(cfg.cost_model(), targets, mc, cfg.src_len, cfg.tgt_len, free)
    result = {"cost_model": {k: v for k, v in cal.cost.to_json().items() if k != "batch_caps"},
              "residual": cal.residual, "fitted": cal.fitted, "targets": cal.targets}
    text = _dumps(result)
    print(text)
    out = _out_dir(args, cfg)
    if out:
        (out / "calibration.json").write_text(text + "\n")
        from .plotting import plot_scaling
        plot_scaling(list(cal.fitted.items()), out / "calibrated_scaling.png",
                     "Simulated scaling after calibration")
    return 0


def cmd_decode(args) -> int:
    try:
        params, mc = load_checkpoint(args.checkpoint)
        vocab = Vocab.load(args.vocab or args.checkpoint + ".vocab")
        lines = Path(args.input).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(str(exc)) from exc
    model = NMTStepper(params, mc)
    for line in lines:
        ids = vocab.encode(line)
        if not ids:
            print("")
            continue
        hyp = beam_search(model, ids, args.beam, args.length_penalty, args.max_len)
        print(" ".join(vocab.decode(hyp.tokens)))
    return 0


def cmd_eval_bleu(args) -> int:
    try:
        hyp = Path(args.hyp).read_text(encoding="utf-8").splitlines()
        ref = Path(args.ref).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(str(exc)) from exc
    print(_fmt(corpus_bleu(hyp, ref)))
    return 0


def grad_check_model(config: ModelConfig, batch_size: int = 3, seed: int = 1,
                     max_len: int = 4) -> float:
    """Gradient check of the mean token loss on a random float64 batch."""
    cfg = config.replace(precision=64, dropout=0.0)
    rng = Rng(seed).child(31)
    pairs = []
    for _ in range(batch_size):
        m, n = (int(x) for x in rng.integers(1, max_len + 1, size=2))
        pairs.append((list(rng.integers(4, cfg.vocab_size, size=m)),
                      list(rng.integers(4, cfg.vocab_size, size=n))))
    # unit-scale weights keep every gradient far above finite-difference noise
    params = init_params(cfg, seed, scale=1.0)
    return ag.grad_check(loss_graph(params, cfg, Batch.from_pairs(pairs)), "loss", 1e-6)


def cmd_grad_check(args) -> int:
    cfg = load_config(args.config)
    variants = ([Variant.INPUT_FEEDING, Variant.NO_INPUT_FEEDING] if args.variant == "both"
                else [Variant(args.variant)])
    worst = 0.0
    for v in variants:
        err = grad_check_model(cfg.model_config().replace(variant=v), args.batch, cfg.seed)
        print(f"{v.value}\tmaxRelErr\t{err:.4e}")
        worst = max(worst, err)
    print(f"maxRelErr\t{worst:.4e}")
    return 0 if worst <= GRAD_TOL else 1


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    strategies = [_strategy(s) for s in args.strategies.split(",") if s.strip()]
    if not strategies:
        raise ConfigError("no strategies given")
    caps = {}
    if args.batch_sizes:
        for item in args.batch_sizes.split(","):
            try:
                k, v = item.split("=")
                caps[_strategy(k)] = int(v)
            except ValueError as exc:
                raise ConfigError(f"bad --batch-sizes item {item!r}: {exc}") from None
    rows = bench(strategies, cfg.model_config(), cfg.bench_len, cfg.bench_steps, cfg.seed, caps)
    lines = ["strategy\tsrcTokensPerSec\tscalingFactor\tbatchSize"]
    lines += [f"{r.strategy}\t{r.src_tokens_per_sec:.4f}\t{r.scaling_factor:.4f}\t{r.batch_size}"
              for r in rows]
    print("\n".join(lines))
    out = _out_dir(args, cfg)
    if out:
        (out / "bench.tsv").write_text("\n".join(lines) + "\n")
        from .plotting import plot_scaling
        plot_scaling([(r.strategy, r.scaling_factor) for r in rows], out / "bench_scaling.png",
                     "Measured scaling vs serial (virtual devices)")
    return 0


def cmd_gen_toy(args) -> int:
    src, tgt = gen_toy_corpus(args.task, args.n, args.max_len, args.vocab_size, args.seed)
    write_lines(args.prefix + ".src", src)
    write_lines(args.prefix + ".tgt", tgt)
    return 0


# --------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridnmt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("train", cmd_train, "train a model; metrics as JSON lines")
    sp.add_argument("--config")
    sp.add_argument("--out-dir")

    sp = add("simulate", cmd_simulate, "simulate one strategy; report JSON")
    sp.add_argument("--config")
    sp.add_argument("--strategy")
    sp.add_argument("--scenario", choices=("strategies", "pipeline"), default="strategies")
    sp.add_argument("--src-len", type=int)
    sp.add_argument("--tgt-len", type=int)
    sp.add_argument("--depth", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--config-sizes", action="store_true",
                    help="use the config's model sizes instead of the full-size model")
    sp.add_argument("--out-dir")

    sp = add("calibrate", cmd_calibrate, "fit cost-model scalars to scaling factors")
    sp.add_argument("--targets", required=True)
    sp.add_argument("--config")
    sp.add_argument("--free", default="compute_cost,transfer_cost,sync_cost")
    sp.add_argument("--config-sizes", action="store_true")
    sp.add_argument("--out-dir")

    sp = add("decode", cmd_decode, "beam-search decode one sentence per line")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--vocab")
    sp.add_argument("--beam", type=int, default=5)
    sp.add_argument("--length-penalty", type=float, default=1.0)
    sp.add_argument("--max-len", type=int, default=50)

    sp = add("eval-bleu", cmd_eval_bleu, "corpus BLEU of hypothesis vs reference file")
    sp.add_argument("--hyp", required=True)
    sp.add_argument("--ref", required=True)

    sp = add("grad-check", cmd_grad_check, "finite-difference gradient check")
    sp.add_argument("--config")
    sp.add_argument("--variant", default="both",
                    choices=("both", "input_feeding", "no_input_feeding"))
    sp.add_argument("--batch", type=int, default=3)

    sp = add("bench", cmd_bench, "wall-clock throughput per strategy (TSV)")
    sp.add_argument("--config")
    sp.add_argument("--strategies", default="serial,data_parallel,model_parallel,hybrid_if,hybrid")
    sp.add_argument("--batch-sizes", help="overrides, e.g. hybrid=224,serial=64")
    sp.add_argument("--out-dir")

    sp = add("gen-toy", cmd_gen_toy, "write a copy/reverse toy corpus")
    sp.add_argument("--task", choices=("copy", "reverse"), default="reverse")
    sp.add_argument("--n", type=int, default=2000)
    sp.add_argument("--max-len", type=int, default=10)
    sp.add_argument("--vocab-size", type=int, default=50)
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--prefix", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
