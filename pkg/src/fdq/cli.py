"""Command-line driver: train, train-q, decode, eval, compare, selftest.

One entry point ties the library together.  Every command reads one JSON
config (plus ``--set`` overrides), derives all randomness from the global
seed through named substreams, and writes a run manifest next to its
artifacts.  Exit codes: 0 success, 2 user or config error, 3 numeric
failure.
"""

import argparse
import json
import math
import sys
import tempfile
from pathlib import Path

import numpy as np

from .autodiff import Tensor, fd_check, log_softmax, matmul, mul, sum_all, tanh
from .checkpoint import load_tensors, save_tensors
from .config import (RunManifest, apply_overrides, config_hash, default_config,
                     load_config, timed, validate_config)
from .data import Corpus, TaskSpec, gen_task, load_corpus, save_corpus, split
from .decode import (DecodeConfig, RegressorScorer, beam_search, decode_corpus,
                     exhaustive_decode)
from .errors import ConfigError, FdqError, TrainingDivergenceError
from .metrics import bleu, distinct_n, evaluate, rouge2
from .seeding import stream_key
from .seq2seq import Seq2Seq, TrainSchedule, dataset_ce, train_mle
from .value import (BackwardRegressor, LengthRegressor, OutcomePredictor,
                    OutcomeScorer, PartialBackwardEnsemble,
                    PartialBackwardScorer, RolloutConfig, backward_examples,
                    constant_baseline_mse, generate_rollouts, length_examples,
                    load_rollouts, outcome_mse, regression_mse, save_rollouts,
                    swap_corpus, train_backward_model, train_backward_q_option1,
                    train_backward_q_option2, train_length_q, train_outcome_q)

FORWARD = "forward.fdq"
BACKWARD = "backward.fdq"
Q_FILES = {"length": "q_length.fdq", "backward_opt1": "q_backward_opt1.fdq",
           "backward_opt2": "q_backward_opt2.fdq", "outcome": "q_outcome.fdq"}
ROLLOUTS = "rollouts.ndjson"


def _seed(config, *names):
    return stream_key(config["seed"], *names) % (2 ** 32)


def _require(path, hint):
    if not Path(path).exists():
        raise ConfigError(f"missing {path}; {hint}")
    return path


def _subcorpus(corpus, pairs):
    return Corpus(list(pairs), corpus.src_vocab, corpus.tgt_vocab,
                  dict(corpus.provenance))


def load_task(config):
    """Regenerate the task corpus and its split from the global seed."""
    t = config["task"]
    corpus = gen_task(TaskSpec(t["name"], vocab=t["vocab"],
                               min_len=t["min_len"], max_len=t["max_len"],
                               pairs=t["pairs"], seed=_seed(config, "data")))
    return split(corpus, config["split"], seed=_seed(config, "split"))


def _load_forward(config, out):
    model = Seq2Seq.load(_require(out / FORWARD, "run `fdq train` first"))
    return model


def _check_vocab(model, corpus):
    want = (len(corpus.src_vocab), len(corpus.tgt_vocab))
    got = (model.src_vocab, model.tgt_vocab)
    if got != want:
        raise ConfigError(
            f"checkpoint vocab sizes {got} do not match task vocab {want}; "
            f"the checkpoint was trained under a different config")
    return model


def _write_ndjson(path, records):
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    return path


def _read_ndjson(path):
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    return records


def _print_epoch(record):
    line = f"epoch={record['epoch']} train_ce={record['train_ce']:.4f}"
    if "dev_ce" in record:
        line += f" dev_ce={record['dev_ce']:.4f}"
    print(line)


def _train_schedule(section, seed):
    return TrainSchedule(epochs=section["epochs"],
                         batch_size=section["batch_size"],
                         optimizer=section.get("optimizer", "adam"),
                         lr=section["lr"],
                         clip_norm=section.get("clip_norm", 5.0),
                         seed=seed,
                         patience=section.get("patience", 0))


def _needs_backward(config):
    # any backward-family experiment gets the exact backward model, so
    # the mmi_rerank baseline in `compare` works without extra steps
    return (config["q"]["family"] in ("backward_opt1", "backward_opt2")
            or config["decode"]["mode"] == "mmi_rerank")


# -- commands -------------------------------------------------------------------


def cmd_train(config):
    out = Path(config["out"])
    manifest = RunManifest("train", config_hash(config), config["seed"])
    train, dev, _ = load_task(config)
    m = config["model"]
    model = Seq2Seq(len(train.src_vocab), len(train.tgt_vocab),
                    hidden=m["hidden"], attention=m["attention"],
                    max_len=m["max_len"], seed=_seed(config, "train"))
    sched = _train_schedule(config["train"], _seed(config, "train"))
    with timed(manifest, "train"):
        train_mle(model, train, sched, dev=dev, log=_print_epoch)
    ppl = math.exp(dataset_ce(model, dev))
    print(f"dev_ppl={ppl:.4f}")
    manifest.metrics["dev_ppl"] = ppl
    model.save(out / FORWARD)
    manifest.artifacts["forward"] = str(out / FORWARD)
    if _needs_backward(config):
        b = config["q"]["backward"]
        bsched = _train_schedule(b, _seed(config, "train", "backward"))
        with timed(manifest, "train_backward"):
            backward = train_backward_model(train, bsched, hidden=b["hidden"],
                                            attention=m["attention"],
                                            max_len=m["max_len"])
        ce = dataset_ce(backward, swap_corpus(dev))
        print(f"backward_dev_ce={ce:.4f}")
        manifest.metrics["backward_dev_ce"] = ce
        backward.save(out / BACKWARD)
        manifest.artifacts["backward"] = str(out / BACKWARD)
    save_corpus(dev, out / "dev.json")
    manifest.artifacts["dev_corpus"] = str(out / "dev.json")
    (out / "config.json").write_text(
        json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    manifest.artifacts["config"] = str(out / "config.json")
    manifest.write(out / "train.manifest.json")
    print(f"config_hash={manifest.config_hash}")
    return 0


def cmd_train_q(config):
    out = Path(config["out"])
    manifest = RunManifest("train-q", config_hash(config), config["seed"])
    model = _load_forward(config, out)
    train, dev, _ = load_task(config)
    _check_vocab(model, train)
    q = config["q"]
    family = q["family"]
    sched = _train_schedule(q, _seed(config, "q"))
    target = out / Q_FILES[family]
    if family == "length":
        with timed(manifest, "train_q"):
            reg = train_length_q(model, train, sched, dev=dev)
        _, tl, _ = length_examples(model, train, sched.batch_size)
        df, dl, _ = length_examples(model, dev, sched.batch_size)
        mse = regression_mse(reg, df, dl)
        base = constant_baseline_mse(tl, dl)
        print(f"mse={mse:.4f} baseline_mse={base:.4f}")
        manifest.metrics.update(mse=mse, baseline_mse=base)
        reg.save(target)
    elif family == "backward_opt1":
        backward = Seq2Seq.load(_require(
            out / BACKWARD,
            "train with q.family=backward_opt1 to produce a backward model"))
        with timed(manifest, "train_q"):
            reg = train_backward_q_option1(model, backward, train, sched,
                                           dev=dev)
        _, tl, _ = backward_examples(model, backward, train, sched.batch_size)
        df, dl, _ = backward_examples(model, backward, dev, sched.batch_size)
        mse = regression_mse(reg, df, dl)
        base = constant_baseline_mse(tl, dl)
        print(f"mse={mse:.4f} baseline_mse={base:.4f}")
        manifest.metrics.update(mse=mse, baseline_mse=base)
        reg.save(target)
    elif family == "backward_opt2":
        buckets = tuple((lo, hi) for lo, hi in q["buckets"])
        with timed(manifest, "train_q"):
            ens = train_backward_q_option2(
                train, sched, buckets=buckets, hidden=q["hidden"],
                attention=config["model"]["attention"],
                max_len=config["model"]["max_len"],
                full_targets_only=q["full_targets_only"])
        for i, count in sorted(ens.example_counts.items()):
            print(f"bucket_{i} examples={count}")
        manifest.metrics["bucket_examples"] = {
            str(i): c for i, c in sorted(ens.example_counts.items())}
        ens.save(target)
    elif family == "outcome":
        rpath = out / ROLLOUTS
        if rpath.exists():
            records = load_rollouts(rpath)
            print(f"rollouts={len(records)} (loaded)")
        else:
            rc = q["rollout"]
            source = train if rc["pairs"] is None else \
                _subcorpus(train, train.pairs[:rc["pairs"]])
            rcfg = RolloutConfig(positions=rc["positions"],
                                 samples=rc["samples"], beam=rc["beam"],
                                 metric=rc["metric"],
                                 prefix_source=rc["prefix_source"],
                                 seed=_seed(config, "rollout"))
            with timed(manifest, "rollouts"):
                records = generate_rollouts(model, source, rcfg)
            save_rollouts(rpath, records)
            print(f"rollouts={len(records)} (generated)")
        manifest.artifacts["rollouts"] = str(rpath)
        cut = max(1, int(0.9 * len(records)))
        with timed(manifest, "train_q"):
            predictor = train_outcome_q(records[:cut], sched,
                                        len(train.src_vocab),
                                        len(train.tgt_vocab),
                                        hidden=q["hidden"])
        if records[cut:]:
            mse = outcome_mse(predictor, records[cut:])
            base = constant_baseline_mse([r["q"] for r in records[:cut]],
                                         [r["q"] for r in records[cut:]])
            print(f"mse={mse:.4f} baseline_mse={base:.4f}")
            manifest.metrics.update(mse=mse, baseline_mse=base)
        predictor.save(target)
    else:
        raise ConfigError(f"unknown q family {family!r}")
    manifest.artifacts["q"] = str(target)
    manifest.write(out / "train-q.manifest.json")
    print(f"config_hash={manifest.config_hash}")
    return 0


def _build_scorer(config, out, mode):
    """Per-mode (scorer_factory, backward) from on-disk checkpoints."""
    if mode == "length_q":
        reg = LengthRegressor.load(_require(
            out / Q_FILES["length"], "run `fdq train-q` with q.family=length"))
        return (lambda pair: reg), None
    if mode == "mmi_q":
        p2, p1 = out / Q_FILES["backward_opt2"], out / Q_FILES["backward_opt1"]
        if p2.exists():
            ens = PartialBackwardEnsemble.load(p2)
            return (lambda pair: PartialBackwardScorer(ens)), None
        if p1.exists():
            reg = BackwardRegressor.load(p1)
            return (lambda pair: RegressorScorer(reg)), None
        raise ConfigError(
            f"missing {p2} (or {p1}); run `fdq train-q` with a backward family")
    if mode == "outcome_q":
        pred = OutcomePredictor.load(_require(
            out / Q_FILES["outcome"], "run `fdq train-q` with q.family=outcome"))
        return (lambda pair: OutcomeScorer(pred)), None
    if mode == "mmi_rerank":
        backward = Seq2Seq.load(_require(
            out / BACKWARD, "train with decode.mode=mmi_rerank or "
            "q.family=backward_opt1 to produce a backward model"))
        return None, backward
    return None, None


def _decode_config(d, mode=None, weight=None):
    return DecodeConfig(mode=d["mode"] if mode is None else mode,
                        beam=d["beam"],
                        weight=d["weight"] if weight is None else weight,
                        length=d["length"], nbest=d["nbest"], cap=d["cap"],
                        mask_eos=d["mask_eos"],
                        use_length_protocol=d["use_length_protocol"]).validate()


def _reference_records(corpus):
    # same record shape as decode output, so either file can stand in as
    # the reference side of an eval
    return [{"id": i,
             "src": " ".join(corpus.src_vocab.decode(pair.src)),
             "hyp": " ".join(corpus.tgt_vocab.decode(pair.tgt[:-1])),
             "len": pair.n}
            for i, pair in enumerate(corpus.pairs)]


def cmd_decode(config):
    out = Path(config["out"])
    manifest = RunManifest("decode", config_hash(config), config["seed"])
    model = _load_forward(config, out)
    d = config["decode"]
    if d["input"] is not None:
        corpus = load_corpus(_require(d["input"], "decode.input must exist"))
    else:
        _, corpus, _ = load_task(config)
    _check_vocab(model, corpus)
    dcfg = _decode_config(d)
    scorer_factory, backward = _build_scorer(config, out, dcfg.mode)
    with timed(manifest, "decode"):
        records, stats = decode_corpus(model, corpus, dcfg, scorer_factory,
                                       backward)
    _write_ndjson(out / "decode.ndjson", records)
    _write_ndjson(out / "refs.ndjson", _reference_records(corpus))
    manifest.artifacts["decode"] = str(out / "decode.ndjson")
    manifest.artifacts["refs"] = str(out / "refs.ndjson")
    manifest.metrics.update(stats)
    manifest.write(out / "decode.manifest.json")
    print(f"pairs={stats['pairs']} errors={stats['errors']} "
          f"mode={dcfg.mode} weight={dcfg.weight}")
    return 0


def _aligned_tokens(hyp_records, ref_records):
    hyp_map = {rec["id"]: rec for rec in hyp_records}
    ref_map = {rec["id"]: rec for rec in ref_records}
    if set(hyp_map) != set(ref_map):
        raise ConfigError(
            f"alignment mismatch: {len(hyp_map)} hypothesis ids vs "
            f"{len(ref_map)} reference ids")
    hyps, refs, errors = [], [], 0
    for rid in sorted(hyp_map):
        rec = hyp_map[rid]
        if "hyp" not in rec:
            errors += 1
            hyps.append([])
        else:
            hyps.append(rec["hyp"].split())
        refs.append(ref_map[rid]["hyp"].split())
    return hyps, refs, errors


def _metric_table(hyps, refs, smooth):
    if not hyps:
        raise ConfigError("no aligned records to evaluate")
    ref_len = sum(len(r) for r in refs)
    bleu_report = evaluate("bleu", hyps, refs, smooth=smooth)
    metrics = {
        "bleu": bleu_report.corpus,
        "rouge2": evaluate("rouge2", hyps, refs).corpus,
        "distinct1": distinct_n(hyps, 1),
        "distinct2": distinct_n(hyps, 2),
        "len_ratio": sum(len(h) for h in hyps) / ref_len if ref_len else 0.0,
    }
    return metrics, bleu_report.config


def cmd_eval(config):
    out = Path(config["out"])
    manifest = RunManifest("eval", config_hash(config), config["seed"])
    e = config["eval"]
    hyp_path = Path(e["hyp"]) if e["hyp"] else out / "decode.ndjson"
    ref_path = Path(e["ref"]) if e["ref"] else out / "refs.ndjson"
    _require(hyp_path, "run `fdq decode` first or set eval.hyp")
    _require(ref_path, "run `fdq decode` first or set eval.ref")
    hyps, refs, errors = _aligned_tokens(_read_ndjson(hyp_path),
                                         _read_ndjson(ref_path))
    metrics, bleu_echo = _metric_table(hyps, refs, e["smooth"])
    report = {"pairs": len(hyps), "errors": errors, "metrics": metrics,
              "config": {"smooth": e["smooth"], "bleu": bleu_echo,
                         "hyp": str(hyp_path), "ref": str(ref_path)}}
    (out / "eval.json").write_text(json.dumps(report, indent=2,
                                              sort_keys=True) + "\n",
                                   encoding="utf-8")
    lines = ["metric,value"]
    lines += [f"{name},{value:.6f}" for name, value in metrics.items()]
    (out / "eval.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    manifest.artifacts["report"] = str(out / "eval.json")
    manifest.artifacts["csv"] = str(out / "eval.csv")
    manifest.metrics.update(metrics)
    manifest.write(out / "eval.manifest.json")
    for name, value in metrics.items():
        print(f"{name}={value:.4f}")
    return 0


def _pick_winners(rows):
    # higher is better except len_ratio, which targets 1.0
    winners = {}
    ok = [row for row in rows if row["status"] == "ok"]
    if not ok:
        return winners
    for name in ("bleu", "rouge2", "distinct1", "distinct2"):
        best = max(ok, key=lambda row: row[name])
        winners[name] = {"mode": best["mode"], "weight": best["weight"]}
    best = min(ok, key=lambda row: abs(row["len_ratio"] - 1.0))
    winners["len_ratio"] = {"mode": best["mode"], "weight": best["weight"]}
    return winners


def cmd_compare(config):
    out = Path(config["out"])
    manifest = RunManifest("compare", config_hash(config), config["seed"])
    d = config["decode"]
    if not d["weights"]:
        raise ConfigError("config key 'decode.weights': compare needs a "
                          "non-empty weight grid")
    model = _load_forward(config, out)
    _, corpus, _ = load_task(config)
    _check_vocab(model, corpus)
    refs = [corpus.tgt_vocab.decode(pair.tgt[:-1]) for pair in corpus.pairs]
    cells = [("sbs", None), ("mmi_rerank", d["weight"])]
    cells += [(mode, w) for mode in d["modes"] for w in d["weights"]]
    rows = []
    with timed(manifest, "compare"):
        for mode, weight in cells:
            row = {"mode": mode, "weight": weight}
            try:
                dcfg = _decode_config(d, mode=mode,
                                      weight=0.0 if weight is None else weight)
                scorer_factory, backward = _build_scorer(config, out, mode)
                records, stats = decode_corpus(model, corpus, dcfg,
                                               scorer_factory, backward)
                hyps = [rec["hyp"].split() if "hyp" in rec else []
                        for rec in records]
                metrics, _ = _metric_table(hyps, refs, smooth=True)
                row.update(status="ok", errors=stats["errors"], **metrics)
            except FdqError as exc:  # a failed cell must not kill the table
                row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            rows.append(row)
    table = {"rows": rows, "winners": _pick_winners(rows),
             "cells": len(rows), "baselines": ["sbs", "mmi_rerank"]}
    (out / "compare.json").write_text(json.dumps(table, indent=2,
                                                 sort_keys=True) + "\n",
                                      encoding="utf-8")
    header = "mode,weight,status,bleu,rouge2,distinct1,distinct2,len_ratio"
    lines = [header]
    for row in rows:
        if row["status"] == "ok":
            cells_text = [f"{row[k]:.6f}" for k in
                          ("bleu", "rouge2", "distinct1", "distinct2",
                           "len_ratio")]
        else:
            cells_text = [""] * 5
        weight = "" if row["weight"] is None else f"{row['weight']}"
        lines.append(",".join([row["mode"], weight, row["status"]]
                              + cells_text))
    (out / "compare.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    manifest.artifacts["table"] = str(out / "compare.json")
    manifest.artifacts["csv"] = str(out / "compare.csv")
    manifest.write(out / "compare.manifest.json")
    for row in rows:
        if row["status"] == "ok":
            print(f"mode={row['mode']} weight={row['weight']} "
                  f"bleu={row['bleu']:.4f} distinct2={row['distinct2']:.4f}")
        else:
            print(f"mode={row['mode']} weight={row['weight']} FAILED "
                  f"({row['error']})")
    return 0


# -- selftest -------------------------------------------------------------------


def _selftest_gradient():
    rng = np.random.default_rng(0)
    x_np = rng.normal(size=(2, 3))
    mask_np = rng.normal(size=(2, 5))
    w1_np = rng.normal(size=(3, 4)) * 0.5
    w2_np = rng.normal(size=(4, 5)) * 0.5

    def build(params):
        w1, w2 = params
        h = tanh(matmul(Tensor(x_np), w1))
        return sum_all(mul(log_softmax(matmul(h, w2)), Tensor(mask_np)))

    worst = fd_check(build, [Tensor(w1_np), Tensor(w2_np)])
    assert worst < 1e-6, f"gradient disagreement {worst:.3e}"
    return f"max_rel={worst:.2e}"


def _selftest_beam_oracle():
    model = Seq2Seq(6, 7, hidden=8, max_len=6, seed=3)
    src = [4, 5]
    wide = DecodeConfig(beam=400, cap=3)
    full = DecodeConfig(mode="exhaustive", cap=3)
    got = beam_search(model, src, wide).top()
    want = exhaustive_decode(model, None, src, full)
    assert got.tokens == want.tokens, f"{got.tokens} != {want.tokens}"
    assert abs(got.combined - want.combined) < 1e-9
    return f"combined={got.combined:.4f}"


def _selftest_checkpoint():
    rng = np.random.default_rng(1)
    named = {"a/w": rng.normal(size=(3, 4)).astype(np.float32),
             "b": rng.normal(size=(5,)).astype(np.float32)}
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "self.fdq"
        save_tensors(path, named)
        back = load_tensors(path)
    assert set(back) == set(named)
    for name in named:
        assert np.array_equal(back[name], named[name]), name
    return "bit-exact"


def _selftest_metrics():
    ref = ["a", "b", "c", "d"]
    assert bleu([ref], [ref]) == 1.0
    assert rouge2(ref, ref) == 1.0
    assert distinct_n([["a", "b"], ["a", "b"]], 1) == 0.5
    return "oracles hold"


def cmd_selftest(config):
    checks = [("gradient", _selftest_gradient),
              ("beam_vs_exhaustive", _selftest_beam_oracle),
              ("checkpoint_round_trip", _selftest_checkpoint),
              ("metric_oracles", _selftest_metrics)]
    failed = 0
    for name, check in checks:
        try:
            detail = check()
            print(f"ok {name} ({detail})")
        except Exception as exc:  # noqa: BLE001 - report every check
            failed += 1
            print(f"FAIL {name} ({exc})")
    print(f"selftest: {len(checks) - failed}/{len(checks)} passed")
    return 0 if failed == 0 else 3


COMMANDS = {"train": cmd_train, "train-q": cmd_train_q, "decode": cmd_decode,
            "eval": cmd_eval, "compare": cmd_compare, "selftest": cmd_selftest}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="JSON experiment config")
    common.add_argument("--set", metavar="K=V", action="append", default=[],
                        dest="sets", help="override a config key (repeatable)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--seed", metavar="N", type=int, help="global seed")
    parser = argparse.ArgumentParser(
        prog="fdq", description="value-guided sequence decoding lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common],
                       help=fn.__doc__ or name)
    return parser


def effective_config(args):
    config = load_config(args.config) if args.config else default_config()
    apply_overrides(config, args.sets)
    if args.out is not None:
        config["out"] = args.out
    if args.seed is not None:
        config["seed"] = args.seed
    return validate_config(config)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = effective_config(args)
        Path(config["out"]).mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](config)
    except TrainingDivergenceError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (FdqError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
