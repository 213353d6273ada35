"""Escaping the generic reply: backward-probability guidance on a
synthetic dialogue task.

40% of training targets are one shared generic reply, so the forward
model's best guess for every source is the same sentence. A backward
model p(source | reply) knows the generic reply explains nothing.
Reranking an n-best list with it helps only if a specific reply survived
the beam; folding a per-step backward estimate into the search itself
(a bucketed ensemble of partial-target backward models) diversifies the
candidates before they are pruned."""

import dataclasses

import numpy as np

from fdq.data import GENERIC_REPLY, TaskSpec, gen_task
from fdq.decode import DecodeConfig, decode_corpus
from fdq.metrics import distinct_n
from fdq.seq2seq import Seq2Seq, TrainSchedule, train_mle
from fdq.value import (PartialBackwardScorer, train_backward_model,
                       train_backward_q_option2)

corpus = gen_task(TaskSpec("dialogue", pairs=400, seed=31))
train = dataclasses.replace(corpus, pairs=list(corpus.pairs[:320]))
dev = dataclasses.replace(corpus, pairs=list(corpus.pairs[320:]))

print("training forward, backward, and bucketed partial-backward models...")
forward = Seq2Seq(len(corpus.src_vocab), len(corpus.tgt_vocab), hidden=32,
                  max_len=10, seed=5)
train_mle(forward, train, TrainSchedule(epochs=35, batch_size=32, lr=3e-3,
                                        seed=5))
backward = train_backward_model(
    train, TrainSchedule(epochs=100, batch_size=32, lr=1e-2, seed=7),
    hidden=32, max_len=10)
ensemble = train_backward_q_option2(
    train, TrainSchedule(epochs=60, batch_size=32, lr=1e-2, seed=9),
    hidden=24, max_len=10)

generic = " ".join(GENERIC_REPLY)
arms = {}
arms["plain beam"], _ = decode_corpus(forward, dev,
                                      DecodeConfig(mode="sbs", beam=7))
arms["rerank n-best"], _ = decode_corpus(
    forward, dev, DecodeConfig(mode="mmi_rerank", beam=7, weight=1.0),
    backward=backward)
arms["guided beam"], _ = decode_corpus(
    forward, dev, DecodeConfig(mode="mmi_q", beam=7, weight=2.0),
    scorer_factory=lambda pair: PartialBackwardScorer(ensemble))

print()
for i in (0, 3, 7):
    src = " ".join(dev.src_vocab.decode(dev.pairs[i].src))
    print(f"source: {src}")
    for name, recs in arms.items():
        print(f"  {name:<13} {recs[i]['hyp']}")
print()
print(f"{'arm':<13} {'distinct-2':>10} {'generic rate':>13}")
for name, recs in arms.items():
    hyps = [r["hyp"].split() for r in recs]
    d2 = distinct_n(hyps, 2)
    rate = float(np.mean([" ".join(h) == generic for h in hyps]))
    print(f"{name:<13} {d2:>10.4f} {rate:>13.2f}")
