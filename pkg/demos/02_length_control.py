"""Length-controlled decoding: a remaining-length head steers the beam
toward hypotheses that can stop exactly on demand.

The demanded length is one token short of gold, so the model's own
likelihood argues for one more word than we want. Plain search under the
same stop protocol must find EOS in its top candidates by likelihood
alone; the guided run adds -(remaining_demand - Qhat)^2 to each
candidate, which promotes EOS exactly when the head predicts the
hypothesis is one step from done."""

import numpy as np

from fdq.data import TaskSpec, gen_task, split
from fdq.decode import DecodeConfig, length_forced_select
from fdq.metrics import exact_length_rate
from fdq.seq2seq import Seq2Seq, TrainSchedule, train_mle
from fdq.value import train_length_q

corpus = gen_task(TaskSpec("num2words", vocab=0, min_len=1, max_len=8,
                           pairs=500, seed=17))
train, dev, _ = split(corpus, (0.6, 0.3, 0.1), seed=17)
model = Seq2Seq(len(corpus.src_vocab), len(corpus.tgt_vocab), hidden=48,
                max_len=14, seed=17)
print("training the number-to-words model (70 epochs)...")
hist = train_mle(model, train, TrainSchedule(epochs=70, batch_size=32,
                                             lr=5e-3, seed=17), dev=dev)
print(f"dev perplexity {np.exp(hist[-1]['dev_ce']):.2f}")
print("fitting the remaining-length head on teacher-forced states...")
reg = train_length_q(model, train, TrainSchedule(epochs=60, batch_size=32,
                                                 lr=5e-3, seed=18))

base_cfg = DecodeConfig(mode="sbs", beam=5, use_length_protocol=True)
guided_cfg = DecodeConfig(mode="length_q", beam=5, weight=1.0)
base, guided, targets = [], [], []
shown = 0
print()
print(f"{'source':>22}  {'gold':<28} L  plain/guided lengths")
for pair in dev.pairs:
    want = max(1, pair.n - 1)
    targets.append(want)
    b = length_forced_select(model, None, pair.src, want, base_cfg)
    g = length_forced_select(model, reg, pair.src, want, guided_cfg)
    base.append(b)
    guided.append(g)
    if shown < 8 and pair.n >= 3:
        src = " ".join(corpus.src_vocab.decode(pair.src))
        gold = " ".join(corpus.tgt_vocab.decode(pair.tgt[:-1]))
        mark = "<- guided exact" if len(g) == want != len(b) else ""
        print(f"{src:>22}  {gold:<28} {want}  {len(b)}/{len(g)} {mark}")
        shown += 1

rate_base = exact_length_rate(base, targets)
rate_guided = exact_length_rate(guided, targets)
print()
print(f"exact-length rate, plain protocol : {rate_base:.3f}")
print(f"exact-length rate, guided (w=1.0) : {rate_guided:.3f}")
print(f"gap                               : {rate_guided - rate_base:+.3f}")
