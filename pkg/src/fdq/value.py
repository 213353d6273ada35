"""Future-outcome estimators Q and their training procedures.

Three families, one interface: given a partial hypothesis, estimate a
scalar property of the full sequence it will become.

* LengthRegressor       h_t -> remaining token count N - t
* BackwardRegressor     h_t -> log p(X|Y) of the full pair (option 1)
* PartialBackwardEnsemble  per-length-bucket seq2seq models scoring
                        p(X | y_{1:t}) directly (option 2)
* OutcomePredictor      (X, y_{1:t}) -> predicted task metric of the
                        finished sequence, fit on sampled rollouts

Regression heads train on teacher-forced decoder states over gold
targets; they never backpropagate into the sequence model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import LSTMParams, Tape, Tensor, backward
from .checkpoint import (load_tensors, save_tensors, split_type_tag,
                         with_type_tag)
from .data import BOS, EOS, PAD, Corpus, SequencePair, batch_iter
from .decode import NEG_SENTINEL, DecodeConfig, Scorer, beam_complete
from .errors import (CheckpointError, ConfigError, ContractError,
                     DimensionError, LoadError, MissingModelError,
                     TrainingDivergenceError)
from .metrics import rouge2, sentence_bleu
from .optim import OptimState, optimizer_step
from .seeding import stream_key, substream
from .seq2seq import INIT_RANGE, Seq2Seq, batch_logprobs, train_mle

DEFAULT_BUCKETS = ((1, 2), (3, 4), (5, 7), (8, 12), (13, None))

ROLLOUT_FIELDS = ("src", "prefix", "t", "completed", "q", "seed")


def _require_trained(model, role):
    if not getattr(model, "trained", False):
        raise ContractError(f"{role} model has not been trained")


# -- shared MLP regression head over decoder states ---------------------------


class _MlpRegressor:
    """Two tanh layers of width H and a scalar linear head."""

    TYPE_TAG = None

    def __init__(self, hidden, seed=0, params=None):
        self.hidden = int(hidden)
        shapes = (("l1/w", (self.hidden, self.hidden)),
                  ("l1/b", (self.hidden,)),
                  ("l2/w", (self.hidden, self.hidden)),
                  ("l2/b", (self.hidden,)),
                  ("out/w", (1, self.hidden)),
                  ("out/b", (1,)))
        if params is None:
            rng = substream(seed, "value-init", self.TYPE_TAG)
            params = {
                name: Tensor(rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape))
                for name, shape in shapes
            }
        for name, shape in shapes:
            if params[name].shape != shape:
                raise ContractError(
                    f"parameter {name}: shape {params[name].shape}, want {shape}")
        self.p = params

    def params(self):
        return list(self.p.values())

    def _graph(self, x):
        """x Tensor [B,H] -> prediction Tensor [B,1]."""
        h1 = ad.tanh(ad.affine(self.p["l1/w"], self.p["l1/b"], x))
        h2 = ad.tanh(ad.affine(self.p["l2/w"], self.p["l2/b"], h1))
        return ad.affine(self.p["out/w"], self.p["out/b"], h2)

    def predict(self, h):
        """Batched inference: h [B,H] -> predictions [B], untaped."""
        h = np.asarray(h)
        if h.ndim != 2 or h.shape[1] != self.hidden:
            raise DimensionError(
                f"states must be [B,{self.hidden}], got {h.shape}")
        return self._graph(Tensor(h)).data[:, 0].astype(np.float64)

    def save(self, path):
        named = {name: t.data for name, t in self.p.items()}
        named["meta"] = np.array([self.hidden], dtype=np.float32)
        save_tensors(path, with_type_tag(named, self.TYPE_TAG))

    @classmethod
    def load(cls, path):
        tag, named = split_type_tag(load_tensors(path))
        if tag != cls.TYPE_TAG:
            raise CheckpointError(f"{path}: type tag {tag!r}, want {cls.TYPE_TAG!r}")
        hidden = int(named.pop("meta")[0])
        return cls(hidden, params={n: Tensor(a) for n, a in named.items()})


class LengthRegressor(_MlpRegressor):
    """Predicts the count of tokens still to be generated from h_t."""

    TYPE_TAG = "length_q"


class BackwardRegressor(_MlpRegressor):
    """Predicts the full-pair backward log-probability from h_t."""

    TYPE_TAG = "backward_q1"


def predict_remaining_length(regressor, h_t):
    """Remaining-length estimate for a single decoder state [H]."""
    h_t = np.asarray(h_t)
    if h_t.shape != (regressor.hidden,):
        raise DimensionError(
            f"state must be [{regressor.hidden}], got {h_t.shape}")
    return float(regressor.predict(h_t[None])[0])


# -- training examples from teacher-forced passes ------------------------------


def _forced_examples(model, corpus, batch_size, label_fn):
    """(features, labels, index) over states h_t for t = 1..N of each pair.

    label_fn(pair, t) supplies the regression target; index rows are
    (pair position within corpus order, t).
    """
    feats, labels, index = [], [], []
    offset = 0
    for batch in batch_iter(corpus, batch_size):
        states = model.forced_states(batch)
        rows = int(batch.src.shape[0])
        for r in range(rows):
            pair = corpus.pairs[offset + r]
            for t in range(1, pair.n + 1):
                feats.append(states[r, t])
                labels.append(label_fn(pair, t))
                index.append((offset + r, t))
        offset += rows
    h = model.hidden
    if not feats:
        return (np.zeros((0, h), np.float32), np.zeros(0, np.float64),
                np.zeros((0, 2), np.int64))
    return (np.asarray(feats, np.float32), np.asarray(labels, np.float64),
            np.asarray(index, np.int64))


def length_examples(model, corpus, batch_size=32):
    """Features h_t with labels N - t for every pair and every t."""
    return _forced_examples(model, corpus, batch_size,
                            lambda pair, t: float(pair.n - t))


def backward_examples(forward, backward, corpus, batch_size=32):
    """Features h_t with the pair's full backward score as the label.

    The label is log p(X|Y) of the complete pair under the backward
    model, identical for every t of one pair.
    """
    cache = {}

    def label(pair, t):
        key = id(pair)
        if key not in cache:
            cache[key] = backward.sequence_logprob(
                list(pair.tgt[:-1]), list(pair.src) + [EOS])
        return cache[key]

    return _forced_examples(forward, corpus, batch_size, label)


def _fit_regressor(reg, feats, labels, schedule, dev=None, log=None):
    """MSE training of a regression head on fixed features."""
    n = len(feats)
    if n == 0:
        raise ContractError("no training examples for the regressor")
    opt = OptimState(schedule.optimizer, schedule.lr, schedule.clip_norm)
    params = reg.params()
    history = []
    for epoch in range(schedule.epochs):
        epoch_seed = stream_key(schedule.seed, "epoch", epoch) % (2 ** 63)
        order = np.random.default_rng(epoch_seed).permutation(n)
        total = 0.0
        for start in range(0, n, schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            with Tape() as tape:
                pred = reg._graph(Tensor(feats[idx]))
                err = ad.sub(pred, Tensor(labels[idx][:, None]))
                loss = ad.sum_all(ad.square(err))
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise TrainingDivergenceError(
                    f"non-finite regression loss at epoch {epoch}")
            grads = backward(tape, loss)
            for p in params:
                g = grads.get(p)
                if g is not None:
                    g /= len(idx)
            optimizer_step(opt, params, grads)
            total += loss_val
        record = {"epoch": epoch, "train_mse": total / n}
        if dev is not None:
            dev_feats, dev_labels = dev
            record["dev_mse"] = regression_mse(reg, dev_feats, dev_labels)
        history.append(record)
        if log is not None:
            log(record)
    return history


def regression_mse(reg, feats, labels):
    """Mean squared error of a head on fixed features."""
    if len(feats) == 0:
        raise ContractError("empty evaluation set")
    pred = reg.predict(feats)
    return float(np.mean((pred - np.asarray(labels, np.float64)) ** 2))


def constant_baseline_mse(train_labels, eval_labels):
    """MSE of always predicting the training-label mean."""
    mean = float(np.mean(train_labels))
    return float(np.mean((np.asarray(eval_labels, np.float64) - mean) ** 2))


def train_length_q(model, corpus, schedule, dev=None, log=None):
    """Fit a remaining-length head on teacher-forced states."""
    _require_trained(model, "forward")
    feats, labels, _ = length_examples(model, corpus, schedule.batch_size)
    reg = LengthRegressor(model.hidden, seed=schedule.seed)
    dev_pack = None
    if dev is not None:
        df, dl, _ = length_examples(model, dev, schedule.batch_size)
        dev_pack = (df, dl)
    _fit_regressor(reg, feats, labels, schedule, dev=dev_pack, log=log)
    return reg


# -- backward-probability estimators -------------------------------------------


def swap_corpus(corpus):
    """Sources become targets and vice versa; EOS moves accordingly."""
    pairs = [SequencePair(list(p.tgt[:-1]), list(p.src) + [EOS])
             for p in corpus.pairs]
    provenance = dict(corpus.provenance)
    provenance["swapped"] = True
    return Corpus(pairs, corpus.tgt_vocab, corpus.src_vocab, provenance)


def train_backward_model(corpus, schedule, hidden=64, attention=True,
                         max_len=21, dev=None, log=None):
    """A standard seq2seq fit on the swapped corpus, modelling p(X|Y)."""
    swapped = swap_corpus(corpus)
    model = Seq2Seq(len(corpus.tgt_vocab), len(corpus.src_vocab),
                    hidden=hidden, attention=attention, max_len=max_len,
                    seed=schedule.seed)
    train_mle(model, swapped, schedule,
              dev=swap_corpus(dev) if dev is not None else None, log=log)
    return model


def train_backward_q_option1(forward, backward, corpus, schedule,
                             dev=None, log=None):
    """Fit h_t -> log p(X|Y) with the full-pair score as a constant label."""
    _require_trained(forward, "forward")
    _require_trained(backward, "backward")
    feats, labels, _ = backward_examples(forward, backward, corpus,
                                         schedule.batch_size)
    reg = BackwardRegressor(forward.hidden, seed=schedule.seed)
    dev_pack = None
    if dev is not None:
        df, dl, _ = backward_examples(forward, backward, dev,
                                      schedule.batch_size)
        dev_pack = (df, dl)
    _fit_regressor(reg, feats, labels, schedule, dev=dev_pack, log=log)
    return reg


def _check_buckets(buckets):
    if not buckets:
        raise ConfigError("bucket spec is empty")
    expect = 1
    for i, (lo, hi) in enumerate(buckets):
        if lo != expect:
            raise ConfigError(f"bucket {i} starts at {lo}, want {expect}")
        last = i == len(buckets) - 1
        if last:
            if hi is not None:
                raise ConfigError("final bucket must be open-ended")
        else:
            if hi is None or hi < lo:
                raise ConfigError(f"bucket {i} bound {hi} invalid")
            expect = hi + 1


def _bucket_index(buckets, t):
    if t < 1:
        raise ConfigError(f"prefix length must be >= 1, got {t}")
    for i, (lo, hi) in enumerate(buckets):
        if t >= lo and (hi is None or t <= hi):
            return i
    raise ConfigError(f"no bucket covers length {t}")


class PartialBackwardEnsemble:
    """One backward seq2seq per prefix-length bucket.

    Each bucket model is trained with partial targets y_{1:t} as sources
    and the original source X as the target, so its sequence score is a
    direct estimate of the future backward probability.
    """

    TYPE_TAG = "backward_q2"

    def __init__(self, buckets, models):
        _check_buckets(tuple(buckets))
        if not models:
            raise ContractError("ensemble needs at least one bucket model")
        self.buckets = tuple(tuple(b) for b in buckets)
        self.models = dict(models)

    def bucket_index(self, t):
        return _bucket_index(self.buckets, t)

    def model_for(self, t):
        i = self.bucket_index(t)
        if i not in self.models:
            raise MissingModelError(
                f"no model for bucket {i} (prefix length {t})")
        return self.models[i]

    def nearest_model(self, t):
        """model_for with fallback to the closest populated bucket."""
        i = self.bucket_index(t)
        if i in self.models:
            return self.models[i]
        spread = sorted(self.models, key=lambda j: (abs(j - i), j))
        return self.models[spread[0]]

    def estimate(self, src, prefix):
        """log p(X | y_{1:t}) under the bucket model owning len(prefix)."""
        if len(prefix) == 0:
            raise ContractError("cannot estimate from an empty prefix")
        model = self.model_for(len(prefix))
        return model.sequence_logprob(list(prefix), list(src) + [EOS])

    def save(self, path):
        named = {}
        meta = [float(len(self.buckets))]
        for i, (lo, hi) in enumerate(self.buckets):
            meta += [float(lo), -1.0 if hi is None else float(hi),
                     1.0 if i in self.models else 0.0]
            if i in self.models:
                for name, arr in self.models[i].to_named().items():
                    named[f"b{i}/{name}"] = arr
        named["meta"] = np.array(meta, dtype=np.float32)
        save_tensors(path, with_type_tag(named, self.TYPE_TAG))

    @classmethod
    def load(cls, path):
        tag, named = split_type_tag(load_tensors(path))
        if tag != cls.TYPE_TAG:
            raise CheckpointError(f"{path}: type tag {tag!r}, want {cls.TYPE_TAG!r}")
        meta = [float(x) for x in named.pop("meta")]
        count = int(meta[0])
        buckets, present = [], []
        for i in range(count):
            lo, hi, have = meta[1 + 3 * i:4 + 3 * i]
            buckets.append((int(lo), None if hi < 0 else int(hi)))
            present.append(have > 0.5)
        models = {}
        for i in range(count):
            if not present[i]:
                continue
            prefix = f"b{i}/"
            sub = {name[len(prefix):]: arr for name, arr in named.items()
                   if name.startswith(prefix)}
            models[i] = Seq2Seq.from_named(sub)
        return cls(buckets, models)


def train_backward_q_option2(corpus, schedule, buckets=DEFAULT_BUCKETS,
                             hidden=64, attention=True, max_len=21,
                             full_targets_only=False, log=None):
    """Train per-bucket backward models on (partial target -> source) pairs.

    Bucket i trains with seed schedule.seed + i; empty buckets are left
    without a model and raise on direct queries.  full_targets_only
    restricts examples to t = N, the controlled configuration in which a
    single-bucket ensemble must match a plain backward model exactly.
    """
    buckets = tuple(tuple(b) for b in buckets)
    _check_buckets(buckets)
    per_bucket = {i: [] for i in range(len(buckets))}
    for pair in corpus.pairs:
        content = list(pair.tgt[:-1])
        ts = [len(content)] if full_targets_only else range(1, len(content) + 1)
        for t in ts:
            if t == 0:
                continue
            per_bucket[_bucket_index(buckets, t)].append(
                SequencePair(content[:t], list(pair.src) + [EOS]))
    models = {}
    for i, pairs in per_bucket.items():
        if not pairs:
            continue
        sub = Corpus(pairs, corpus.tgt_vocab, corpus.src_vocab,
                     {"bucket": list(buckets[i])})
        model = Seq2Seq(len(corpus.tgt_vocab), len(corpus.src_vocab),
                        hidden=hidden, attention=attention, max_len=max_len,
                        seed=schedule.seed + i)
        bucket_log = (lambda rec, _i=i: log(dict(rec, bucket=_i))) if log else None
        train_mle(model, sub, replace(schedule, seed=schedule.seed + i),
                  log=bucket_log)
        models[i] = model
    ensemble = PartialBackwardEnsemble(buckets, models)
    ensemble.example_counts = {i: len(pairs) for i, pairs in per_bucket.items()
                               if pairs}
    return ensemble


def estimate_backward(estimator, src, prefix, h_t=None):
    """Dispatch a future-backward-probability estimate to either option."""
    if isinstance(estimator, BackwardRegressor):
        if h_t is None:
            raise ContractError("option 1 needs the decoder state h_t")
        h_t = np.asarray(h_t)
        if h_t.shape != (estimator.hidden,):
            raise DimensionError(
                f"state must be [{estimator.hidden}], got {h_t.shape}")
        return float(estimator.predict(h_t[None])[0])
    if isinstance(estimator, PartialBackwardEnsemble):
        return float(estimator.estimate(src, prefix))
    raise ConfigError(f"unknown backward estimator {type(estimator).__name__}")


# -- rollouts -------------------------------------------------------------------


@dataclass
class RolloutConfig:
    """Budget and provenance for sampled completions."""

    positions: int = 4      # distinct prefix positions per pair
    samples: int = 2        # sampled actions per position
    beam: int = 7           # completion beam width
    metric: str = "bleu"    # or "rouge2"
    prefix_source: str = "gold"   # or "decoded"
    seed: int = 0

    def validate(self):
        if self.metric not in ("bleu", "rouge2"):
            raise ConfigError(f"unknown rollout metric {self.metric!r}")
        if self.prefix_source not in ("gold", "decoded"):
            raise ConfigError(
                f"unknown prefix source {self.prefix_source!r}")
        if self.positions < 1 or self.samples < 1:
            raise ConfigError("rollout budget must be positive")
        return self


def _score_outcome(metric, hyp_content, ref_content):
    if metric == "bleu":
        return float(sentence_bleu(list(hyp_content), list(ref_content)))
    return float(rouge2(list(hyp_content), list(ref_content)))


def _sample_token(model, ctx, state0, prefix, rng):
    """One ancestral draw after a forced prefix; PAD and BOS are barred."""
    state, prev = state0, BOS
    for tok in prefix:
        _, state = model.decode_step(state, prev, ctx)
        prev = tok
    logprobs, _ = model.decode_step(state, prev, ctx)
    probs = np.exp(logprobs.astype(np.float64))
    probs[PAD] = 0.0
    probs[BOS] = 0.0
    probs /= probs.sum()
    return int(rng.choice(model.tgt_vocab, p=probs))


def generate_rollouts(model, corpus, config=None):
    """Sample one action per chosen position, beam-complete, score.

    Each record carries the inputs needed to recompute its own label:
    the metric of `completed` against the pair's gold target.  Records
    are emitted pair-major in corpus order; per-pair randomness depends
    only on (config.seed, pair position), so any subset of pairs yields
    the same records for the pairs it covers.
    """
    config = (config or RolloutConfig()).validate()
    _require_trained(model, "forward")
    complete_cfg = DecodeConfig(beam=config.beam)
    records = []
    for i, pair in enumerate(corpus.pairs):
        gold = list(pair.tgt[:-1])
        if config.prefix_source == "gold":
            base = gold
        else:
            base = list(beam_complete(model, pair.src, (),
                                      complete_cfg).content)
        n = len(base)
        if n == 0:
            continue
        rng = substream(config.seed, "rollout", i)
        k = min(config.positions, n)
        positions = sorted(int(t) + 1 for t in rng.permutation(n)[:k])
        ctx, state0 = model.encode(pair.src)
        for t in positions:
            for j in range(config.samples):
                sample_seed = stream_key(config.seed, "action", i, t, j) % (2 ** 63)
                action_rng = np.random.default_rng(sample_seed)
                y_t = _sample_token(model, ctx, state0, base[:t - 1], action_rng)
                prefix = base[:t - 1] + [y_t]
                if y_t == EOS:
                    completed = list(prefix)
                else:
                    completed = list(beam_complete(model, pair.src, prefix,
                                                   complete_cfg).tokens)
                content = completed[:-1] if completed[-1] == EOS else completed
                q = _score_outcome(config.metric, content, gold)
                records.append({
                    "src": [int(x) for x in pair.src],
                    "prefix": [int(x) for x in prefix],
                    "t": int(t),
                    "completed": [int(x) for x in completed],
                    "q": q,
                    "seed": int(sample_seed),
                })
    return records


def save_rollouts(path, records):
    """Newline-delimited JSON, one record per line."""
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps({k: rec[k] for k in ROLLOUT_FIELDS}) + "\n")


def load_rollouts(path):
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if set(rec) != set(ROLLOUT_FIELDS):
                raise LoadError(
                    f"{path}:{lineno}: fields {sorted(rec)}, "
                    f"want {sorted(ROLLOUT_FIELDS)}")
            records.append(rec)
    return records


# -- outcome predictor ----------------------------------------------------------


def _pad_ids(seqs):
    """Pack variable-length id lists into ([B,S] ids, [B,S] float mask)."""
    b = len(seqs)
    s = max(len(x) for x in seqs)
    ids = np.zeros((b, s), dtype=np.int64)
    mask = np.zeros((b, s), dtype=np.float32)
    for r, seq in enumerate(seqs):
        ids[r, :len(seq)] = seq
        mask[r, :len(seq)] = 1.0
    return ids, mask


class OutcomePredictor:
    """Dual sequence encoders with a two-layer scalar head.

    One LSTM reads the source X, another the partial target y_{1:t};
    their final states concatenate into tanh -> linear producing the
    predicted outcome q(Y).
    """

    TYPE_TAG = "outcome_q"

    def __init__(self, src_vocab, tgt_vocab, hidden=64, seed=0, params=None):
        self.src_vocab = int(src_vocab)
        self.tgt_vocab = int(tgt_vocab)
        self.hidden = int(hidden)
        h = self.hidden
        shapes = (("emb_x", (self.src_vocab, h)),
                  ("enc_x/w_ih", (4 * h, h)), ("enc_x/w_hh", (4 * h, h)),
                  ("enc_x/b", (4 * h,)),
                  ("emb_y", (self.tgt_vocab, h)),
                  ("enc_y/w_ih", (4 * h, h)), ("enc_y/w_hh", (4 * h, h)),
                  ("enc_y/b", (4 * h,)),
                  ("head1/w", (h, 2 * h)), ("head1/b", (h,)),
                  ("head2/w", (1, h)), ("head2/b", (1,)))
        if params is None:
            rng = substream(seed, "value-init", self.TYPE_TAG)
            params = {
                name: Tensor(rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape))
                for name, shape in shapes
            }
        for name, shape in shapes:
            if params[name].shape != shape:
                raise ContractError(
                    f"parameter {name}: shape {params[name].shape}, want {shape}")
        self.p = params

    def params(self):
        return list(self.p.values())

    def _lstm(self, prefix):
        return LSTMParams(self.p[prefix + "/w_ih"], self.p[prefix + "/w_hh"],
                          self.p[prefix + "/b"])

    def _encode(self, emb_name, lstm_prefix, ids, mask):
        """Masked final LSTM state over [B,S] ids."""
        b = ids.shape[0]
        h = Tensor(np.zeros((b, self.hidden)))
        c = Tensor(np.zeros((b, self.hidden)))
        lstm = self._lstm(lstm_prefix)
        for t in range(ids.shape[1]):
            x = ad.rows(self.p[emb_name], ids[:, t])
            h_new, c_new = ad.lstm_step(lstm, x, h, c)
            m = mask[:, t:t + 1]
            h = ad.add(ad.mul_const(h_new, m), ad.mul_const(h, 1.0 - m))
            c = ad.add(ad.mul_const(c_new, m), ad.mul_const(c, 1.0 - m))
        return h

    def _head(self, hx, hy):
        cat = ad.concat([hx, hy], axis=-1)
        hid = ad.tanh(ad.affine(self.p["head1/w"], self.p["head1/b"], cat))
        return ad.affine(self.p["head2/w"], self.p["head2/b"], hid)

    def _graph(self, src_ids, src_mask, pre_ids, pre_mask):
        hx = self._encode("emb_x", "enc_x", src_ids, src_mask)
        hy = self._encode("emb_y", "enc_y", pre_ids, pre_mask)
        return self._head(hx, hy)

    def _check_ids(self, seq, vocab, role):
        if len(seq) == 0:
            raise ContractError(f"{role} sequence is empty")
        for tok in seq:
            if not 0 <= tok < vocab:
                raise ContractError(
                    f"{role} id {tok} outside vocabulary of {vocab}")

    def predict(self, src, prefix):
        """Predicted outcome for one (X, y_{1:t}); untaped and deterministic."""
        self._check_ids(src, self.src_vocab, "source")
        self._check_ids(prefix, self.tgt_vocab, "prefix")
        src_ids, src_mask = _pad_ids([list(src)])
        pre_ids, pre_mask = _pad_ids([list(prefix)])
        return float(self._graph(src_ids, src_mask, pre_ids, pre_mask).data[0, 0])

    def predict_batch(self, srcs, prefixes):
        src_ids, src_mask = _pad_ids([list(s) for s in srcs])
        pre_ids, pre_mask = _pad_ids([list(p) for p in prefixes])
        out = self._graph(src_ids, src_mask, pre_ids, pre_mask)
        return out.data[:, 0].astype(np.float64)

    def save(self, path):
        named = {name: t.data for name, t in self.p.items()}
        named["meta"] = np.array(
            [self.src_vocab, self.tgt_vocab, self.hidden], dtype=np.float32)
        save_tensors(path, with_type_tag(named, self.TYPE_TAG))

    @classmethod
    def load(cls, path):
        tag, named = split_type_tag(load_tensors(path))
        if tag != cls.TYPE_TAG:
            raise CheckpointError(f"{path}: type tag {tag!r}, want {cls.TYPE_TAG!r}")
        vs, vt, hidden = (int(x) for x in named.pop("meta"))
        return cls(vs, vt, hidden,
                   params={n: Tensor(a) for n, a in named.items()})


def outcome_mse(predictor, records):
    if not records:
        raise ContractError("empty evaluation set")
    pred = predictor.predict_batch([r["src"] for r in records],
                                   [r["prefix"] for r in records])
    labels = np.array([r["q"] for r in records], dtype=np.float64)
    return float(np.mean((pred - labels) ** 2))


def train_outcome_q(records, schedule, src_vocab, tgt_vocab, hidden=64,
                    dev=None, log=None):
    """Fit the dual-encoder predictor on rollout records by MSE."""
    if not records:
        raise ContractError("no rollout records to train on")
    predictor = OutcomePredictor(src_vocab, tgt_vocab, hidden=hidden,
                                 seed=schedule.seed)
    opt = OptimState(schedule.optimizer, schedule.lr, schedule.clip_norm)
    params = predictor.params()
    n = len(records)
    labels = np.array([r["q"] for r in records], dtype=np.float64)
    for epoch in range(schedule.epochs):
        epoch_seed = stream_key(schedule.seed, "epoch", epoch) % (2 ** 63)
        order = np.random.default_rng(epoch_seed).permutation(n)
        total = 0.0
        for start in range(0, n, schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            src_ids, src_mask = _pad_ids([records[i]["src"] for i in idx])
            pre_ids, pre_mask = _pad_ids([records[i]["prefix"] for i in idx])
            with Tape() as tape:
                pred = predictor._graph(src_ids, src_mask, pre_ids, pre_mask)
                err = ad.sub(pred, Tensor(labels[idx][:, None]))
                loss = ad.sum_all(ad.square(err))
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise TrainingDivergenceError(
                    f"non-finite outcome loss at epoch {epoch}")
            grads = backward(tape, loss)
            for p in params:
                g = grads.get(p)
                if g is not None:
                    g /= len(idx)
            optimizer_step(opt, params, grads)
            total += loss_val
        record = {"epoch": epoch, "train_mse": total / n}
        if dev is not None:
            record["dev_mse"] = outcome_mse(predictor, dev)
        if log is not None:
            log(record)
    return predictor


def predict_outcome(predictor, src, prefix):
    """Spec-level alias for OutcomePredictor.predict."""
    return predictor.predict(src, prefix)


# -- scorers wiring the estimators into guided search ---------------------------


class OutcomeScorer(Scorer):
    """qterm = predicted outcome of (X, hypothesis + candidate).

    Keeps an incremental prefix-encoder state per hypothesis so each
    expansion costs one batched LSTM step over the vocabulary.
    """

    def __init__(self, predictor):
        self.q = predictor
        self.hx = None
        self.vocab = predictor.tgt_vocab

    def prepare(self, model, src, ctx):
        ids, mask = _pad_ids([list(src)])
        self.hx = self.q._encode("emb_x", "enc_x", ids, mask).data

    def start(self):
        h = np.zeros((1, self.q.hidden), dtype=np.float32)
        return (h, h.copy())

    def advance(self, state, token):
        h, c = state
        x = ad.rows(self.q.p["emb_y"], np.array([token]))
        h2, c2 = ad.lstm_step(self.q._lstm("enc_y"), x, Tensor(h), Tensor(c))
        return (h2.data, c2.data)

    def score_candidates(self, hyp, ctx):
        h, c = hyp.scorer_state
        cands = np.arange(self.vocab)
        x = ad.rows(self.q.p["emb_y"], cands)
        hb = Tensor(np.broadcast_to(h, (self.vocab, self.q.hidden)).copy())
        cb = Tensor(np.broadcast_to(c, (self.vocab, self.q.hidden)).copy())
        h2, _ = ad.lstm_step(self.q._lstm("enc_y"), x, hb, cb)
        hx = Tensor(np.broadcast_to(self.hx, (self.vocab, self.q.hidden)).copy())
        out = self.q._head(hx, h2)
        return out.data[:, 0].astype(np.float64)


class PartialBackwardScorer(Scorer):
    """qterm = bucket-model estimate of log p(X | hypothesis + candidate).

    Content candidates share one bucket (all have the same extended
    length) and are scored in a single padded batch.  Extending by EOS
    closes the sequence, so its qterm is the estimate for the hypothesis
    as a full target; buckets without a model fall back to the nearest
    populated one.
    """

    def __init__(self, ensemble):
        self.ensemble = ensemble
        self.src = None
        self.vocab = None

    def prepare(self, model, src, ctx):
        self.src = list(src)
        self.vocab = model.tgt_vocab

    def score_candidates(self, hyp, ctx):
        prefix = list(hyp.tokens)
        tgt = self.src + [EOS]
        out = np.zeros(self.vocab, dtype=np.float64)
        content = [y for y in range(self.vocab) if y not in (PAD, BOS, EOS)]
        model = self.ensemble.nearest_model(len(prefix) + 1)
        pairs = [SequencePair(prefix + [y], tgt) for y in content]
        scores = batch_logprobs(model, pairs)
        for y, s in zip(content, scores):
            out[y] = s
        if prefix:
            closer = self.ensemble.nearest_model(len(prefix))
            out[EOS] = float(batch_logprobs(closer,
                                            [SequencePair(prefix, tgt)])[0])
        else:
            out[EOS] = NEG_SENTINEL
        return out
