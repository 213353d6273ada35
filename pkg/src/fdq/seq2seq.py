"""LSTM encoder-decoder with optional global attention and input feeding.

The attention path computes two separate attention vectors from the same
context/hidden concatenation: one feeds the output softmax, the other is
fed forward into the next decoder step.  They have their own parameter
sets; tying them is the baseline this design deliberately departs from.

Q estimators downstream consume the raw decoder LSTM state h_t (the state
after the decoder has consumed target token t), never the attention
vectors, so the same interface works with attention on or off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import LSTMParams, Tape, Tensor, backward
from .checkpoint import load_tensors, save_tensors, split_type_tag, with_type_tag
from .data import BOS, EOS, batch_iter, make_batch
from .errors import CheckpointError, ContractError, TrainingDivergenceError
from .optim import OptimState, optimizer_step
from .seeding import stream_key, substream

INIT_RANGE = 0.08


@dataclass
class TrainSchedule:
    epochs: int = 10
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 1e-3
    clip_norm: float = 5.0
    seed: int = 0
    patience: int = 0  # 0 disables early stopping


class DecoderState:
    """Decoder recurrent state after consuming t target tokens.

    The priming BOS does not count toward t; h is the raw LSTM state the
    value estimators consume.
    """

    __slots__ = ("h", "c", "feed", "t", "owner")

    def __init__(self, h, c, feed, t, owner):
        self.h = h
        self.c = c
        self.feed = feed
        self.t = t
        self.owner = owner


class EncoderContext:
    """Encoder outputs for one source, shared by all hypotheses over it."""

    __slots__ = ("enc", "mask", "owner")

    def __init__(self, enc, mask, owner):
        self.enc = enc
        self.mask = mask
        self.owner = owner


def _param_shapes(vs, vt, hidden, attention):
    dec_in = 2 * hidden if attention else hidden
    shapes = [
        ("src_embed", (vs, hidden)),
        ("tgt_embed", (vt, hidden)),
        ("enc/w_ih", (4 * hidden, hidden)),
        ("enc/w_hh", (4 * hidden, hidden)),
        ("enc/b", (4 * hidden,)),
        ("dec/w_ih", (4 * hidden, dec_in)),
        ("dec/w_hh", (4 * hidden, hidden)),
        ("dec/b", (4 * hidden,)),
        ("out/w", (vt, hidden)),
        ("out/b", (vt,)),
    ]
    if attention:
        shapes += [
            ("att_soft/w", (hidden, 2 * hidden)),
            ("att_soft/b", (hidden,)),
            ("att_feed/w", (hidden, 2 * hidden)),
            ("att_feed/b", (hidden,)),
        ]
    return shapes


class Seq2Seq:
    """Encoder-decoder model over token-id sequences."""

    TYPE_TAG = "seq2seq"

    def __init__(self, src_vocab, tgt_vocab, hidden=64, attention=True,
                 max_len=21, seed=0, params=None):
        self.src_vocab = int(src_vocab)
        self.tgt_vocab = int(tgt_vocab)
        self.hidden = int(hidden)
        self.attention = bool(attention)
        self.max_len = int(max_len)
        shapes = _param_shapes(self.src_vocab, self.tgt_vocab, self.hidden,
                               self.attention)
        if params is None:
            rng = substream(seed, "seq2seq-init")
            params = {
                name: Tensor(rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape))
                for name, shape in shapes
            }
        for name, shape in shapes:
            if params[name].shape != shape:
                raise ContractError(
                    f"parameter {name}: shape {params[name].shape}, want {shape}")
        if self.attention and params["att_soft/w"] is params["att_feed/w"]:
            raise ContractError("attention parameter sets must not be aliased")
        self.p = params
        self.trained = False

    # -- parameter plumbing -------------------------------------------------

    def params(self):
        return list(self.p.values())

    def named(self):
        return dict(self.p)

    def to_named(self):
        named = {name: t.data for name, t in self.p.items()}
        named["meta"] = np.array(
            [self.src_vocab, self.tgt_vocab, self.hidden,
             1.0 if self.attention else 0.0, self.max_len,
             1.0 if self.trained else 0.0], dtype=np.float32)
        return named

    @classmethod
    def from_named(cls, named):
        named = dict(named)
        if "meta" not in named:
            raise CheckpointError("missing meta entry")
        meta = [float(x) for x in named.pop("meta")]
        vs, vt, hidden, attention, max_len, trained = meta
        params = {name: Tensor(arr) for name, arr in named.items()}
        model = cls(int(vs), int(vt), int(hidden), attention > 0.5,
                    int(max_len), params=params)
        model.trained = trained > 0.5
        return model

    def save(self, path):
        save_tensors(path, with_type_tag(self.to_named(), self.TYPE_TAG))

    @classmethod
    def load(cls, path):
        tag, named = split_type_tag(load_tensors(path))
        if tag != cls.TYPE_TAG:
            raise CheckpointError(f"{path}: type tag {tag!r}, want {cls.TYPE_TAG!r}")
        return cls.from_named(named)

    def _lstm(self, prefix):
        return LSTMParams(self.p[prefix + "/w_ih"], self.p[prefix + "/w_hh"],
                          self.p[prefix + "/b"])

    # -- batched taped graph ------------------------------------------------

    def _encode_graph(self, src_ids, src_mask):
        """Encoder over [B,S] ids; returns (enc Tensor [B,S,H], h, c)."""
        b, s = src_ids.shape
        h = Tensor(np.zeros((b, self.hidden)))
        c = Tensor(np.zeros((b, self.hidden)))
        enc_params = self._lstm("enc")
        steps = []
        for t in range(s):
            x = ad.rows(self.p["src_embed"], src_ids[:, t])
            h_new, c_new = ad.lstm_step(enc_params, x, h, c)
            m = src_mask[:, t:t + 1]
            h = ad.add(ad.mul_const(h_new, m), ad.mul_const(h, 1.0 - m))
            c = ad.add(ad.mul_const(c_new, m), ad.mul_const(c, 1.0 - m))
            steps.append(ad.mul_const(h, m))
        enc = ad.stack(steps, axis=1)
        return enc, h, c

    def _decode_graph_step(self, enc, src_mask, x, feed, h, c):
        """One decoder step on [B,*] tensors; returns (logits, h, c, feed)."""
        dec_params = self._lstm("dec")
        inp = ad.concat([x, feed], axis=-1) if self.attention else x
        h, c = ad.lstm_step(dec_params, inp, h, c)
        if self.attention:
            scores = ad.attn_scores(enc, h)
            weights = ad.masked_softmax(scores, src_mask)
            context = ad.attn_context(weights, enc)
            cat = ad.concat([context, h], axis=-1)
            soft = ad.tanh(ad.affine(self.p["att_soft/w"], self.p["att_soft/b"], cat))
            feed = ad.tanh(ad.affine(self.p["att_feed/w"], self.p["att_feed/b"], cat))
            logits = ad.affine(self.p["out/w"], self.p["out/b"], soft)
        else:
            logits = ad.affine(self.p["out/w"], self.p["out/b"], h)
        return logits, h, c, feed

    def mle_loss(self, batch):
        """Summed teacher-forced cross-entropy and the token count."""
        enc, h, c = self._encode_graph(batch.src, batch.src_mask)
        b, t_max = batch.tgt_in.shape
        feed = Tensor(np.zeros((b, self.hidden)))
        total = None
        for t in range(t_max):
            x = ad.rows(self.p["tgt_embed"], batch.tgt_in[:, t])
            logits, h, c, feed = self._decode_graph_step(
                enc, batch.src_mask, x, feed, h, c)
            step = ad.masked_xent_sum(logits, batch.tgt_out[:, t],
                                      batch.tgt_mask[:, t])
            total = step if total is None else ad.add(total, step)
        return total, float(batch.tgt_mask.sum())

    def forced_states(self, batch):
        """Teacher-forced decoder states, untaped.

        Returns [B, T, H] where slot t holds the state after consuming
        batch.tgt_in[:, t] (BOS at t=0); batch.tgt_mask marks valid slots.
        """
        enc, h, c = self._encode_graph(batch.src, batch.src_mask)
        b, t_max = batch.tgt_in.shape
        feed = Tensor(np.zeros((b, self.hidden)))
        out = np.zeros((b, t_max, self.hidden), dtype=np.float32)
        for t in range(t_max):
            x = ad.rows(self.p["tgt_embed"], batch.tgt_in[:, t])
            _, h, c, feed = self._decode_graph_step(
                enc, batch.src_mask, x, feed, h, c)
            out[:, t] = h.data
        return out

    # -- single-sequence inference -------------------------------------------

    def encode(self, src):
        """Encode one source; returns (EncoderContext, initial DecoderState)."""
        if len(src) == 0:
            raise ContractError("cannot encode an empty source sequence")
        if any(not 0 <= t < self.src_vocab for t in src):
            raise ContractError("source token id out of vocabulary range")
        ids = np.asarray([src], dtype=np.int64)
        mask = np.ones((1, len(src)), dtype=np.float32)
        enc, h, c = self._encode_graph(ids, mask)
        ctx = EncoderContext(enc.data, mask, self)
        state = DecoderState(h.data[0], c.data[0],
                             np.zeros(self.hidden, dtype=np.float32), 0, self)
        return ctx, state

    def _check_owner(self, obj):
        if obj.owner is not self:
            raise ContractError("state/context belongs to a different model")

    def advance(self, state, ctx, token_ids):
        """Advance one state by each candidate token id: [K,H] h, c, feed.

        This is the speculative batch the guided scorers evaluate: row k is
        the state the decoder would be in if token_ids[k] were consumed.
        """
        self._check_owner(state)
        self._check_owner(ctx)
        ids = np.asarray(token_ids, dtype=np.int64)
        k = ids.shape[0]
        x = ad.rows(self.p["tgt_embed"], ids)
        h = Tensor(np.broadcast_to(state.h, (k, self.hidden)))
        c = Tensor(np.broadcast_to(state.c, (k, self.hidden)))
        feed = Tensor(np.broadcast_to(state.feed, (k, self.hidden)))
        enc = Tensor(np.broadcast_to(ctx.enc, (k,) + ctx.enc.shape[1:]))
        mask = np.broadcast_to(ctx.mask, (k, ctx.mask.shape[1]))
        logits, h, c, feed = self._decode_graph_step(enc, mask, x, feed, h, c)
        return h.data, c.data, feed.data, logits.data

    def decode_step(self, state, prev_token, ctx):
        """Feed one token; returns (log-prob vector [Vt], new DecoderState)."""
        self._check_owner(state)
        self._check_owner(ctx)
        prev = int(prev_token)
        if not 0 <= prev < self.tgt_vocab:
            raise ContractError(f"previous token {prev} outside target vocab")
        h, c, feed, logits = self.advance(state, ctx, np.array([prev]))
        logprobs = ad.log_softmax(Tensor(logits[0])).data
        t_new = state.t + (0 if prev == BOS else 1)
        return logprobs, DecoderState(h[0], c[0], feed[0], t_new, self)

    def step_logprobs(self, src, tgt):
        """Per-step log p(y_t | X, y_{<t}) along a full target (incl. EOS)."""
        if not tgt or tgt[-1] != EOS:
            raise ContractError("target must end with EOS")
        if any(not 0 <= t < self.tgt_vocab for t in tgt):
            raise ContractError("target token id out of vocabulary range")
        ctx, state = self.encode(src)
        out = []
        prev = BOS
        for tok in tgt:
            logprobs, state = self.decode_step(state, prev, ctx)
            out.append(float(logprobs[tok]))
            prev = tok
        return np.array(out, dtype=np.float64)

    def sequence_logprob(self, src, tgt):
        """log p(Y|X) for a complete EOS-terminated target."""
        total = 0.0
        for lp in self.step_logprobs(src, tgt):
            total += lp
        return total

    def sample_continuation(self, src, prefix, seed, max_len=None):
        """Extend a prefix by ancestral sampling until EOS or the cap.

        The cap counts content tokens; if it is hit the sequence is closed
        with EOS so every return value is a complete target.
        """
        if prefix and prefix[-1] == EOS:
            return list(prefix)
        if max_len is None:
            max_len = self.max_len
        rng = substream(seed, "sample")
        ctx, state = self.encode(src)
        prev = BOS
        for tok in prefix:
            _, state = self.decode_step(state, prev, ctx)
            prev = tok
        out = list(prefix)
        while len(out) < max_len:
            logprobs, state = self.decode_step(state, prev, ctx)
            tok = int(rng.choice(self.tgt_vocab, p=np.exp(logprobs.astype(np.float64))
                                 / np.exp(logprobs.astype(np.float64)).sum()))
            if tok == EOS:
                return out + [EOS]
            out.append(tok)
            prev = tok
        return out + [EOS]


def dataset_ce(model, corpus, batch_size=32):
    """Mean per-token cross-entropy over a corpus, untaped."""
    total, count = 0.0, 0.0
    for batch in batch_iter(corpus, batch_size):
        loss, tokens = model.mle_loss(batch)
        total += float(loss.data)
        count += tokens
    return total / max(count, 1.0)


def batch_logprobs(model, pairs):
    """log p(tgt|src) for each pair from one padded forward pass.

    Matches per-pair sequence_logprob up to float32 batching noise; use
    it where many short sequences must be scored against one model.
    """
    if not pairs:
        return np.zeros(0, dtype=np.float64)
    batch = make_batch(pairs)
    enc, h, c = model._encode_graph(batch.src, batch.src_mask)
    b, t_max = batch.tgt_in.shape
    feed = Tensor(np.zeros((b, model.hidden)))
    out = np.zeros(b, dtype=np.float64)
    rows = np.arange(b)
    for t in range(t_max):
        x = ad.rows(model.p["tgt_embed"], batch.tgt_in[:, t])
        logits, h, c, feed = model._decode_graph_step(
            enc, batch.src_mask, x, feed, h, c)
        lp = ad.log_softmax(logits).data
        out += lp[rows, batch.tgt_out[:, t]] * batch.tgt_mask[:, t]
    return out


def train_mle(model, corpus, schedule, dev=None, log=None):
    """Teacher-forced MLE training; returns the per-epoch loss record."""
    if len(corpus.pairs) == 0:
        raise ContractError("cannot train on an empty corpus")
    opt = OptimState(schedule.optimizer, schedule.lr, schedule.clip_norm)
    params = model.params()
    history = []
    best = float("inf")
    stale = 0
    for epoch in range(schedule.epochs):
        epoch_seed = stream_key(schedule.seed, "epoch", epoch) % (2 ** 63)
        total, count = 0.0, 0.0
        for batch in batch_iter(corpus, schedule.batch_size, seed=epoch_seed):
            with Tape() as tape:
                loss, tokens = model.mle_loss(batch)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise TrainingDivergenceError(
                    f"non-finite loss at epoch {epoch}")
            grads = backward(tape, loss)
            # normalize the summed CE to a per-token mean before stepping
            for p in params:
                g = grads.get(p)
                if g is not None:
                    g /= tokens
            optimizer_step(opt, params, grads)
            total += loss_val
            count += tokens
        record = {"epoch": epoch, "train_ce": total / max(count, 1.0)}
        if dev is not None:
            record["dev_ce"] = dataset_ce(model, dev, schedule.batch_size)
        history.append(record)
        if log is not None:
            log(record)
        if dev is not None and schedule.patience > 0:
            dev_ce = record["dev_ce"]
            if dev_ce < best - 1e-6:
                best = dev_ce
                stale = 0
            else:
                stale += 1
                if stale >= schedule.patience:
                    break
    model.trained = True
    return history


def score_pair(model, pair):
    """Convenience: log p(Y|X) of a SequencePair."""
    return model.sequence_logprob(pair.src, pair.tgt)


def single_batch(pair):
    """A batch holding one SequencePair."""
    return make_batch([pair])
