"""Conditional poem language model.

A multi-layer unidirectional LSTM over tokens, conditioned at every step on
a topic embedding, the flattened 8x27 acrostic letter block, and the target
line count.  Word embeddings are pretrained and stay fixed; training covers
the recurrent stack and the output projection.

Training regimes: finetune on gold-topic poems only, on gold+silver poems,
or pretrain on plain text first (conditioning channels zeroed) and then
finetune.  Topic conditioning can be disabled, in which case the topic
channel is a zero vector throughout.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, asdict, field
from typing import Optional

import numpy as np

from . import net
from .corpus import (
    MAX_LINES, MIN_LINES, N_LETTER_COLS, N_LETTER_ROWS, Poem, Vocabulary,
    derive_training_condition, tokenize,
)
from .embed import EmbeddingTable
from .net import (
    Linear, LstmLayer, NetError, ParameterStore, adam_update,
    clip_global_norm, dropout_backward, dropout_forward, softmax,
    softmax_xent_batch,
)

log = logging.getLogger(__name__)

ACROSTIC_DIM = N_LETTER_ROWS * N_LETTER_COLS  # 216
EMB_NAME = "embed.fixed"


class PoemLmError(ValueError):
    pass


@dataclass
class LmConfig:
    n_layers: int = 3
    hidden: int = 1024
    dropout: float = 0.4
    lr: float = 0.0005
    batch_size: int = 128
    patience: int = 25
    max_epochs: int = 200
    seed: int = 0

    @classmethod
    def desk_scale(cls, **overrides) -> "LmConfig":
        base = dict(n_layers=2, hidden=64, dropout=0.1, batch_size=16,
                    patience=5, max_epochs=30)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class LmVariant:
    """One of the six training regimes GOLD+/-, PRED/GOLD+/-, WIKI+/-."""

    pretrain: str = "none"            # none | plain_text
    finetune_corpus: str = "gold_only"  # gold_only | gold_plus_silver
    topic_channel: bool = True

    _NAMES = {
        "gold+": ("none", "gold_only", True),
        "gold-": ("none", "gold_only", False),
        "pred/gold+": ("none", "gold_plus_silver", True),
        "pred/gold-": ("none", "gold_plus_silver", False),
        "wiki+": ("plain_text", "gold_plus_silver", True),
        "wiki-": ("plain_text", "gold_plus_silver", False),
    }

    @classmethod
    def from_name(cls, name: str) -> "LmVariant":
        key = name.lower()
        if key not in cls._NAMES:
            raise PoemLmError(
                f"unknown variant {name!r}; expected one of "
                f"{sorted(cls._NAMES)}")
        pre, corp, topic = cls._NAMES[key]
        return cls(pretrain=pre, finetune_corpus=corp, topic_channel=topic)

    @property
    def name(self) -> str:
        for key, val in self._NAMES.items():
            if val == (self.pretrain, self.finetune_corpus,
                       self.topic_channel):
                return key
        raise PoemLmError("unnamed variant")


def _fallback_vector(token: str, dim: int) -> np.ndarray:
    """Deterministic fixed vector for tokens without a pretrained embedding."""
    digest = hashlib.blake2b(token.encode(), digest_size=8).digest()
    rng = np.random.Generator(np.random.PCG64(
        int.from_bytes(digest, "little")))
    return rng.uniform(-net.INIT_SCALE, net.INIT_SCALE, size=dim)


def build_embedding_matrix(vocab: Vocabulary,
                           table: EmbeddingTable) -> np.ndarray:
    mat = np.zeros((len(vocab), table.dim))
    for i, tok in enumerate(vocab.id_to_token):
        if i == vocab.pad_id:
            continue
        if tok in table:
            mat[i] = table.vector(tok)
        else:
            mat[i] = _fallback_vector(tok, table.dim)
    return mat


class PoemLM:
    """LSTM language model with per-step conditioning channels."""

    def __init__(self, vocab: Vocabulary, cfg: LmConfig, topic_dim: int,
                 emb_matrix: np.ndarray, variant: LmVariant,
                 store: Optional[ParameterStore] = None):
        if emb_matrix.shape != (len(vocab), topic_dim):
            raise PoemLmError("embedding matrix shape mismatch")
        self.vocab = vocab
        self.cfg = cfg
        self.variant = variant
        self.topic_dim = topic_dim
        self.embed_dim = emb_matrix.shape[1]
        self.in_dim = self.embed_dim + topic_dim + ACROSTIC_DIM + 1
        self.store = store if store is not None else ParameterStore()
        rng = net.child_rng(cfg.seed, "poemlm", "init")
        self.emb = self.store.add(EMB_NAME, emb_matrix)
        self.layers = []
        for l in range(cfg.n_layers):
            in_dim = self.in_dim if l == 0 else cfg.hidden
            self.layers.append(
                LstmLayer(self.store, f"lm.lstm{l}", in_dim, cfg.hidden, rng))
        self.out = Linear(self.store, "lm.out", cfg.hidden, len(vocab), rng)
        self.frozen = frozenset([EMB_NAME])

    # -- encoding -----------------------------------------------------------

    def encode_poem(self, poem: Poem) -> list[int]:
        ids = [self.vocab.bos_id]
        for i, line in enumerate(poem.lines):
            ids.extend(self.vocab.encode(line))
            ids.append(self.vocab.eol_id if i < poem.n_lines - 1
                       else self.vocab.eos_id)
        return ids

    def topic_vector(self, topic: Optional[str],
                     table: Optional[EmbeddingTable]) -> np.ndarray:
        """Embedding of the first in-table token of the topic, or zeros."""
        if not self.variant.topic_channel or topic is None or table is None:
            return np.zeros(self.topic_dim)
        for tok in tokenize(topic):
            if tok in table:
                return np.asarray(table.vector(tok), dtype=float)
        return np.zeros(self.topic_dim)

    def condition_vector(self, topic_vec: np.ndarray,
                         acrostic_block: np.ndarray,
                         n_lines: float) -> np.ndarray:
        return np.concatenate(
            [topic_vec, np.asarray(acrostic_block).reshape(-1),
             [float(n_lines)]])

    def zero_condition(self) -> np.ndarray:
        """Conditioning for plain-text pretraining: every channel zeroed."""
        return np.zeros(self.topic_dim + ACROSTIC_DIM + 1)

    def poem_condition(self, poem: Poem,
                       table: Optional[EmbeddingTable]) -> np.ndarray:
        spec = derive_training_condition(poem)
        return self.condition_vector(
            self.topic_vector(poem.topic, table), spec.onehot_block(),
            poem.n_lines)

    # -- forward / backward ---------------------------------------------------

    def _inputs(self, token_ids: np.ndarray, cond: np.ndarray) -> np.ndarray:
        """(T,B) ids + (B,C) conditions -> (T,B,in_dim) input tensor."""
        T, B = token_ids.shape
        X = np.empty((T, B, self.in_dim))
        X[:, :, :self.embed_dim] = self.emb[token_ids]
        X[:, :, self.embed_dim:] = cond[None, :, :]
        return X

    def forward_batch(self, token_ids: np.ndarray, cond: np.ndarray,
                      train: bool = False,
                      rng: Optional[np.random.Generator] = None):
        if token_ids.max() >= len(self.vocab) or token_ids.min() < 0:
            raise PoemLmError("token id out of range")
        X = self._inputs(token_ids, cond)
        caches = []
        H = X
        for l, layer in enumerate(self.layers):
            if l > 0:
                H, dmask = dropout_forward(H, self.cfg.dropout, rng, train)
            else:
                dmask = None
            H, cache = layer.forward(H)
            caches.append((cache, dmask))
        logits, lin_cache = self.out.forward(H)
        return logits, (caches, lin_cache)

    def backward_batch(self, dlogits: np.ndarray, caches,
                       grads: dict[str, np.ndarray]) -> None:
        layer_caches, lin_cache = caches
        dH = self.out.backward(dlogits, lin_cache, grads)
        for l in range(len(self.layers) - 1, -1, -1):
            cache, dmask = layer_caches[l]
            dH = self.layers[l].backward(dH, cache, grads)
            dH = dropout_backward(dH, dmask)
        # inputs (fixed embeddings + conditions) receive no updates

    # -- scoring --------------------------------------------------------------

    def lm_forward(self, prefix_ids: list[int],
                   cond: np.ndarray) -> np.ndarray:
        """Next-token distribution given a prefix starting with BOS."""
        if not prefix_ids or prefix_ids[0] != self.vocab.bos_id:
            raise PoemLmError("prefix must start with BOS")
        ids = np.asarray(prefix_ids)[:, None]
        logits, _ = self.forward_batch(ids, cond[None, :], train=False)
        return softmax(logits[-1, 0])

    def poem_log_prob(self, poem: Poem, cond: np.ndarray) -> float:
        ids = self.encode_poem(poem)
        inputs = np.asarray(ids[:-1])[:, None]
        targets = np.asarray(ids[1:])
        logits, _ = self.forward_batch(inputs, cond[None, :], train=False)
        probs = softmax(logits[:, 0, :])
        p = np.clip(probs[np.arange(len(targets)), targets], net.CE_EPS, None)
        return float(np.log(p).sum())

    def perplexity(self, poems: list[Poem],
                   table: Optional[EmbeddingTable],
                   zero_cond: bool = False) -> float:
        if not poems:
            raise PoemLmError("perplexity over an empty dataset")
        total_nll = 0.0
        total_tok = 0
        for inputs, targets, weights, cond in self.batches(
                poems, table, batch_size=self.cfg.batch_size,
                zero_cond=zero_cond):
            logits, _ = self.forward_batch(inputs, cond, train=False)
            V = logits.shape[-1]
            loss, _, wsum = softmax_xent_batch(
                logits.reshape(-1, V), targets.reshape(-1),
                weights.reshape(-1))
            total_nll += loss
            total_tok += int(wsum)
        return float(np.exp(total_nll / total_tok))

    # -- generation-time incremental state ------------------------------------

    def init_state(self):
        H = self.cfg.hidden
        return [(np.zeros(H), np.zeros(H)) for _ in self.layers]

    def step(self, state, token_id: int, cond: np.ndarray) -> np.ndarray:
        """Advance one token; mutates state, returns next-token probs."""
        if not 0 <= token_id < len(self.vocab):
            raise PoemLmError(f"token id {token_id} out of range")
        x = np.concatenate([self.emb[token_id], cond])
        for l, layer in enumerate(self.layers):
            Wx, Wh, b = layer._weights()
            h, c = net.lstm_step(x, state[l][0], state[l][1], Wx, Wh, b)
            state[l] = (h, c)
            x = h
        W = self.store["lm.out.W"]
        bias = self.store["lm.out.b"]
        return softmax(x @ W + bias)

    # -- batching -------------------------------------------------------------

    def batches(self, poems: list[Poem], table: Optional[EmbeddingTable],
                batch_size: int,
                shuffle_rng: Optional[np.random.Generator] = None,
                zero_cond: bool = False):
        """Length-bucketed padded batches of (inputs, targets, weights, cond)."""
        encoded = []
        for poem in poems:
            ids = self.encode_poem(poem)
            cond = (self.zero_condition() if zero_cond
                    else self.poem_condition(poem, table))
            encoded.append((ids, cond))
        yield from self._assemble(encoded, batch_size, shuffle_rng)

    def plain_text_perplexity(self, sentences: list[list[str]]) -> float:
        if not sentences:
            raise PoemLmError("perplexity over an empty dataset")
        total_nll = 0.0
        total_tok = 0
        for inputs, targets, weights, cond in self.plain_text_batches(
                sentences, self.cfg.batch_size):
            logits, _ = self.forward_batch(inputs, cond, train=False)
            V = logits.shape[-1]
            loss, _, wsum = softmax_xent_batch(
                logits.reshape(-1, V), targets.reshape(-1),
                weights.reshape(-1))
            total_nll += loss
            total_tok += int(wsum)
        return float(np.exp(total_nll / total_tok))

    def plain_text_batches(self, sentences: list[list[str]],
                           batch_size: int,
                           shuffle_rng: Optional[np.random.Generator] = None):
        cond = self.zero_condition()
        encoded = []
        for toks in sentences:
            ids = ([self.vocab.bos_id] + self.vocab.encode(toks)
                   + [self.vocab.eos_id])
            encoded.append((ids, cond))
        yield from self._assemble(encoded, batch_size, shuffle_rng)

    def _assemble(self, encoded, batch_size, shuffle_rng):
        order = sorted(range(len(encoded)), key=lambda i: len(encoded[i][0]))
        chunks = [order[i:i + batch_size]
                  for i in range(0, len(order), batch_size)]
        if shuffle_rng is not None:
            shuffle_rng.shuffle(chunks)
        pad = self.vocab.pad_id
        for chunk in chunks:
            T = max(len(encoded[i][0]) for i in chunk) - 1
            B = len(chunk)
            inputs = np.full((T, B), pad, dtype=int)
            targets = np.full((T, B), pad, dtype=int)
            weights = np.zeros((T, B))
            cond = np.empty((B, self.topic_dim + ACROSTIC_DIM + 1))
            for j, i in enumerate(chunk):
                ids, c = encoded[i]
                L = len(ids) - 1
                inputs[:L, j] = ids[:-1]
                targets[:L, j] = ids[1:]
                weights[:L, j] = 1.0
                cond[j] = c
            yield inputs, targets, weights, cond


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _run_epoch(model: PoemLM, batches, rng: np.random.Generator) -> float:
    total, count = 0.0, 0.0
    for inputs, targets, weights, cond in batches:
        logits, caches = model.forward_batch(inputs, cond, train=True,
                                             rng=rng)
        V = logits.shape[-1]
        loss, dflat, wsum = softmax_xent_batch(
            logits.reshape(-1, V), targets.reshape(-1), weights.reshape(-1))
        grads = model.store.zero_grads()
        model.backward_batch(dflat.reshape(logits.shape) / max(wsum, 1.0),
                             caches, grads)
        clip_global_norm(grads)
        adam_update(model.store, grads, lr=model.cfg.lr,
                    frozen=model.frozen)
        total += loss
        count += wsum
    return float(np.exp(total / max(count, 1.0)))


def train_lm(model: PoemLM, train_poems: list[Poem], dev_poems: list[Poem],
             table: Optional[EmbeddingTable], seed_key: str = "finetune",
             pretrain_sentences: Optional[list[list[str]]] = None,
             max_epochs: Optional[int] = None) -> list[dict]:
    """Early-stopped training loop; returns the per-epoch history.

    When pretrain_sentences is given, trains on those with zeroed
    conditioning; early stopping then watches held-out pretrain sentences
    (a 10% tail split), not the poem dev set, so the pretrained weights
    survive into finetuning.
    """
    cfg = model.cfg
    rng = net.child_rng(cfg.seed, "poemlm", seed_key)
    stopper = net.EarlyStopper(patience=cfg.patience)
    history = []
    epochs = max_epochs if max_epochs is not None else cfg.max_epochs
    pretraining = pretrain_sentences is not None
    if pretraining:
        held_out = max(1, len(pretrain_sentences) // 10)
        pre_train = pretrain_sentences[:-held_out] or pretrain_sentences
        pre_dev = pretrain_sentences[-held_out:]

    def dev_metric():
        if pretraining:
            return model.plain_text_perplexity(pre_dev)
        return model.perplexity(dev_poems, table)

    dev_ppl = dev_metric()
    history.append({"epoch": 0, "dev_ppl": dev_ppl, "train_ppl": None})
    stopper.update(dev_ppl, model.store)
    t0 = time.time()
    for epoch in range(1, epochs + 1):
        if pretraining:
            batches = model.plain_text_batches(
                pre_train, cfg.batch_size, shuffle_rng=rng)
        else:
            batches = model.batches(train_poems, table, cfg.batch_size,
                                    shuffle_rng=rng)
        train_ppl = _run_epoch(model, batches, rng)
        dev_ppl = dev_metric()
        improved = stopper.update(dev_ppl, model.store)
        history.append({"epoch": epoch, "dev_ppl": dev_ppl,
                        "train_ppl": train_ppl,
                        "seconds": round(time.time() - t0, 3)})
        log.info("[%s] epoch %d train_ppl=%.3f dev_ppl=%.3f%s", seed_key,
                 epoch, train_ppl, dev_ppl, " *" if improved else "")
        if stopper.should_stop:
            break
    stopper.restore_best(model.store)
    return history


@dataclass
class TrainedLm:
    model: PoemLM
    history: list[dict] = field(default_factory=list)


def train_variant(variant: LmVariant, gold_train: list[Poem],
                  gold_dev: list[Poem], silver_train: list[Poem],
                  pretrain_sentences: Optional[list[list[str]]],
                  table: EmbeddingTable, cfg: LmConfig,
                  vocab: Optional[Vocabulary] = None,
                  vocab_size: int = 50000) -> TrainedLm:
    """Train one of the named regimes end to end."""
    from .corpus import build_vocabulary

    if variant.finetune_corpus == "gold_plus_silver":
        if not silver_train:
            raise PoemLmError(
                f"variant {variant.name!r} needs silver-labeled poems; "
                "run silver labeling first")
        finetune = gold_train + silver_train
    else:
        finetune = list(gold_train)
    if variant.pretrain == "plain_text" and not pretrain_sentences:
        raise PoemLmError(
            f"variant {variant.name!r} needs a plain-text pretrain corpus")
    if not finetune or not gold_dev:
        raise PoemLmError("empty training or dev corpus")

    if vocab is None:
        vocab = build_vocabulary(finetune, max_size=vocab_size)
    model = PoemLM(vocab, cfg, topic_dim=table.dim,
                   emb_matrix=build_embedding_matrix(vocab, table),
                   variant=variant)
    history = []
    if variant.pretrain == "plain_text":
        history += [dict(h, phase="pretrain") for h in train_lm(
            model, [], gold_dev, table, seed_key="pretrain",
            pretrain_sentences=pretrain_sentences)]
        # finetuning starts from fresh optimizer state
        model.store.step = 0
        for name in model.store.m:
            model.store.m[name][...] = 0.0
            model.store.v[name][...] = 0.0
    history += [dict(h, phase="finetune") for h in train_lm(
        model, finetune, gold_dev, table, seed_key="finetune")]
    return TrainedLm(model=model, history=history)


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def save_lm(path, trained: TrainedLm) -> None:
    model = trained.model
    meta = {
        "kind": "poemlm",
        "config": asdict(model.cfg),
        "variant": model.variant.name,
        "topic_dim": model.topic_dim,
        "vocab": model.vocab.non_special_tokens(),
        "history": net.stable_history(trained.history),
    }
    net.save_checkpoint(path, model.store, meta)


def load_lm(path) -> TrainedLm:
    store, meta = net.load_checkpoint(path)
    if meta.get("kind") != "poemlm":
        raise PoemLmError(f"{path}: not a poem LM checkpoint")
    vocab = Vocabulary(meta["vocab"])
    cfg = LmConfig(**meta["config"])
    model = PoemLM(vocab, cfg, topic_dim=meta["topic_dim"],
                   emb_matrix=store[EMB_NAME],
                   variant=LmVariant.from_name(meta["variant"]),
                   store=store)
    return TrainedLm(model=model, history=meta.get("history", []))
