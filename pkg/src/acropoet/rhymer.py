"""Character-level rhyming-word generator.

The word to rhyme with is encoded by a bidirectional char LSTM (the two
final states concatenated), the poem so far by a unidirectional char LSTM;
a char decoder conditioned on both produces the rhyming word, decoded with
beam search.  Training data comes from 14-line sonnets via the fixed
Shakespearean scheme ABAB CDCD EFEF GG.
"""

from __future__ import annotations

import logging
import re
import string
import time
from dataclasses import dataclass, asdict

import numpy as np

from . import net
from .corpus import RawDocument, Vocabulary
from .net import (
    BiLstmEncoder, Linear, LstmLayer, ParameterStore, adam_update,
    clip_global_norm, init_uniform, lstm_step, softmax, softmax_xent_batch,
)

log = logging.getLogger(__name__)

PAD_CH = "\x00"
BOS_CH = "\x02"
EOS_CH = "\x03"
CHARSET = ([PAD_CH, BOS_CH, EOS_CH]
           + list(string.ascii_lowercase) + list(string.digits)
           + list(string.punctuation) + [" ", "\n"])
CHAR_TO_ID = {c: i for i, c in enumerate(CHARSET)}
PAD_ID, BOS_ID, EOS_ID = 0, 1, 2

SONNET_LINES = 14
SONNET_SCHEME = "ABABCDCDEFEFGG"
MAX_WORD_LEN = 20

_WORD_RE = re.compile(r"[a-z]+(?:'[a-z]+)*")
_CHUNK_RE = re.compile(r"\S+")


class RhymerError(ValueError):
    pass


def encode_chars(text: str) -> list[int]:
    """Lowercase and map to char ids, dropping anything outside the charset."""
    return [CHAR_TO_ID[c] for c in text.lower() if c in CHAR_TO_ID]


def decode_chars(ids) -> str:
    return "".join(CHARSET[i] for i in ids if i > EOS_ID)


@dataclass
class RhymeExample:
    a: str  # word to rhyme with
    b: str  # poem text up to the slot
    c: str  # target rhyming word

    def __post_init__(self):
        if not self.a or not self.c:
            raise RhymerError("rhyme words must be non-empty")


def _last_word(line: str):
    """Last alphabetic word of a line with its start offset, or None.

    Surrounding punctuation is stripped; chunks that are not purely
    alphabetic (apostrophes allowed) do not count as rhyme words.
    """
    for chunk in reversed(list(_CHUNK_RE.finditer(line.lower()))):
        text = chunk.group()
        core = text.strip(string.punctuation.replace("'", "") + "'")
        if core and _WORD_RE.fullmatch(core):
            return core, chunk.start() + text.index(core)
    return None


def extract_rhyme_pairs(sonnets: list[RawDocument]) -> list[RhymeExample]:
    """One example per rhyme pair of the Shakespearean scheme (7 per sonnet)."""
    pairs_by_letter: dict[str, list[int]] = {}
    for idx, letter in enumerate(SONNET_SCHEME):
        pairs_by_letter.setdefault(letter, []).append(idx)
    examples = []
    for doc in sonnets:
        lines = [l.lower() for l in doc.lines if l.strip()]
        if len(lines) != SONNET_LINES:
            log.warning("skipping document with %d lines (need %d)",
                        len(lines), SONNET_LINES)
            continue
        for letter in sorted(pairs_by_letter):
            i, j = pairs_by_letter[letter]
            wi, wj = _last_word(lines[i]), _last_word(lines[j])
            if wi is None or wj is None:
                log.warning("no rhyme word on line %d or %d, skipping pair",
                            i + 1, j + 1)
                continue
            prefix = "\n".join(lines[:j + 1])
            # offset of line j's last word within the joined text
            offset = sum(len(l) + 1 for l in lines[:j]) + wj[1]
            examples.append(RhymeExample(a=wi[0], b=prefix[:offset],
                                         c=wj[0]))
    return examples


@dataclass
class RhymerConfig:
    word_hidden: int = 256
    poem_hidden: int = 512
    decoder_hidden: int = 512
    char_dim: int = 32
    lr: float = 0.0005
    batch_size: int = 64
    patience: int = 25
    max_epochs: int = 100
    max_context_chars: int = 400
    seed: int = 0

    @classmethod
    def desk_scale(cls, **overrides) -> "RhymerConfig":
        base = dict(word_hidden=16, poem_hidden=24, decoder_hidden=24,
                    char_dim=8, lr=0.005, batch_size=16, patience=10,
                    max_epochs=60)
        base.update(overrides)
        return cls(**base)


class RhymerModel:
    def __init__(self, cfg: RhymerConfig,
                 store: ParameterStore | None = None):
        self.cfg = cfg
        self.store = store if store is not None else ParameterStore()
        rng = net.child_rng(cfg.seed, "rhymer", "init")
        C = len(CHARSET)
        self.char_emb = self.store.add(
            "rh.chars", init_uniform(rng, (C, cfg.char_dim)))
        self.word_enc = BiLstmEncoder(self.store, "rh.word", cfg.char_dim,
                                      cfg.word_hidden, rng)
        self.poem_enc = LstmLayer(self.store, "rh.poem", cfg.char_dim,
                                  cfg.poem_hidden, rng)
        self.cond_dim = 2 * cfg.word_hidden + cfg.poem_hidden
        self.decoder = LstmLayer(self.store, "rh.dec",
                                 cfg.char_dim + self.cond_dim,
                                 cfg.decoder_hidden, rng)
        self.out = Linear(self.store, "rh.out", cfg.decoder_hidden, C, rng)

    # -- batching ------------------------------------------------------------

    def _pad_ids(self, seqs: list[list[int]]):
        T = max(len(s) for s in seqs)
        B = len(seqs)
        ids = np.full((T, B), PAD_ID, dtype=int)
        lengths = np.zeros(B, dtype=int)
        for j, s in enumerate(seqs):
            ids[:len(s), j] = s
            lengths[j] = len(s)
        return ids, lengths

    def _encode_batch(self, examples: list[RhymeExample]):
        a_seqs = [encode_chars(ex.a) or [EOS_ID] for ex in examples]
        b_seqs = [encode_chars(ex.b)[-self.cfg.max_context_chars:]
                  or [EOS_ID] for ex in examples]
        dec_in = [[BOS_ID] + encode_chars(ex.c) for ex in examples]
        dec_tgt = [encode_chars(ex.c) + [EOS_ID] for ex in examples]
        return (self._pad_ids(a_seqs), self._pad_ids(b_seqs),
                self._pad_ids(dec_in), self._pad_ids(dec_tgt))

    # -- forward / backward ---------------------------------------------------

    def _encoders_forward(self, a_ids, a_len, b_ids, b_len):
        Xa = self.char_emb[a_ids]
        enc_a, cache_a = self.word_enc.forward(Xa, a_len)
        Tb = b_ids.shape[0]
        mask_b = (np.arange(Tb)[:, None] < b_len[None, :]).astype(float)
        Xb = self.char_emb[b_ids]
        Hb, cache_b = self.poem_enc.forward(Xb, mask_b)
        return enc_a, cache_a, Hb[-1], cache_b

    def forward_batch(self, batch):
        (a_ids, a_len), (b_ids, b_len), (in_ids, in_len), _ = batch
        enc_a, cache_a, enc_b, cache_b = self._encoders_forward(
            a_ids, a_len, b_ids, b_len)
        T, B = in_ids.shape
        E = self.cfg.char_dim
        X = np.empty((T, B, E + self.cond_dim))
        X[:, :, :E] = self.char_emb[in_ids]
        X[:, :, E:E + 2 * self.cfg.word_hidden] = enc_a[None]
        X[:, :, E + 2 * self.cfg.word_hidden:] = enc_b[None]
        Hd, cache_d = self.decoder.forward(X)
        logits, cache_o = self.out.forward(Hd)
        return logits, (cache_a, cache_b, cache_d, cache_o, a_ids, b_ids,
                        in_ids)

    def backward_batch(self, dlogits, caches, grads):
        cache_a, cache_b, cache_d, cache_o, a_ids, b_ids, in_ids = caches
        E = self.cfg.char_dim
        Hw2 = 2 * self.cfg.word_hidden
        dHd = self.out.backward(dlogits, cache_o, grads)
        dX = self.decoder.backward(dHd, cache_d, grads)
        np.add.at(grads["rh.chars"], in_ids.reshape(-1),
                  dX[:, :, :E].reshape(-1, E))
        d_enc_a = dX[:, :, E:E + Hw2].sum(axis=0)
        d_enc_b = dX[:, :, E + Hw2:].sum(axis=0)
        dXa = self.word_enc.backward(d_enc_a, cache_a, grads)
        np.add.at(grads["rh.chars"], a_ids.reshape(-1),
                  dXa.reshape(-1, E))
        Tb, B = b_ids.shape
        dHb = np.zeros((Tb, B, self.cfg.poem_hidden))
        dHb[-1] = d_enc_b
        dXb = self.poem_enc.backward(dHb, cache_b, grads)
        np.add.at(grads["rh.chars"], b_ids.reshape(-1),
                  dXb.reshape(-1, E))

    def loss_and_grads(self, examples: list[RhymeExample]):
        batch = self._encode_batch(examples)
        logits, caches = self.forward_batch(batch)
        (_, _), (_, _), (in_ids, in_len), (tgt_ids, _) = batch
        T, B = in_ids.shape
        weights = (np.arange(T)[:, None] < in_len[None, :]).astype(float)
        C = logits.shape[-1]
        loss, dflat, wsum = softmax_xent_batch(
            logits.reshape(-1, C), tgt_ids.reshape(-1), weights.reshape(-1))
        grads = self.store.zero_grads()
        self.backward_batch(dflat.reshape(logits.shape) / max(wsum, 1.0),
                            caches, grads)
        return loss, wsum, grads

    def per_char_nll(self, examples: list[RhymeExample]) -> float:
        total, count = 0.0, 0.0
        for i in range(0, len(examples), self.cfg.batch_size):
            chunk = examples[i:i + self.cfg.batch_size]
            batch = self._encode_batch(chunk)
            logits, _ = self.forward_batch(batch)
            (_, _), (_, _), (in_ids, in_len), (tgt_ids, _) = batch
            T, B = in_ids.shape
            weights = (np.arange(T)[:, None] < in_len[None, :]).astype(float)
            C = logits.shape[-1]
            loss, _, wsum = softmax_xent_batch(
                logits.reshape(-1, C), tgt_ids.reshape(-1),
                weights.reshape(-1))
            total += loss
            count += wsum
        return total / max(count, 1.0)

    # -- beam search ----------------------------------------------------------

    def rhyme_candidates(self, a: str, b: str,
                         width: int = 5) -> list[tuple[str, float]]:
        """Beam-search the decoder; candidates sorted by log prob descending."""
        (a_ids, a_len) = self._pad_ids([encode_chars(a) or [EOS_ID]])
        b_enc = encode_chars(b)[-self.cfg.max_context_chars:] or [EOS_ID]
        (b_ids, b_len) = self._pad_ids([b_enc])
        enc_a, _, enc_b, _ = self._encoders_forward(a_ids, a_len, b_ids,
                                                    b_len)
        cond = np.concatenate([enc_a[0], enc_b[0]])
        Wx, Wh, bias = self.decoder._weights()
        W_out = self.store["rh.out.W"]
        b_out = self.store["rh.out.b"]
        H = self.cfg.decoder_hidden

        def step_fn(prev, state):
            h, c = state if state is not None else (np.zeros(H),
                                                    np.zeros(H))
            sym = BOS_ID if prev is None else prev
            x = np.concatenate([self.char_emb[sym], cond])
            h2, c2 = lstm_step(x, h, c, Wx, Wh, bias)
            logp = np.log(np.clip(softmax(h2 @ W_out + b_out),
                                  net.CE_EPS, None))
            logp[PAD_ID] = -np.inf
            logp[BOS_ID] = -np.inf
            return logp, (h2, c2)

        hyps = beam_search(step_fn, eos_id=EOS_ID, width=width,
                           max_len=MAX_WORD_LEN)
        out = []
        seen = set()
        for ids, score in hyps:
            word = decode_chars(ids)
            if word and word not in seen:
                seen.add(word)
                out.append((word, float(score)))
            if len(out) == width:
                break
        if not out:
            raise RhymerError("beam search produced only empty candidates")
        return out


def beam_search(step_fn, eos_id: int, width: int,
                max_len: int) -> list[tuple[tuple, float]]:
    """Length-completed beam search over a symbol sequence.

    step_fn(prev_symbol_or_None, state_or_None) -> (log-prob vector, state).
    A hypothesis completes when it emits eos_id (eos log prob included in
    its score) or when it reaches max_len symbols.  Returns completed
    hypotheses as (symbol tuple, score), best first; score ties break on
    the symbol tuple for determinism.
    """
    if width < 1:
        raise RhymerError("beam width must be >= 1")
    beams: list[tuple[float, tuple, object]] = [(0.0, (), None)]
    completed: list[tuple[float, tuple]] = []
    for _ in range(max_len + 1):
        expansions = []
        for score, ids, state in beams:
            prev = ids[-1] if ids else None
            logp, new_state = step_fn(prev, state)
            top = list(np.argsort(logp)[::-1][:max(width + 1, 8)])
            if eos_id not in top:
                top.append(eos_id)  # a completion must always be considered
            for sym in top:
                s = float(logp[sym])
                if s == -np.inf:
                    continue
                expansions.append((score + s, ids + (int(sym),), new_state))
        expansions.sort(key=lambda e: (-e[0], e[1]))
        beams = []
        for score, ids, state in expansions:
            if ids[-1] == eos_id:
                completed.append((score, ids[:-1]))
            elif len(ids) >= max_len:
                completed.append((score, ids))
            elif len(beams) < width:
                beams.append((score, ids, state))
        if not beams:
            break
    if not completed:
        raise RhymerError("beam search produced no candidates")
    completed.sort(key=lambda e: (-e[0], e[1]))
    return [(ids, score) for score, ids in completed]


def choose_rhyme(candidates: list[tuple[str, float]], lm_dist: np.ndarray,
                 vocab: Vocabulary) -> str:
    """Pick the candidate the language model likes best at the slot.

    Candidates are (word, rhymer log score) in rhymer order; ties on LM
    probability fall back to that order.  If no candidate is in the LM
    vocabulary, the rhymer's top candidate wins.
    """
    if not candidates:
        raise RhymerError("no rhyme candidates")
    best_word, best_p = None, -1.0
    for word, _score in candidates:
        tid = vocab.token_to_id.get(word)
        if tid is None or tid == vocab.unk_id:
            continue
        p = float(lm_dist[tid])
        if p > best_p:
            best_word, best_p = word, p
    if best_word is None:
        log.warning("all rhyme candidates out of LM vocabulary; "
                    "keeping rhymer top choice %r", candidates[0][0])
        return candidates[0][0]
    return best_word


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train_rhymer(model: RhymerModel, train_ex: list[RhymeExample],
                 dev_ex: list[RhymeExample]) -> list[dict]:
    if not train_ex or not dev_ex:
        raise RhymerError("empty rhymer training or dev set")
    cfg = model.cfg
    rng = net.child_rng(cfg.seed, "rhymer", "train")
    stopper = net.EarlyStopper(patience=cfg.patience)
    history = []
    dev = model.per_char_nll(dev_ex)
    history.append({"epoch": 0, "dev_nll": dev})
    stopper.update(dev, model.store)
    t0 = time.time()
    order = np.arange(len(train_ex))
    for epoch in range(1, cfg.max_epochs + 1):
        rng.shuffle(order)
        total, count = 0.0, 0.0
        for i in range(0, len(order), cfg.batch_size):
            chunk = [train_ex[j] for j in order[i:i + cfg.batch_size]]
            loss, wsum, grads = model.loss_and_grads(chunk)
            clip_global_norm(grads)
            adam_update(model.store, grads, lr=cfg.lr)
            total += loss
            count += wsum
        dev = model.per_char_nll(dev_ex)
        improved = stopper.update(dev, model.store)
        history.append({"epoch": epoch, "dev_nll": dev,
                        "train_nll": total / max(count, 1.0),
                        "seconds": round(time.time() - t0, 3)})
        log.info("[rhymer] epoch %d train_nll=%.4f dev_nll=%.4f%s", epoch,
                 total / max(count, 1.0), dev, " *" if improved else "")
        if stopper.should_stop:
            break
    stopper.restore_best(model.store)
    return history


def save_rhymer(path, model: RhymerModel, history: list[dict]) -> None:
    net.save_checkpoint(path, model.store, {
        "kind": "rhymer", "config": asdict(model.cfg),
        "history": net.stable_history(history)})


def load_rhymer(path) -> RhymerModel:
    store, meta = net.load_checkpoint(path)
    if meta.get("kind") != "rhymer":
        raise RhymerError(f"{path}: not a rhymer checkpoint")
    return RhymerModel(RhymerConfig(**meta["config"]), store=store)
