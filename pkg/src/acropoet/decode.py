"""Constrained acrostic generation.

Drives the poem language model token by token while enforcing the
acrostic initials, the target line count (end-of-sentence and end-of-line
markers are interconverted so the poem always has exactly as many lines
as the word has letters), first-word topic steering, and rhyme-scheme
substitution through the character-level rhyming model.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

import numpy as np

from . import net
from .corpus import EOL, EOS, AcrosticSpec, Poem, detokenize
from .embed import EmbeddingError, EmbeddingTable, knn_with_initial
from .poemlm import PoemLM
from .rhymer import RhymerModel, _last_word, choose_rhyme

log = logging.getLogger(__name__)

SCHEMES = {4: "ABAB", 5: "ABABC", 6: "ABABCC", 7: "ABABCDC", 8: "ABABCDCD"}


class DecodeError(ValueError):
    pass


@dataclass(frozen=True)
class RhymeScheme:
    letters: str

    @property
    def substitution_slots(self) -> set[int]:
        """1-indexed lines holding the second occurrence of their letter."""
        slots = set()
        for i, ch in enumerate(self.letters):
            if self.letters.index(ch) == i and ch in self.letters[i + 1:]:
                slots.add(self.letters.index(ch, i + 1) + 1)
        return slots

    def partner(self, slot: int) -> int:
        """1-indexed line of the first occurrence of the slot's letter."""
        return self.letters.index(self.letters[slot - 1]) + 1


def scheme_for(n_lines: int) -> RhymeScheme:
    if n_lines not in SCHEMES:
        raise DecodeError(f"no rhyme scheme for {n_lines} lines "
                          f"(supported: 4-8)")
    return RhymeScheme(SCHEMES[n_lines])


@dataclass
class GenerationConfig:
    k: int = 5
    m1: float = 0.7
    m2: float = 0.3
    beam_width: int = 5
    st: bool = True
    ac: bool = True
    rh: bool = True
    tp: bool = True
    rng_seed: int = 0
    max_tokens_per_line: int = 15
    temperature: float = 1.0

    def __post_init__(self):
        if abs(self.m1 + self.m2 - 1.0) > 1e-9:
            raise DecodeError("m1 + m2 must equal 1")
        if not self.st:
            # the no-steering ablation is defined as m1=0, m2=1
            self.m1, self.m2 = 0.0, 1.0
        if self.max_tokens_per_line < 1:
            raise DecodeError("max_tokens_per_line must be positive")


@dataclass
class ModelBundle:
    lm: PoemLM
    table: EmbeddingTable
    rhymer: RhymerModel | None = None


@dataclass
class GenerationResult:
    poem: Poem
    word: str
    scheme: RhymeScheme
    seed: int
    rhymer_calls: int = 0
    first_word_paths: list[str] = field(default_factory=list)
    substitutions: list[dict] = field(default_factory=list)

    def record(self, cfg: GenerationConfig) -> dict:
        return {
            "word": self.word,
            "flags": {"st": cfg.st, "ac": cfg.ac, "rh": cfg.rh,
                      "tp": cfg.tp},
            "seed": self.seed,
            "scheme": self.scheme.letters,
            "lines": self.poem.lines,
            "first_word_paths": self.first_word_paths,
            "rhyme_slots_filled": self.substitutions,
        }


# ---------------------------------------------------------------------------
# Boundary forcing
# ---------------------------------------------------------------------------

def force_line_boundaries(tokens: list[str], target_lines: int,
                          max_tokens_per_line: int = 15) -> list[str]:
    """Rewrite a sampled token stream so it has exactly `target_lines` lines.

    An end-of-poem marker before the last line becomes end-of-line; an
    end-of-line marker on the last line becomes end-of-poem and truncates
    the stream.  Lines hitting the token cap get a forced boundary.  A
    terminal "," or ";" is rewritten to ".".
    """
    out: list[str] = []
    line_no = 1
    in_line = 0

    def boundary() -> bool:
        """Emit the right marker; True when the poem is finished."""
        nonlocal line_no, in_line
        if line_no < target_lines:
            out.append(EOL)
            line_no += 1
            in_line = 0
            return False
        if out and out[-1] in (",", ";"):
            out[-1] = "."
        out.append(EOS)
        return True

    for tok in tokens:
        if tok in (EOL, EOS):
            if boundary():
                return out
        else:
            out.append(tok)
            in_line += 1
            if in_line >= max_tokens_per_line and boundary():
                return out
    return out


# ---------------------------------------------------------------------------
# First-word policy
# ---------------------------------------------------------------------------

def _letter_mask(lm: PoemLM, letter: str) -> np.ndarray:
    mask = np.zeros(len(lm.vocab))
    for tok, tid in lm.vocab.token_to_id.items():
        if tok[0] == letter and tok[0].isalpha():
            mask[tid] = 1.0
    if not mask.any():
        raise DecodeError(f"no vocabulary token starts with {letter!r}")
    return mask


def _base_mask(lm: PoemLM) -> np.ndarray:
    mask = np.ones(len(lm.vocab))
    v = lm.vocab
    mask[[v.pad_id, v.bos_id, v.unk_id]] = 0.0
    return mask


def _sample_id(probs: np.ndarray, mask: np.ndarray,
               rng: np.random.Generator, temperature: float) -> int:
    p = probs * mask
    if temperature != 1.0:
        p = p ** (1.0 / temperature)
    total = p.sum()
    if total <= 0:
        raise DecodeError("sampling mask excludes every token")
    cdf = np.cumsum(p / total)
    return int(min(np.searchsorted(cdf, rng.random(), side="right"),
                   len(p) - 1))


def first_word(letter: str, topic: str, probs: np.ndarray,
               cfg: GenerationConfig, lm: PoemLM, table: EmbeddingTable,
               coin_rng: np.random.Generator,
               sample_rng: np.random.Generator) -> tuple[int, str]:
    """Pick a line's first token; returns (token id, "knn" or "sample").

    With probability m1 the token is the topic's nearest in-vocabulary
    neighbor with the right initial that the LM likes best; otherwise it
    is sampled from the LM restricted to tokens with that initial (or the
    full vocabulary when the acrostic constraint is off).
    """
    v = lm.vocab
    use_knn = cfg.st and coin_rng.random() < cfg.m1
    if use_knn:
        try:
            cands = knn_with_initial(topic, letter, table, v, k=cfg.k)
        except EmbeddingError:
            cands = []
        if cands:
            best = max(cands, key=lambda c: probs[v.token_to_id[c]])
            return v.token_to_id[best], "knn"
    mask = _base_mask(lm)
    mask[[v.eol_id, v.eos_id]] = 0.0
    if cfg.ac:
        mask *= _letter_mask(lm, letter)
        if not mask.any():
            raise DecodeError(
                f"no vocabulary token starts with {letter!r}")
    return _sample_id(probs, mask, sample_rng, cfg.temperature), "sample"


# ---------------------------------------------------------------------------
# Poem generation
# ---------------------------------------------------------------------------

def _token_for_feed(vocab, token: str) -> int:
    return vocab.token_to_id.get(token, vocab.unk_id)


def _replay_state(lm: PoemLM, token_ids: list[int], cond: np.ndarray):
    """Rebuild LM state over a full prefix; returns (state, next probs)."""
    state = lm.init_state()
    probs = None
    for tid in token_ids:
        probs = lm.step(state, tid, cond)
    return state, probs


def _apply_rhyme(models: ModelBundle, result: GenerationResult,
                 lines: list[list[str]], slot: int,
                 last_word_dist: np.ndarray | None,
                 cfg: GenerationConfig) -> bool:
    """Substitute the slot line's last word; returns True if it changed."""
    scheme = result.scheme
    partner_text = " ".join(lines[scheme.partner(slot) - 1])
    a, _ = _last_word(partner_text) or ("", 0)
    slot_text = " ".join(lines[slot - 1])
    hit = _last_word(slot_text)
    text = "\n".join(" ".join(l) for l in lines[:slot - 1] + [lines[slot - 1]])
    if hit is not None:
        # context ends right before the word being replaced
        offset = len(text) - (len(slot_text) - hit[1])
        text = text[:offset]
    cands = models.rhymer.rhyme_candidates(a, text, width=cfg.beam_width)
    result.rhymer_calls += 1
    if hit is None or not cands:
        return False
    original = hit[0]
    if last_word_dist is not None:
        chosen = choose_rhyme(cands, last_word_dist, models.lm.vocab)
    else:
        chosen = cands[0][0]
    if chosen == original:
        return False
    line = lines[slot - 1]
    idx = next((i for i in range(len(line) - 1, -1, -1)
                if re.fullmatch(r"[a-z]+(?:'[a-z]+)*", line[i])), None)
    if idx is None:
        return False
    if idx == 0 and cfg.ac and chosen[:1] != result.word[slot - 1]:
        # never let a rhyme swap break the acrostic initial
        return False
    line[idx] = chosen
    result.substitutions.append({"slot": slot, "original": original,
                                 "replacement": chosen})
    return True


def generate_poem(word: str, cfg: GenerationConfig,
                  models: ModelBundle) -> GenerationResult:
    word = word.lower()
    if not re.fullmatch(r"[a-z]{4,8}", word):
        raise DecodeError(
            f"acrostic word must be 4-8 letters a-z, got {word!r}")
    if models.lm is None or models.table is None:
        raise DecodeError("generation needs a language model and embeddings")
    if cfg.rh and models.rhymer is None:
        raise DecodeError("rhyme flag is on but no rhymer model was given")
    lm, table = models.lm, models.table
    v = lm.vocab
    n_lines = len(word)
    result = GenerationResult(poem=None, word=word,
                              scheme=scheme_for(n_lines), seed=cfg.rng_seed)
    slots = result.scheme.substitution_slots

    topic_vec = lm.topic_vector(word if cfg.tp else None, table)
    if cfg.tp and lm.variant.topic_channel and not topic_vec.any():
        log.warning("topic word %r has no embedding; topic channel zeroed",
                    word)
    # the acrostic block is fed as conditioning even when masking is off
    cond = lm.condition_vector(topic_vec, AcrosticSpec.from_word(word)
                               .onehot_block(), n_lines)

    coin_rng = net.child_rng(cfg.rng_seed, "generate", word, "coin")
    sample_rng = net.child_rng(cfg.rng_seed, "generate", word, "sample")

    state = lm.init_state()
    fed: list[int] = [v.bos_id]
    probs = lm.step(state, v.bos_id, cond)
    lines: list[list[str]] = []

    for line_no in range(1, n_lines + 1):
        line: list[str] = []
        last_word_dist = None
        tid, path = first_word(word[line_no - 1], word, probs, cfg, lm,
                               table, coin_rng, sample_rng)
        result.first_word_paths.append(path)
        tok = v.id_to_token[tid]
        line.append(tok)
        last_word_dist = probs.copy()
        fed.append(tid)
        probs = lm.step(state, tid, cond)
        ban_eol_once = path == "knn"

        while True:
            if len(line) >= cfg.max_tokens_per_line:
                break
            mask = _base_mask(lm)
            if ban_eol_once:
                # a nearest-neighbor first word may not end the line alone
                mask[[v.eol_id, v.eos_id]] = 0.0
                ban_eol_once = False
            tid = _sample_id(probs, mask, sample_rng, cfg.temperature)
            if tid in (v.eol_id, v.eos_id):
                break
            tok = v.id_to_token[tid]
            line.append(tok)
            if re.fullmatch(r"[a-z]+(?:'[a-z]+)*", tok):
                last_word_dist = probs.copy()
            fed.append(tid)
            probs = lm.step(state, tid, cond)

        lines.append(line)
        final = line_no == n_lines
        changed = False
        if cfg.rh and line_no in slots:
            changed = _apply_rhyme(models, result, lines, line_no,
                                   last_word_dist, cfg)
            if changed:
                fed = [v.bos_id]
                for i, l in enumerate(lines):
                    fed.extend(_token_for_feed(v, t) for t in l)
                    if i < len(lines) - 1:
                        fed.append(v.eol_id)
        if final:
            if lines[-1] and lines[-1][-1] in (",", ";"):
                lines[-1][-1] = "."
        else:
            if changed:
                fed.append(v.eol_id)
                state, probs = _replay_state(lm, fed, cond)
            else:
                fed.append(v.eol_id)
                probs = lm.step(state, v.eol_id, cond)

    result.poem = Poem(lines=lines, topic=word)
    return result


def render_poem(poem: Poem) -> str:
    """Display form: detokenized lines, initials uppercased."""
    shown = []
    for line in poem.lines:
        text = detokenize(line)
        shown.append(text[:1].upper() + text[1:])
    return "\n".join(shown)
