"""Text frontend: graphemes to stress-marked phonemes plus punctuation tokens.

The encoder consumes a flat symbol sequence per utterance: the phonemes of
each word (vowels carry their stress level as part of the symbol, e.g. AH0,
AH1, AH2), followed by one punctuation-class token per word (an explicit
blank token when no punctuation is written), and a single terminal marker
at the end.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from importlib import resources

logger = logging.getLogger(__name__)

PAD = "_"
TERM = "~"
BLANK = "sp"

# Punctuation characters that become their own symbol when trailing a word.
PUNCTUATION = (",", ".", "?", "!", ";")
PUNCT_SYMBOLS = (BLANK,) + PUNCTUATION

# ARPAbet phone set. Vowels are listed without stress digits; the inventory
# materializes each one in 3 stress variants (0, 1, 2).
VOWELS = (
    "AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER",
    "EY", "IH", "IY", "OW", "OY", "UH", "UW",
)
CONSONANTS = (
    "B", "CH", "D", "DH", "F", "G", "HH", "JH", "K", "L", "M", "N",
    "NG", "P", "R", "S", "SH", "T", "TH", "V", "W", "Y", "Z", "ZH",
)
STRESS_LEVELS = ("0", "1", "2")

# Spell-out fallback for out-of-vocabulary words: one pseudo-phoneme per
# letter, distinct from every real phone.
LETTER_SYMBOLS = tuple("#" + c for c in "abcdefghijklmnopqrstuvwxyz'")

_WORD_RE = re.compile(r"[a-z0-9']+")
_STRESSED_VOWEL_RE = re.compile(r"^([A-Z]{1,2})([0-2])$")


class TextFrontendError(ValueError):
    pass


@dataclass(frozen=True)
class SymbolInventory:
    """Dense, bijective mapping between symbol strings and integer ids."""

    symbols: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        index = {}
        for i, sym in enumerate(self.symbols):
            if sym in index:
                raise TextFrontendError(f"duplicate symbol {sym!r} in inventory")
            index[sym] = i
        object.__setattr__(self, "index", index)
        self._check_stress_variants()

    def _check_stress_variants(self):
        stems = {}
        for sym in self.symbols:
            m = _STRESSED_VOWEL_RE.match(sym)
            if m and m.group(1) in VOWELS:
                stems.setdefault(m.group(1), set()).add(m.group(2))
        for stem, levels in stems.items():
            if levels != set(STRESS_LEVELS):
                raise TextFrontendError(
                    f"vowel {stem} has stress variants {sorted(levels)}, expected 0/1/2"
                )

    def __len__(self):
        return len(self.symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self.index

    def id_of(self, symbol: str) -> int:
        try:
            return self.index[symbol]
        except KeyError:
            raise TextFrontendError(f"symbol {symbol!r} not in inventory") from None

    def symbol_of(self, symbol_id: int) -> str:
        if not 0 <= symbol_id < len(self.symbols):
            raise TextFrontendError(f"symbol id {symbol_id} out of range [0, {len(self.symbols)})")
        return self.symbols[symbol_id]

    @classmethod
    def default(cls) -> "SymbolInventory":
        symbols = [PAD, TERM, *PUNCT_SYMBOLS, *CONSONANTS]
        for vowel in VOWELS:
            symbols.extend(vowel + s for s in STRESS_LEVELS)
        symbols.extend(LETTER_SYMBOLS)
        return cls(tuple(symbols))

    @classmethod
    def from_file(cls, path) -> "SymbolInventory":
        with open(path, encoding="utf-8") as f:
            symbols = tuple(line.rstrip("\n") for line in f if line.rstrip("\n"))
        return cls(symbols)

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for sym in self.symbols:
                f.write(sym + "\n")


@dataclass(frozen=True)
class PhonemeSequence:
    """Encoded symbol ids for one utterance."""

    utterance_id: str
    symbol_ids: tuple[int, ...]
    source_text: str


class Lexicon:
    """Word to pronunciation map; the first pronunciation seen is canonical."""

    def __init__(self, entries: dict[str, list[list[str]]] | None = None):
        self.entries: dict[str, list[list[str]]] = entries or {}

    def add(self, word: str, phones: list[str]) -> None:
        self.entries.setdefault(word.lower(), []).append(list(phones))

    def canonical(self, word: str) -> list[str] | None:
        prons = self.entries.get(word.lower())
        return list(prons[0]) if prons else None

    def __contains__(self, word: str) -> bool:
        return word.lower() in self.entries

    def __len__(self):
        return len(self.entries)

    def validate_against(self, inventory: SymbolInventory) -> None:
        for word, prons in self.entries.items():
            for pron in prons:
                for phone in pron:
                    if phone not in inventory:
                        raise TextFrontendError(
                            f"lexicon entry {word!r} uses phone {phone!r} missing from inventory"
                        )

    @classmethod
    def _parse(cls, f, origin: str) -> "Lexicon":
        lex = cls()
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 2:
                raise TextFrontendError(f"{origin}:{lineno}: malformed lexicon line {line!r}")
            lex.add(parts[0], parts[1:])
        return lex

    @classmethod
    def from_file(cls, path) -> "Lexicon":
        with open(path, encoding="utf-8") as f:
            return cls._parse(f, str(path))

    @classmethod
    def bundled(cls) -> "Lexicon":
        ref = resources.files("blendtts.data").joinpath("lexicon_mini.txt")
        with ref.open(encoding="utf-8") as f:
            return cls._parse(f, "lexicon_mini.txt")


def normalize_text(text: str, utterance_id: str = "<unnamed>") -> list[tuple[str, str]]:
    """Split text into lowercased (word, trailing punctuation) pairs.

    The punctuation slot is one of PUNCT_SYMBOLS; BLANK when nothing rated
    as punctuation follows the word.
    """
    lowered = text.lower()
    pairs: list[tuple[str, str]] = []
    for m in _WORD_RE.finditer(lowered):
        word = m.group(0)
        # scan the gap after this word for the first supported punctuation mark
        end = m.end()
        nxt = _WORD_RE.search(lowered, end)
        gap = lowered[end:nxt.start() if nxt else len(lowered)]
        punct = BLANK
        for ch in gap:
            if ch in PUNCTUATION:
                punct = ch
                break
        pairs.append((word, punct))
    if not pairs:
        raise TextFrontendError(f"utterance {utterance_id}: no words left after normalization of {text!r}")
    return pairs


def graphemes_to_phonemes(
    words: list[str], lexicon: Lexicon, utterance_id: str = "<unnamed>"
) -> list[list[str]]:
    """Look up the canonical pronunciation per word, spelling out OOVs."""
    out = []
    fallbacks = []
    for word in words:
        pron = lexicon.canonical(word)
        if pron is None:
            pron = ["#" + c for c in word if "#" + c in LETTER_SYMBOLS]
            if not pron:
                pron = [BLANK]
            fallbacks.append(word)
        out.append(pron)
    if fallbacks:
        logger.info("utterance %s: letter fallback for %d word(s): %s",
                    utterance_id, len(fallbacks), " ".join(fallbacks))
    return out


def attach_punctuation(
    phoneme_lists: list[list[str]], puncts: list[str]
) -> list[str]:
    """Interleave word phonemes and punctuation tokens, then close with TERM."""
    if len(phoneme_lists) != len(puncts):
        raise TextFrontendError(
            f"got {len(phoneme_lists)} words but {len(puncts)} punctuation tokens"
        )
    bad = sorted(set(p for p in puncts if p not in PUNCT_SYMBOLS))
    if bad:
        raise TextFrontendError(f"unknown punctuation symbol(s): {bad}")
    seq: list[str] = []
    for phones, punct in zip(phoneme_lists, puncts):
        seq.extend(phones)
        seq.append(punct)
    seq.append(TERM)
    return seq


def encode(symbols: list[str], inventory: SymbolInventory) -> tuple[int, ...]:
    return tuple(inventory.id_of(s) for s in symbols)


def decode(symbol_ids, inventory: SymbolInventory) -> list[str]:
    return [inventory.symbol_of(i) for i in symbol_ids]


def text_to_sequence(
    text: str,
    lexicon: Lexicon,
    inventory: SymbolInventory,
    utterance_id: str = "<unnamed>",
) -> PhonemeSequence:
    """Full pipeline: normalize, look up phonemes, interleave punctuation, encode."""
    pairs = normalize_text(text, utterance_id)
    words = [w for w, _ in pairs]
    puncts = [p for _, p in pairs]
    phones = graphemes_to_phonemes(words, lexicon, utterance_id)
    symbols = attach_punctuation(phones, puncts)
    return PhonemeSequence(utterance_id, encode(symbols, inventory), text)
