"""Tokenizers. The default is byte-level: ids 0-255 are raw UTF-8 bytes, followed
by an end-of-text marker (also the document delimiter) and a padding id."""

from __future__ import annotations

from pathlib import Path
from typing import Protocol, Sequence


class TokenizerError(ValueError):
    pass


class Tokenizer(Protocol):
    vocab_size: int
    eot_id: int
    pad_id: int

    def encode(self, text: str) -> list[int]: ...

    def decode(self, tokens: Sequence[int]) -> str: ...


class ByteTokenizer:
    eot_id = 256
    pad_id = 257
    vocab_size = 258
    name = "bytes"

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, tokens: Sequence[int]) -> str:
        return bytes(int(t) for t in tokens if int(t) < 256).decode("utf-8", errors="replace")


class VocabFileTokenizer:
    """Wraps a HuggingFace ``tokenizer.json`` (e.g. the GPT-NeoX 50277-entry vocab)."""

    def __init__(self, path):
        path = Path(path)
        if not path.is_file():
            raise TokenizerError(f"vocab file not found: {path}")
        try:
            from tokenizers import Tokenizer as HFTokenizer
            self._tok = HFTokenizer.from_file(str(path))
        except Exception as exc:  # malformed files surface as various exception types
            raise TokenizerError(f"cannot load vocab file {path}: {exc}") from exc
        self.name = str(path)
        self.vocab_size = self._tok.get_vocab_size()
        eot = self._tok.token_to_id("<|endoftext|>")
        if eot is None:
            raise TokenizerError(f"{path} defines no <|endoftext|> token")
        self.eot_id = eot
        pad = self._tok.token_to_id("<|padding|>")
        self.pad_id = eot if pad is None else pad

    def encode(self, text: str) -> list[int]:
        return self._tok.encode(text, add_special_tokens=False).ids

    def decode(self, tokens: Sequence[int]) -> str:
        return self._tok.decode(list(tokens), skip_special_tokens=False)


def get_tokenizer(spec: str | None = None):
    if spec in (None, "", "bytes"):
        return ByteTokenizer()
    return VocabFileTokenizer(spec)
