"""Byte-level tokenizer: ids 0-255 are raw UTF-8 bytes, followed by special tokens."""

from __future__ import annotations

BOS = 256
EOS = 257
SPECIALS = {"<bos>": BOS, "<eos>": EOS}
VOCAB_SIZE = 258


def encode(text: str, bos: bool = False, eos: bool = False) -> list[int]:
    ids = list(text.encode("utf-8"))
    if bos:
        ids.insert(0, BOS)
    if eos:
        ids.append(EOS)
    return ids


def decode(ids) -> str:
    """Bytes back to text; special tokens are dropped and invalid UTF-8 is replaced."""
    return bytes(i for i in ids if 0 <= i < 256).decode("utf-8", errors="replace")


def token_strings(ids) -> list[str]:
    """Printable form of each token, for per-token display."""
    inverse = {v: k for k, v in SPECIALS.items()}
    return [inverse[i] if i in inverse else bytes([i]).decode("latin-1") for i in ids]
