"""Procedural part-level back descriptions over a fixed token vocabulary."""
from __future__ import annotations

import typing as t
from dataclasses import dataclass

from ..errors import ContractError
from .voxels import VoxelAsset

VIEW_TOKENS: tuple[str, ...] = ("ROTATE", "DEG180", "VIEW")
VOCAB: tuple[str, ...] = VIEW_TOKENS + (
    "BACK", "PLAIN", "SLAB", "SPIKE", "WINGS", "HANDLE", "SMALL", "LARGE",
)
TOKEN_IDS: dict[str, int] = {tok: i for i, tok in enumerate(VOCAB)}

Description = tuple[str, ...]


@dataclass(frozen=True)
class Annotation:
    descriptions: tuple[Description, ...]

    def token_ids(self) -> list[list[int]]:
        return [encode_tokens(d) for d in self.descriptions]


def encode_tokens(tokens: t.Sequence[str]) -> list[int]:
    try:
        return [TOKEN_IDS[tok] for tok in tokens]
    except KeyError as exc:
        raise ContractError(f"token {exc.args[0]!r} is not in the vocabulary") from None


def decode_tokens(ids: t.Sequence[int]) -> list[str]:
    out = []
    for i in ids:
        if not 0 <= int(i) < len(VOCAB):
            raise ContractError(f"token id {i} outside vocabulary of size {len(VOCAB)}")
        out.append(VOCAB[int(i)])
    return out


def describe(kind: str, size: str | None) -> Annotation:
    if kind == "none":
        return Annotation(descriptions=(("BACK", "PLAIN"),))
    name = kind.upper()
    if name not in TOKEN_IDS or size is None:
        raise ContractError(f"cannot describe component ({kind!r}, {size!r})")
    return Annotation(descriptions=(("BACK", name, size.upper()), ("BACK", name)))


def annotate(asset: VoxelAsset) -> Annotation:
    return describe(asset.back_component, asset.size_variant)


def parse_prompt(text: str) -> list[str]:
    """``"BACK SPIKE LARGE"`` or ``"back,spike,large"`` -> back-description tokens."""
    tokens = [tok.upper() for tok in text.replace(",", " ").split()]
    encode_tokens(tokens)
    return tokens
