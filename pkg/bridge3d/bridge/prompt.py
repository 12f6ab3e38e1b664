from __future__ import annotations

import typing as t
from dataclasses import dataclass

import numpy as np

from ..data.annotate import VIEW_TOKENS, Annotation, encode_tokens
from ..errors import ContractError
from ..numerics.random import RandomStream

MAX_PROMPT = 8


@dataclass(frozen=True)
class PromptSpec:
    view_tokens: tuple[str, ...] = VIEW_TOKENS
    back_tokens: tuple[str, ...] = ()

    @property
    def tokens(self) -> tuple[str, ...]:
        return self.view_tokens + self.back_tokens

    def ids(self) -> np.ndarray:
        return np.asarray(encode_tokens(self.tokens), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.tokens)


def sample_prompt(annotation: Annotation, rng: RandomStream, p: float = 0.5) -> PromptSpec:
    """View instruction, plus with probability ``p`` one description drawn uniformly from D."""
    if not annotation.descriptions:
        raise ContractError("sample_prompt: annotation has no descriptions")
    if rng.bernoulli(p):
        return PromptSpec(back_tokens=tuple(rng.choice(annotation.descriptions)))
    return PromptSpec()


def make_prompt(back_tokens: t.Sequence[str] = ()) -> PromptSpec:
    spec = PromptSpec(back_tokens=tuple(back_tokens))
    spec.ids()
    return spec
