"""P(T) confidence: next-token probability of the chosen answer.

For multiple choice the score is the raw probability the model assigns
to its best answer label among the candidates (no renormalization over
the label subset). For open-ended generation it is the summed mass the
model puts on starting its reply with one of the expected format tokens
(low mass signals format deviation and uncertainty).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .trace import ChoiceDistribution


def canonicalize_token(text: str) -> str:
    """Normalize a token for label matching.

    Strips surrounding whitespace and one layer of surrounding
    parentheses, so "(A)", " A", and "A" all match label "A".
    Comparison stays case-sensitive.
    """
    out = text.strip()
    if len(out) >= 2 and out.startswith("(") and out.endswith(")"):
        out = out[1:-1].strip()
    return out


@dataclass(frozen=True)
class PtResult:
    """Chosen label and its raw probability; matched=False flags that no
    candidate label appeared in the distribution (p_t is 0)."""

    chosen_label: str
    p_t: float
    matched: bool = True


def p_t_multiple_choice(dist: ChoiceDistribution, labels: Sequence[str]) -> PtResult:
    """Pick the highest-probability entry matching a candidate label.

    Ties at equal probability go to the earliest label in the supplied
    order; if no label appears in the distribution, the first label is
    returned with p_t = 0 and matched=False.
    """
    if not labels:
        raise ValueError("labels must be non-empty")
    dist.validate()
    index = {label: i for i, label in enumerate(labels)}
    best: tuple[int, float] | None = None
    for token, prob in dist.entries:
        idx = index.get(canonicalize_token(token))
        if idx is None:
            continue
        if best is None or prob > best[1] or (prob == best[1] and idx < best[0]):
            best = (idx, prob)
    if best is None:
        return PtResult(chosen_label=labels[0], p_t=0.0, matched=False)
    return PtResult(chosen_label=labels[best[0]], p_t=best[1])


def p_t_first_token(dist: ChoiceDistribution, target_tokens: Iterable[str]) -> float:
    """Summed probability mass on entries matching any target token."""
    targets = {canonicalize_token(t) for t in target_tokens}
    if not targets:
        raise ValueError("target_tokens must be non-empty")
    dist.validate()
    return sum(prob for token, prob in dist.entries if canonicalize_token(token) in targets)
