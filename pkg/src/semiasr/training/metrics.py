from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


@dataclass
class EditCounts:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_len: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    def __add__(self, other: EditCounts) -> EditCounts:
        return EditCounts(self.substitutions + other.substitutions, self.insertions + other.insertions,
                          self.deletions + other.deletions, self.ref_len + other.ref_len)


def align(ref: Sequence, hyp: Sequence) -> EditCounts:
    """Levenshtein alignment; ties prefer substitution, then deletion."""
    n, m = len(ref), len(hyp)
    # cost, subs, ins, dels
    prev = [(j, 0, j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, 0, i)]
        for j in range(1, m + 1):
            c, s, ins, d = prev[j - 1]
            miss = ref[i - 1] != hyp[j - 1]
            best = (c + miss, s + miss, ins, d)
            c, s, ins, d = prev[j]
            if c + 1 < best[0]:
                best = (c + 1, s, ins, d + 1)
            c, s, ins, d = cur[j - 1]
            if c + 1 < best[0]:
                best = (c + 1, s, ins + 1, d)
            cur.append(best)
        prev = cur
    _, s, ins, d = prev[m]
    return EditCounts(s, ins, d, n)


def word_errors(ref: str, hyp: str) -> EditCounts:
    return align(ref.split(), hyp.split())


def char_errors(ref: str, hyp: str) -> EditCounts:
    return align(list(ref), list(hyp))


def wer(refs: Sequence[str], hyps: Sequence[str]) -> float:
    """Corpus word error rate: total edits / total reference words."""
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references vs {len(hyps)} hypotheses")
    total = EditCounts()
    for r, h in zip(refs, hyps):
        total = total + word_errors(r, h)
    if total.ref_len == 0:
        return 0.0 if total.errors == 0 else float("inf")
    return total.errors / total.ref_len
