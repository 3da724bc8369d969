"""IOB slot tagging: span annotations <-> per-token tag ids."""
from __future__ import annotations

from typing import List, Sequence, Tuple

OUTSIDE = 0


class AnnotationError(ValueError):
    pass


class TagSet:
    """Tag inventory ``O, B-s1, I-s1, B-s2, I-s2, ...``; id 0 is always ``O``."""

    def __init__(self, slot_types: Sequence[str]):
        self.slot_types = list(slot_types)
        self.tags = ["O"]
        for s in self.slot_types:
            self.tags += [f"B-{s}", f"I-{s}"]
        self._index = {t: i for i, t in enumerate(self.tags)}

    def __len__(self):
        return len(self.tags)

    def begin(self, slot_type: str) -> int:
        return self._index[f"B-{slot_type}"]

    def inside(self, slot_type: str) -> int:
        return self._index[f"I-{slot_type}"]

    def decode_tag(self, tag_id: int) -> Tuple[str, str]:
        """-> (prefix, slot_type) with prefix in {'O', 'B', 'I'}."""
        if tag_id == OUTSIDE:
            return "O", ""
        s = self.slot_types[(tag_id - 1) // 2]
        return ("B" if tag_id % 2 == 1 else "I"), s

    def names(self, tag_ids) -> List[str]:
        return [self.tags[int(t)] for t in tag_ids]


def spans_to_tags(transcript_len: int, slots, tagset: TagSet) -> List[int]:
    """``slots`` yields objects with slot_type/start_token/end_token or (type, start, end) tuples."""
    spans = sorted((_as_span(s) for s in slots), key=lambda x: (x[1], x[2]))
    tags = [OUTSIDE] * transcript_len
    for (ta, sa, ea), (tb, sb, eb) in zip(spans, spans[1:]):
        if sb < ea:
            raise AnnotationError(f"overlapping spans {(ta, sa, ea)} and {(tb, sb, eb)}")
    for slot_type, start, end in spans:
        if not 0 <= start < end <= transcript_len:
            raise AnnotationError(f"span {(slot_type, start, end)} invalid for length {transcript_len}")
        tags[start] = tagset.begin(slot_type)
        for t in range(start + 1, end):
            tags[t] = tagset.inside(slot_type)
    return tags


def tags_to_spans(tags: Sequence[int], tagset: TagSet) -> List[Tuple[str, int, int]]:
    """Maximal well-typed runs. An ``I-s`` without a preceding ``B-s``/``I-s`` opens a new span."""
    spans = []
    cur = None
    for t, tag in enumerate(tags):
        prefix, slot_type = tagset.decode_tag(int(tag))
        if prefix == "I" and cur is not None and cur[0] == slot_type:
            continue
        if cur is not None:
            spans.append((cur[0], cur[1], t))
            cur = None
        if prefix != "O":
            cur = (slot_type, t)
    if cur is not None:
        spans.append((cur[0], cur[1], len(tags)))
    return spans


def _as_span(s):
    if isinstance(s, tuple):
        return s
    return (s.slot_type, s.start_token, s.end_token)
