"""Pulling structured JSON payloads out of free-form model text.

Models routinely wrap their payload in prose or a reasoning preamble, so we
scan the text for the first decodable JSON block rather than parsing the
whole response.
"""
from __future__ import annotations

import json
from typing import Any, Iterable, Iterator

from .errors import NoStructuredBlock

_DECODER = json.JSONDecoder()


def iter_structured_blocks(text: str) -> Iterator[Any]:
    """Yield every decodable JSON object/array in `text`, left to right."""
    i, n = 0, len(text)
    while i < n:
        if text[i] in "{[":
            try:
                obj, end = _DECODER.raw_decode(text, i)
            except ValueError:
                i += 1
                continue
            yield obj
            i = end
        else:
            i += 1


def first_dict_block(text: str, required_keys: Iterable[str] = ()) -> dict:
    """First JSON object carrying every required key; the first object at all
    when none is complete (so validation can report what is missing).
    """
    required = tuple(required_keys)
    fallback = None
    for obj in iter_structured_blocks(text):
        if isinstance(obj, dict):
            if all(k in obj for k in required):
                return obj
            if fallback is None:
                fallback = obj
    if fallback is None:
        raise NoStructuredBlock("no JSON object found in model output")
    return fallback


def first_record_list(text: str, wrapper_keys: tuple[str, ...] = ("excerpts", "records", "findings")) -> list:
    """First JSON array in the text, unwrapping common {"excerpts": [...]}
    style envelopes."""
    for obj in iter_structured_blocks(text):
        if isinstance(obj, list):
            return obj
        if isinstance(obj, dict):
            for key in wrapper_keys:
                value = obj.get(key)
                if isinstance(value, list):
                    return value
    raise NoStructuredBlock("no JSON array found in model output")
