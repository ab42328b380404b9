"""Captioner and chat-model clients.

Two families: deterministic mocks that answer from a synthetic scene's
ground truth (so the full pipeline runs hermetically), and thin HTTP
clients that forward requests to real model services. Both sides share the
strict reply parsers for the retrieval and canonicalization contracts.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .remote import post_json, resolve_endpoint
from .render import render_color
from .scene import CameraView, VoxelScene
from .synth import ObjectRecord, render_gt_masks
from .util import image_to_png_b64, stream, to_uint8_image

PROMPT_NAMES = {
    "canonical_caption": "canonical_caption.txt",
    "query_refine": "query_refine.txt",
    "retrieve": "retrieve.txt",
}

#: nouns that may not lead a canonical caption or refined query
FORBIDDEN_LEADING_NOUNS = frozenset(
    {"object", "thing", "item", "stuff", "part", "area",
     "region", "section", "portion", "surface"}
)

STOPWORDS = frozenset({"the", "a", "an", "of", "and", "with", "placed", "is", "at", "to"})


class ClientError(ValueError):
    """Invalid request or a mock asked to handle an unknown prompt."""


class ParseError(ValueError):
    """Base class for reply-contract violations."""


class NotSingleJsonLine(ParseError):
    pass


class MissingField(ParseError):
    pass


class LengthMismatch(ParseError):
    pass


class EmptyIds(ParseError):
    pass


class IdsNotSorted(ParseError):
    pass


class UnknownId(ParseError):
    pass


class CaptionMismatch(ParseError):
    pass


class ForbiddenSubject(ParseError):
    pass


def load_prompt(name: str) -> str:
    """Load one of the packaged system prompts by short name."""
    if name not in PROMPT_NAMES:
        raise ClientError(f"unknown prompt {name!r}; choose from {sorted(PROMPT_NAMES)}")
    return (
        resources.files("openvoxel").joinpath("prompts", PROMPT_NAMES[name]).read_text("utf-8")
    )


def tokenize(text: str) -> list[str]:
    return [t for t in re.split(r"[^0-9a-z]+", text.lower()) if t]


def leading_noun(phrase: str) -> str:
    """First word of the first comma-part, punctuation stripped, lowercase."""
    head = phrase.split(",")[0].strip()
    toks = tokenize(head)
    return toks[0] if toks else ""


@dataclass
class CaptionFrame:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.mask = np.asarray(self.mask, bool)
        if not self.mask.any():
            raise ClientError("caption frame mask is empty")


@dataclass
class CaptionRequest:
    frames: list[CaptionFrame]

    def __post_init__(self):
        if not 1 <= len(self.frames) <= 8:
            raise ClientError("a caption request carries 1 to 8 frames")

    def padded(self, k: int = 8) -> "CaptionRequest":
        """Pad to exactly k frames by repeating the last pair."""
        frames = list(self.frames)
        while len(frames) < k:
            frames.append(frames[-1])
        return CaptionRequest(frames=frames[:k])


@dataclass
class TextPart:
    text: str


@dataclass
class ImagePart:
    image: np.ndarray  # (H, W, 3) float in [0, 1]


@dataclass
class ChatRequest:
    system_prompt: str
    user_parts: list  # TextPart | ImagePart, ordered

    def __post_init__(self):
        if not self.system_prompt:
            raise ClientError("system prompt must be non-empty")


@dataclass
class RetrievalResult:
    ids: list[int]
    captions: list[str]
    candidates: list[int] | None = None

    def format(self) -> str:
        obj = {"ids": self.ids, "captions": self.captions}
        if self.candidates is not None:
            obj["candidates"] = [{"id": c} for c in self.candidates]
        return json.dumps(obj, separators=(", ", ": "))


def _parse_single_json_object(text: str) -> dict:
    s = text.strip()
    if "\n" in s or "\r" in s:
        raise NotSingleJsonLine("reply must be exactly one line")
    try:
        obj = json.loads(s)
    except json.JSONDecodeError as exc:
        raise NotSingleJsonLine(f"reply is not a bare JSON object: {exc}") from exc
    if not isinstance(obj, dict):
        raise NotSingleJsonLine("reply must be a JSON object")
    return obj


def parse_retrieval(text: str, scene_map) -> RetrievalResult:
    """Decode and validate a retrieval reply against the scene map.

    Violations raise distinct error classes: NotSingleJsonLine, MissingField,
    LengthMismatch, EmptyIds, IdsNotSorted, UnknownId, CaptionMismatch.
    """
    obj = _parse_single_json_object(text)
    for key in ("ids", "captions"):
        if key not in obj:
            raise MissingField(f"reply missing {key!r}")
    ids, captions = obj["ids"], obj["captions"]
    if not isinstance(ids, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in ids):
        raise MissingField("ids must be a list of integers")
    if not isinstance(captions, list) or not all(isinstance(c, str) for c in captions):
        raise MissingField("captions must be a list of strings")
    if len(ids) != len(captions):
        raise LengthMismatch(f"{len(ids)} ids but {len(captions)} captions")
    if not ids:
        raise EmptyIds("reply may not return empty ids")
    if any(b <= a for a, b in zip(ids, ids[1:])):
        raise IdsNotSorted(f"ids must be strictly ascending, got {ids}")
    by_id = {e.id: e.caption for e in scene_map.entries}
    for i, cap in zip(ids, captions):
        if i not in by_id:
            raise UnknownId(f"id {i} is not in the scene map")
        if cap != by_id[i]:
            raise CaptionMismatch(f"caption for id {i} does not match the scene map")
    candidates = None
    if "candidates" in obj:
        raw = obj["candidates"]
        if not isinstance(raw, list):
            raise MissingField("candidates must be a list")
        candidates = []
        for c in raw:
            cid = c.get("id") if isinstance(c, dict) else c
            if not isinstance(cid, int) or isinstance(cid, bool):
                raise MissingField("candidate entries must carry an integer id")
            if cid not in by_id:
                raise UnknownId(f"candidate id {cid} is not in the scene map")
            candidates.append(cid)
    return RetrievalResult(ids=list(ids), captions=list(captions), candidates=candidates)


def parse_canonical(text: str) -> str:
    """Decode a canonicalization reply; returns the whitespace-normalized phrase.

    Violations raise NotSingleJsonLine, MissingField, or ForbiddenSubject.
    """
    obj = _parse_single_json_object(text)
    if "canonical" not in obj or not isinstance(obj["canonical"], str):
        raise MissingField("reply missing string field 'canonical'")
    phrase = " ".join(obj["canonical"].split())
    if not phrase:
        raise MissingField("canonical phrase is empty")
    if leading_noun(phrase) in FORBIDDEN_LEADING_NOUNS:
        raise ForbiddenSubject(f"canonical phrase may not lead with {leading_noun(phrase)!r}")
    return phrase


class Captioner:
    def caption(self, req: CaptionRequest) -> str:
        raise NotImplementedError


class ChatClient:
    def chat(self, req: ChatRequest) -> str:
        raise NotImplementedError


class MockSceneContext:
    """Ground-truth lookups shared by the mock clients.

    Views are recognized by exact float equality against cached color
    renders, so mock behavior is fully deterministic.
    """

    def __init__(self, scene: VoxelScene, views: list[CameraView],
                 records: list[ObjectRecord], tau_bg: float = 0.5):
        self.scene = scene
        self.views = views
        self.records = records
        self.tau_bg = tau_bg
        self._renders: dict[int, np.ndarray] = {}
        self._gts: dict[int, np.ndarray] = {}

    def render(self, i: int) -> np.ndarray:
        if i not in self._renders:
            self._renders[i] = render_color(self.scene, self.views[i])
        return self._renders[i]

    def gt(self, i: int) -> np.ndarray:
        if i not in self._gts:
            self._gts[i] = render_gt_masks(self.scene, [self.views[i]], self.tau_bg)[0]
        return self._gts[i]

    def record_for(self, gt_id: int) -> ObjectRecord | None:
        for r in self.records:
            if r.gt_id == gt_id:
                return r
        return None

    def identify_view(self, image: np.ndarray) -> int | None:
        for i in range(len(self.views)):
            r = self.render(i)
            if r.shape == image.shape and np.array_equal(r, image):
                return i
        return None

    def identify_prompted(self, image: np.ndarray) -> tuple[int, np.ndarray] | None:
        """Recognize a visually-prompted frame: inside-mask pixels keep the
        render's value, outside pixels are the render scaled by 0.3, and the
        red marker dot is pure (1, 0, 0)."""
        red = np.array([1.0, 0.0, 0.0])
        for i in range(len(self.views)):
            r = self.render(i)
            if r.shape != image.shape:
                continue
            eq = np.all(image == r, axis=-1)
            dark = np.all(image == r * 0.3, axis=-1)
            dot = np.all(image == red, axis=-1)
            if np.all(eq | dark | dot):
                return i, eq & ~dark
        return None

    def majority_record(self, view_index: int, mask: np.ndarray) -> ObjectRecord | None:
        gt = self.gt(view_index)
        labels = gt[np.asarray(mask, bool)]
        labels = labels[labels > 0]
        if labels.size == 0:
            return None
        ids, counts = np.unique(labels, return_counts=True)
        best = int(ids[np.lexsort((ids, -counts))[0]])
        return self.record_for(best)


def _category_omitted(category: str) -> bool:
    """A fixed pseudo-random ~40% of categories are left out of the rough
    mock captions, mimicking an upstream captioner that misses the class."""
    return float(stream(0, "caption-omission", category).uniform()) < 0.4


class MockCaptioner(Captioner):
    """Rough template captions from the ground truth behind each mask.

    The deliberately vague subject ("... object ...") and the occasional
    missing category are the flaws the canonicalization stage must repair.
    """

    def __init__(self, context: MockSceneContext):
        self.context = context

    def caption(self, req: CaptionRequest) -> str:
        req = req.padded()
        counts: dict[int, int] = {}
        for frame in req.frames:
            vi = self.context.identify_view(frame.image)
            if vi is None:
                continue
            gt = self.context.gt(vi)
            labels = gt[frame.mask]
            for k in labels[labels > 0]:
                counts[int(k)] = counts.get(int(k), 0) + 1
        if not counts:
            return "A small unidentified object"
        best = min(counts, key=lambda k: (-counts[k], k))
        rec = self.context.record_for(best)
        if rec is None:
            return "A small unidentified object"
        if _category_omitted(rec.category):
            return f"A {rec.color_name} {rec.shape} object, placed {rec.placement}"
        return (f"A {rec.color_name} {rec.shape} object, possibly a {rec.category}, "
                f"placed {rec.placement}")


def _find_text(parts: list, prefix: str) -> str | None:
    for p in parts:
        if isinstance(p, TextPart) and p.text.startswith(prefix):
            return p.text[len(prefix):].strip()
    return None


def _scene_map_groups(parts: list) -> list[dict]:
    raw = _find_text(parts, "scene_map:")
    if raw is None:
        raise ClientError("request parts carry no scene_map")
    return json.loads(raw).get("groups", [])


def _overlap_score(query_tokens: set[str], caption: str) -> int:
    return len(query_tokens & set(tokenize(caption)))


def _retrieval_score(canonical: str, caption: str) -> int:
    score = _overlap_score(set(tokenize(canonical)), caption)
    if leading_noun(canonical) == leading_noun(caption):
        score += 2
    return score


class MockChat(ChatClient):
    """Rule-based stand-in for the multimodal chat model.

    The request's system prompt selects the behavior: it must byte-equal
    one of the three packaged prompts (canonicalize, refine, retrieve).
    """

    def __init__(self, context: MockSceneContext | None = None):
        self.context = context
        self._prompts = {name: load_prompt(name) for name in PROMPT_NAMES}

    def chat(self, req: ChatRequest) -> str:
        if req.system_prompt == self._prompts["canonical_caption"]:
            return self._canonicalize(req)
        if req.system_prompt == self._prompts["query_refine"]:
            return self._refine(req)
        if req.system_prompt == self._prompts["retrieve"]:
            return self._retrieve(req)
        raise ClientError("mock has no rule for this prompt")

    # -- canonical captioning ------------------------------------------------
    def _canonicalize(self, req: ChatRequest) -> str:
        raw = _find_text(req.user_parts, "caption:") or ""
        record = None
        if self.context is not None:
            for p in req.user_parts:
                if not isinstance(p, ImagePart):
                    continue
                found = self.context.identify_prompted(p.image)
                if found is not None:
                    record = self.context.majority_record(*found)
                    if record is not None:
                        break
        if record is None and self.context is not None:
            record = self._record_from_caption(raw)
        if record is None:
            # nothing recognizable behind the mask: emit the degenerate
            # reply so the caller's repair path takes over
            return json.dumps({"canonical": "object, unknown"})
        if record.placement == "ground":
            phrase = (f"background: {record.category}, "
                      f"{record.color_name} {record.shape}, {record.placement}")
        else:
            phrase = f"{record.category}, {record.color_name} {record.shape}, {record.placement}"
        return json.dumps({"canonical": phrase})

    def _record_from_caption(self, raw: str) -> ObjectRecord | None:
        toks = set(tokenize(raw))
        for r in self.context.records:
            if r.category in toks:
                return r
        for r in self.context.records:
            if r.color_name in toks and r.shape in toks:
                return r
        return None

    # -- query refinement ----------------------------------------------------
    def _refine(self, req: ChatRequest) -> str:
        query = _find_text(req.user_parts, "query:") or ""
        groups = _scene_map_groups(req.user_parts)
        tokens = [t for t in tokenize(query) if t not in STOPWORDS and t not in ("on", "in")]
        if not tokens:
            raise ClientError("refine request carries an empty query")
        if len(tokens) == 1:
            return json.dumps({"canonical": tokens[0]})
        qset = set(tokens)
        best = max(groups, key=lambda g: (_overlap_score(qset, g["caption"]), -g["id"]),
                   default=None)
        if best is None or _overlap_score(qset, best["caption"]) == 0:
            return json.dumps({"canonical": ", ".join([tokens[0], " ".join(tokens[1:])])})
        parts = [p.strip() for p in best["caption"].split(",")]
        last = parts[-1]
        placement_like = last.startswith(("on ", "in ", "inside ", "against ",
                                          "between ", "attached ")) or last == "ground"
        if placement_like and not (qset & set(tokenize(last))):
            parts = parts[:-1]
        return json.dumps({"canonical": ", ".join(parts)})

    # -- retrieval -----------------------------------------------------------
    def _retrieve(self, req: ChatRequest) -> str:
        canonical = _find_text(req.user_parts, "canonical:") or ""
        groups = _scene_map_groups(req.user_parts)
        if not groups:
            raise ClientError("retrieve request carries an empty scene map")
        best = min(groups, key=lambda g: (-_retrieval_score(canonical, g["caption"]), g["id"]))
        return json.dumps({"ids": [best["id"]], "captions": [best["caption"]]})


class RemoteCaptioner(Captioner):
    """Client for the POST /v1/caption endpoint."""

    def __init__(self, endpoint: str | None = None, timeout: float = 60.0, retries: int = 2):
        self.endpoint = resolve_endpoint(endpoint)
        self.timeout = timeout
        self.retries = retries

    def caption(self, req: CaptionRequest) -> str:
        req = req.padded()
        payload = {
            "frames": [
                {
                    "image": image_to_png_b64(f.image),
                    "mask": image_to_png_b64(to_uint8_image(f.mask.astype(np.float64))),
                }
                for f in req.frames
            ]
        }
        reply = post_json(self.endpoint, "/v1/caption", payload, self.timeout, self.retries)
        if "caption" not in reply:
            raise ClientError("caption reply missing 'caption'")
        return str(reply["caption"])


class RemoteChat(ChatClient):
    """Client for the POST /v1/chat endpoint."""

    def __init__(self, endpoint: str | None = None, timeout: float = 60.0, retries: int = 2):
        self.endpoint = resolve_endpoint(endpoint)
        self.timeout = timeout
        self.retries = retries

    def chat(self, req: ChatRequest) -> str:
        parts = []
        for p in req.user_parts:
            if isinstance(p, TextPart):
                parts.append({"type": "text", "text": p.text})
            elif isinstance(p, ImagePart):
                parts.append({"type": "image", "image": image_to_png_b64(p.image)})
            else:
                raise ClientError(f"unsupported chat part {type(p).__name__}")
        payload = {"system": req.system_prompt, "parts": parts}
        reply = post_json(self.endpoint, "/v1/chat", payload, self.timeout, self.retries)
        if "text" not in reply:
            raise ClientError("chat reply missing 'text'")
        return str(reply["text"])
