"""Referring-query inference: canonicalize the query, retrieve matching
groups over the scene map, and rasterize the answer mask."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .clients import (ChatClient, ChatRequest, ImagePart, ParseError, RetrievalResult,
                      TextPart, load_prompt, parse_canonical, parse_retrieval)
from .render import render_color, render_group_mask
from .scene import CameraView, VoxelScene
from .scene_map import SceneMap

log = logging.getLogger(__name__)


class QueryError(ValueError):
    pass


@dataclass
class QueryRequest:
    text: str
    target_view: CameraView
    query_image: np.ndarray | None = None

    def __post_init__(self):
        if not self.text:
            raise QueryError("query text must be non-empty")


@dataclass
class QueryAnswer:
    mask: np.ndarray  # (H, W) bool, target view
    ids: list[int]
    captions: list[str]
    canonical_query: str
    candidates: list[int] | None = None


def _map_part(scene_map: SceneMap) -> TextPart:
    return TextPart("scene_map:\n" + scene_map.to_json_str())


def refine_query(req: QueryRequest, scene_map: SceneMap, chat: ChatClient) -> str:
    """Rewrite the free-form query into a canonical phrase via the chat
    client; an invalid reply is retried once."""
    parts: list = [_map_part(scene_map), TextPart("query: " + req.text)]
    if req.query_image is not None:
        parts.append(ImagePart(req.query_image))
    chat_req = ChatRequest(system_prompt=load_prompt("query_refine"), user_parts=parts)
    last_exc: ParseError | None = None
    for _ in range(2):
        reply = chat.chat(chat_req)
        try:
            return parse_canonical(reply)
        except ParseError as exc:
            last_exc = exc
            log.warning("query refinement rejected (%s): %r", exc, reply)
    raise QueryError(f"query refinement failed: {last_exc} (raw reply: {reply!r})")


def retrieve(scene_map: SceneMap, canonical: str, query_image: np.ndarray | None,
             chat: ChatClient) -> RetrievalResult:
    """Retrieve matching group ids for a canonical phrase over the map."""
    if not canonical:
        raise QueryError("canonical phrase must be non-empty")
    parts: list = [_map_part(scene_map), TextPart("canonical: " + canonical)]
    if query_image is not None:
        parts.append(ImagePart(query_image))
    chat_req = ChatRequest(system_prompt=load_prompt("retrieve"), user_parts=parts)
    reply = chat.chat(chat_req)
    try:
        return parse_retrieval(reply, scene_map)
    except ParseError as exc:
        raise type(exc)(f"{exc} (raw reply: {reply!r})") from exc


def answer_query(scene: VoxelScene, voxel_ids: np.ndarray, scene_map: SceneMap,
                 req: QueryRequest, chat: ChatClient, tau_mask: float = 0.5,
                 render_query_image: bool = True) -> QueryAnswer:
    """refine -> retrieve -> rasterize the selected groups in the target view.

    Candidate ids are reported but excluded from the mask. A target that is
    occluded or off-frame yields an empty mask with a warning, not an error.
    """
    image = req.query_image
    if image is None and render_query_image:
        image = render_color(scene, req.target_view)
    canonical = refine_query(QueryRequest(req.text, req.target_view, image), scene_map, chat)
    result = retrieve(scene_map, canonical, image, chat)
    mask = render_group_mask(scene, req.target_view, result.ids, voxel_ids, tau_mask)
    if not mask.any():
        log.warning("groups %s are not visible in the target view", result.ids)
    return QueryAnswer(mask=mask, ids=result.ids, captions=result.captions,
                       canonical_query=canonical, candidates=result.candidates)
