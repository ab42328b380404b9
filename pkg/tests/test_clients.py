import json

import numpy as np
import pytest

from openvoxel.clients import (CaptionFrame, CaptionMismatch, CaptionRequest, ChatRequest,
                               ClientError, EmptyIds, ForbiddenSubject, IdsNotSorted,
                               LengthMismatch, MissingField, MockCaptioner, MockChat,
                               MockSceneContext, NotSingleJsonLine, RetrievalResult, TextPart,
                               UnknownId, leading_noun, load_prompt, parse_canonical,
                               parse_retrieval, tokenize)
from openvoxel.render import render_color
from openvoxel.scene_map import SceneMap, SceneMapEntry
from openvoxel.synth import SceneSpec, generate_orbit, generate_scene


@pytest.fixture(scope="module")
def apple_ctx():
    # seed 52 places a green sphere whose category is "apple" (gt id 5)
    scene, records = generate_scene(SceneSpec(seed=52, n_objects=5))
    views = generate_orbit(scene, 8, width=48, height=48)
    return MockSceneContext(scene, views, records)


def frames_for(ctx, gt_id, n=3):
    frames = []
    for i in range(len(ctx.views)):
        mask = ctx.gt(i) == gt_id
        if mask.any():
            frames.append(CaptionFrame(image=ctx.render(i), mask=mask))
        if len(frames) == n:
            break
    assert len(frames) == n
    return CaptionRequest(frames=frames)


def test_caption_template_green_apple(apple_ctx):
    cap = MockCaptioner(apple_ctx).caption(frames_for(apple_ctx, 5))
    assert cap == "A green sphere object, possibly a apple, placed on table"


def test_caption_deterministic(apple_ctx):
    req = frames_for(apple_ctx, 1)
    c = MockCaptioner(apple_ctx)
    assert c.caption(req) == c.caption(req)


def test_caption_padding_repeats_last():
    img = np.zeros((4, 4, 3))
    mask = np.ones((4, 4), bool)
    req = CaptionRequest(frames=[CaptionFrame(image=img, mask=mask)] * 3)
    padded = req.padded(8)
    assert len(padded.frames) == 8
    assert all(f is padded.frames[2] for f in padded.frames[2:])


def test_caption_request_bounds():
    img = np.zeros((4, 4, 3))
    mask = np.ones((4, 4), bool)
    with pytest.raises(ClientError):
        CaptionRequest(frames=[])
    with pytest.raises(ClientError):
        CaptionRequest(frames=[CaptionFrame(image=img, mask=mask)] * 9)
    with pytest.raises(ClientError):
        CaptionFrame(image=img, mask=np.zeros((4, 4), bool))


def test_caption_background_mask_unidentified(apple_ctx):
    bg = apple_ctx.gt(0) == 0
    assert bg.any()
    req = CaptionRequest(frames=[CaptionFrame(image=apple_ctx.render(0), mask=bg)])
    assert MockCaptioner(apple_ctx).caption(req) == "A small unidentified object"


def test_caption_unknown_image_unidentified(apple_ctx):
    img = np.full((48, 48, 3), 0.123)
    req = CaptionRequest(frames=[CaptionFrame(image=img, mask=np.ones((48, 48), bool))])
    assert MockCaptioner(apple_ctx).caption(req) == "A small unidentified object"


def test_chat_request_requires_system_prompt():
    with pytest.raises(ClientError):
        ChatRequest(system_prompt="", user_parts=[])


def test_mock_chat_rejects_unknown_prompt():
    chat = MockChat()
    with pytest.raises(ClientError, match="no rule"):
        chat.chat(ChatRequest(system_prompt="do something else", user_parts=[]))


def test_prompts_load_and_differ():
    texts = {name: load_prompt(name) for name in ("canonical_caption", "query_refine", "retrieve")}
    assert all(len(t) > 100 for t in texts.values())
    assert len(set(texts.values())) == 3
    with pytest.raises(ClientError):
        load_prompt("nonexistent")


def test_tokenize_and_leading_noun():
    assert tokenize("Apple, Green-Sphere 2!") == ["apple", "green", "sphere", "2"]
    assert leading_noun("apple, green sphere, on table") == "apple"
    assert leading_noun("  Red Mug, ceramic") == "red"
    assert leading_noun("") == ""


def demo_map():
    return SceneMap(scene_name="demo", entries=[
        SceneMapEntry(id=1, center=(0.0, 0.0, 0.0), caption="apple, green sphere, on table",
                      voxel_count=10),
        SceneMapEntry(id=3, center=(1.0, 0.0, 0.0), caption="crate, red box, on table",
                      voxel_count=20),
    ])


def test_parse_retrieval_valid():
    m = demo_map()
    text = json.dumps({"ids": [1, 3],
                       "captions": [m.entries[0].caption, m.entries[1].caption]})
    res = parse_retrieval(text, m)
    assert res.ids == [1, 3]
    assert res.candidates is None


def test_parse_retrieval_candidates():
    m = demo_map()
    text = json.dumps({"ids": [1], "captions": [m.entries[0].caption],
                       "candidates": [{"id": 3}]})
    assert parse_retrieval(text, m).candidates == [3]


@pytest.mark.parametrize("reply,err", [
    ("The answer is:\n{\"ids\": [1], \"captions\": [\"x\"]}", NotSingleJsonLine),
    ("sure! {\"ids\": [1]}", NotSingleJsonLine),
    ('{"captions": ["x"]}', MissingField),
    ('{"ids": [1, 3], "captions": ["apple, green sphere, on table"]}', LengthMismatch),
    ('{"ids": [], "captions": []}', EmptyIds),
    ('{"ids": [3, 1], "captions": ["crate, red box, on table", "apple, green sphere, on table"]}',
     IdsNotSorted),
    ('{"ids": [9], "captions": ["ghost"]}', UnknownId),
    ('{"ids": [1], "captions": ["wrong caption"]}', CaptionMismatch),
])
def test_parse_retrieval_errors(reply, err):
    with pytest.raises(err):
        parse_retrieval(reply, demo_map())


def test_retrieval_format_parse_round_trip():
    m = demo_map()
    res = RetrievalResult(ids=[1], captions=[m.entries[0].caption], candidates=[3])
    again = parse_retrieval(res.format(), m)
    assert again == res


def test_parse_canonical_valid():
    assert parse_canonical('{"canonical": "apple,  green   sphere"}') == "apple, green sphere"


def test_parse_canonical_forbidden_subject():
    with pytest.raises(ForbiddenSubject):
        parse_canonical('{"canonical": "object, green"}')


def test_parse_canonical_structure_errors():
    with pytest.raises(NotSingleJsonLine):
        parse_canonical('first line\n{"canonical": "apple"}')
    with pytest.raises(MissingField):
        parse_canonical('{"caption": "apple"}')
    with pytest.raises(MissingField):
        parse_canonical('{"canonical": "   "}')


def scene_map_part(groups):
    return TextPart("scene_map:\n" + json.dumps({"groups": groups}))


def test_mock_retrieve_exact_match_and_tie():
    chat = MockChat()
    sys = load_prompt("retrieve")
    groups = [{"id": 2, "caption": "apple, green sphere, on table"},
              {"id": 4, "caption": "apple, green sphere, on table"}]
    reply = chat.chat(ChatRequest(system_prompt=sys, user_parts=[
        scene_map_part(groups), TextPart("canonical: apple, green sphere, on table")]))
    obj = json.loads(reply)
    assert obj["ids"] == [2]  # identical captions: tie goes to the smaller id


def test_mock_retrieve_token_overlap():
    chat = MockChat()
    sys = load_prompt("retrieve")
    groups = [{"id": 1, "caption": "crate, red box, on table"},
              {"id": 2, "caption": "apple, green sphere, on table"}]
    reply = chat.chat(ChatRequest(system_prompt=sys, user_parts=[
        scene_map_part(groups), TextPart("canonical: apple, green")]))
    assert json.loads(reply)["ids"] == [2]


def test_mock_refine_single_token_passthrough():
    chat = MockChat()
    sys = load_prompt("query_refine")
    reply = chat.chat(ChatRequest(system_prompt=sys, user_parts=[
        scene_map_part([]), TextPart("query: apple")]))
    assert json.loads(reply) == {"canonical": "apple"}


def test_mock_refine_drops_unqueried_placement():
    chat = MockChat()
    sys = load_prompt("query_refine")
    groups = [{"id": 1, "caption": "apple, green sphere, on table"}]
    reply = chat.chat(ChatRequest(system_prompt=sys, user_parts=[
        scene_map_part(groups), TextPart("query: green apple")]))
    assert json.loads(reply) == {"canonical": "apple, green sphere"}


def test_mock_chat_deterministic(apple_ctx):
    chat = MockChat(apple_ctx)
    sys = load_prompt("query_refine")
    req = ChatRequest(system_prompt=sys, user_parts=[
        scene_map_part([{"id": 1, "caption": "apple, green sphere, on table"}]),
        TextPart("query: the green apple")])
    assert chat.chat(req) == chat.chat(req)
