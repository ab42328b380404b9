"""Command-line orchestration of the full pipeline.

Subcommands: synth, group, caption, query, eval, and the end-to-end
pipeline. All outputs land under --out with fixed names (scene.ovx,
cameras.json, scene_map.json, report.json, ...). Exit codes: 0 success,
1 validation error, 2 transport error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .clients import (Captioner, ChatClient, MockCaptioner, MockChat, MockSceneContext,
                      RemoteCaptioner, RemoteChat)
from .grouping import GroupDictionary, GroupEntry, GroupingConfig, run_grouping
from .metrics import EvalReport, QueryItem, evaluate_queries
from .query import QueryRequest, answer_query
from .remote import TransportError
from .render import render_color
from .scene import (CameraView, VoxelScene, load_cameras, load_mask, load_scene,
                    save_cameras, save_mask, save_scene)
from .scene_map import SceneMap, build_scene_map, load_scene_map, save_scene_map
from .segmenter import NoiseConfig, OracleSegmenter, RemoteSegmenter
from .synth import (ObjectRecord, SceneSpec, generate_orbit, generate_scene, load_records,
                    render_gt_masks, save_records)
from .util import stream, to_uint8_image

log = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """Argument errors print usage and exit 1 (not argparse's default 2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ValueError("config must be a JSON object")
    return cfg


def _grouping_config(cfg: dict, args) -> GroupingConfig:
    kwargs = dict(cfg.get("grouping", {}))
    if getattr(args, "merge_every", None) is not None:
        kwargs["merge_every"] = args.merge_every
    if getattr(args, "iou_threshold", None) is not None:
        kwargs["iou_match_threshold"] = args.iou_threshold
    if getattr(args, "max_views", None) is not None:
        kwargs["max_views"] = args.max_views
    if getattr(args, "seed", None) is not None:
        kwargs["seed"] = args.seed
    return GroupingConfig(**kwargs)


def _clients(kind: str, endpoint: str | None, scene: VoxelScene | None,
             views: list[CameraView] | None,
             records: list[ObjectRecord] | None) -> tuple[Captioner, ChatClient]:
    if kind == "remote":
        return RemoteCaptioner(endpoint), RemoteChat(endpoint)
    if scene is None or views is None or records is None:
        raise ValueError("mock clients need the scene, cameras, and records sidecar")
    ctx = MockSceneContext(scene, views, records)
    return MockCaptioner(ctx), MockChat(ctx)


def _save_dictionary(dictionary: GroupDictionary, merges, path: Path) -> None:
    payload = {
        "groups": [
            {
                "id": gid,
                "centroid": [float(x) for x in dictionary.entries[gid].centroid],
                "support": float(dictionary.entries[gid].support),
            }
            for gid in dictionary.canonical_ids()
        ],
        "merges": [[int(a), int(b)] for a, b in merges],
    }
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _load_dictionary(path: Path) -> GroupDictionary:
    payload = json.loads(path.read_text(encoding="utf-8"))
    d = GroupDictionary()
    for g in payload["groups"]:
        gid = int(g["id"])
        d.entries[gid] = GroupEntry(np.asarray(g["centroid"], float), float(g["support"]))
        d.next_id = max(d.next_id, gid + 1)
    return d


def _resolve_view(views: list[CameraView], token: str) -> tuple[int, CameraView]:
    for i, v in enumerate(views):
        if v.name == token:
            return i, v
    try:
        i = int(token)
    except ValueError:
        raise ValueError(f"unknown view {token!r}") from None
    if not 0 <= i < len(views):
        raise ValueError(f"view index {i} out of range")
    return i, views[i]


def _write_mask_png(mask: np.ndarray, path: Path) -> None:
    Image.fromarray((np.asarray(mask, bool) * 255).astype(np.uint8)).save(path, format="PNG")


def _write_overlay(image: np.ndarray, mask: np.ndarray, path: Path) -> None:
    overlay = np.asarray(image, np.float64).copy()
    m = np.asarray(mask, bool)
    overlay[m] = 0.5 * overlay[m] + 0.5 * np.array([1.0, 0.0, 0.0])
    Image.fromarray(to_uint8_image(overlay)).save(path, format="PNG")


# -- subcommands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _load_config(args.config)
    spec_dict = cfg.get("synth", {})
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    if args.n_objects is not None:
        spec_dict["n_objects"] = args.n_objects
    spec = SceneSpec.from_json_dict(spec_dict)
    orbit = dict(cfg.get("orbit", {}))
    orbit.setdefault("n_views", 24)
    scene, records = generate_scene(spec)
    views = generate_orbit(scene, **orbit)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_scene(scene, out / "scene.ovx", meta={"spec": spec.to_json_dict()})
    save_cameras(views, out / "cameras.json")
    save_records(records, out / "records.json")
    print(f"wrote {out / 'scene.ovx'} ({scene.n_voxels} voxels, {len(views)} views)")
    return 0


def cmd_group(args) -> int:
    cfg = _load_config(args.config)
    scene = load_scene(args.scene)
    views = load_cameras(args.cameras)
    config = _grouping_config(cfg, args)
    if args.clients == "remote":
        segmenter = RemoteSegmenter(args.endpoint)
        images = [render_color(scene, v) for v in views]
    else:
        segmenter = OracleSegmenter(scene, views, NoiseConfig(seed=config.seed))
        images = None
    result = run_grouping(scene, views, segmenter, config, images)
    scene.group_F = result.field.F.astype(np.float32)
    scene.group_W = result.field.W.astype(np.float32)
    scene.group_ids = result.voxel_ids
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_scene(scene, out / "scene.ovx")
    _save_dictionary(result.dictionary, result.merges, out / "groups.json")
    n_groups = len(result.dictionary.canonical_ids())
    print(f"grouped {scene.n_voxels} voxels into {n_groups} groups "
          f"({len(result.merges)} merges)")
    return 0


def cmd_caption(args) -> int:
    scene = load_scene(args.scene)
    if scene.group_ids is None:
        raise ValueError("scene carries no group ids; run the group step first")
    views = load_cameras(args.cameras)
    dictionary = _load_dictionary(Path(args.groups))
    records = load_records(args.records) if args.records else None
    captioner, chat = _clients(args.clients, args.endpoint, scene, views, records)
    scene_map = build_scene_map(scene, dictionary, scene.group_ids, views, captioner,
                                chat, scene_name=args.scene_name)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_scene_map(scene_map, out / "scene_map.json")
    print(f"wrote {out / 'scene_map.json'} ({len(scene_map.entries)} entries)")
    return 0


def cmd_query(args) -> int:
    scene = load_scene(args.scene)
    if scene.group_ids is None:
        raise ValueError("scene carries no group ids; run the group step first")
    views = load_cameras(args.cameras)
    scene_map = load_scene_map(args.map)
    records = load_records(args.records) if args.records else None
    _, chat = _clients(args.clients, args.endpoint, scene, views, records)
    _, view = _resolve_view(views, args.view)
    answer = answer_query(scene, scene.group_ids, scene_map,
                          QueryRequest(args.text, view), chat)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_mask_png(answer.mask, out / "mask.png")
    _write_overlay(render_color(scene, view), answer.mask, out / "overlay.png")
    sidecar = {"canonical_query": answer.canonical_query, "ids": answer.ids,
               "captions": answer.captions}
    (out / "answer.json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    print(f"answered with groups {answer.ids}; wrote {out / 'mask.png'}")
    return 0


def _load_query_items(path: Path, views: list[CameraView]) -> list[QueryItem]:
    payload = json.loads(path.read_text(encoding="utf-8"))
    items = []
    for i, q in enumerate(payload):
        _, view = _resolve_view(views, str(q["view"]))
        mask_path = Path(q["gt_mask"])
        if not mask_path.is_absolute():
            mask_path = path.parent / mask_path
        gt = load_mask(mask_path) > 0
        items.append(QueryItem(query=str(q["query"]), view=view, gt_mask=gt,
                               name=str(q.get("name", f"q{i}"))))
    return items


def _write_report(report: EvalReport, out: Path) -> None:
    (out / "report.json").write_text(report.to_json_str() + "\n", encoding="utf-8")
    (out / "report.txt").write_text(report.to_text() + "\n", encoding="utf-8")


def cmd_eval(args) -> int:
    scene = load_scene(args.scene)
    if scene.group_ids is None:
        raise ValueError("scene carries no group ids; run the group step first")
    views = load_cameras(args.cameras)
    scene_map = load_scene_map(args.map)
    records = load_records(args.records) if args.records else None
    _, chat = _clients(args.clients, args.endpoint, scene, views, records)
    items = _load_query_items(Path(args.queries), views)
    report = evaluate_queries(scene, scene.group_ids, scene_map, items, chat)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_report(report, out)
    print(f"mIoU {report.miou:.4f}  mBIoU {report.mbiou:.4f}  "
          f"({len(report.per_query)} queries)")
    return 0


def cmd_pipeline(args) -> int:
    if args.config is None:
        raise ValueError("pipeline requires --config")
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    out = Path(args.out or cfg.get("out", "out"))
    out.mkdir(parents=True, exist_ok=True)

    spec_dict = dict(cfg.get("synth", {}))
    spec_dict.setdefault("seed", seed)
    spec = SceneSpec.from_json_dict(spec_dict)
    orbit = dict(cfg.get("orbit", {}))
    orbit.setdefault("n_views", 24)
    scene, records = generate_scene(spec)
    views = generate_orbit(scene, **orbit)
    save_cameras(views, out / "cameras.json")
    save_records(records, out / "records.json")

    config = _grouping_config(cfg, args)
    segmenter = OracleSegmenter(scene, views, NoiseConfig(seed=config.seed))
    result = run_grouping(scene, views, segmenter, config)
    scene.group_F = result.field.F.astype(np.float32)
    scene.group_W = result.field.W.astype(np.float32)
    scene.group_ids = result.voxel_ids
    save_scene(scene, out / "scene.ovx", meta={"spec": spec.to_json_dict()})
    _save_dictionary(result.dictionary, result.merges, out / "groups.json")

    kind = args.clients or cfg.get("clients", "mock")
    captioner, chat = _clients(kind, args.endpoint or cfg.get("endpoint"),
                               scene, views, records)
    scene_map = build_scene_map(scene, result.dictionary, result.voxel_ids, views,
                                captioner, chat, scene_name=str(cfg.get("scene_name", "demo")))
    save_scene_map(scene_map, out / "scene_map.json")

    # auto-generated query set: object categories round-robin over the views
    n_queries = int(cfg.get("n_queries", 10))
    objects = [r for r in records if r.placement == "on table"]
    rng = stream(seed, "pipeline-queries")
    gt_dir = out / "gt_masks"
    gt_dir.mkdir(exist_ok=True)
    items, manifest = [], []
    for i in range(n_queries):
        rec = objects[int(rng.integers(len(objects)))]
        vi = int(rng.integers(len(views)))
        gt = render_gt_masks(scene, [views[vi]])[0] == rec.gt_id
        mask_path = gt_dir / f"q{i}.png"
        save_mask(gt.astype(np.int32), mask_path)
        text = f"{rec.color_name} {rec.category} on table"
        items.append(QueryItem(query=text, view=views[vi], gt_mask=gt, name=f"q{i}"))
        manifest.append({"name": f"q{i}", "query": text,
                         "view": views[vi].name or f"view_{vi:03d}",
                         "gt_mask": f"gt_masks/q{i}.png"})
    (out / "queries.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")

    report = evaluate_queries(scene, result.voxel_ids, scene_map, items, chat)
    _write_report(report, out)
    print(f"pipeline done: mIoU {report.miou:.4f} over {n_queries} queries -> {out}")
    return 0


# -- entry point ---------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="openvoxel", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scene=False, cameras=False, mapf=False, clients=False):
        p.add_argument("--config")
        p.add_argument("--out", default="out")
        p.add_argument("--seed", type=int)
        if scene:
            p.add_argument("--scene", required=True)
        if cameras:
            p.add_argument("--cameras", required=True)
        if mapf:
            p.add_argument("--map", required=True)
        if clients:
            p.add_argument("--clients", choices=["mock", "remote"], default="mock")
            p.add_argument("--endpoint")
            p.add_argument("--records")

    p = sub.add_parser("synth", help="generate a labeled scene, orbit, and sidecar")
    common(p)
    p.add_argument("--n-objects", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("group", help="run voxel grouping and persist the field")
    common(p, scene=True, cameras=True)
    p.add_argument("--clients", choices=["mock", "remote"], default="mock")
    p.add_argument("--endpoint")
    p.add_argument("--merge-every", type=int)
    p.add_argument("--iou-threshold", type=float)
    p.add_argument("--max-views", type=int)
    p.set_defaults(func=cmd_group)

    p = sub.add_parser("caption", help="build the canonical scene map")
    common(p, scene=True, cameras=True, clients=True)
    p.add_argument("--groups", required=True)
    p.add_argument("--scene-name", default="scene")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("query", help="answer one referring query")
    common(p, scene=True, cameras=True, mapf=True, clients=True)
    p.add_argument("--text", required=True)
    p.add_argument("--view", required=True)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="run a query set and emit the report")
    common(p, scene=True, cameras=True, mapf=True, clients=True)
    p.add_argument("--queries", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="synth -> group -> caption -> eval")
    common(p, clients=False)
    p.add_argument("--clients", choices=["mock", "remote"])
    p.add_argument("--endpoint")
    p.add_argument("--merge-every", type=int)
    p.add_argument("--iou-threshold", type=float)
    p.add_argument("--max-views", type=int)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
