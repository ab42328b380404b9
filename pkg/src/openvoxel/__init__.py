"""OpenVoxel: training-free voxel grouping, canonical scene maps, and
open-vocabulary 3D query answering over sparse voxel scenes."""

from .scene import (CameraView, PointMap, RayHits, VoxelScene, load_cameras, load_mask,
                    load_scene, save_cameras, save_mask, save_scene)
from .render import (render_color, render_group_ids, render_group_mask,
                     render_point_map, traverse_ray)
from .synth import ObjectRecord, SceneSpec, generate_orbit, generate_scene, render_gt_masks
from .segmenter import (MaskPrompt, NoiseConfig, OracleSegmenter, PointPrompt,
                        RemoteSegmenter, Segmenter)
from .grouping import (GroupDictionary, GroupField, GroupingConfig, GroupingResult,
                       assign_voxel_ids, compute_instance_centroids, lift_masks,
                       match_masks, merge_step, run_grouping)
from .clients import (CaptionFrame, CaptionRequest, ChatRequest, ImagePart, MockCaptioner,
                      MockChat, MockSceneContext, RemoteCaptioner, RemoteChat,
                      RetrievalResult, TextPart, load_prompt, parse_canonical,
                      parse_retrieval)
from .scene_map import (SceneMap, SceneMapEntry, build_scene_map, build_visual_prompt,
                        canonicalize_caption, load_scene_map, sample_caption_frames,
                        save_scene_map)
from .query import QueryAnswer, QueryRequest, answer_query, refine_query, retrieve
from .metrics import (EvalReport, QueryItem, adjusted_rand_index, boundary_iou,
                      evaluate_queries, iou, semseg_transfer)

__version__ = "0.1.0"
