import re

import numpy as np
import pytest

from openvoxel.clients import MockCaptioner, MockChat, MockSceneContext
from openvoxel.grouping import GroupingConfig, run_grouping
from openvoxel.scene import VoxelScene
from openvoxel.scene_map import build_scene_map
from openvoxel.segmenter import NoiseConfig, OracleSegmenter
from openvoxel.synth import SceneSpec, generate_orbit, generate_scene


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    results: dict[int, str] = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)",
                          getattr(rep, "nodeid", ""))
            if m:
                results[int(m.group(1))] = "PASS" if status == "passed" else "FAIL"
    if results:
        terminalreporter.write_line("")
        terminalreporter.write_line("acceptance criteria:")
        for k in sorted(results):
            terminalreporter.write_line(f"  CRITERION {k}: {results[k]}")


def random_scene(n_voxels: int, seed: int, with_labels: bool = False) -> VoxelScene:
    rng = np.random.default_rng(seed)
    return VoxelScene(
        centers=rng.uniform(-1.0, 1.0, (n_voxels, 3)),
        sizes=rng.uniform(0.05, 0.3, n_voxels),
        densities=rng.uniform(0.0, 30.0, n_voxels),
        colors=rng.uniform(0.0, 1.0, (n_voxels, 3)),
        gt_labels=rng.integers(0, 5, n_voxels) if with_labels else None,
    )


@pytest.fixture(scope="session")
def synth_small():
    spec = SceneSpec(seed=1, n_objects=3)
    scene, records = generate_scene(spec)
    views = generate_orbit(scene, 12, width=48, height=48)
    return spec, scene, records, views


@pytest.fixture(scope="session")
def grouped_small(synth_small):
    _, scene, records, views = synth_small
    seg = OracleSegmenter(scene, views, NoiseConfig(seed=0))
    result = run_grouping(scene, views, seg, GroupingConfig(seed=0))
    return scene, records, views, result


@pytest.fixture(scope="session")
def mock_stack(grouped_small):
    scene, records, views, result = grouped_small
    ctx = MockSceneContext(scene, views, records)
    return ctx, MockCaptioner(ctx), MockChat(ctx)


@pytest.fixture(scope="session")
def scene_map_small(grouped_small, mock_stack):
    scene, _, views, result = grouped_small
    _, captioner, chat = mock_stack
    return build_scene_map(scene, result.dictionary, result.voxel_ids, views,
                           captioner, chat, scene_name="small")
