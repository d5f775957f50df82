"""Synthetic changing scenes, depth rendering and benchmark bundles."""

from .scene import (Change, ChangeConfig, GenerationError, SceneConfig, SceneObject,
                    ScenePairManifest, SyntheticScene, apply_changes, generate_scene, object_labels,
                    object_mask)
from .render import render_depth, render_scene_frames
from .manifest import (SCHEMA, ManifestError, ScanDataset, assign_splits, export_benchmark_bundle,
                       load_scan_manifest, manifest_from_dict, manifest_to_dict, save_manifest)

__all__ = [
    "Change", "ChangeConfig", "GenerationError", "SceneConfig", "SceneObject",
    "ScenePairManifest", "SyntheticScene", "apply_changes", "generate_scene", "object_labels",
    "object_mask", "render_depth", "render_scene_frames", "SCHEMA", "ManifestError",
    "ScanDataset", "assign_splits", "export_benchmark_bundle", "load_scan_manifest",
    "manifest_from_dict", "manifest_to_dict", "save_manifest",
]
