"""On-disk project persistence with integrity-checked feature caches.

Layout::

    root/
      store.json          {"format_version": 1, "projects": {id: dirname}}
      <id>/
        project.json      metadata, model provenance, cache digests
        image.npy         float32 pixels as the project holds them
        labels.npy        int32 sparse label grid
        model.war         trained classifier, if any
        classical.npy     classical feature cache, if computed
        deep.npy          deep feature cache, if attached

Caches are advisory: each carries a digest in project.json, and a load that
finds a mismatching or unreadable cache drops it with a logged warning and
recomputes later. Everything else (image, labels, model) is authoritative
state and load errors there propagate.

Migrations run forward only: opening a project written by a newer format
version fails, older versions are upgraded in place exactly once.
"""

from __future__ import annotations

import hashlib
import json
import logging
import secrets
from pathlib import Path

import numpy as np

from .classical import FeatureSetConfig, FeatureStack
from .classify import load_model, save_model
from .engine import Project, SparseLabelMap, TrainedModel
from .errors import FormatError, StateError

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


def _digest(arr: np.ndarray) -> str:
    h = hashlib.sha256(f"{arr.dtype}{arr.shape}".encode())
    h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def _save_array(path: Path, arr: np.ndarray) -> str:
    np.save(path, arr, allow_pickle=False)
    return _digest(arr)


def _load_verified(path: Path, digest: str, what: str) -> np.ndarray | None:
    try:
        arr = np.load(path, allow_pickle=False)
    except Exception as exc:
        log.warning("%s: unreadable %s cache dropped (%s)", path, what, exc)
        return None
    if _digest(arr) != digest:
        log.warning("%s: %s cache digest mismatch, cache dropped", path, what)
        return None
    return arr


def _migrate_v0(meta: dict) -> dict:
    # format 0 kept class names under "classes" and predates history tracking
    meta = dict(meta)
    if "classes" in meta:
        meta["class_names"] = meta.pop("classes")
    meta.setdefault("history", [])
    meta["format_version"] = 1
    return meta


_MIGRATIONS = {0: _migrate_v0}


def _migrate(meta: dict, what: str) -> tuple[dict, bool]:
    version = int(meta.get("format_version", 0))
    if version > FORMAT_VERSION:
        raise FormatError(
            f"{what}: written by format {version}, this build reads up to "
            f"{FORMAT_VERSION}")
    migrated = False
    while version < FORMAT_VERSION:
        meta = _MIGRATIONS[version](meta)
        log.warning("%s: migrated from format %d to %d", what, version,
                    meta["format_version"])
        version = meta["format_version"]
        migrated = True
    return meta, migrated


class ProjectStore:
    """Directory of projects addressed by short unique ids."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        index_path = self.root / "store.json"
        if index_path.exists():
            index = json.loads(index_path.read_text())
            index, migrated = _migrate(index, str(index_path))
            self._index = index
            if migrated:
                self._write_index()
        else:
            self._index = {"format_version": FORMAT_VERSION, "projects": {}}
            self._write_index()

    def _write_index(self):
        (self.root / "store.json").write_text(
            json.dumps(self._index, indent=2, sort_keys=True))

    @property
    def project_ids(self) -> tuple[str, ...]:
        return tuple(self._index["projects"])

    def __contains__(self, project_id: str) -> bool:
        return project_id in self._index["projects"]

    def _dir(self, project_id: str) -> Path:
        try:
            name = self._index["projects"][project_id]
        except KeyError:
            raise StateError(f"no project {project_id!r} in store {self.root}")
        return self.root / name

    def new_id(self) -> str:
        while True:
            candidate = secrets.token_hex(6)
            if candidate not in self._index["projects"]:
                return candidate

    # -- save ------------------------------------------------------------------

    def save_project(self, project_id: str, project: Project,
                     extra: dict | None = None):
        """Write the project and register it; `extra` rides along verbatim."""
        if not project_id or "/" in project_id:
            raise ValueError(f"bad project id {project_id!r}")
        directory = self.root / project_id
        directory.mkdir(parents=True, exist_ok=True)

        meta: dict = {
            "format_version": FORMAT_VERSION,
            "id": project_id,
            "class_count": project.class_count,
            "class_names": list(project.class_names),
            "feature_config": project.feature_config.to_dict(),
            "history": project.history,
            "extra": extra or {},
            "caches": {},
        }
        meta["image"] = {"file": "image.npy",
                         "sha256": _save_array(directory / "image.npy",
                                               project.image)}
        meta["labels"] = {"file": "labels.npy",
                          "sha256": _save_array(directory / "labels.npy",
                                                project.labels.grid)}

        classical = project.classical_cached
        if classical is not None:
            meta["caches"]["classical"] = {
                "file": "classical.npy",
                "sha256": _save_array(directory / "classical.npy",
                                      classical.data),
                "channel_names": list(classical.channel_names),
            }
        deep = project.deep_stack
        if deep is not None:
            meta["caches"]["deep"] = {
                "file": "deep.npy",
                "sha256": _save_array(directory / "deep.npy", deep.data),
                "channel_names": list(deep.channel_names),
                "pca_ordered": deep.pca_ordered,
                "cache_key": project.deep_cache_key,
            }

        if project.model is not None:
            bundle = project.model
            save_model(directory / "model.war", bundle.classifier)
            meta["model"] = {
                "file": "model.war",
                "class_ids": list(bundle.class_ids),
                "use_deep": bundle.use_deep,
                "j": bundle.j,
                "feature_key": bundle.feature_key,
            }
        else:
            meta["model"] = None

        (directory / "project.json").write_text(
            json.dumps(meta, indent=2, sort_keys=True))
        self._index["projects"][project_id] = project_id
        self._write_index()

    # -- load ------------------------------------------------------------------

    def load_project(self, project_id: str) -> tuple[Project, dict]:
        """Rebuild a project; returns it plus the `extra` dict given at save."""
        directory = self._dir(project_id)
        meta_path = directory / "project.json"
        meta = json.loads(meta_path.read_text())
        meta, migrated = _migrate(meta, str(meta_path))
        if migrated:
            meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True))

        image = np.load(directory / meta["image"]["file"], allow_pickle=False)
        config = FeatureSetConfig.from_dict(meta["feature_config"])
        project = Project(image, feature_config=config,
                          class_count=meta["class_count"],
                          class_names=meta["class_names"])
        labels = np.load(directory / meta["labels"]["file"], allow_pickle=False)
        project.labels = SparseLabelMap(grid=labels,
                                        class_count=meta["class_count"],
                                        class_names=tuple(meta["class_names"]))
        project.history = list(meta.get("history", []))

        caches = meta.get("caches", {})
        if "classical" in caches:
            entry = caches["classical"]
            data = _load_verified(directory / entry["file"], entry["sha256"],
                                  "classical")
            if data is not None:
                project.set_classical_stack(
                    FeatureStack(data, tuple(entry["channel_names"])))
        if "deep" in caches:
            entry = caches["deep"]
            data = _load_verified(directory / entry["file"], entry["sha256"],
                                  "deep")
            if data is not None:
                project.set_deep_stack(
                    FeatureStack(data, tuple(entry["channel_names"]),
                                 pca_ordered=entry.get("pca_ordered", True)),
                    entry["cache_key"])

        if meta.get("model"):
            entry = meta["model"]
            project.model = TrainedModel(
                classifier=load_model(directory / entry["file"]),
                class_ids=tuple(entry["class_ids"]),
                use_deep=entry["use_deep"],
                j=entry["j"],
                feature_key=entry["feature_key"],
            )
        return project, dict(meta.get("extra", {}))

    def delete_project(self, project_id: str):
        directory = self._dir(project_id)
        for child in sorted(directory.glob("*")):
            child.unlink()
        directory.rmdir()
        del self._index["projects"][project_id]
        self._write_index()
