"""
Content-addressed artifact store.

Layout under the store root:

    objects/<kind>/<digest>/...   immutable artifact contents
    refs/<name>.json              manifest pointing at an object

Every manifest records the recipe that produced the artifact (config slice,
seeds, upstream fingerprints) and a sha256 per file. An artifact whose
recipe hash matches is reused instead of rebuilt; objects are never
overwritten.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np
import torch

from advfilter.attack import AttackDataset
from advfilter.errors import IntegrityError, MissingArtifactError

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "model.pt"
METRICS_FILE = "metrics.csv"
CLEAN_SHARD = "clean.npz"


def recipe_hash(recipe: dict[str, Any]) -> str:
    """Stable hash of a JSON-serializable recipe."""
    blob = json.dumps(recipe, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(path: Path, data: dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True, default=str))
    tmp.replace(path)


@dataclass
class Manifest:
    """What an artifact is, where it lives and how it was made."""
    name: str
    kind: str
    path: str
    recipe_hash: str
    recipe: dict[str, Any]
    fingerprint: str = ""
    files: dict[str, str] = field(default_factory=dict)
    upstream: dict[str, str] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)
    created: str = ""

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Manifest:
        return cls(
            name=data["name"],
            kind=data["kind"],
            path=data["path"],
            recipe_hash=data["recipe_hash"],
            recipe=data.get("recipe", {}),
            fingerprint=data.get("fingerprint", ""),
            files=data.get("files", {}),
            upstream=data.get("upstream", {}),
            metadata=data.get("metadata", {}),
            created=data.get("created", ""),
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


class ArtifactStore:
    """Checkpoints, attack datasets and their manifests under one root directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _ref_path(self, name: str) -> Path:
        return self.root / "refs" / f"{name}.json"

    def object_dir(self, manifest: Manifest) -> Path:
        return self.root / manifest.path

    def exists(self, name: str) -> bool:
        return self._ref_path(name).exists()

    def manifest(self, name: str) -> Manifest:
        path = self._ref_path(name)
        if not path.exists():
            raise MissingArtifactError(f"Artifact {name!r} not found in {self.root}")
        return Manifest.from_dict(json.loads(path.read_text()))

    def lookup(self, name: str, recipe: dict[str, Any]) -> Manifest | None:
        """The stored manifest if it was built from exactly this recipe and is intact."""
        if not self.exists(name):
            logger.debug(f"Store miss: {name}")
            return None
        manifest = self.manifest(name)
        if manifest.recipe_hash != recipe_hash(recipe):
            logger.info(f"{name}: recipe changed, rebuilding")
            return None
        try:
            self.verify(manifest)
        except IntegrityError:
            logger.error(f"{name}: stored artifact is corrupted; "
                         f"delete {self._ref_path(name)} to rebuild it")
            raise
        except MissingArtifactError as e:
            logger.warning(f"{name}: stored artifact unusable ({e}), rebuilding")
            return None
        logger.info(f"{name}: up to date ({manifest.recipe_hash[:12]})")
        return manifest

    def verify(self, manifest: Manifest) -> None:
        """Check every file against its recorded sha256."""
        base = self.object_dir(manifest)
        for rel, expected in sorted(manifest.files.items()):
            path = base / rel
            if not path.exists():
                raise MissingArtifactError(f"{manifest.name}: file {rel} is missing")
            if file_sha256(path) != expected:
                raise IntegrityError(f"{manifest.name}: checksum mismatch in {rel}", artifact=rel)

    @staticmethod
    def _intact(base: Path, files: dict[str, str]) -> bool:
        return all(
            (base / rel).exists() and file_sha256(base / rel) == digest for rel, digest in files.items()
        )

    def _commit(self, manifest: Manifest, staging: Path) -> Manifest:
        """Move a staged directory into objects/ (unless identical content exists) and write the ref."""
        target = self.root / manifest.path
        if target.exists() and self._intact(target, manifest.files):
            logger.debug(f"{manifest.name}: object {manifest.path} already present")
            shutil.rmtree(staging)
        else:
            if target.exists():
                logger.warning(f"{manifest.name}: replacing damaged object {manifest.path}")
                shutil.rmtree(target)
            target.parent.mkdir(parents=True, exist_ok=True)
            staging.replace(target)
        manifest.created = datetime.now(timezone.utc).isoformat()
        _write_json(self._ref_path(manifest.name), manifest.to_dict())
        logger.info(f"Stored {manifest.kind} {manifest.name} -> {manifest.path}")
        return manifest

    def _staging(self, kind: str) -> Path:
        parent = self.root / "staging"
        parent.mkdir(parents=True, exist_ok=True)
        return Path(tempfile.mkdtemp(prefix=f"{kind}-", dir=parent))

    # -- checkpoints ---------------------------------------------------------

    def put_checkpoint(
        self,
        name: str,
        payload: dict[str, Any],
        recipe: dict[str, Any],
        upstream: dict[str, str] | None = None,
        metrics: Any | None = None,
        metadata: dict[str, Any] | None = None,
    ) -> Manifest:
        """Persist a checkpoint payload (and optionally its TrainReport metrics log)."""
        staging = self._staging("checkpoint")
        torch.save(payload, staging / CHECKPOINT_FILE)
        if metrics is not None:
            metrics.write_metrics(staging / METRICS_FILE)
        files = {p.name: file_sha256(p) for p in sorted(staging.iterdir())}
        fingerprint = payload["fingerprint"]
        digest = hashlib.sha256((fingerprint + files[CHECKPOINT_FILE]).encode()).hexdigest()[:16]
        manifest = Manifest(
            name=name,
            kind="checkpoint",
            path=f"objects/checkpoints/{digest}",
            recipe_hash=recipe_hash(recipe),
            recipe=recipe,
            fingerprint=fingerprint,
            files=files,
            upstream=upstream or {},
            metadata=metadata or {},
        )
        return self._commit(manifest, staging)

    def load_checkpoint(self, name: str) -> dict[str, Any]:
        manifest = self.manifest(name)
        self.verify(manifest)
        payload = torch.load(self.object_dir(manifest) / CHECKPOINT_FILE, map_location="cpu",
                             weights_only=False)
        if payload.get("fingerprint") != manifest.fingerprint:
            raise IntegrityError(f"{name}: checkpoint fingerprint differs from its manifest", artifact=name)
        return payload

    # -- attack datasets -----------------------------------------------------

    def put_attack_dataset(
        self,
        name: str,
        dataset: AttackDataset,
        recipe: dict[str, Any],
        threat_fingerprint: str,
        upstream: dict[str, str] | None = None,
    ) -> Manifest:
        """Persist clean images and one float32 shard per strength."""
        staging = self._staging("attack")
        np.savez(staging / CLEAN_SHARD, clean=dataset.clean.numpy().astype(np.float32),
                 labels=dataset.labels.numpy().astype(np.int64))
        shards = []
        for s_idx, (eps, stack) in enumerate(zip(dataset.epsilons, dataset.adversarial)):
            shard = f"eps_{s_idx:02d}.npz"
            np.savez(staging / shard, adversarial=stack.numpy().astype(np.float32),
                     epsilon=np.float64(eps))
            shards.append({"file": shard, "epsilon": eps})
        files = {p.name: file_sha256(p) for p in sorted(staging.iterdir())}
        digest = recipe_hash({"recipe": recipe, "files": files})[:16]
        manifest = Manifest(
            name=name,
            kind="attack_dataset",
            path=f"objects/attacks/{digest}",
            recipe_hash=recipe_hash(recipe),
            recipe=recipe,
            fingerprint=digest,
            files=files,
            upstream={"threat": threat_fingerprint, **(upstream or {})},
            metadata={
                "threat_fingerprint": threat_fingerprint,
                "iterations": dataset.iterations,
                "epsilons": list(dataset.epsilons),
                "seed": dataset.seed,
                "num_images": dataset.num_images,
                "num_pairs": len(dataset),
                "shards": shards,
            },
        )
        return self._commit(manifest, staging)

    def load_attack_dataset(self, name: str) -> AttackDataset:
        """Load and checksum-verify an attack dataset."""
        manifest = self.manifest(name)
        self.verify(manifest)
        base = self.object_dir(manifest)
        with np.load(base / CLEAN_SHARD) as data:
            clean = torch.from_numpy(data["clean"])
            labels = torch.from_numpy(data["labels"])
        epsilons, stacks = [], []
        for shard in manifest.metadata["shards"]:
            with np.load(base / shard["file"]) as data:
                stacks.append(torch.from_numpy(data["adversarial"]))
            epsilons.append(float(shard["epsilon"]))
        return AttackDataset(
            clean, labels, epsilons, stacks,
            iterations=int(manifest.metadata["iterations"]),
            seed=int(manifest.metadata["seed"]),
        )

    # -- generic documents ---------------------------------------------------

    def put_json(self, name: str, data: dict[str, Any], recipe: dict[str, Any]) -> Manifest:
        """Store a JSON document (sweep results, training reports) as an artifact."""
        staging = self._staging("document")
        (staging / "data.json").write_text(json.dumps(data, indent=2, sort_keys=True, default=str))
        files = {"data.json": file_sha256(staging / "data.json")}
        manifest = Manifest(
            name=name,
            kind="document",
            path=f"objects/documents/{files['data.json'][:16]}",
            recipe_hash=recipe_hash(recipe),
            recipe=recipe,
            fingerprint=files["data.json"],
            files=files,
        )
        return self._commit(manifest, staging)

    def load_json(self, name: str) -> dict[str, Any]:
        manifest = self.manifest(name)
        self.verify(manifest)
        return json.loads((self.object_dir(manifest) / "data.json").read_text())
