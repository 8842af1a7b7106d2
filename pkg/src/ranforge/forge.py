"""Reproducible image builds and the content-addressed local registry.

The build is simulated: clone the tagged source tree, apply patches in order,
"compile" and package a deterministic manifest payload. The image digest is

    sha256( commit_id + "\\n" + patchset.combined_hash + "\\n" + profile.canonical() )

so it depends only on the three build inputs.

Registry layout::

    <root>/blobs/<hex>             payload bytes of image sha256:<hex>
    <root>/tags/<image>/<tag>      JSON index entry; "digest" names the blob

``<image>`` and ``<tag>`` are percent-encoded so each is a single path segment.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional
from urllib.parse import quote, unquote

import whatthepatch
from whatthepatch.exceptions import WhatThePatchException

from .clock import SystemClock, isoformat
from .errors import (
    BuildFailed,
    DigestMismatch,
    ImageNotFound,
    PatchConflict,
    RegistryUnreachable,
    TagConflict,
)
from .watch import ReleaseTag, TagSource

EMPTY_PATCHSET_HASH = "0" * 64
SUPPORTED_ARCHES = frozenset({"x86_64", "aarch64"})
PAYLOAD_FORMAT = "ranforge-image/1"


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode()
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class Patch:
    path: str
    sha256: str
    body: str

    @classmethod
    def from_body(cls, path: str, body: str) -> "Patch":
        return cls(path, sha256_hex(body), body)


@dataclass(frozen=True)
class PatchSet:
    patches: tuple[Patch, ...] = ()

    @property
    def combined_hash(self) -> str:
        if not self.patches:
            return EMPTY_PATCHSET_HASH
        return sha256_hex("".join(p.sha256 for p in self.patches))

    def __len__(self) -> int:
        return len(self.patches)


def load_patchset(refs: Iterable, base_dir: str | os.PathLike = ".") -> PatchSet:
    """Read patch files named by ``refs`` (objects with ``path`` and ``sha256``)."""
    patches = []
    for ref in refs:
        path = Path(base_dir) / ref.path
        try:
            body = path.read_text()
        except OSError as exc:
            raise PatchConflict(ref.path, f"cannot read patch file: {exc}") from exc
        actual = sha256_hex(body)
        if actual != ref.sha256:
            raise PatchConflict(ref.path, f"content hash {actual} does not match pinned {ref.sha256}")
        patches.append(Patch(ref.path, actual, body))
    return PatchSet(tuple(patches))


@dataclass(frozen=True)
class BuilderProfile:
    target_arch: str = "x86_64"
    stage_count: int = 2
    build_flags: tuple[str, ...] = ("--gNB", "-w", "USRP", "--ninja")

    def __post_init__(self):
        if self.stage_count < 2:
            raise ValueError("a multi-stage build needs at least 2 stages")

    def to_dict(self) -> dict:
        return {"target_arch": self.target_arch, "stage_count": self.stage_count, "build_flags": list(self.build_flags)}

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "BuilderProfile":
        return cls(d["target_arch"], int(d["stage_count"]), tuple(d["build_flags"]))


def compute_digest(commit_id: str, combined_hash: str, profile: BuilderProfile) -> str:
    return "sha256:" + sha256_hex(f"{commit_id}\n{combined_hash}\n{profile.canonical()}")


def derived_tag_name(tag_name: str, patches: Optional[PatchSet] = None) -> str:
    if not patches:
        return tag_name
    return f"{tag_name}+p{patches.combined_hash[:8]}"


@dataclass
class ImageArtifact:
    image_name: str
    tag_name: str
    digest: str
    size_bytes: int
    built_at: str
    build_log: str
    source_tag: str
    commit_id: str
    patchset_hash: str
    profile: BuilderProfile
    node_id: Optional[str] = None
    payload: bytes = field(default=b"", repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "image_name": self.image_name,
            "tag_name": self.tag_name,
            "digest": self.digest,
            "size_bytes": self.size_bytes,
            "built_at": self.built_at,
            "build_log": self.build_log,
            "source_tag": self.source_tag,
            "commit_id": self.commit_id,
            "patchset_hash": self.patchset_hash,
            "profile": self.profile.to_dict(),
            "node_id": self.node_id,
        }

    @classmethod
    def from_dict(cls, d: dict, payload: bytes = b"") -> "ImageArtifact":
        return cls(
            image_name=d["image_name"],
            tag_name=d["tag_name"],
            digest=d["digest"],
            size_bytes=int(d["size_bytes"]),
            built_at=d["built_at"],
            build_log=d["build_log"],
            source_tag=d["source_tag"],
            commit_id=d["commit_id"],
            patchset_hash=d["patchset_hash"],
            profile=BuilderProfile.from_dict(d["profile"]),
            node_id=d.get("node_id"),
            payload=payload,
        )


def _payload_digest(payload: bytes) -> str:
    doc = json.loads(payload)
    return compute_digest(doc["commit_id"], doc["patchset"], BuilderProfile.from_dict(doc["profile"]))


def _apply_patch(tree: dict[str, Optional[str]], patch: Patch, source: TagSource, tag: str) -> list[str]:
    try:
        diffs = [d for d in whatthepatch.parse_patch(patch.body) if d.header is not None]
    except WhatThePatchException as exc:
        raise PatchConflict(patch.path, f"unparseable patch: {exc}") from exc
    if not diffs:
        raise PatchConflict(patch.path, "patch contains no file diffs")
    touched = []
    for diff in diffs:
        new_path = diff.header.new_path
        old_path = diff.header.old_path
        target = new_path if new_path not in (None, "/dev/null") else old_path
        if target not in tree:
            tree[target] = source.read_file(tag, old_path) if old_path not in (None, "/dev/null") else None
        original = tree[target]
        if original is None and old_path not in (None, "/dev/null"):
            raise PatchConflict(patch.path, f"{target} does not exist in the source tree")
        try:
            lines = whatthepatch.apply_diff(diff, (original or "").splitlines())
        except WhatThePatchException as exc:
            raise PatchConflict(patch.path, str(exc)) from exc
        tree[target] = None if new_path == "/dev/null" else "\n".join(lines) + ("\n" if lines else "")
        touched.append(target)
    return touched


def build_image(
    tag: ReleaseTag,
    patches: PatchSet,
    profile: BuilderProfile,
    *,
    image_name: str,
    source: TagSource,
    registry: "Registry",
    node_id: Optional[str] = None,
    clock=None,
) -> ImageArtifact:
    """Run the simulated multi-stage build and push the result to ``registry``."""
    clock = clock or SystemClock()
    n = profile.stage_count
    log: list[str] = []
    where = f"node {node_id}" if node_id else "local builder"
    log.append(f"[1/{n}] clone {tag.name} (commit {tag.commit_id}) on {where}, arch {profile.target_arch}")
    if profile.target_arch not in SUPPORTED_ARCHES:
        log.append(f"[1/{n}] error: no toolchain for {profile.target_arch}")
        raise BuildFailed(f"unsupported target arch {profile.target_arch}", "\n".join(log))

    tree: dict[str, Optional[str]] = {}
    for p in patches.patches:
        touched = _apply_patch(tree, p, source, tag.name)
        log.append(f"[1/{n}] apply {p.path} (sha256 {p.sha256[:12]}): {', '.join(touched)}")
    log.append(f"[1/{n}] compile with flags {' '.join(profile.build_flags) or '(none)'}")
    for k in range(2, n):
        log.append(f"[{k}/{n}] intermediate stage {k}")

    payload = json.dumps(
        {
            "format": PAYLOAD_FORMAT,
            "commit_id": tag.commit_id,
            "patchset": patches.combined_hash,
            "profile": profile.to_dict(),
            "patched_files": {path: (sha256_hex(text) if text is not None else None) for path, text in sorted(tree.items())},
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    digest = compute_digest(tag.commit_id, patches.combined_hash, profile)
    log.append(f"[{n}/{n}] package {len(payload)} bytes as {digest}")
    artifact = ImageArtifact(
        image_name=image_name,
        tag_name=derived_tag_name(tag.name, patches),
        digest=digest,
        size_bytes=len(payload),
        built_at=isoformat(clock.now()),
        build_log="\n".join(log),
        source_tag=tag.name,
        commit_id=tag.commit_id,
        patchset_hash=patches.combined_hash,
        profile=profile,
        node_id=node_id,
        payload=payload,
    )
    registry.push(artifact)
    return artifact


class Registry:
    """Append-only image registry: content-addressed blobs plus a tag index."""

    def __init__(self, root: str | os.PathLike, create: bool = True):
        self.root = Path(root)
        self._lock = threading.Lock()
        if create:
            (self.root / "blobs").mkdir(parents=True, exist_ok=True)
            (self.root / "tags").mkdir(parents=True, exist_ok=True)

    def _check(self) -> None:
        if not (self.root / "blobs").is_dir() or not (self.root / "tags").is_dir():
            raise RegistryUnreachable(f"registry at {self.root} is not available")

    def _blob_path(self, digest: str) -> Path:
        return self.root / "blobs" / digest.removeprefix("sha256:")

    def _tag_path(self, image_name: str, tag_name: str) -> Path:
        return self.root / "tags" / quote(image_name, safe="") / quote(tag_name, safe="+")

    def _write_new(self, path: Path, data: bytes) -> bool:
        """Create ``path`` with ``data`` unless it exists; False if it already did."""
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(data)
                f.flush()
                os.fsync(f.fileno())
            try:
                os.link(tmp, path)
            except FileExistsError:
                return False
            return True
        finally:
            os.unlink(tmp)

    def push(self, artifact: ImageArtifact) -> dict:
        self._check()
        recomputed = compute_digest(artifact.commit_id, artifact.patchset_hash, artifact.profile)
        if recomputed != artifact.digest or _payload_digest(artifact.payload) != artifact.digest:
            raise DigestMismatch(f"artifact {artifact.image_name}:{artifact.tag_name} digest does not match its inputs")
        entry = dict(artifact.to_dict(), blob_sha256=sha256_hex(artifact.payload))
        with self._lock:
            existing = self._read_entry(artifact.image_name, artifact.tag_name)
            if existing is not None:
                if existing["digest"] != artifact.digest:
                    raise TagConflict(
                        f"{artifact.image_name}:{artifact.tag_name} already points at {existing['digest']}"
                    )
                return {"image_name": artifact.image_name, "tag_name": artifact.tag_name,
                        "digest": artifact.digest, "created": False}
            self._write_new(self._blob_path(artifact.digest), artifact.payload)
            created = self._write_new(
                self._tag_path(artifact.image_name, artifact.tag_name),
                json.dumps(entry, sort_keys=True, indent=1).encode(),
            )
            if not created:
                # lost a race with another process; same append-only rule applies
                existing = self._read_entry(artifact.image_name, artifact.tag_name)
                if existing["digest"] != artifact.digest:
                    raise TagConflict(f"{artifact.image_name}:{artifact.tag_name} already exists")
        return {"image_name": artifact.image_name, "tag_name": artifact.tag_name,
                "digest": artifact.digest, "created": created}

    def _read_entry(self, image_name: str, tag_name: str) -> Optional[dict]:
        path = self._tag_path(image_name, tag_name)
        if not path.exists():
            return None
        return json.loads(path.read_text())

    def pull(self, image_name: str, tag_name: str) -> ImageArtifact:
        self._check()
        entry = self._read_entry(image_name, tag_name)
        if entry is None:
            raise ImageNotFound(f"{image_name}:{tag_name} not in registry")
        blob = self._blob_path(entry["digest"])
        try:
            payload = blob.read_bytes()
        except OSError as exc:
            raise DigestMismatch(f"blob for {entry['digest']} missing: {exc}") from exc
        if sha256_hex(payload) != entry["blob_sha256"]:
            raise DigestMismatch(f"blob for {image_name}:{tag_name} was modified")
        try:
            if _payload_digest(payload) != entry["digest"]:
                raise DigestMismatch(f"payload of {image_name}:{tag_name} does not hash to {entry['digest']}")
        except (ValueError, KeyError) as exc:
            raise DigestMismatch(f"payload of {image_name}:{tag_name} is corrupt: {exc}") from exc
        return ImageArtifact.from_dict(entry, payload)

    def tags(self, image_name: str) -> list[str]:
        self._check()
        d = self.root / "tags" / quote(image_name, safe="")
        if not d.is_dir():
            return []
        return sorted(unquote(p.name) for p in d.iterdir() if not p.name.startswith("."))

    def images(self) -> list[str]:
        self._check()
        return sorted(unquote(p.name) for p in (self.root / "tags").iterdir() if p.is_dir())

    def ls(self, image_name: Optional[str] = None) -> list[dict]:
        out = []
        for image in [image_name] if image_name else self.images():
            for tag in self.tags(image):
                e = self._read_entry(image, tag)
                out.append({"image_name": image, "tag_name": tag, "digest": e["digest"],
                            "size_bytes": e["size_bytes"], "built_at": e["built_at"]})
        return out

    def latest(self, image_name: str) -> Optional[ImageArtifact]:
        """Most recently built artifact of ``image_name`` (None if never pushed)."""
        entries = self.ls(image_name)
        if not entries:
            return None
        newest = max(entries, key=lambda e: (e["built_at"], e["tag_name"]))
        return self.pull(image_name, newest["tag_name"])
