"""Release-tag polling and the build/no-build decision.

Two repository kinds share one interface:

* ``LOCAL_DIR`` -- a directory holding ``tags/<name>.json`` manifests, each
  ``{"commit_id": "...", "created_at": "...", "files": {"path": "text"}}``
  (``files`` is the optional source tree used by patching).
* ``REMOTE_GIT`` -- any URL ``git clone`` understands; tags are read from a
  bare mirror kept in a cache directory.
"""

from __future__ import annotations

import hashlib
import json
import os
import subprocess
import tempfile
from dataclasses import dataclass
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Protocol
from urllib.parse import urlparse

from .clock import isoformat, parse_ts
from .errors import NoTags, RepoUnreachable

if TYPE_CHECKING:
    from .forge import PatchSet, Registry


class RepoKind(str, Enum):
    LOCAL_DIR = "LOCAL_DIR"
    REMOTE_GIT = "REMOTE_GIT"


@dataclass(frozen=True)
class RepoRef:
    url: str
    kind: RepoKind
    credentials: Optional[str] = None

    def __post_init__(self):
        if not self.url:
            raise ValueError("repository url must be non-empty")

    @classmethod
    def from_url(cls, url: str, credentials: Optional[str] = None) -> "RepoRef":
        parsed = urlparse(url)
        if parsed.scheme in ("", "file"):
            path = Path(parsed.path if parsed.scheme == "file" else url)
            if (path / "tags").is_dir() and not (path / "HEAD").exists() and not (path / ".git").exists():
                return cls(str(path), RepoKind.LOCAL_DIR, credentials)
        return cls(url, RepoKind.REMOTE_GIT, credentials)


@dataclass(frozen=True)
class ReleaseTag:
    name: str
    commit_id: str
    created_at: datetime

    def __post_init__(self):
        if not self.commit_id:
            raise ValueError(f"tag {self.name}: empty commit id")

    def to_dict(self) -> dict:
        return {"name": self.name, "commit_id": self.commit_id, "created_at": isoformat(self.created_at)}

    @classmethod
    def from_dict(cls, d: dict) -> "ReleaseTag":
        return cls(d["name"], d["commit_id"], parse_ts(d["created_at"]))


class BuildVerdict(str, Enum):
    BUILD = "BUILD"
    NO_BUILD = "NO_BUILD"


@dataclass(frozen=True)
class BuildDecision:
    verdict: BuildVerdict
    tag: Optional[ReleaseTag]
    reason: str
    image_tag: Optional[str] = None

    def __post_init__(self):
        if (self.verdict is BuildVerdict.BUILD) != (self.tag is not None):
            raise ValueError("BUILD decisions carry a tag, NO_BUILD decisions do not")

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict.value,
            "tag": self.tag.to_dict() if self.tag else None,
            "reason": self.reason,
            "image_tag": self.image_tag,
        }


class TagSource(Protocol):
    def tags(self) -> list[ReleaseTag]: ...

    def read_file(self, tag: str, path: str) -> Optional[str]: ...


class LocalDirSource:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def _manifest(self, path: Path) -> dict:
        try:
            return json.loads(path.read_text())
        except (OSError, ValueError) as exc:
            raise RepoUnreachable(f"unreadable tag manifest {path}: {exc}") from exc

    def tags(self) -> list[ReleaseTag]:
        if not self.root.is_dir():
            raise RepoUnreachable(f"repository directory {self.root} does not exist")
        tag_dir = self.root / "tags"
        out = []
        for path in sorted(tag_dir.glob("*.json")) if tag_dir.is_dir() else []:
            m = self._manifest(path)
            try:
                out.append(ReleaseTag(path.stem, str(m["commit_id"]), parse_ts(m["created_at"])))
            except (KeyError, ValueError) as exc:
                raise RepoUnreachable(f"malformed tag manifest {path}: {exc}") from exc
        return out

    def read_file(self, tag: str, path: str) -> Optional[str]:
        manifest = self.root / "tags" / f"{tag}.json"
        if not manifest.exists():
            raise RepoUnreachable(f"tag {tag} not found in {self.root}")
        return self._manifest(manifest).get("files", {}).get(path)


class GitSource:
    """Tags of a git remote, read from a bare mirror in ``cache_dir``."""

    def __init__(self, url: str, credentials: Optional[str] = None, cache_dir: Optional[str] = None):
        self.url = url
        self.credentials = credentials
        base = Path(cache_dir or os.environ.get("RANFORGE_GIT_CACHE") or Path(tempfile.gettempdir()) / "ranforge-git")
        self.mirror = base / hashlib.sha256(url.encode()).hexdigest()[:16]
        self._synced = False

    def _git(self, *args: str, cwd: Optional[Path] = None) -> str:
        cmd = ["git"]
        if self.credentials:
            cmd += ["-c", f"http.extraHeader=Authorization: Bearer {self.credentials}"]
        cmd += list(args)
        env = dict(os.environ, GIT_TERMINAL_PROMPT="0")
        try:
            res = subprocess.run(cmd, cwd=cwd, capture_output=True, text=True, timeout=300, env=env)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise RepoUnreachable(f"git {args[0]} failed for {self.url}: {exc}") from exc
        if res.returncode != 0:
            raise RepoUnreachable(f"git {args[0]} failed for {self.url}: {res.stderr.strip()}")
        return res.stdout

    def sync(self) -> None:
        if self._synced:
            return
        if (self.mirror / "HEAD").exists():
            self._git("fetch", "--quiet", "--prune", "--force", "origin", "+refs/tags/*:refs/tags/*", cwd=self.mirror)
        else:
            self.mirror.parent.mkdir(parents=True, exist_ok=True)
            self._git("clone", "--quiet", "--bare", self.url, str(self.mirror))
        self._synced = True

    def tags(self) -> list[ReleaseTag]:
        self.sync()
        fmt = "%(refname:strip=2)%00%(objectname)%00%(*objectname)%00%(creatordate:iso-strict)"
        out = self._git("for-each-ref", f"--format={fmt}", "refs/tags", cwd=self.mirror)
        tags = []
        for line in out.splitlines():
            if not line:
                continue
            name, obj, peeled, created = line.split("\x00")
            # annotated tags point at a tag object; the peeled id is the commit
            tags.append(ReleaseTag(name, peeled or obj, parse_ts(created)))
        return tags

    def read_file(self, tag: str, path: str) -> Optional[str]:
        self.sync()
        try:
            return self._git("show", f"refs/tags/{tag}:{path}", cwd=self.mirror)
        except RepoUnreachable:
            return None


def open_repo(repo: RepoRef, cache_dir: Optional[str] = None) -> TagSource:
    if repo.kind is RepoKind.LOCAL_DIR:
        return LocalDirSource(urlparse(repo.url).path if repo.url.startswith("file:") else repo.url)
    return GitSource(repo.url, repo.credentials, cache_dir)


def pick_latest(tags: list[ReleaseTag]) -> ReleaseTag:
    """Newest creation time wins; equal times fall back to the greatest name."""
    if not tags:
        raise NoTags("repository has no tags")
    return max(tags, key=lambda t: (t.created_at, t.name))


def latest_tag(repo: RepoRef | TagSource) -> ReleaseTag:
    source = open_repo(repo) if isinstance(repo, RepoRef) else repo
    return pick_latest(source.tags())


def registry_tags(registry: "Registry", image_name: str) -> list[str]:
    return registry.tags(image_name)


def decide_build(
    repo: RepoRef | TagSource,
    registry: "Registry",
    image_name: str,
    patches: Optional["PatchSet"] = None,
) -> BuildDecision:
    """BUILD iff the (patch-derived) name of the latest repo tag is not in the registry."""
    from .forge import derived_tag_name

    tag = latest_tag(repo)
    wanted = derived_tag_name(tag.name, patches)
    if wanted in registry_tags(registry, image_name):
        return BuildDecision(BuildVerdict.NO_BUILD, None, f"{image_name}:{wanted} already in registry", wanted)
    return BuildDecision(BuildVerdict.BUILD, tag, f"{image_name}:{wanted} not in registry", wanted)
