import hashlib
import json
import threading
from dataclasses import replace

import pytest
from helpers import write_tag
from hypothesis import given, settings
from hypothesis import strategies as st

from ranforge.clock import VirtualClock, parse_ts
from ranforge.errors import BuildFailed, DigestMismatch, ImageNotFound, PatchConflict, RegistryUnreachable, TagConflict
from ranforge.forge import (
    EMPTY_PATCHSET_HASH, BuilderProfile, Patch, PatchSet, Registry, build_image, compute_digest, derived_tag_name,
    load_patchset,
)
from ranforge.intake import PatchRef
from ranforge.watch import LocalDirSource, ReleaseTag

TAG = ReleaseTag("v2.1.0", "a" * 40, parse_ts("2024-06-01T00:00:00Z"))

CONF = "[gNB]\nband = 78\nnrb = 106\nfreq = 3.5e9\n"
PATCH = """--- a/conf/gnb.conf
+++ b/conf/gnb.conf
@@ -1,4 +1,4 @@
 [gNB]
-band = 78
-nrb = 106
+band = 48
+nrb = 162
 freq = 3.5e9
"""


def oracle_digest(commit: str, patch_bodies: list[str], profile: dict) -> str:
    # independent recomputation from the raw build inputs
    hashes = [hashlib.sha256(b.encode()).hexdigest() for b in patch_bodies]
    combined = hashlib.sha256("".join(hashes).encode()).hexdigest() if hashes else "0" * 64
    canon = json.dumps(profile, sort_keys=True, separators=(",", ":"))
    return "sha256:" + hashlib.sha256(f"{commit}\n{combined}\n{canon}".encode()).hexdigest()


@pytest.fixture
def src(tmp_path):
    root = tmp_path / "repo"
    write_tag(root, "v2.1.0", "a" * 40, "2024-06-01T00:00:00Z", files={"conf/gnb.conf": CONF})
    return LocalDirSource(root)


@pytest.fixture
def reg(tmp_path):
    return Registry(tmp_path / "reg")


def build(src, reg, patches=PatchSet(), profile=BuilderProfile(), **kw):
    return build_image(TAG, patches, profile, image_name="oai-gnb", source=src, registry=reg,
                       clock=VirtualClock("2024-07-01T00:00:00Z"), **kw)


def test_digest_matches_independent_oracle(src, reg):
    art = build(src, reg, PatchSet((Patch.from_body("p1.patch", PATCH),)))
    prof = {"target_arch": "x86_64", "stage_count": 2, "build_flags": ["--gNB", "-w", "USRP", "--ninja"]}
    assert art.digest == oracle_digest("a" * 40, [PATCH], prof)
    assert build(src, Registry(reg.root.parent / "r2")).digest == oracle_digest("a" * 40, [], prof)


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet="0123456789abcdef", min_size=40, max_size=40),
       st.lists(st.text(min_size=1, max_size=40), max_size=4),
       st.sampled_from(["x86_64", "aarch64"]), st.integers(2, 6),
       st.lists(st.sampled_from(["--gNB", "-w", "USRP", "--ninja", "-c"]), max_size=4))
def test_digest_function_is_pure(commit, bodies, arch, stages, flags):
    ps = PatchSet(tuple(Patch.from_body(f"{i}.patch", b) for i, b in enumerate(bodies)))
    prof = BuilderProfile(arch, stages, tuple(flags))
    d = compute_digest(commit, ps.combined_hash, prof)
    assert d == oracle_digest(commit, bodies, prof.to_dict())
    assert d == compute_digest(commit, ps.combined_hash, BuilderProfile.from_dict(json.loads(json.dumps(prof.to_dict()))))


def test_empty_patchset_and_tag_names():
    assert PatchSet().combined_hash == EMPTY_PATCHSET_HASH
    assert derived_tag_name("v2.1.0") == "v2.1.0"
    ps = PatchSet((Patch.from_body("a", "x"),))
    assert derived_tag_name("v2.1.0", ps) == f"v2.1.0+p{ps.combined_hash[:8]}"


def test_build_log_stages(src, reg):
    art = build(src, reg, profile=BuilderProfile(stage_count=4))
    lines = art.build_log.splitlines()
    assert lines[0].startswith("[1/4] clone v2.1.0")
    assert lines[-1].startswith("[4/4] package")
    assert any(ln.startswith("[3/4]") for ln in lines)


def test_unsupported_arch(src, reg):
    with pytest.raises(BuildFailed) as ei:
        build(src, reg, profile=BuilderProfile(target_arch="riscv64"))
    assert "riscv64" in ei.value.log
    assert reg.tags("oai-gnb") == []


def test_patch_applies_and_is_recorded(src, reg):
    art = build(src, reg, PatchSet((Patch.from_body("p1.patch", PATCH),)))
    payload = json.loads(art.payload)
    patched = CONF.replace("band = 78", "band = 48").replace("nrb = 106", "nrb = 162")
    assert payload["patched_files"] == {"conf/gnb.conf": hashlib.sha256(patched.encode()).hexdigest()}
    assert art.tag_name.startswith("v2.1.0+p")


def test_patch_conflict(src, reg):
    stale = PATCH.replace(" freq = 3.5e9", " freq = 2.6e9")
    with pytest.raises(PatchConflict) as ei:
        build(src, reg, PatchSet((Patch.from_body("stale.patch", stale),)))
    assert ei.value.patch == "stale.patch"
    with pytest.raises(PatchConflict):
        build(src, reg, PatchSet((Patch.from_body("junk.patch", "not a diff"),)))
    missing = PATCH.replace("conf/gnb.conf", "conf/absent.conf")
    with pytest.raises(PatchConflict):
        build(src, reg, PatchSet((Patch.from_body("m.patch", missing),)))


def test_load_patchset_pins_content(tmp_path):
    (tmp_path / "p.patch").write_text(PATCH)
    good = hashlib.sha256(PATCH.encode()).hexdigest()
    ps = load_patchset([PatchRef("p.patch", good)], tmp_path)
    assert ps.patches[0].body == PATCH
    with pytest.raises(PatchConflict):
        load_patchset([PatchRef("p.patch", "0" * 64)], tmp_path)
    with pytest.raises(PatchConflict):
        load_patchset([PatchRef("q.patch", good)], tmp_path)


def test_push_same_digest_is_noop(src, reg):
    art = build(src, reg)
    assert reg.push(art)["created"] is False
    assert reg.tags("oai-gnb") == ["v2.1.0"]
    pulled = reg.pull("oai-gnb", "v2.1.0")
    assert pulled == art and pulled.payload == art.payload


def test_push_other_digest_conflicts(src, reg):
    build(src, reg)
    other = build(src, Registry(reg.root.parent / "r2"), profile=BuilderProfile(target_arch="aarch64"))
    with pytest.raises(TagConflict):
        reg.push(other)


def test_forged_digest_rejected(src, reg):
    art = build(src, Registry(reg.root.parent / "r2"))
    with pytest.raises(DigestMismatch):
        reg.push(replace(art, digest="sha256:" + "1" * 64))
    with pytest.raises(DigestMismatch):
        reg.push(replace(art, commit_id="b" * 40))


def test_tampered_blob_detected(src, reg):
    art = build(src, reg)
    blob = reg.root / "blobs" / art.digest.removeprefix("sha256:")
    blob.write_bytes(blob.read_bytes().replace(b"x86_64", b"x86_65"))
    with pytest.raises(DigestMismatch):
        reg.pull("oai-gnb", "v2.1.0")


def test_missing_image_and_registry(tmp_path, reg):
    with pytest.raises(ImageNotFound):
        reg.pull("oai-gnb", "v9")
    assert reg.latest("oai-gnb") is None
    with pytest.raises(RegistryUnreachable):
        Registry(tmp_path / "nowhere", create=False).tags("oai-gnb")


def test_latest_and_ls(src, reg):
    build(src, reg)
    clock = VirtualClock("2024-07-02T00:00:00Z")
    ps = PatchSet((Patch.from_body("p1.patch", PATCH),))
    newer = build_image(TAG, ps, BuilderProfile(), image_name="oai-gnb", source=src, registry=reg, clock=clock)
    assert reg.latest("oai-gnb").tag_name == newer.tag_name
    assert [e["tag_name"] for e in reg.ls()] == sorted(["v2.1.0", newer.tag_name])
    assert reg.images() == ["oai-gnb"]


def test_concurrent_identical_pushes(src, reg):
    art = build(src, Registry(reg.root.parent / "r2"))
    results = []
    threads = [threading.Thread(target=lambda: results.append(reg.push(art))) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sum(r["created"] for r in results) == 1
    assert reg.pull("oai-gnb", "v2.1.0").digest == art.digest
