"""Local image store: unpack, snapshot, flattening export.

Unpacking squashes pulled layers into a plain writable directory owned by
the invoking user, applying whiteouts and dropping anything that needs
privilege (device nodes, setuid bits). Export walks a built root back into
exactly one reproducible tar layer whose ownership comes from the faked-
ownership database when present and is normalized to root:root otherwise,
so site IDs never leak into pushed images.

Store layout under the store root:

    imgs/<ref-encoded>/     unpacked root filesystems
    dl/<sha256:...>         blob cache, content-addressed
    meta/<ref-encoded>.json manifest digest + descriptors per image
    meta/<ref-encoded>.owners   per-image ownership journal
    locks/                  build/ref lock files
"""

from __future__ import annotations

import fcntl
import gzip
import hashlib
import io
import json
import logging
import os
import shutil
import stat as stat_mod
import tarfile
from contextlib import contextmanager
from dataclasses import dataclass

from . import ownerdb

log = logging.getLogger(__name__)

DEFAULT_REGISTRY_HOST = "registry-1.docker.io"
WHITEOUT_PREFIX = ".wh."
OPAQUE_MARKER = ".wh..wh..opq"
EXPORT_EPOCH = 0  # fixed timestamp: exports must be byte-reproducible

MT_MANIFEST = "application/vnd.oci.image.manifest.v1+json"
MT_CONFIG = "application/vnd.oci.image.config.v1+json"
MT_LAYER_GZIP = "application/vnd.oci.image.layer.v1.tar+gzip"


class ImageError(Exception):
    pass


class ArchiveCorruptError(ImageError):
    pass


class PathEscapeError(ImageError):
    pass


class WalkFailedError(ImageError):
    pass


class CopyFailedError(ImageError):
    pass


@dataclass(frozen=True)
class ImageRef:
    """[host/]repo[:tag]; tag defaults to latest."""

    host: str
    repository: str
    tag: str

    @classmethod
    def parse(cls, text):
        if not text or text.startswith("/") or " " in text:
            raise ImageError("bad image reference: %r" % text)
        host = DEFAULT_REGISTRY_HOST
        rest = text
        first, sep, remainder = text.partition("/")
        if sep and ("." in first or ":" in first or first == "localhost"):
            host, rest = first, remainder
        name, sep, tag = rest.rpartition(":")
        if sep and "/" not in tag:
            repo = name
        else:
            repo, tag = rest, "latest"
        if not repo or not tag:
            raise ImageError("bad image reference: %r" % text)
        return cls(host, repo, tag)

    @property
    def encoded(self):
        """Filesystem-safe single-path-component form."""
        return str(self).replace("/", "%").replace(":", "+")

    def __str__(self):
        if self.host == DEFAULT_REGISTRY_HOST:
            return "%s:%s" % (self.repository, self.tag)
        return "%s/%s:%s" % (self.host, self.repository, self.tag)


def digest_of(data):
    return "sha256:" + hashlib.sha256(data).hexdigest()


class Store:
    def __init__(self, root):
        self.root = os.path.abspath(root)
        for sub in ("imgs", "dl", "meta", "locks"):
            os.makedirs(os.path.join(self.root, sub), exist_ok=True)

    def image_root(self, ref):
        return os.path.join(self.root, "imgs", ref.encoded)

    def blob_path(self, digest):
        return os.path.join(self.root, "dl", digest)

    def meta_path(self, ref):
        return os.path.join(self.root, "meta", ref.encoded + ".json")

    def owners_path(self, ref):
        return os.path.join(self.root, "meta", ref.encoded + ".owners")

    def has_image(self, ref):
        return os.path.isdir(self.image_root(ref))

    def read_meta(self, ref):
        try:
            with open(self.meta_path(ref), encoding="utf-8") as fh:
                return json.load(fh)
        except FileNotFoundError:
            return None

    def write_meta(self, ref, meta):
        path = self.meta_path(ref)
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)
        os.replace(tmp, path)

    def list_images(self):
        """(ref string, manifest digest or '-') pairs, sorted by ref."""
        entries = []
        meta_dir = os.path.join(self.root, "meta")
        for name in sorted(os.listdir(meta_dir)):
            if not name.endswith(".json"):
                continue
            with open(os.path.join(meta_dir, name), encoding="utf-8") as fh:
                meta = json.load(fh)
            entries.append((meta["ref"], meta.get("manifest_digest", "-")))
        return sorted(entries)

    def fresh_image_root(self, ref):
        """Empty root for this ref, replacing any previous build."""
        path = self.image_root(ref)
        if os.path.exists(path):
            shutil.rmtree(path)
        os.makedirs(path)
        return path

    def save_blob(self, data):
        digest = digest_of(data)
        path = self.blob_path(digest)
        if not os.path.exists(path):
            tmp = path + ".tmp.%d" % os.getpid()
            with open(tmp, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        return digest

    @contextmanager
    def lock(self, name):
        path = os.path.join(self.root, "locks", name + ".lock")
        with open(path, "w") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)


def _check_inside(dest_real, target):
    parent = os.path.realpath(os.path.dirname(target))
    if parent != dest_real and not parent.startswith(dest_real + os.sep):
        raise PathEscapeError("entry escapes the unpack root: %s" % target)


def _clean_member_path(dest, dest_real, name):
    norm = os.path.normpath(name.lstrip("/"))
    if norm == "." or norm == "":
        return None
    if norm.startswith(".."):
        raise PathEscapeError("entry path escapes the unpack root: %r" % name)
    target = os.path.join(dest, norm)
    _check_inside(dest_real, target)
    return target


def _remove_existing(target):
    if os.path.islink(target) or os.path.isfile(target):
        os.unlink(target)
    elif os.path.isdir(target):
        shutil.rmtree(target)


def unpack(layer_paths, dest):
    """Apply layer archives in order into an empty directory.

    Whiteout entries delete what earlier layers placed; opaque markers clear
    a directory. Everything lands owned by the invoking user with setuid/
    setgid bits dropped; device-node entries are skipped with a warning
    because no unprivileged process can create them.
    """
    dest = os.path.abspath(dest)
    os.makedirs(dest, exist_ok=True)
    if os.listdir(dest):
        raise ImageError("unpack destination %s is not empty" % dest)
    dest_real = os.path.realpath(dest)
    dir_modes = {}
    for layer_path in layer_paths:
        try:
            with tarfile.open(layer_path, "r:*") as tar:
                for member in tar:
                    _apply_member(tar, member, dest, dest_real, dir_modes)
        except tarfile.TarError as exc:
            raise ArchiveCorruptError("%s: %s" % (layer_path, exc)) from exc
    # true directory modes go on last, bottom-up, so a read-only directory
    # cannot block extraction of its own children
    for path in sorted(dir_modes, key=len, reverse=True):
        if os.path.isdir(path) and not os.path.islink(path):
            os.chmod(path, dir_modes[path])


def _apply_member(tar, member, dest, dest_real, dir_modes):
    base = os.path.basename(member.name)
    if base == OPAQUE_MARKER:
        target_dir = _clean_member_path(dest, dest_real,
                                        os.path.dirname(member.name))
        if target_dir and os.path.isdir(target_dir):
            for entry in os.listdir(target_dir):
                _remove_existing(os.path.join(target_dir, entry))
        return
    if base.startswith(WHITEOUT_PREFIX):
        victim = os.path.join(os.path.dirname(member.name),
                              base[len(WHITEOUT_PREFIX):])
        target = _clean_member_path(dest, dest_real, victim)
        if target and os.path.lexists(target):
            _remove_existing(target)
        return
    target = _clean_member_path(dest, dest_real, member.name)
    if target is None:
        return
    mode = member.mode & 0o1777  # setuid/setgid dropped on extraction
    if member.isdir():
        if os.path.lexists(target) and not os.path.isdir(target):
            _remove_existing(target)
        os.makedirs(target, exist_ok=True)
        dir_modes[target] = mode
    elif member.isfile():
        os.makedirs(os.path.dirname(target), exist_ok=True)
        _remove_existing(target)
        src = tar.extractfile(member)
        with open(target, "wb") as out:
            shutil.copyfileobj(src, out)
        os.chmod(target, mode)
    elif member.issym():
        _remove_existing(target)
        os.symlink(member.linkname, target)
    elif member.islnk():
        link_source = _clean_member_path(dest, dest_real, member.linkname)
        if link_source is None or not os.path.exists(link_source):
            raise ArchiveCorruptError("hardlink to missing entry: %s -> %s"
                                      % (member.name, member.linkname))
        _remove_existing(target)
        os.link(link_source, target)
    elif member.isfifo():
        _remove_existing(target)
        os.mkfifo(target, mode)
    elif member.ischr() or member.isblk():
        log.warning("skipping device node %s (cannot be created unprivileged)",
                    member.name)
    else:
        log.warning("skipping unsupported entry type %r: %s",
                    member.type, member.name)


@dataclass(frozen=True)
class ExportedImage:
    layer_digest: str      # digest of the compressed blob in dl/
    layer_size: int
    diff_id: str           # digest of the uncompressed tar
    config_digest: str
    config_size: int
    manifest_digest: str
    manifest_bytes: bytes


def _walk_sorted(build_root):
    try:
        entries = []
        for dirpath, dirnames, filenames in os.walk(build_root):
            for name in dirnames + filenames:
                full = os.path.join(dirpath, name)
                entries.append(os.path.relpath(full, build_root))
        return sorted(entries)
    except OSError as exc:
        raise WalkFailedError(str(exc)) from exc


_KIND_TO_TARTYPE = {
    ownerdb.FileKind.REGULAR: tarfile.REGTYPE,
    ownerdb.FileKind.DIRECTORY: tarfile.DIRTYPE,
    ownerdb.FileKind.SYMLINK: tarfile.SYMTYPE,
    ownerdb.FileKind.CHAR_DEVICE: tarfile.CHRTYPE,
    ownerdb.FileKind.BLOCK_DEVICE: tarfile.BLKTYPE,
    ownerdb.FileKind.FIFO: tarfile.FIFOTYPE,
}


def export_layer(build_root, db=None):
    """Flatten a built root into one reproducible tar; returns its bytes.

    Per entry: with a database record, the recorded uid/gid/mode/kind/rdev
    are written (recorded device nodes materialize even though on disk they
    are placeholder files); without one, ownership is root:root and setuid/
    setgid bits are cleared. Sorted paths and a fixed timestamp make two
    exports of the same tree byte-identical.
    """
    build_root = os.path.abspath(build_root)
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w", format=tarfile.PAX_FORMAT) as tar:
        for rel in _walk_sorted(build_root):
            full = os.path.join(build_root, rel)
            try:
                st = os.lstat(full)
            except OSError as exc:
                raise WalkFailedError(str(exc)) from exc
            disk_kind = ownerdb.kind_of_mode(st.st_mode)
            if disk_kind is ownerdb.FileKind.SOCKET:
                log.warning("skipping socket %s", rel)
                continue
            record = db.lookup(ownerdb.FileIdentity.of_stat(st)) if db else None
            info = tarfile.TarInfo(rel.replace(os.sep, "/"))
            info.mtime = EXPORT_EPOCH
            info.uname = ""
            info.gname = ""
            if record is not None:
                info.uid, info.gid = record.uid, record.gid
                info.mode = record.mode_bits
                kind = record.file_kind
            else:
                info.uid, info.gid = 0, 0
                info.mode = stat_mod.S_IMODE(st.st_mode) & ~0o6000
                kind = disk_kind
            info.type = _KIND_TO_TARTYPE.get(kind, tarfile.REGTYPE)
            if kind in (ownerdb.FileKind.CHAR_DEVICE,
                        ownerdb.FileKind.BLOCK_DEVICE):
                rdev = record.rdev if record else st.st_rdev
                info.devmajor = os.major(rdev)
                info.devminor = os.minor(rdev)
                tar.addfile(info)
            elif kind is ownerdb.FileKind.SYMLINK:
                info.linkname = os.readlink(full)
                tar.addfile(info)
            elif kind is ownerdb.FileKind.REGULAR and disk_kind is \
                    ownerdb.FileKind.REGULAR:
                info.size = st.st_size
                with open(full, "rb") as fh:
                    tar.addfile(info, fh)
            else:
                tar.addfile(info)  # directory, fifo, or kind override
    return buf.getvalue()


def export(build_root, db, store, ref):
    """Export a built root into the store as layer + config + manifest."""
    layer_tar = export_layer(build_root, db)
    diff_id = digest_of(layer_tar)
    gz = io.BytesIO()
    # fixed mtime in the gzip header keeps the blob reproducible
    with gzip.GzipFile(fileobj=gz, mode="wb", mtime=EXPORT_EPOCH) as zh:
        zh.write(layer_tar)
    layer_blob = gz.getvalue()
    layer_digest = store.save_blob(layer_blob)

    config = {
        "architecture": _oci_arch(),
        "os": "linux",
        "config": {},
        "rootfs": {"type": "layers", "diff_ids": [diff_id]},
    }
    config_bytes = json.dumps(config, sort_keys=True,
                              separators=(",", ":")).encode()
    config_digest = store.save_blob(config_bytes)

    manifest = {
        "schemaVersion": 2,
        "mediaType": MT_MANIFEST,
        "config": {
            "mediaType": MT_CONFIG,
            "digest": config_digest,
            "size": len(config_bytes),
        },
        "layers": [{
            "mediaType": MT_LAYER_GZIP,
            "digest": layer_digest,
            "size": len(layer_blob),
        }],
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True,
                                separators=(",", ":")).encode()
    manifest_digest = store.save_blob(manifest_bytes)
    store.write_meta(ref, {
        "ref": str(ref),
        "manifest_digest": manifest_digest,
        "config_digest": config_digest,
        "layers": [layer_digest],
    })
    return ExportedImage(layer_digest, len(layer_blob), diff_id,
                         config_digest, len(config_bytes),
                         manifest_digest, manifest_bytes)


def _oci_arch():
    machine = os.uname().machine
    return {"x86_64": "amd64", "aarch64": "arm64"}.get(machine, machine)


def snapshot(src_root, dest_root):
    """Recursive copy preserving modes and symlinks (not followed)."""
    src_root = os.path.abspath(src_root)
    dest_root = os.path.abspath(dest_root)
    if not os.path.isdir(src_root):
        raise CopyFailedError("snapshot source %s is not a directory" % src_root)
    if os.path.realpath(src_root) == os.path.realpath(dest_root):
        raise CopyFailedError("snapshot source and destination are the same")
    try:
        shutil.copytree(src_root, dest_root, symlinks=True,
                        dirs_exist_ok=False)
    except (OSError, shutil.Error) as exc:
        raise CopyFailedError(str(exc)) from exc
