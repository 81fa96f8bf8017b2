"""Persistent faked-ownership store.

Privileged-call interception needs somewhere to remember the lies it told:
per-file uid/gid/mode/device metadata keyed by file identity (st_dev,
st_ino), so renames and hardlinks keep their faked metadata. The store is
backed by an append-only binary journal and served to sandboxed processes
over a unix socket with a small length-prefixed protocol.

Wire protocol (all integers little-endian):

    request  = u32 length, u8 type, u64 device, u64 inode
               [SET/MKNOD only: u32 uid, u32 gid, u32 mode, u8 kind, u64 rdev]
    type     = 1 GET, 2 SET, 3 UNLINK, 4 MKNOD
    response = u8 status [status 1 only: u32 uid, u32 gid, u32 mode,
               u8 kind, u64 rdev]
    status   = 0 absent, 1 present, 2 ok, 255 malformed

A malformed frame closes that connection; the service keeps running.
"""

from __future__ import annotations

import enum
import logging
import os
import socketserver
import stat as stat_mod
import struct
import threading
from dataclasses import dataclass, replace

log = logging.getLogger(__name__)

MSG_GET = 1
MSG_SET = 2
MSG_UNLINK = 3
MSG_MKNOD = 4

ST_ABSENT = 0
ST_PRESENT = 1
ST_OK = 2
ST_MALFORMED = 255

_LEN = struct.Struct("<I")
_HEAD = struct.Struct("<BQQ")
_REC = struct.Struct("<IIIBQ")
_ID_PACK = struct.Struct("<QQ")
_MAX_FRAME = _HEAD.size + _REC.size

_JOURNAL_MAGIC = b"ODB"
_JOURNAL_VERSION = 1
_J_SET = 1
_J_UNLINK = 2


class OwnerDbError(Exception):
    pass


class JournalWriteFailedError(OwnerDbError):
    pass


class CorruptJournalError(OwnerDbError):
    def __init__(self, msg, offset):
        super().__init__("%s (byte offset %d)" % (msg, offset))
        self.offset = offset


class BindFailedError(OwnerDbError):
    pass


class FileKind(enum.Enum):
    REGULAR = 0
    DIRECTORY = 1
    SYMLINK = 2
    CHAR_DEVICE = 3
    BLOCK_DEVICE = 4
    FIFO = 5
    SOCKET = 6


_DEVICE_KINDS = (FileKind.CHAR_DEVICE, FileKind.BLOCK_DEVICE)

_KIND_TO_IFMT = {
    FileKind.REGULAR: stat_mod.S_IFREG,
    FileKind.DIRECTORY: stat_mod.S_IFDIR,
    FileKind.SYMLINK: stat_mod.S_IFLNK,
    FileKind.CHAR_DEVICE: stat_mod.S_IFCHR,
    FileKind.BLOCK_DEVICE: stat_mod.S_IFBLK,
    FileKind.FIFO: stat_mod.S_IFIFO,
    FileKind.SOCKET: stat_mod.S_IFSOCK,
}


def kind_of_mode(st_mode):
    fmt = stat_mod.S_IFMT(st_mode)
    for kind, ifmt in _KIND_TO_IFMT.items():
        if fmt == ifmt:
            return kind
    return FileKind.REGULAR


@dataclass(frozen=True)
class FileIdentity:
    device: int
    inode: int

    @classmethod
    def of_stat(cls, st):
        return cls(st.st_dev, st.st_ino)


@dataclass(frozen=True)
class OwnershipRecord:
    uid: int
    gid: int
    mode_bits: int            # permission + setuid/setgid/sticky, no IFMT
    file_kind: FileKind
    rdev: int | None = None   # device kinds only

    def __post_init__(self):
        if (self.rdev is not None) != (self.file_kind in _DEVICE_KINDS):
            raise OwnerDbError("rdev must be present exactly for device "
                               "records: %r" % (self,))
        if self.mode_bits & ~0o7777:
            raise OwnerDbError("mode_bits carries file-type bits: %o"
                               % self.mode_bits)


def _encode_record(rec):
    return _REC.pack(rec.uid, rec.gid, rec.mode_bits, rec.file_kind.value,
                     rec.rdev or 0)


def _decode_record(buf):
    uid, gid, mode, kind_code, rdev = _REC.unpack(buf)
    kind = FileKind(kind_code)
    return OwnershipRecord(uid, gid, mode & 0o7777, kind,
                           rdev if kind in _DEVICE_KINDS else None)


@dataclass(frozen=True)
class StatView:
    """The stat fields interception cares about, plus pass-through ones."""

    st_mode: int
    st_uid: int
    st_gid: int
    st_rdev: int
    st_size: int
    st_mtime: float
    st_nlink: int

    @classmethod
    def of_stat(cls, st):
        return cls(st.st_mode, st.st_uid, st.st_gid, st.st_rdev,
                   st.st_size, st.st_mtime, st.st_nlink)


def rewrite_stat(real, record):
    """Make real stat results look right in the faked-root context.

    With no record the file appears root-owned (everything an apparent root
    created without further privileged calls is root's). With a record the
    recorded uid/gid/mode/kind/rdev win; size, timestamps and link count
    stay real.
    """
    view = real if isinstance(real, StatView) else StatView.of_stat(real)
    if record is None:
        return replace(view, st_uid=0, st_gid=0)
    return replace(
        view,
        st_uid=record.uid,
        st_gid=record.gid,
        st_mode=_KIND_TO_IFMT[record.file_kind] | record.mode_bits,
        st_rdev=record.rdev or 0,
    )


class DbSession:
    """In-memory store mirrored by an append-only journal.

    The store equals the journal replay after every acknowledged change;
    rewriting history is never needed because lies are last-writer-wins.
    """

    def __init__(self, journal_path, _store=None):
        self.journal_path = journal_path
        self._store = _store if _store is not None else {}
        self._lock = threading.Lock()
        fresh = not os.path.exists(journal_path)
        try:
            self._fd = os.open(journal_path,
                               os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o600)
            if fresh:
                os.write(self._fd, _JOURNAL_MAGIC
                         + bytes([_JOURNAL_VERSION]))
        except OSError as exc:
            raise JournalWriteFailedError(str(exc)) from exc

    def _append(self, body):
        try:
            os.write(self._fd, _LEN.pack(len(body)) + body)
        except OSError as exc:
            raise JournalWriteFailedError(str(exc)) from exc

    def upsert(self, identity, record):
        with self._lock:
            self._append(bytes([_J_SET])
                         + _ID_PACK.pack(identity.device, identity.inode)
                         + _encode_record(record))
            self._store[identity] = record

    def unlink(self, identity):
        """Forget a file's lies; inode numbers get reused after deletion."""
        with self._lock:
            if identity not in self._store:
                return
            self._append(bytes([_J_UNLINK])
                         + _ID_PACK.pack(identity.device, identity.inode))
            del self._store[identity]

    def lookup(self, identity):
        with self._lock:
            return self._store.get(identity)

    def identities(self):
        with self._lock:
            return list(self._store)

    def __len__(self):
        return len(self._store)

    def save(self):
        """Flush the journal to stable storage."""
        os.fsync(self._fd)

    def close(self):
        if self._fd is not None:
            os.fsync(self._fd)
            os.close(self._fd)
            self._fd = None


def load(journal_path):
    """Replay a journal into a fresh session; absent path means empty.

    Truncated or unparseable journals abort with CorruptJournalError rather
    than guessing which lies survived.
    """
    store = {}
    if os.path.exists(journal_path):
        data = open(journal_path, "rb").read()
        head = _JOURNAL_MAGIC + bytes([_JOURNAL_VERSION])
        if data[:len(head)] != head:
            raise CorruptJournalError("bad journal header", 0)
        pos = len(head)
        while pos < len(data):
            if pos + _LEN.size > len(data):
                raise CorruptJournalError("truncated record length", pos)
            (length,) = _LEN.unpack_from(data, pos)
            body_at = pos + _LEN.size
            if length < 1 + _ID_PACK.size or body_at + length > len(data):
                raise CorruptJournalError("truncated record", pos)
            op = data[body_at]
            dev, ino = _ID_PACK.unpack_from(data, body_at + 1)
            identity = FileIdentity(dev, ino)
            if op == _J_SET and length == 1 + _ID_PACK.size + _REC.size:
                try:
                    store[identity] = _decode_record(
                        data[body_at + 1 + _ID_PACK.size:body_at + length])
                except (ValueError, OwnerDbError) as exc:
                    raise CorruptJournalError(str(exc), pos) from exc
            elif op == _J_UNLINK and length == 1 + _ID_PACK.size:
                store.pop(identity, None)
            else:
                raise CorruptJournalError("unknown record type %d" % op, pos)
            pos = body_at + length
    return DbSession(journal_path, _store=store)


class _Handler(socketserver.BaseRequestHandler):
    def _recv_exact(self, n):
        buf = b""
        while len(buf) < n:
            chunk = self.request.recv(n - len(buf))
            if not chunk:
                return None
            buf += chunk
        return buf

    def handle(self):
        session = self.server.session
        while True:
            raw = self._recv_exact(_LEN.size)
            if raw is None:
                return
            (length,) = _LEN.unpack(raw)
            if length < _HEAD.size or length > _MAX_FRAME:
                self._malformed()
                return
            body = self._recv_exact(length)
            if body is None:
                return
            try:
                reply = self._dispatch(session, body)
            except (OwnerDbError, ValueError, struct.error):
                self._malformed()
                return
            self.request.sendall(reply)

    def _malformed(self):
        self.server.error_count += 1
        try:
            self.request.sendall(bytes([ST_MALFORMED]))
        except OSError:
            pass

    def _dispatch(self, session, body):
        msg_type, dev, ino = _HEAD.unpack_from(body)
        identity = FileIdentity(dev, ino)
        if msg_type == MSG_GET and len(body) == _HEAD.size:
            rec = session.lookup(identity)
            if rec is None:
                return bytes([ST_ABSENT])
            return bytes([ST_PRESENT]) + _encode_record(rec)
        if msg_type in (MSG_SET, MSG_MKNOD) and len(body) == _MAX_FRAME:
            rec = _decode_record(body[_HEAD.size:])
            session.upsert(identity, rec)
            return bytes([ST_OK])
        if msg_type == MSG_UNLINK and len(body) == _HEAD.size:
            session.unlink(identity)
            return bytes([ST_OK])
        raise OwnerDbError("bad message type/length")


class _Server(socketserver.ThreadingMixIn, socketserver.UnixStreamServer):
    daemon_threads = True
    allow_reuse_address = False

    def handle_error(self, request, client_address):
        # a wrapped process dying mid-request is routine, not a traceback
        self.error_count += 1
        log.debug("connection error", exc_info=True)


class DbServer:
    """Running wire-protocol service over a DbSession."""

    def __init__(self, session, endpoint):
        self.endpoint = endpoint
        try:
            self._server = _Server(endpoint, _Handler)
        except OSError as exc:
            raise BindFailedError("cannot bind %s: %s" % (endpoint, exc)) from exc
        self._server.session = session
        self._server.error_count = 0
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        name="ownerdb", daemon=True)
        self._thread.start()

    @property
    def error_count(self):
        return self._server.error_count

    def stop(self):
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=10)
        try:
            os.unlink(self.endpoint)
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def serve(session, endpoint):
    """Start serving GET/SET/UNLINK/MKNOD on a unix socket path."""
    return DbServer(session, endpoint)
