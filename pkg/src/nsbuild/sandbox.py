"""Unprivileged user+mount namespace sandbox.

Runs one command inside a freshly created user namespace with a single-ID
uid/gid map and the image directory as the root. Creation never needs any
capability: a plain user account can do everything here, which is the whole
point. The caller's normal IDs are the only real IDs in play; in-namespace
root is an alias with no host-side power.

Sequence per run: unshare(USER|NS), write "deny" to the setgroups control
(mandatory before an unprivileged gid_map; absent on pre-3.19-style
kernels, tolerated), install the two single-entry maps, privatize mount
propagation, mount a fresh proc, bind the minimal device nodes and any
requested paths, chroot, exec. stdout/stderr stream live and are captured.
"""

from __future__ import annotations

import ctypes
import fcntl
import json
import logging
import os
import select
import sys
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

_libc = ctypes.CDLL("libc.so.6", use_errno=True)

CLONE_NEWUSER = 0x10000000
CLONE_NEWNS = 0x00020000
MS_RDONLY = 1
MS_BIND = 4096
MS_REC = 16384
MS_REMOUNT = 32
MS_PRIVATE = 1 << 18

DEFAULT_PATH = "/usr/sbin:/usr/bin:/sbin:/bin"

# Fixed names shared with the preload shim; see the shim component docs.
PRELOAD_ENV = "LD_PRELOAD"
DB_SOCKET_ENV = "NSBUILD_DB_SOCK"
SHIM_MOUNT = "/.nsbuild"
IPC_MOUNT = "/.nsbuild.ipc"

_DEV_NODES = ("null", "zero", "urandom", "tty")


class SandboxError(Exception):
    pass


class UserNsUnavailableError(SandboxError):
    pass


class MapWriteFailedError(SandboxError):
    pass


class RootNotUsableError(SandboxError):
    pass


class ExecFailedError(SandboxError):
    pass


_STAGE_ERRORS = {
    "userns": UserNsUnavailableError,
    "map": MapWriteFailedError,
    "root": RootNotUsableError,
    "exec": ExecFailedError,
}

_USERNS_HINT = (
    "creating an unprivileged user namespace was refused; likely causes: "
    "kernel built without CONFIG_USER_NS, sysctl user.max_user_namespaces=0, "
    "sysctl kernel.unprivileged_userns_clone=0 (Debian), RHEL7-era "
    "namespace.unpriv_enable/user_namespaces.enable kernel options, or an "
    "LSM restriction such as kernel.apparmor_restrict_unprivileged_userns=1")


@dataclass(frozen=True)
class Preload:
    """Root-faking shim wiring for a run.

    shim_path: host path to the preload shared object; a `fakeroot` launcher
    is expected next to it, and the whole containing directory is mounted at
    SHIM_MOUNT and prepended to PATH.
    db_socket: host path to the ownership-database unix socket; its
    directory is mounted at IPC_MOUNT.
    """

    shim_path: str
    db_socket: str


@dataclass
class SandboxSpec:
    image_root: str
    argv: list[str]
    map_uid: tuple[int, int] = None  # (ns id, host id); default (0, invoker)
    map_gid: tuple[int, int] = None
    binds: list[tuple[str, str]] = field(default_factory=list)
    env: list[str] = field(default_factory=list)  # KEY=VALUE strings
    workdir: str = "/"
    preload: Preload | None = None


@dataclass(frozen=True)
class RunResult:
    exit_code: int  # negative = terminating signal number
    stdout: bytes
    stderr: bytes


@dataclass(frozen=True)
class CapabilityReport:
    user_ns: bool
    reason: str | None = None

    def render(self):
        if self.user_ns:
            return "user namespaces: available"
        return "user namespaces: unavailable (%s)" % self.reason


def _mount(source, target, fstype, flags, data=None):
    rc = _libc.mount(source.encode() if source else None,
                     target.encode(),
                     fstype.encode() if fstype else None,
                     flags,
                     data.encode() if data else None)
    if rc != 0:
        err = ctypes.get_errno()
        raise OSError(err, "mount %s -> %s: %s"
                      % (source, target, os.strerror(err)))


def _unshare(flags):
    if _libc.unshare(flags) != 0:
        err = ctypes.get_errno()
        raise OSError(err, os.strerror(err))


def _write_proc(path, text):
    fd = os.open(path, os.O_WRONLY)
    try:
        os.write(fd, text.encode())
    finally:
        os.close(fd)


class _Stage(Exception):
    def __init__(self, stage, msg):
        super().__init__(msg)
        self.stage = stage


def _validate(spec):
    if not spec.argv:
        raise ExecFailedError("argv must be non-empty")
    if not os.path.isdir(spec.image_root):
        raise RootNotUsableError("image root %s is not a directory"
                                 % spec.image_root)
    if not any(os.path.isdir(os.path.join(spec.image_root, d))
               for d in ("bin", "usr/bin")):
        raise RootNotUsableError("image root %s has no bin or usr/bin; "
                                 "not a usable root filesystem"
                                 % spec.image_root)
    if spec.preload and not os.path.exists(spec.preload.shim_path):
        raise ExecFailedError("preload shim %s does not exist"
                              % spec.preload.shim_path)


def _enter_namespaces(spec):
    ns_uid, host_uid = spec.map_uid or (0, os.getuid())
    ns_gid, host_gid = spec.map_gid or (0, os.getgid())
    try:
        _unshare(CLONE_NEWUSER | CLONE_NEWNS)
    except OSError as exc:
        raise _Stage("userns", "%s [errno %d: %s]"
                     % (_USERNS_HINT, exc.errno, exc.strerror))
    try:
        # deny must land before the gid map; kernels without the control
        # file predate the restriction and are safe to skip
        try:
            _write_proc("/proc/self/setgroups", "deny")
        except FileNotFoundError:
            pass
        _write_proc("/proc/self/gid_map", "%d %d 1" % (ns_gid, host_gid))
        _write_proc("/proc/self/uid_map", "%d %d 1" % (ns_uid, host_uid))
    except OSError as exc:
        raise _Stage("map", "writing ID map failed: %s" % exc)


def _prepare_mounts(spec):
    root = spec.image_root
    try:
        _mount("none", "/", None, MS_REC | MS_PRIVATE)
        proc_dir = os.path.join(root, "proc")
        os.makedirs(proc_dir, exist_ok=True)
        _mount("proc", proc_dir, "proc", 0)
        dev_dir = os.path.join(root, "dev")
        os.makedirs(dev_dir, exist_ok=True)
        for name in _DEV_NODES:
            host = "/dev/" + name
            if not os.path.exists(host):
                continue
            target = os.path.join(dev_dir, name)
            if not os.path.exists(target):
                open(target, "w").close()
            try:
                _mount(host, target, None, MS_BIND)
            except OSError:
                if name != "tty":  # tty is best-effort (no controlling tty)
                    raise
        for host, cont in spec.binds:
            target = root + "/" + cont.lstrip("/")
            if os.path.isdir(host):
                os.makedirs(target, exist_ok=True)
            else:
                os.makedirs(os.path.dirname(target), exist_ok=True)
                if not os.path.exists(target):
                    open(target, "w").close()
            _mount(host, target, None, MS_BIND | MS_REC)
        if spec.preload:
            shim_dir = os.path.dirname(os.path.abspath(spec.preload.shim_path))
            sock_dir = os.path.dirname(os.path.abspath(spec.preload.db_socket))
            for host, cont in ((shim_dir, SHIM_MOUNT), (sock_dir, IPC_MOUNT)):
                target = root + cont
                os.makedirs(target, exist_ok=True)
                _mount(host, target, None, MS_BIND)
            # keep the shim artifacts read-only inside; failure to remount
            # is tolerable (the mount source is builder-owned anyway)
            try:
                _mount("none", root + SHIM_MOUNT, None,
                       MS_BIND | MS_REMOUNT | MS_RDONLY)
            except OSError:
                pass
        os.chroot(root)
        os.chdir("/")
    except OSError as exc:
        raise _Stage("root", "preparing the root failed: %s" % exc)
    workdir = spec.workdir or "/"
    try:
        os.chdir(workdir)
    except OSError as exc:
        raise _Stage("root", "cannot enter workdir %s: %s" % (workdir, exc))


def _child_env(spec):
    env = {}
    for kv in spec.env:
        key, _, value = kv.partition("=")
        env[key] = value
    env.setdefault("PATH", DEFAULT_PATH)
    if spec.preload:
        shim_name = os.path.basename(spec.preload.shim_path)
        sock_name = os.path.basename(spec.preload.db_socket)
        env[PRELOAD_ENV] = SHIM_MOUNT + "/" + shim_name
        env[DB_SOCKET_ENV] = IPC_MOUNT + "/" + sock_name
        env["PATH"] = SHIM_MOUNT + ":" + env["PATH"]
    return env


def run(spec, tee=False):
    """Execute spec.argv inside the sandbox; blocks until it exits.

    With tee=True, child output is echoed to this process's stdout/stderr
    as it arrives (build transcripts interleave commands and output); the
    captured bytes are returned either way.
    """
    _validate(spec)
    out_r, out_w = os.pipe()
    err_r, err_w = os.pipe()
    status_r, status_w = os.pipe()
    os.set_inheritable(status_w, True)
    pid = os.fork()
    if pid == 0:  # child: no returning, only exec or _exit
        try:
            os.close(out_r)
            os.close(err_r)
            os.close(status_r)
            os.dup2(out_w, 1)
            os.dup2(err_w, 2)
            fcntl.fcntl(status_w, fcntl.F_SETFD, fcntl.FD_CLOEXEC)
            _enter_namespaces(spec)
            _prepare_mounts(spec)
            env = _child_env(spec)
            try:
                os.execvpe(spec.argv[0], list(spec.argv), env)
            except OSError as exc:
                raise _Stage("exec", "%s: %s" % (spec.argv[0], exc))
        except _Stage as exc:
            payload = json.dumps({"stage": exc.stage, "msg": str(exc)})
            os.write(status_w, payload.encode())
        except BaseException as exc:  # noqa: BLE001 - report, never return
            payload = json.dumps({"stage": "root", "msg": repr(exc)})
            try:
                os.write(status_w, payload.encode())
            except OSError:
                pass
        finally:
            os._exit(127)

    os.close(out_w)
    os.close(err_w)
    os.close(status_w)
    captured = {out_r: bytearray(), err_r: bytearray()}
    sinks = {out_r: sys.stdout, err_r: sys.stderr}
    open_fds = [out_r, err_r]
    while open_fds:
        ready, _, _ = select.select(open_fds, [], [])
        for fd in ready:
            chunk = os.read(fd, 65536)
            if not chunk:
                open_fds.remove(fd)
                continue
            captured[fd].extend(chunk)
            if tee:
                stream = sinks[fd]
                stream.flush()
                stream.buffer.write(chunk)
                stream.buffer.flush()
    _, status = os.waitpid(pid, 0)
    failure = b""
    while True:
        chunk = os.read(status_r, 4096)
        if not chunk:
            break
        failure += chunk
    for fd in (out_r, err_r, status_r):
        os.close(fd)
    if failure:
        info = json.loads(failure.decode())
        raise _STAGE_ERRORS[info["stage"]](info["msg"])
    if os.WIFSIGNALED(status):
        exit_code = -os.WTERMSIG(status)
    else:
        exit_code = os.WEXITSTATUS(status)
    return RunResult(exit_code, bytes(captured[out_r]), bytes(captured[err_r]))


def probe_host():
    """Report whether unprivileged user namespaces can be created here.

    Attempts a throwaway namespace in a forked child; never needs (or
    uses) any privilege.
    """
    if not sys.platform.startswith("linux"):
        return CapabilityReport(False, "unsupported platform: %s" % sys.platform)
    r, w = os.pipe()
    pid = os.fork()
    if pid == 0:
        os.close(r)
        try:
            _unshare(CLONE_NEWUSER)
            msg = b"ok"
        except OSError as exc:
            msg = ("creation refused: errno %d (%s)"
                   % (exc.errno, exc.strerror)).encode()
        try:
            os.write(w, msg)
        finally:
            os._exit(0)
    os.close(w)
    data = b""
    while True:
        chunk = os.read(r, 4096)
        if not chunk:
            break
        data += chunk
    os.close(r)
    os.waitpid(pid, 0)
    if data == b"ok":
        return CapabilityReport(True)
    return CapabilityReport(False, data.decode() or "probe child died")
