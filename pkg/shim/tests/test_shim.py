"""Preload shim tests.

These exercise the shared object through its two external interfaces only:
the LD_PRELOAD/NSBUILD_DB_SOCK environment contract and the length-prefixed
wire protocol. The database side is a small independent server implemented
here from the protocol documentation, so the shim is tested against the
contract rather than against the builder's implementation.
"""

import os
import socket
import socketserver
import struct
import subprocess
import sys
import threading

import pytest

SHIM_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SHIM_SO = os.path.join(SHIM_DIR, "build", "fakeshim.so")
LAUNCHER = os.path.join(SHIM_DIR, "build", "fakeroot")

LEN = struct.Struct("<I")
HEAD = struct.Struct("<BQQ")
REC = struct.Struct("<IIIBQ")

MSG_GET, MSG_SET, MSG_UNLINK, MSG_MKNOD = 1, 2, 3, 4
ST_ABSENT, ST_PRESENT, ST_OK, ST_MALFORMED = 0, 1, 2, 255


class MiniDb:
    """Reference wire-protocol server: a dict plus an operations log."""

    def __init__(self, endpoint):
        self.store = {}
        self.log = []
        outer = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                while True:
                    raw = self._exact(LEN.size)
                    if raw is None:
                        return
                    (length,) = LEN.unpack(raw)
                    body = self._exact(length)
                    if body is None:
                        return
                    msg, dev, ino = HEAD.unpack_from(body)
                    key = (dev, ino)
                    if msg == MSG_GET:
                        outer.log.append(("GET", key))
                        if key in outer.store:
                            self.request.sendall(bytes([ST_PRESENT])
                                                 + REC.pack(*outer.store[key]))
                        else:
                            self.request.sendall(bytes([ST_ABSENT]))
                    elif msg in (MSG_SET, MSG_MKNOD):
                        outer.log.append(("SET" if msg == MSG_SET else "MKNOD",
                                          key))
                        outer.store[key] = REC.unpack(body[HEAD.size:])
                        self.request.sendall(bytes([ST_OK]))
                    elif msg == MSG_UNLINK:
                        outer.log.append(("UNLINK", key))
                        outer.store.pop(key, None)
                        self.request.sendall(bytes([ST_OK]))
                    else:
                        self.request.sendall(bytes([ST_MALFORMED]))
                        return

            def _exact(self, n):
                buf = b""
                while len(buf) < n:
                    chunk = self.request.recv(n - len(buf))
                    if not chunk:
                        return None
                    buf += chunk
                return buf

        class Server(socketserver.ThreadingMixIn,
                     socketserver.UnixStreamServer):
            daemon_threads = True

        self.server = Server(endpoint, Handler)
        self.thread = threading.Thread(target=self.server.serve_forever,
                                       daemon=True)
        self.thread.start()

    def stop(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def db(tmp_path):
    endpoint = str(tmp_path / "db.sock")
    mini = MiniDb(endpoint)
    mini.endpoint = endpoint
    yield mini
    mini.stop()


@pytest.fixture
def wrapped(db):
    """Run a command under the shim against the test database."""

    def _run(argv, check=True, extra_env=None):
        env = dict(os.environ)
        env["LD_PRELOAD"] = SHIM_SO
        env["NSBUILD_DB_SOCK"] = db.endpoint
        env.update(extra_env or {})
        result = subprocess.run(argv, capture_output=True, text=True, env=env)
        if check:
            assert result.returncode == 0, result.stdout + result.stderr
        return result

    return _run


pytestmark = pytest.mark.skipif(not os.path.exists(SHIM_SO),
                                reason="run `make` in shim/ first")

PROBE_SRC = r"""
#include <stdio.h>
#include <string.h>
#include <sys/stat.h>
#include <sys/sysmacros.h>
#include <unistd.h>
#include <grp.h>

int main(int argc, char **argv) {
    if (!strcmp(argv[1], "ids")) {
        gid_t groups[8];
        int n = getgroups(8, groups);
        printf("uid=%d euid=%d gid=%d egid=%d ngroups=%d g0=%d\n",
               (int)getuid(), (int)geteuid(), (int)getgid(), (int)getegid(),
               n, n > 0 ? (int)groups[0] : -1);
        return 0;
    }
    if (!strcmp(argv[1], "drop")) {
        gid_t g = 65534;
        int rc = setgroups(1, &g);
        rc |= setresgid(65534, 65534, 65534);
        rc |= setresuid(100, 100, 100);
        printf("drop rc=%d\n", rc);
        return rc;
    }
    if (!strcmp(argv[1], "chown")) {
        return chown(argv[2], 65534, 0);
    }
    if (!strcmp(argv[1], "chown-nogroup")) {
        return chown(argv[2], 4242, -1);
    }
    if (!strcmp(argv[1], "chown-noop")) {
        return chown(argv[2], -1, -1);
    }
    if (!strcmp(argv[1], "chmod")) {
        return chmod(argv[2], 04755);
    }
    if (!strcmp(argv[1], "mknod")) {
        return mknod(argv[2], S_IFCHR | 0640, makedev(1, 1));
    }
    if (!strcmp(argv[1], "stat")) {
        struct stat st;
        if (lstat(argv[2], &st)) { perror("lstat"); return 1; }
        printf("uid=%d gid=%d mode=%o rdev=%d,%d\n",
               (int)st.st_uid, (int)st.st_gid, (int)st.st_mode,
               (int)major(st.st_rdev), (int)minor(st.st_rdev));
        return 0;
    }
    if (!strcmp(argv[1], "unlink")) {
        return unlink(argv[2]);
    }
    return 2;
}
"""


@pytest.fixture(scope="session")
def probe(tmp_path_factory):
    work = tmp_path_factory.mktemp("probe")
    src = work / "probe.c"
    src.write_text(PROBE_SRC)
    binary = str(work / "probe")
    subprocess.run(["gcc", "-O1", "-o", binary, str(src)],
                   check=True, capture_output=True)
    return binary


def test_identity_appears_root(wrapped, probe):
    result = wrapped([probe, "ids"])
    assert result.stdout == "uid=0 euid=0 gid=0 egid=0 ngroups=1 g0=0\n"


def test_privilege_drop_calls_succeed(wrapped, probe):
    result = wrapped([probe, "drop"])
    assert result.stdout == "drop rc=0\n"


def test_chown_records_and_stat_lies(wrapped, probe, db, tmp_path):
    victim = tmp_path / "f"
    victim.write_text("x")
    wrapped([probe, "chown", str(victim)])
    st = os.lstat(victim)
    assert db.store[(st.st_dev, st.st_ino)][:2] == (65534, 0)
    result = wrapped([probe, "stat", str(victim)])
    assert result.stdout.startswith("uid=65534 gid=0 ")
    # the real file never changed hands
    assert st.st_uid == os.getuid()


def test_chown_merges_over_existing_record(wrapped, probe, db, tmp_path):
    victim = tmp_path / "f"
    victim.write_text("x")
    wrapped([probe, "chown", str(victim)])          # uid 65534, gid 0
    wrapped([probe, "chown-nogroup", str(victim)])  # uid 4242, gid kept
    st = os.lstat(victim)
    assert db.store[(st.st_dev, st.st_ino)][:2] == (4242, 0)


def test_chown_with_both_ids_unset_is_a_recordless_noop(wrapped, probe, db,
                                                        tmp_path):
    victim = tmp_path / "f"
    victim.write_text("x")
    wrapped([probe, "chown-noop", str(victim)])
    st = os.lstat(victim)
    assert (st.st_dev, st.st_ino) not in db.store


def test_chown_missing_path_fails_with_real_errno(wrapped, probe, tmp_path):
    result = wrapped([probe, "chown", str(tmp_path / "absent")], check=False)
    assert result.returncode != 0


def test_chmod_records_mode(wrapped, probe, db, tmp_path):
    victim = tmp_path / "f"
    victim.write_text("x")
    wrapped([probe, "chmod", str(victim)])
    st = os.lstat(victim)
    assert db.store[(st.st_dev, st.st_ino)][2] == 0o4755
    result = wrapped([probe, "stat", str(victim)])
    assert "mode=104755" in result.stdout


def test_mknod_creates_placeholder_and_records_device(wrapped, probe, db,
                                                      tmp_path):
    node = tmp_path / "dev0"
    wrapped([probe, "mknod", str(node)])
    st = os.lstat(node)
    assert os.path.isfile(node)                       # placeholder on disk
    rec = db.store[(st.st_dev, st.st_ino)]
    assert rec[3] == 3                                # char device kind
    assert rec[4] == os.makedev(1, 1)
    result = wrapped([probe, "stat", str(node)])
    assert "rdev=1,1" in result.stdout
    assert "mode=20640" in result.stdout


def test_unlink_clears_the_record(wrapped, probe, db, tmp_path):
    victim = tmp_path / "f"
    victim.write_text("x")
    wrapped([probe, "chown", str(victim)])
    st = os.lstat(victim)
    wrapped([probe, "unlink", str(victim)])
    assert (st.st_dev, st.st_ino) not in db.store
    assert ("UNLINK", (st.st_dev, st.st_ino)) in db.log


def test_unrecorded_files_appear_root_owned(wrapped, probe, tmp_path):
    victim = tmp_path / "plain"
    victim.write_text("x")
    result = wrapped([probe, "stat", str(victim)])
    assert result.stdout.startswith("uid=0 gid=0 ")


def test_host_coreutils_see_the_lies(wrapped, db, tmp_path):
    victim = tmp_path / "f"
    victim.write_text("x")
    st = os.lstat(victim)
    db.store[(st.st_dev, st.st_ino)] = (65534, 0, 0o640, 0, 0)
    result = wrapped(["stat", "-c", "%u %g", str(victim)])
    assert result.stdout.strip() == "65534 0"


def test_transparency_for_unprivileged_workloads(wrapped, tmp_path):
    # byte-identical behavior with and without the shim for a workload
    # that makes no privileged calls
    script = ("import hashlib, sys\n"
              "data = open(sys.argv[1], 'rb').read()\n"
              "print(hashlib.sha256(data).hexdigest())\n")
    payload = tmp_path / "payload"
    payload.write_bytes(os.urandom(65536))
    runner = tmp_path / "hash.py"
    runner.write_text(script)
    argv = [sys.executable, str(runner), str(payload)]
    with_shim = wrapped(argv)
    without = subprocess.run(argv, capture_output=True, text=True)
    assert with_shim.stdout == without.stdout
    assert with_shim.returncode == without.returncode == 0


def test_mutation_fails_loudly_without_database(probe, tmp_path):
    victim = tmp_path / "f"
    victim.write_text("x")
    env = dict(os.environ)
    env["LD_PRELOAD"] = SHIM_SO
    env["NSBUILD_DB_SOCK"] = str(tmp_path / "nowhere.sock")
    result = subprocess.run([probe, "chown", str(victim)],
                            capture_output=True, text=True, env=env)
    assert result.returncode != 0
    assert "fakeshim" in result.stderr


def test_subprocess_trees_stay_wrapped(wrapped, probe, db, tmp_path):
    victim = tmp_path / "f"
    victim.write_text("x")
    # the shim travels through sh -c and a grandchild process
    wrapped(["/bin/sh", "-c", "%s chown %s" % (probe, victim)])
    st = os.lstat(victim)
    assert (st.st_dev, st.st_ino) in db.store


def test_launcher_execs_command(db):
    env = dict(os.environ)
    env["LD_PRELOAD"] = SHIM_SO
    env["NSBUILD_DB_SOCK"] = db.endpoint
    result = subprocess.run([LAUNCHER, "/bin/echo", "via-launcher"],
                            capture_output=True, text=True, env=env)
    assert result.returncode == 0
    assert result.stdout == "via-launcher\n"


def test_launcher_usage_error():
    result = subprocess.run([LAUNCHER], capture_output=True, text=True)
    assert result.returncode == 2
    assert "usage" in result.stderr
