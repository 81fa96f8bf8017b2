"""Command-line surface.

build      parse -> pull -> per-instruction sandboxed execution with
           optional wrapper injection -> flattening export
pull/push  registry transfer for one reference
list       stored references with manifest digests
lint-subid collision lint for subuid/subgid configuration
probe      sandbox capability report

The transcript goes to stdout, line-oriented UTF-8; exit codes are the only
success/failure channel. Build stage failures exit distinctly: parse 2,
pull 3, run 1, export/push 4.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile

from . import dockerfile, idmap, image, inject, ownerdb, registry, sandbox

log = logging.getLogger(__name__)

STORE_ENV = "NSBUILD_STORE"
SHIM_ENV = "NSBUILD_SHIM"

EXIT_OK = 0
EXIT_RUN = 1
EXIT_PARSE = 2
EXIT_PULL = 3
EXIT_EXPORT = 4


def _echo(text=""):
    sys.stdout.write(text + "\n")
    sys.stdout.flush()


def default_store_path():
    cache = os.environ.get("XDG_CACHE_HOME",
                           os.path.join(os.path.expanduser("~"), ".cache"))
    return os.environ.get(STORE_ENV, os.path.join(cache, "nsbuild"))


def _transcript_form(inst):
    if inst.kind is dockerfile.Kind.RUN:
        return "RUN %r" % (dockerfile.shell_form(inst),)
    return inst.render()


class _Builder:
    """One build: holds the evolving root, env, workdir, and force state."""

    def __init__(self, args):
        self.args = args
        self.store = image.Store(args.store)
        self.tag = image.ImageRef.parse(args.tag)
        self.env = {}
        self.workdir = "/"
        self.shim_path = args.shim or os.environ.get(SHIM_ENV) or None
        self.db = None
        self.server = None
        self.preload = None
        self.build_root = None
        self.state = None

    # -- plumbing ------------------------------------------------------

    def _sandbox_env(self):
        return ["%s=%s" % kv for kv in self.env.items()]

    def _run_argv(self, argv, tee=True):
        spec = sandbox.SandboxSpec(
            image_root=self.build_root,
            argv=argv,
            env=self._sandbox_env(),
            workdir=self.workdir,
            preload=self.preload,
        )
        return sandbox.run(spec, tee=tee)

    def _run_shell(self, command):
        return self._run_argv(["/bin/sh", "-c", command]).exit_code

    def _start_db(self):
        self._ipc_dir = tempfile.mkdtemp(prefix="nsbuild-ipc-")
        sock = os.path.join(self._ipc_dir, "db.sock")
        self.db = ownerdb.load(self.store.owners_path(self.tag))
        self.server = ownerdb.serve(self.db, sock)
        self.preload = sandbox.Preload(self.shim_path, sock)

    def _stop_db(self):
        if self.server is not None:
            self.server.stop()
            self.server = None
        if self.db is not None:
            self.db.save()

    def _close_db(self):
        self._stop_db()
        if self.db is not None:
            self.db.close()
            self.db = None
        if getattr(self, "_ipc_dir", None):
            shutil.rmtree(self._ipc_dir, ignore_errors=True)
            self._ipc_dir = None

    def _scrub_mountpoints(self):
        # the sandbox creates reserved mountpoint directories inside the
        # root; they must not leak into the exported image
        for reserved in (sandbox.SHIM_MOUNT, sandbox.IPC_MOUNT):
            path = self.build_root + reserved
            if os.path.isdir(path) and not os.listdir(path):
                os.rmdir(path)

    # -- instruction execution -----------------------------------------

    def _prepare_base(self, base_ref):
        if not self.store.has_image(base_ref):
            _echo("pulling %s" % base_ref)
            client = registry.RegistryClient(self.store)
            manifest = client.pull(base_ref)
            self.store.save_blob(manifest.raw)
            layer_paths = [self.store.blob_path(d.digest)
                           for d in manifest.layers]
            image.unpack(layer_paths, self.store.fresh_image_root(base_ref))
            self.store.write_meta(base_ref, {
                "ref": str(base_ref),
                "manifest_digest": manifest.digest,
                "config_digest": manifest.config.digest,
                "layers": [d.digest for d in manifest.layers],
            })
        base_root = self.store.image_root(base_ref)
        self.build_root = self.store.image_root(self.tag)
        if os.path.realpath(base_root) != os.path.realpath(self.build_root):
            if os.path.exists(self.build_root):
                shutil.rmtree(self.build_root)
            image.snapshot(base_root, self.build_root)
        stale_owners = self.store.owners_path(self.tag)
        if os.path.exists(stale_owners):
            os.unlink(stale_owners)

    def _do_from(self, inst):
        self._prepare_base(image.ImageRef.parse(inst.image))
        registry_path = self.args.force_config
        configs = inject.load_registry(registry_path)
        config = inject.detect_config(self.build_root, configs)
        self.state = inject.ForceState(enabled=self.args.force, config=config)
        if self.args.force and config is not None:
            _echo(inject.force_banner(config))
            if self.shim_path:
                self._start_db()

    def _do_run(self, inst):
        argv = dockerfile.shell_form(inst)
        state = self.state
        if (state.enabled and state.config is not None
                and inject.needs_modification(inst.command, state.config)):
            if not state.initialized:
                inject.apply_init(self._run_shell, state.config, state,
                                  echo=_echo)
            argv = inject.rewrite(argv, state.config, echo=_echo)
            state.modified_count += 1
        result = self._run_argv(argv)
        return result.exit_code

    def _do_copy(self, inst):
        context = os.path.realpath(self.args.context)
        dest = inst.dest
        if not dest.startswith("/"):
            dest = os.path.join(self.workdir, dest)
        dest_root = self.build_root + "/" + dest.lstrip("/")
        many = len(inst.sources) > 1 or inst.dest.endswith("/")
        for src in inst.sources:
            if src.startswith("/"):
                raise image.ImageError("COPY source must be relative: %s" % src)
            full = os.path.realpath(os.path.join(context, src))
            if full != context and not full.startswith(context + os.sep):
                raise image.ImageError("COPY source escapes the context: %s"
                                       % src)
            if not os.path.exists(full):
                raise image.ImageError("COPY source missing: %s" % src)
            if os.path.isdir(full):
                target = (os.path.join(dest_root, os.path.basename(full))
                          if many or os.path.isdir(dest_root) else dest_root)
                image.snapshot(full, target)
            else:
                if many or os.path.isdir(dest_root):
                    os.makedirs(dest_root, exist_ok=True)
                    target = os.path.join(dest_root, os.path.basename(full))
                else:
                    os.makedirs(os.path.dirname(dest_root), exist_ok=True)
                    target = dest_root
                shutil.copy2(full, target)

    def _do_workdir(self, inst):
        path = inst.path
        if not path.startswith("/"):
            path = os.path.join(self.workdir, path)
        self.workdir = os.path.normpath(path)
        os.makedirs(self.build_root + self.workdir, exist_ok=True)

    # -- whole build ----------------------------------------------------

    def build(self):
        try:
            with open(self.args.file, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            _echo("error: cannot read %s: %s" % (self.args.file, exc))
            return EXIT_PARSE
        try:
            build_args = dict(kv.split("=", 1) for kv in self.args.build_arg)
        except ValueError:
            _echo("error: --build-arg needs KEY=VALUE")
            return EXIT_PARSE
        try:
            recipe = dockerfile.parse(text, self.args.file, build_args)
        except dockerfile.ParseError as exc:
            _echo("error: %s: %s" % (self.args.file, exc))
            return EXIT_PARSE
        try:
            with self.store.lock("build"):
                return self._build_instructions(recipe)
        finally:
            self._close_db()

    def _build_instructions(self, recipe):
        for number, inst in enumerate(recipe.instructions, 1):
            _echo("  %d %s" % (number, _transcript_form(inst)))
            if inst.kind is dockerfile.Kind.FROM:
                try:
                    self._do_from(inst)
                except (registry.RegistryError, image.ImageError,
                        OSError) as exc:
                    _echo("error: cannot prepare base image: %s" % exc)
                    return EXIT_PULL
            elif inst.kind is dockerfile.Kind.RUN:
                try:
                    code = self._do_run(inst)
                except inject.InitStepFailedError as exc:
                    _echo("error: build failed: %s" % exc)
                    return EXIT_RUN
                except sandbox.ExecFailedError as exc:
                    _echo("error: build failed: RUN command failed to start: %s"
                          % exc)
                    return EXIT_RUN
                if code != 0:
                    _echo("error: build failed: RUN command exited with %d"
                          % code)
                    hint = inject.advise(self.state, build_failed=True)
                    if hint:
                        _echo(hint)
                    return EXIT_RUN
            elif inst.kind is dockerfile.Kind.COPY:
                try:
                    self._do_copy(inst)
                except image.ImageError as exc:
                    _echo("error: build failed: %s" % exc)
                    return EXIT_RUN
            elif inst.kind is dockerfile.Kind.WORKDIR:
                self._do_workdir(inst)
            elif inst.kind is dockerfile.Kind.ENV:
                self.env[inst.key] = inst.value
            # ARG values were substituted during parsing

        summary = inject.advise(self.state, build_failed=False)
        if summary:
            _echo(summary)
        self._stop_db()  # quiesce: the journal is complete before export
        self._scrub_mountpoints()
        try:
            image.export(self.build_root, self.db, self.store, self.tag)
        except (image.ImageError, ownerdb.OwnerDbError) as exc:
            _echo("error: export failed: %s" % exc)
            return EXIT_EXPORT
        _echo("grown in %d instructions: %s"
              % (len(recipe.instructions), self.args.tag))
        return EXIT_OK


def cmd_build(args):
    return _Builder(args).build()


def cmd_pull(args):
    store = image.Store(args.store)
    try:
        ref = image.ImageRef.parse(args.ref)
        client = registry.RegistryClient(store)
        manifest = client.pull(ref)
        store.save_blob(manifest.raw)
        layer_paths = [store.blob_path(d.digest) for d in manifest.layers]
        with store.lock(ref.encoded):
            image.unpack(layer_paths, store.fresh_image_root(ref))
            store.write_meta(ref, {
                "ref": str(ref),
                "manifest_digest": manifest.digest,
                "config_digest": manifest.config.digest,
                "layers": [d.digest for d in manifest.layers],
            })
    except (registry.RegistryError, image.ImageError, OSError) as exc:
        _echo("error: pull failed: %s" % exc)
        return EXIT_PULL
    _echo("pulled %s: %s" % (ref, manifest.digest))
    return EXIT_OK


def cmd_push(args):
    store = image.Store(args.store)
    try:
        ref = image.ImageRef.parse(args.ref)
    except image.ImageError as exc:
        _echo("error: %s" % exc)
        return EXIT_PARSE
    meta = store.read_meta(ref)
    if meta is None:
        _echo("error: %s is not in the store; build or pull it first"
              % args.ref)
        return EXIT_EXPORT
    try:
        manifest_bytes = open(store.blob_path(meta["manifest_digest"]),
                              "rb").read()
        blobs = {}
        for digest in [meta["config_digest"]] + meta["layers"]:
            blobs[digest] = open(store.blob_path(digest), "rb").read()
        client = registry.RegistryClient(store)
        digest = client.push(ref, manifest_bytes, blobs)
    except (OSError, registry.RegistryError) as exc:
        _echo("error: push failed: %s" % exc)
        return EXIT_EXPORT
    _echo("pushed %s: %s" % (ref, digest))
    return EXIT_OK


def cmd_list(args):
    store = image.Store(args.store)
    for ref, digest in store.list_images():
        _echo("%s %s" % (ref, digest))
    return EXIT_OK


def _read_ids(path, description):
    """Numeric IDs from field 3 of a passwd/group style file."""
    ids = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(":")
            if len(parts) > 2:
                try:
                    ids.add(int(parts[2]))
                except ValueError:
                    log.warning("%s: non-numeric ID in %r", description, line)
    return ids


def cmd_lint_subid(args):
    spaces = (("subuid", args.subuid, args.passwd, "UID"),
              ("subgid", args.subgid, args.group, "GID"))
    findings = []
    for _, subid_path, live_path, space in spaces:
        try:
            with open(subid_path, encoding="utf-8") as fh:
                entries, parse_findings = idmap.parse_subid(fh.read())
            live = _read_ids(live_path, space)
        except OSError as exc:
            _echo("error: %s" % exc)
            return 2
        for finding in parse_findings + idmap.lint_config(entries, live):
            findings.append((space, finding))
    for space, finding in findings:
        _echo("%s: %s" % (space, finding.render()))
    errors = sum(1 for _, f in findings if f.severity is idmap.Severity.ERROR)
    if errors:
        _echo("%d error(s) found" % errors)
        return 1
    _echo("no collision hazards found")
    return EXIT_OK


def cmd_probe(args):
    report = sandbox.probe_host()
    _echo(report.render())
    return EXIT_OK if report.user_ns else 1


def make_parser():
    parser = argparse.ArgumentParser(
        prog="nsbuild",
        description="fully unprivileged container image builder")
    parser.add_argument("--store", default=default_store_path(),
                        help="store directory (env %s; default %%(default)s)"
                             % STORE_ENV)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_build = sub.add_parser("build", help="build an image from a Dockerfile")
    p_build.add_argument("-t", "--tag", required=True,
                         help="name[:tag] for the result")
    p_build.add_argument("-f", "--file", required=True, help="Dockerfile path")
    p_build.add_argument("--force", action="store_true",
                         help="allow automatic root-faking modifications")
    p_build.add_argument("--build-arg", action="append", default=[],
                         metavar="K=V", help="override an ARG default")
    p_build.add_argument("--force-config", default=None,
                         help="alternate distro config registry (JSON)")
    p_build.add_argument("--shim", default=None,
                         help="preload shim .so for builder-provided "
                              "root faking (env %s)" % SHIM_ENV)
    p_build.add_argument("context", help="build context directory")
    p_build.set_defaults(func=cmd_build)

    p_pull = sub.add_parser("pull", help="pull an image into the store")
    p_pull.add_argument("ref")
    p_pull.set_defaults(func=cmd_pull)

    p_push = sub.add_parser("push", help="push a stored image")
    p_push.add_argument("ref")
    p_push.set_defaults(func=cmd_push)

    p_list = sub.add_parser("list", help="list stored images")
    p_list.set_defaults(func=cmd_list)

    p_lint = sub.add_parser("lint-subid",
                            help="lint subuid/subgid for collision hazards")
    p_lint.add_argument("--subuid", default="/etc/subuid")
    p_lint.add_argument("--subgid", default="/etc/subgid")
    p_lint.add_argument("--passwd", default="/etc/passwd")
    p_lint.add_argument("--group", default="/etc/group")
    p_lint.set_defaults(func=cmd_lint_subid)

    p_probe = sub.add_parser("probe", help="report sandbox capabilities")
    p_probe.set_defaults(func=cmd_probe)
    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="nsbuild: %(levelname)s: %(message)s")
    try:
        return args.func(args)
    except sandbox.SandboxError as exc:
        _echo("error: %s" % exc)
        return EXIT_RUN
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
