import os
import shutil
import subprocess
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

import rootfs  # noqa: E402

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SHIM_SO = os.path.join(REPO_ROOT, "shim", "build", "fakeshim.so")


def pytest_sessionstart(session):
    # the whole point of this project is working without privilege: running
    # the suite as root would hide regressions, so it is a hard error
    if os.geteuid() == 0:
        pytest.exit("this suite must run as an unprivileged user "
                    "(effective UID is 0)", returncode=3)


_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion" not in report.nodeid:
        return
    name = report.nodeid.split("::", 1)[1]
    if report.when == "call":
        _ACCEPTANCE[name] = report.outcome.upper()
    elif report.when == "setup" and report.outcome != "passed":
        _ACCEPTANCE[name] = report.outcome.upper()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    outcome_map = {"PASSED": "PASS", "FAILED": "FAIL", "SKIPPED": "SKIP"}
    for name in sorted(_ACCEPTANCE):
        outcome = outcome_map.get(_ACCEPTANCE[name], _ACCEPTANCE[name])
        terminalreporter.write_line("%-70s %s" % (name, outcome))


@pytest.fixture(scope="session")
def toolbox(tmp_path_factory):
    return rootfs.build_toolbox(str(tmp_path_factory.mktemp("toolbox")))


@pytest.fixture(scope="session")
def _rhel7_template(tmp_path_factory, toolbox):
    root = str(tmp_path_factory.mktemp("tmpl-rhel7"))
    rootfs.make_rhel7_root(root, toolbox)
    return root


@pytest.fixture(scope="session")
def _debderiv_template(tmp_path_factory, toolbox):
    root = str(tmp_path_factory.mktemp("tmpl-debderiv"))
    rootfs.make_debderiv_root(root, toolbox)
    return root


def _assert_tree_owned_by_invoker(root):
    # nothing a sandboxed step does may ever acquire host IDs other than
    # the invoker's; checked after every test that used a fixture root
    uid, gid = os.getuid(), os.getgid()
    for dirpath, dirnames, filenames in os.walk(root):
        for name in dirnames + filenames:
            st = os.lstat(os.path.join(dirpath, name))
            assert (st.st_uid, st.st_gid) == (uid, gid), \
                "host ownership leak at %s" % os.path.join(dirpath, name)


@pytest.fixture
def rhel7_root(tmp_path, _rhel7_template):
    dest = str(tmp_path / "rhel7-root")
    shutil.copytree(_rhel7_template, dest, symlinks=True)
    yield dest
    _assert_tree_owned_by_invoker(dest)


@pytest.fixture
def debderiv_root(tmp_path, _debderiv_template):
    dest = str(tmp_path / "debderiv-root")
    shutil.copytree(_debderiv_template, dest, symlinks=True)
    yield dest
    _assert_tree_owned_by_invoker(dest)


@pytest.fixture
def store_path(tmp_path):
    return str(tmp_path / "store")


def run_cli(args, store, extra_env=None):
    """Run the command line in a subprocess against the given store."""
    env = dict(os.environ)
    env["NSBUILD_STORE"] = store
    env["PYTHONPATH"] = os.path.join(REPO_ROOT, "src")
    env.pop("NSBUILD_SHIM", None)
    env.update(extra_env or {})
    return subprocess.run([sys.executable, "-m", "nsbuild"] + list(args),
                          capture_output=True, text=True, env=env,
                          timeout=120)


@pytest.fixture
def cli(store_path):
    def _run(*args, extra_env=None):
        return run_cli(list(args), store_path, extra_env)

    _run.store = store_path
    return _run


def seed_image(store_dir, ref_text, root_dir):
    """Place a root filesystem in the store as if it had been pulled."""
    sys.path.insert(0, os.path.join(REPO_ROOT, "src"))
    from nsbuild import image

    store = image.Store(store_dir)
    ref = image.ImageRef.parse(ref_text)
    dest = store.fresh_image_root(ref)
    os.rmdir(dest)
    shutil.copytree(root_dir, dest, symlinks=True)
    store.write_meta(ref, {"ref": str(ref), "manifest_digest": "-",
                           "config_digest": "-", "layers": []})
    return store
