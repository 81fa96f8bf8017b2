"""Root-faking wrapper auto-injection.

Unmodified build recipes that assume root can often be grown anyway: detect
which distribution family the image is, run that family's idempotent init
steps the first time a RUN needs help, and prepend the wrapper command to
every RUN whose payload contains a configured trigger substring.

Injection is opt-in (--force). Detection still happens without it so a
failed build can end with a concrete suggestion.

Configurations are declarative JSON (see force_configs.json for the two
built-ins, rhel7 and debderiv); sites extend by pointing at their own file.
Schema per config object:

    name         unique short name
    description  human text for transcripts
    match        list of [path-inside-image, regex]; all must match
    init         list of {check: shell, do: shell}; check exiting 0 means
                 the step is already satisfied and do is skipped
    triggers     substrings of RUN payloads that request wrapping
    wrapper      argv prefix, normally ["fakeroot"]
"""

from __future__ import annotations

import importlib.resources
import json
import logging
import re
from dataclasses import dataclass

log = logging.getLogger(__name__)


class InjectError(Exception):
    pass


class InitStepFailedError(InjectError):
    def __init__(self, step_index, exit_code):
        super().__init__("init step %d failed with exit code %d"
                         % (step_index, exit_code))
        self.step_index = step_index
        self.exit_code = exit_code


@dataclass(frozen=True)
class InitStep:
    check_cmd: str
    do_cmd: str

    def __post_init__(self):
        if not self.check_cmd or not self.do_cmd:
            raise InjectError("init steps need a non-empty check and do command")


@dataclass(frozen=True)
class DistroConfig:
    name: str
    description: str
    matchers: tuple[tuple[str, str], ...]   # (path inside image, regex)
    init_steps: tuple[InitStep, ...]
    run_triggers: tuple[str, ...]
    wrapper: tuple[str, ...] = ("fakeroot",)


@dataclass
class ForceState:
    """Per-build injection bookkeeping."""

    enabled: bool
    config: DistroConfig | None = None
    initialized: bool = False
    modified_count: int = 0


def load_registry(path=None):
    """Load DistroConfig records from a JSON file (built-ins by default)."""
    if path is None:
        text = (importlib.resources.files("nsbuild") / "force_configs.json"
                ).read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    data = json.loads(text)
    configs = []
    seen = set()
    for obj in data["configs"]:
        if obj["name"] in seen:
            raise InjectError("duplicate config name %r" % obj["name"])
        seen.add(obj["name"])
        configs.append(DistroConfig(
            name=obj["name"],
            description=obj["description"],
            matchers=tuple((p, rx) for p, rx in obj["match"]),
            init_steps=tuple(InitStep(s["check"], s["do"]) for s in obj["init"]),
            run_triggers=tuple(obj["triggers"]),
            wrapper=tuple(obj.get("wrapper", ["fakeroot"])),
        ))
    return configs


def detect_config(image_root, registry):
    """First config whose matcher files all exist and match, else None.

    Pure file inspection; nothing executes inside the image.
    """
    for config in registry:
        for rel_path, regex in config.matchers:
            path = image_root.rstrip("/") + "/" + rel_path.lstrip("/")
            try:
                with open(path, encoding="utf-8", errors="replace") as fh:
                    contents = fh.read()
            except OSError:
                break
            if not re.search(regex, contents):
                break
        else:
            log.debug("force config matched: %s", config.name)
            return config
    return None


def force_banner(config):
    return "will use --force: %s: %s" % (config.name, config.description)


def needs_modification(run_payload, config):
    """True when any trigger substring occurs in the RUN payload.

    Plain substring matching: a false positive only wraps a command that
    did not need wrapping, which is harmless.
    """
    return any(trigger in run_payload for trigger in config.run_triggers)


def apply_init(run_step, config, state, echo=print):
    """Run the config's init steps once, before the first modified RUN.

    run_step(shell_command) executes in the build sandbox and returns the
    exit code. A step whose check exits non-zero is needed; its do command
    must then exit 0 or the build aborts.
    """
    if not state.enabled or state.initialized:
        raise InjectError("apply_init needs an enabled, uninitialized state")
    for index, step in enumerate(config.init_steps, 1):
        echo("workarounds: init step %d: checking: $ %s" % (index, step.check_cmd))
        if run_step(step.check_cmd) == 0:
            continue
        echo("workarounds: init step %d: $ %s" % (index, step.do_cmd))
        rc = run_step(step.do_cmd)
        if rc != 0:
            raise InitStepFailedError(index, rc)
    state.initialized = True
    return state


def rewrite(argv, config, echo=print):
    """Prepend the wrapper to a shell-form vector; emits the transcript line."""
    if not config.wrapper:
        return list(argv)
    new_argv = list(config.wrapper) + list(argv)
    echo("workarounds: RUN: new command: %r" % (new_argv,))
    return new_argv


def advise(state, build_failed):
    """What to tell the user at the end of a build, if anything."""
    if state.enabled:
        if state.initialized:
            return ("--force: init OK & modified %d RUN instructions"
                    % state.modified_count)
        return None
    if build_failed and state.config is not None:
        return ("hint: --force may fix this build (matched config: %s: %s)"
                % (state.config.name, state.config.description))
    return None
