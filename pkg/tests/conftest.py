import shlex
from typing import Dict, Iterable, Optional

import pytest

from config import config
from wan.shell import CommandResult, Shell


class FakeShell(Shell):
    """Records commands instead of running them.

    Commands whose line starts with one of `failures` exit 1; `outputs`
    maps a line prefix to the stdout returned for it.
    """

    def __init__(
        self,
        tools: Iterable[str] = ("tc", "sysctl", "ethtool", "gnuplot", "openssl", "sync"),
        failures: Iterable[str] = (),
        failure_stderr: str = "simulated failure",
        outputs: Optional[Dict[str, str]] = None,
        dry_run: bool = False,
    ):
        super().__init__(dry_run=dry_run)
        self.tools = set(tools)
        self.failures = tuple(failures)
        self.failure_stderr = failure_stderr
        self.outputs = outputs or {}
        self.commands = []

    def which(self, tool):
        return f"/usr/bin/{tool}" if tool in self.tools else None

    def respond(self, argv, line):
        stdout = next((out for prefix, out in self.outputs.items() if line.startswith(prefix)), "")
        if self.failures and line.startswith(self.failures):
            return CommandResult(argv, 1, stdout, self.failure_stderr)
        return CommandResult(argv, 0, stdout)

    def run(self, argv, mutates=True, check=None):
        argv = [str(a) for a in argv]
        line = shlex.join(argv)
        if self.dry_run and mutates:
            self.planned.append(line)
            return CommandResult(argv, 0, planned=True)
        self.commands.append(line)
        result = self.respond(argv, line)
        if not result.ok and check is not None:
            raise check(f"'{line}' failed ({result.returncode}): {result.stderr}")
        return result


@pytest.fixture(autouse=True)
def isolated_dirs(tmp_path_factory, monkeypatch):
    """Point XDG directories at a throwaway location and clear lab environment variables."""
    xdg = tmp_path_factory.mktemp("xdg")

    for name in ("XDG_CONFIG_HOME", "XDG_DATA_HOME", "XDG_CACHE_HOME"):
        monkeypatch.setenv(name, str(xdg / name.lower()))
    for name in ("WANBENCH_PEER", "WANBENCH_OUTPUT_DIR", "WANBENCH_CONFIG"):
        monkeypatch.delenv(name, raising=False)
    for attr in ("_config_dir", "_data_dir", "_cache_dir"):
        monkeypatch.setattr(config, attr, None)
