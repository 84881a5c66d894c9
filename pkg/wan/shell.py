"""
The single boundary through which wanbench runs system commands.

Every command (tc, sysctl, ethtool, openssl, gnuplot) goes through a
Shell so it is logged, and so a dry-run shell can collect the exact
command lines without executing anything that changes the host.
"""

import logging
import shlex
import shutil
import subprocess
from dataclasses import dataclass
from typing import List, Optional, Sequence, Type

from errors import LabError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CommandResult:
    argv: Sequence[str]
    returncode: int
    stdout: str = ""
    stderr: str = ""
    planned: bool = False

    @property
    def ok(self) -> bool:
        return self.returncode == 0

    @property
    def command_line(self) -> str:
        return shlex.join(self.argv)


class Shell:
    """Runs or plans external commands.

    In dry-run mode, mutating commands are recorded in `planned` and never
    executed; read-only commands (mutates=False) still run so audits and
    dry-run previews reflect the live host.
    """

    def __init__(self, dry_run: bool = False, timeout: float = 30.0):
        self.dry_run = dry_run
        self.timeout = timeout
        self.planned: List[str] = []

    @staticmethod
    def which(tool: str) -> Optional[str]:
        return shutil.which(tool)

    def run(
        self,
        argv: Sequence[str],
        mutates: bool = True,
        check: Optional[Type[LabError]] = None,
    ) -> CommandResult:
        """Execute (or plan) one command.

        Args:
            argv: Command and arguments, never passed through a shell
            mutates: Whether the command changes host state
            check: Exception type raised when the command fails

        Returns:
            Completed (or planned) command result; a missing executable
            yields return code 127
        """
        argv = [str(a) for a in argv]
        line = shlex.join(argv)

        if self.dry_run and mutates:
            logger.info(f"[dry-run] {line}")
            self.planned.append(line)
            return CommandResult(argv, 0, planned=True)

        logger.info(f"Running: {line}")
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
            result = CommandResult(argv, proc.returncode, proc.stdout, proc.stderr)
        except FileNotFoundError:
            result = CommandResult(argv, 127, stderr=f"{argv[0]}: command not found")
        except subprocess.TimeoutExpired:
            result = CommandResult(argv, 124, stderr=f"timed out after {self.timeout}s")

        if not result.ok:
            logger.debug(f"'{line}' exited {result.returncode}: {result.stderr.strip()}")
            if check is not None:
                raise check(f"'{line}' failed ({result.returncode}): {result.stderr.strip()}")
        return result
