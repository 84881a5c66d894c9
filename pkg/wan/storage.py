"""
Emulation state storage for wanbench.

Records which latency profiles are applied to which interfaces, and the
root qdisc each interface carried before, so a later process can tear
them down after a crash.
"""

import json
import os
import sqlite3
import time
from pathlib import Path
from typing import Any, Dict, List, Optional

from config import config


class EmulationStateStore:
    """SQLite record of applied traffic-control profiles, one row per interface."""

    def __init__(self, db_path: Optional[Path] = None):
        """Initialize state storage.

        Args:
            db_path: Path to SQLite database. Defaults to config.state_db_path.
        """
        self.db_path = Path(db_path or config.state_db_path)
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        self._init_database()

    def _connect(self) -> sqlite3.Connection:
        return sqlite3.connect(str(self.db_path))

    def _init_database(self):
        """Initialize the database schema."""
        conn = self._connect()
        cursor = conn.cursor()

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS applied_profiles (
                interface TEXT PRIMARY KEY,
                profile TEXT NOT NULL,
                commands TEXT NOT NULL,
                applied_at REAL NOT NULL,
                pid INTEGER NOT NULL,
                previous TEXT
            )
        """)

        # Databases written before the previous-qdisc column existed
        cursor.execute("PRAGMA table_info(applied_profiles)")
        if "previous" not in {row[1] for row in cursor.fetchall()}:
            cursor.execute("ALTER TABLE applied_profiles ADD COLUMN previous TEXT")

        conn.commit()
        conn.close()

    def record(
        self,
        interface: str,
        profile: Dict[str, Any],
        commands: List[str],
        previous: Optional[List[str]] = None,
    ):
        """Remember that a profile is now applied on an interface.

        Args:
            interface: Network interface name
            profile: Serialized latency profile
            commands: Command lines that applied it
            previous: tc arguments that reinstall the root qdisc found
                before the profile, None when it was the kernel default
        """
        conn = self._connect()
        cursor = conn.cursor()

        cursor.execute("""
            INSERT OR REPLACE INTO applied_profiles (interface, profile, commands, applied_at, pid, previous)
            VALUES (?, ?, ?, ?, ?, ?)
        """, (
            interface,
            json.dumps(profile, sort_keys=True),
            json.dumps(commands),
            time.time(),
            os.getpid(),
            json.dumps(previous) if previous else None,
        ))

        conn.commit()
        conn.close()

    def forget(self, interface: str):
        """Drop the record for an interface (no-op if absent)."""
        conn = self._connect()
        cursor = conn.cursor()

        cursor.execute("DELETE FROM applied_profiles WHERE interface = ?", (interface,))

        conn.commit()
        conn.close()

    def applied(self) -> List[Dict[str, Any]]:
        """List recorded profiles.

        Returns:
            One dictionary per interface, oldest first
        """
        conn = self._connect()
        cursor = conn.cursor()

        cursor.execute("""
            SELECT interface, profile, commands, applied_at, pid, previous
            FROM applied_profiles
            ORDER BY applied_at
        """)

        rows = cursor.fetchall()
        conn.close()

        return [
            {
                'interface': interface,
                'profile': json.loads(profile),
                'commands': json.loads(commands),
                'applied_at': applied_at,
                'pid': pid,
                'previous': json.loads(previous) if previous else None,
            }
            for interface, profile, commands, applied_at, pid, previous in rows
        ]

    def lookup(self, interface: str) -> Optional[Dict[str, Any]]:
        return next((row for row in self.applied() if row['interface'] == interface), None)

    def is_applied(self, interface: str) -> bool:
        return self.lookup(interface) is not None
