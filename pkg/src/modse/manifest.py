"""Run manifests and atomic output staging.

Commands write their primary outputs through a RunOutputs stager: files are
produced under temporary names and renamed into place only when the whole
command has succeeded, so a failed run leaves no partial outputs. The
manifest (command line, config snapshot, seed, version, timestamps, sha256
digests of every emitted file) is written last.
"""

from __future__ import annotations

import hashlib
import json
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__

MANIFEST_NAME = "manifest.json"


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def version_string() -> str:
    """git-describe of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "-C", str(Path(__file__).resolve().parent), "describe", "--always", "--dirty", "--tags"],
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


@dataclass
class RunManifest:
    command: list[str]
    config: dict
    seed: int | None
    version: str
    started_at: str
    finished_at: str
    outputs: dict[str, str]  # filename -> sha256

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"


def _iso(t: float) -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(t)) + "Z"


class RunOutputs:
    """Stages a command's output files in `out_dir` and commits them atomically."""

    def __init__(self, out_dir: str | Path, command: list[str], config: dict, seed: int | None):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.command = list(command)
        self.config = config
        self.seed = seed
        self._staged: dict[str, Path] = {}
        self._t0 = time.time()

    def stage(self, name: str) -> Path:
        """Temporary path for output file `name`; renamed into place on commit."""
        tmp = self.out_dir / f".{name}.tmp"
        self._staged[name] = tmp
        return tmp

    def commit(self) -> RunManifest:
        digests: dict[str, str] = {}
        for name, tmp in self._staged.items():
            final = self.out_dir / name
            tmp.replace(final)
            digests[name] = sha256_file(final)
        manifest = RunManifest(
            command=self.command,
            config=self.config,
            seed=self.seed,
            version=version_string(),
            started_at=_iso(self._t0),
            finished_at=_iso(time.time()),
            outputs=digests,
        )
        tmp = self.out_dir / f".{MANIFEST_NAME}.tmp"
        tmp.write_text(manifest.to_json(), encoding="utf-8")
        tmp.replace(self.out_dir / MANIFEST_NAME)
        return manifest

    def abort(self) -> None:
        for tmp in self._staged.values():
            tmp.unlink(missing_ok=True)
        self._staged.clear()
