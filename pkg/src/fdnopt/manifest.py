"""Run manifests: digests and provenance for every produced artifact."""

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunManifest:
    """Provenance record written beside a command's artifacts.

    Reruns with the same config and seed reproduce the artifact digests;
    the timestamp and any wall-clock figures are informational and excluded
    from that contract.
    """

    command: str
    version: str
    seed: int = None
    config_path: str = None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def add_output(self, path) -> None:
        self.outputs[str(path)] = sha256_file(path)

    def write(self, path) -> None:
        doc = {
            "command": self.command,
            "version": self.version,
            "seed": self.seed,
            "config_path": self.config_path,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "created": datetime.now(timezone.utc).isoformat(),
        }
        doc.update(self.extra)
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
