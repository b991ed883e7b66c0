"""Run manifests: resolved configuration plus hashes of every emitted file."""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

from . import __version__

MANIFEST_FORMAT = "prunedlearn.manifest/v1"


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def config_hash(command: str, config: Dict) -> str:
    text = json.dumps({"command": command, "config": _jsonable(config)}, sort_keys=True, separators=(",", ":"))
    return sha256_bytes(text.encode("utf-8"))[:12]


def utc_stamp() -> str:
    return time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


@dataclass
class RunManifest:
    command: str
    config: Dict
    master_seed: int
    stamp: str
    spec_hash: str
    code_version: str = __version__
    runtime_seconds: float = 0.0
    threads: int = 1
    outputs: List[Dict] = field(default_factory=list)
    inputs: List[Dict] = field(default_factory=list)
    summary: Dict = field(default_factory=dict)

    @property
    def prefix(self) -> str:
        return f"{self.command}-{self.stamp}-{self.spec_hash}"

    def to_json(self) -> str:
        doc = {"format": MANIFEST_FORMAT, **asdict(self)}
        doc["config"] = _jsonable(self.config)
        return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False, allow_nan=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        doc = json.loads(text)
        if doc.pop("format", None) != MANIFEST_FORMAT:
            raise ValueError("not a run manifest")
        return cls(**doc)

    @classmethod
    def load(cls, path: str) -> "RunManifest":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


class OutputWriter:
    """Writes run outputs under ``out_dir`` and records their hashes."""

    def __init__(self, out_dir: str, manifest: RunManifest):
        self.out_dir = out_dir
        self.manifest = manifest
        os.makedirs(out_dir, exist_ok=True)

    def write(self, suffix: str, text: str) -> str:
        name = f"{self.manifest.prefix}.{suffix}"
        data = text.encode("utf-8")
        path = os.path.join(self.out_dir, name)
        with open(path, "wb") as fh:
            fh.write(data)
        self.manifest.outputs.append({"file": name, "sha256": sha256_bytes(data), "bytes": len(data)})
        return path

    def finish(self) -> str:
        path = os.path.join(self.out_dir, f"{self.manifest.prefix}.manifest.json")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.manifest.to_json())
        return path


def verify_outputs(manifest: RunManifest, out_dir: str) -> List[str]:
    """Names of recorded outputs that are missing or whose hash differs."""
    bad = []
    for entry in manifest.outputs:
        path = os.path.join(out_dir, entry["file"])
        if not os.path.exists(path) or sha256_file(path) != entry["sha256"]:
            bad.append(entry["file"])
    return bad


def input_record(path: str) -> Dict:
    return {"file": os.path.abspath(path), "sha256": sha256_file(path)}


def check_inputs(manifest: RunManifest) -> Optional[str]:
    for entry in manifest.inputs:
        if not os.path.exists(entry["file"]):
            return f"input {entry['file']} is missing"
        if sha256_file(entry["file"]) != entry["sha256"]:
            return f"input {entry['file']} changed since the original run"
    return None
