"""
Artifact Store - Output directory bookkeeping for pipeline stages
Async file writes with SHA-256 digests and a manifest.json that records every artifact and any stage failure
"""

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import aiofiles

from error_handler import MissingArtifactError, get_error_handler

MANIFEST_NAME = "manifest.json"
MANIFEST_SCHEMA = 1


@dataclass
class ArtifactRecord:
    path: str
    stage: str
    bytes: int
    sha256: str


def _dumps(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


class ArtifactStore:
    def __init__(self, out_dir: Union[str, Path]):
        self.error_handler = get_error_handler()
        self.out_dir = Path(out_dir)
        self.records: Dict[str, ArtifactRecord] = {}
        self.status = "running"
        self.failure: Optional[Dict[str, str]] = None

    async def initialize(self) -> None:
        """Create the output directory and pick up an existing manifest"""
        self.out_dir.mkdir(parents=True, exist_ok=True)
        manifest_path = self.out_dir / MANIFEST_NAME
        if manifest_path.exists():
            async with aiofiles.open(manifest_path, 'r') as f:
                data = json.loads(await f.read())
            self.records = {entry["path"]: ArtifactRecord(**entry) for entry in data.get("artifacts", [])}

    def path(self, relative: str) -> Path:
        return self.out_dir / relative

    def require(self, relative: str, producer: str) -> Path:
        """Path of an upstream artifact; MissingArtifactError names it when absent"""
        path = self.path(relative)
        if not path.exists():
            raise MissingArtifactError(path, producer)
        return path

    async def write_bytes(self, relative: str, payload: bytes, stage: str) -> ArtifactRecord:
        path = self.path(relative)
        path.parent.mkdir(parents=True, exist_ok=True)
        async with aiofiles.open(path, 'wb') as f:
            await f.write(payload)
        return self._record(relative, stage, payload)

    async def write_text(self, relative: str, text: str, stage: str) -> ArtifactRecord:
        return await self.write_bytes(relative, text.encode("utf-8"), stage)

    async def write_json(self, relative: str, data: Any, stage: str) -> ArtifactRecord:
        return await self.write_text(relative, _dumps(data), stage)

    async def register(self, relative: str, stage: str) -> ArtifactRecord:
        """Hash a file another module already wrote"""
        async with aiofiles.open(self.path(relative), 'rb') as f:
            payload = await f.read()
        return self._record(relative, stage, payload)

    async def read_bytes(self, relative: str, producer: str) -> bytes:
        async with aiofiles.open(self.require(relative, producer), 'rb') as f:
            return await f.read()

    async def read_json(self, relative: str, producer: str) -> Any:
        async with aiofiles.open(self.require(relative, producer), 'r') as f:
            return json.loads(await f.read())

    def _record(self, relative: str, stage: str, payload: bytes) -> ArtifactRecord:
        record = ArtifactRecord(path=relative, stage=stage, bytes=len(payload),
                                sha256=hashlib.sha256(payload).hexdigest())
        self.records[relative] = record
        self.error_handler.log_artifact(relative, record.sha256)
        return record

    def digest(self, relative: str) -> Optional[str]:
        record = self.records.get(relative)
        return record.sha256 if record else None

    def artifacts(self, stage: Optional[str] = None) -> List[ArtifactRecord]:
        return [r for _, r in sorted(self.records.items()) if stage is None or r.stage == stage]

    def record_failure(self, stage: str, exception: BaseException) -> None:
        self.status = "failed"
        self.failure = {"stage": stage, "error": type(exception).__name__, "message": str(exception)}

    async def save_manifest(self, status: Optional[str] = None) -> Path:
        if status is not None:
            self.status = status
        manifest = {
            "schema": MANIFEST_SCHEMA,
            "status": self.status,
            "failure": self.failure,
            "artifacts": [asdict(record) for record in self.artifacts()],
        }
        path = self.out_dir / MANIFEST_NAME
        async with aiofiles.open(path, 'w') as f:
            await f.write(_dumps(manifest))
        return path
