"""
Artifact Store

Content-addressed storage of task outputs and logs. Every artifact is
identified by the SHA-256 digest of its content: the bytes of a file, or the
canonical manifest of a directory tree (every file listed by its relative
posix path, in sorted order, with the id of its content).

Layout on disk::

    store/
        store.json              digest function and layout version
        objects/ab/cdef...      file content
        manifests/ab/cdef...    directory manifests
        tmp/                    staging area for atomic writes

Identical content is stored once; writes are staged in ``tmp/`` and moved into
place with an atomic rename, so a partially written artifact is never visible.
"""
import hashlib
import json
import logging
import os
import shutil
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple, Union

from flow_as_code.exceptions import (
    ArtifactNotFound, IntegrityError, StoreError, UnresolvedPort
)

__all__ = ['ArtifactStore', 'Resolution', 'resolve_port', 'EMPTY_DIGEST']

log = logging.getLogger(__name__)

DIGEST = 'sha256'
EMPTY_DIGEST = hashlib.sha256(b'').hexdigest()
_CHUNK = 1 << 20
STALE_TMP = 24 * 3600


def _canonical(entries: List[Tuple[str, str]]) -> bytes:
    return json.dumps(
        {'entries': sorted(entries)}, separators=(',', ':')
    ).encode('utf8')


class ArtifactStore:
    """
    Artifact store

    :param root: folder which holds (or will hold) the store. It is created on
        first use.
    """

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root).absolute()
        self.objects = Path(self.root, 'objects')
        self.manifests = Path(self.root, 'manifests')
        self.tmp = Path(self.root, 'tmp')
        for x in (self.objects, self.manifests, self.tmp):
            x.mkdir(parents=True, exist_ok=True)

        meta = Path(self.root, 'store.json')
        if meta.is_file():
            digest = json.loads(meta.read_text()).get('digest')
            if digest != DIGEST:
                raise StoreError(f"store at {self.root} uses digest '{digest}', expected '{DIGEST}'")
        else:
            self._write_atomic(meta, json.dumps(
                {'digest': DIGEST, 'layout': 'objects/<2 hex>/<62 hex>'}, indent=2
            ).encode('utf8'))

    def _object_path(self, artifact: str) -> Path:
        return Path(self.objects, artifact[:2], artifact[2:])

    def _manifest_path(self, artifact: str) -> Path:
        return Path(self.manifests, artifact[:2], artifact[2:])

    def _write_atomic(self, dest: Path, data: bytes):
        with tempfile.NamedTemporaryFile(dir=self.tmp, delete=False) as f:
            f.write(data)
        dest.parent.mkdir(parents=True, exist_ok=True)
        os.replace(f.name, dest)

    def exists(self, artifact: str) -> bool:
        return self._object_path(artifact).is_file() or self._manifest_path(artifact).is_file()

    def is_tree(self, artifact: str) -> bool:
        return self._manifest_path(artifact).is_file()

    def put_bytes(self, data: bytes) -> str:
        artifact = hashlib.sha256(data).hexdigest()
        p = self._object_path(artifact)
        if not p.is_file():
            self._write_atomic(p, data)
        return artifact

    def _put_file(self, path: Path) -> str:
        h = hashlib.sha256()
        with tempfile.NamedTemporaryFile(dir=self.tmp, delete=False) as out, path.open('rb') as src:
            for chunk in iter(lambda: src.read(_CHUNK), b''):
                h.update(chunk)
                out.write(chunk)
        artifact = h.hexdigest()
        p = self._object_path(artifact)
        if p.is_file():
            os.unlink(out.name)
        else:
            p.parent.mkdir(parents=True, exist_ok=True)
            os.replace(out.name, p)
        return artifact

    def _put_manifest(self, entries: List[Tuple[str, str]]) -> str:
        data = _canonical(entries)
        artifact = hashlib.sha256(data).hexdigest()
        p = self._manifest_path(artifact)
        if not p.is_file():
            self._write_atomic(p, data)
        return artifact

    def put_artifact(self, payload: Union[str, Path]) -> str:
        """
        Store artifact

        Ingest a file or a directory tree and return its id. Storing identical
        content again returns the same id and writes nothing.

        :param payload: path of the file or directory to ingest
        :raises StoreError: the payload is neither a file nor a directory
        """
        payload = Path(payload)
        if payload.is_file():
            return self._put_file(payload)
        if payload.is_dir():
            entries = [
                (x.relative_to(payload).as_posix(), self._put_file(x))
                for x in payload.rglob('*') if x.is_file()
            ]
            return self._put_manifest(entries)
        raise StoreError(f'cannot store {payload}: not a file or directory')

    def put_tree(self, entries: Dict[str, str]) -> str:
        """
        Store a tree built from existing artifacts, one entry per name. Tree
        entries are flattened, so the id equals the id of the same layout
        ingested from disk.
        """
        flat = []
        for name, artifact in entries.items():
            if self.is_tree(artifact):
                flat += [(f'{name}/{k}', v) for k, v in self._entries(artifact)]
            else:
                flat.append((name, artifact))
        return self._put_manifest(flat)

    def _read_object(self, artifact: str) -> bytes:
        p = self._object_path(artifact)
        if not p.is_file():
            raise ArtifactNotFound(f'artifact {artifact} not found')
        data = p.read_bytes()
        if hashlib.sha256(data).hexdigest() != artifact:
            raise IntegrityError(f'content of artifact {artifact} does not match its id')
        return data

    def _entries(self, artifact: str) -> List[Tuple[str, str]]:
        p = self._manifest_path(artifact)
        data = p.read_bytes()
        if hashlib.sha256(data).hexdigest() != artifact:
            raise IntegrityError(f'manifest of artifact {artifact} does not match its id')
        return [tuple(x) for x in json.loads(data)['entries']]

    def get_artifact(self, artifact: str) -> Union[bytes, Dict[str, bytes]]:
        """
        Read artifact

        Return the bytes of a file artifact, or a mapping of relative path to
        bytes for a tree. Content is verified against the id on every read.

        :raises ArtifactNotFound: no artifact with this id
        :raises IntegrityError: stored content does not hash back to the id
        """
        if self.is_tree(artifact):
            return {k: self._read_object(v) for k, v in self._entries(artifact)}
        return self._read_object(artifact)

    def materialize(self, artifact: str, dest: Union[str, Path]) -> Path:
        """
        Copy an artifact out of the store to ``dest``. The copy is private to
        the caller; changing it never affects the stored artifact.
        """
        dest = Path(dest)
        content = self.get_artifact(artifact)
        if isinstance(content, dict):
            dest.mkdir(parents=True, exist_ok=True)
            for k, v in content.items():
                p = Path(dest, k)
                p.parent.mkdir(parents=True, exist_ok=True)
                p.write_bytes(v)
        else:
            dest.parent.mkdir(parents=True, exist_ok=True)
            dest.write_bytes(content)
        return dest

    def size(self) -> int:
        """Total bytes held in objects and manifests"""
        return sum(
            x.stat().st_size
            for folder in (self.objects, self.manifests)
            for x in folder.rglob('*') if x.is_file()
        )

    def clear_tmp(self, older_than: float = STALE_TMP) -> int:
        """
        Remove staging files left behind by interrupted writes. Other runs may
        share the store, so only files untouched for ``older_than`` seconds go.

        :return: number of files removed
        """
        cutoff = time.time() - older_than
        removed = 0
        for x in self.tmp.iterdir():
            try:
                if x.stat().st_mtime >= cutoff:
                    continue
                if x.is_dir():
                    shutil.rmtree(x)
                else:
                    x.unlink()
                removed += 1
            except FileNotFoundError:
                continue
        if removed:
            log.info(f"removed {removed} stale file(s) from {self.tmp}")
        return removed


@dataclass(frozen=True)
class Resolution:
    """Artifact feeding an input port, with the fingerprints of its producers"""
    artifact: str
    fingerprints: Tuple[str, ...]
    producers: Tuple[str, ...]


def resolve_port(job: str, port: str, journal, iteration, store: ArtifactStore) -> Resolution:
    """
    Resolve output port

    Find the artifact an output port provides to a consumer running at
    ``iteration``. Loops shared by producer and consumer select the same index;
    for a loop that encloses the producer only, the final iteration is used.
    When the producing job ran several tasks (several activities, or a
    campaign), the port resolves to a tree with one entry per task.

    :param job: producing job
    :param port: output port of the producing job
    :param journal: :class:`RunJournal` of the run
    :param iteration: iteration vector of the consumer, outermost loop first
    :raises UnresolvedPort: the producer has not finished
    """
    context = dict(iteration)
    candidates = [
        x for x in journal.successful(job)
        if all(context[k] == i for k, i in x.iteration if k in context)
    ]
    if not candidates:
        raise UnresolvedPort(f"no finished task of job '{job}' provides port '{port}'")

    latest = max(candidates, key=lambda x: x.seq)
    chosen = sorted(
        (x for x in candidates if x.iteration == latest.iteration), key=lambda x: x.task
    )
    for x in chosen:
        if port not in x.outputs:
            raise UnresolvedPort(f"task '{x.task}' did not record output '{port}'")

    if len(chosen) == 1:
        artifact = chosen[0].outputs[port]
    else:
        artifact = store.put_tree({x.label: x.outputs[port] for x in chosen})
    log.debug(f'resolved {job}.{port} -> {artifact[:12]} from {[x.task for x in chosen]}')
    return Resolution(
        artifact=artifact,
        fingerprints=tuple(x.fingerprint for x in chosen),
        producers=tuple(x.task for x in chosen)
    )
