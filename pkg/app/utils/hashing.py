"""
Content hashing utility functions
"""
import hashlib
import json
from typing import Any, Iterable, Mapping


def canonical_json(data: Any) -> bytes:
    """Serialize with sorted keys and no whitespace so equal configs hash equally"""
    return json.dumps(data, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def config_hash(config: Mapping[str, Any], length: int = 12) -> str:
    """Short sha256 of a resolved experiment config (used in artifact names)"""
    return hashlib.sha256(canonical_json(config)).hexdigest()[:length]


def seed_list_hash(seeds: Iterable[int]) -> str:
    """sha256 of the comma-joined decimal seed list"""
    payload = ",".join(str(int(s)) for s in seeds).encode("ascii")
    return hashlib.sha256(payload).hexdigest()


def git_blob_hash(content: bytes) -> str:
    """Object id git assigns to a blob with this content"""
    header = f"blob {len(content)}\0".encode("ascii")
    return hashlib.sha1(header + content).hexdigest()


def corpus_hash(files: Mapping[str, bytes]) -> str:
    """Hash over sorted (name, blob id) pairs of a driver corpus"""
    digest = hashlib.sha1()
    for name in sorted(files):
        digest.update(f"{git_blob_hash(files[name])} {name}\n".encode("utf-8"))
    return digest.hexdigest()
