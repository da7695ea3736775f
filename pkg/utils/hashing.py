import hashlib
import json


def config_hash(document: dict) -> str:
    canonical = json.dumps(document, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def artifact_name(stem: str, seed: int, digest: str, ext: str) -> str:
    return f"{stem}-s{seed}-{digest[:10]}.{ext}"
