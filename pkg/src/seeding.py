import hashlib


def derive_seed(master: int, stage: str) -> int:
    """(master + first 8 hex digits of sha256(stage)) mod 2^32."""
    return (int(master) + int(hashlib.sha256(stage.encode("utf-8")).hexdigest()[:8], 16)) % (2 ** 32)
