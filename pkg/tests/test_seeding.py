import hashlib

from src import attacks, config_loader
from src.seeding import derive_seed


def test_derive_seed():
    offset = int(hashlib.sha256(b"corpus").hexdigest()[:8], 16)
    assert derive_seed(0, "corpus") == offset
    assert derive_seed(2 ** 32 - 1, "corpus") == (offset - 1) % 2 ** 32
    assert derive_seed(5, "train") != derive_seed(5, "perturb")


def test_config_and_attacks_share_one_seed_derivation():
    assert attacks.derive_seed is derive_seed
    assert config_loader.derive_seed is derive_seed
