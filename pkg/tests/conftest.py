"""Shared fixtures: canonical CIFAR-100 label metadata (kept independent of
the loader under test) and small dataset/model builders."""

import numpy as np
import pytest

from engraf.model import EngrafConfig
from engraf.taxonomy import generate_synthetic_taxonomy

# CIFAR-100 fine class names in label order (alphabetical), from the
# dataset's own metadata; used to synthesize loader fixtures and as the
# oracle for parent lookups.
CIFAR100_FINE_NAMES = [
    "apple", "aquarium_fish", "baby", "bear", "beaver", "bed", "bee",
    "beetle", "bicycle", "bottle", "bowl", "boy", "bridge", "bus",
    "butterfly", "camel", "can", "castle", "caterpillar", "cattle", "chair",
    "chimpanzee", "clock", "cloud", "cockroach", "couch", "crab",
    "crocodile", "cup", "dinosaur", "dolphin", "elephant", "flatfish",
    "forest", "fox", "girl", "hamster", "house", "kangaroo", "keyboard",
    "lamp", "lawn_mower", "leopard", "lion", "lizard", "lobster", "man",
    "maple_tree", "motorcycle", "mountain", "mouse", "mushroom", "oak_tree",
    "orange", "orchid", "otter", "palm_tree", "pear", "pickup_truck",
    "pine_tree", "plain", "plate", "poppy", "porcupine", "possum", "rabbit",
    "raccoon", "ray", "road", "rocket", "rose", "sea", "seal", "shark",
    "shrew", "skunk", "skyscraper", "snail", "snake", "spider", "squirrel",
    "streetcar", "sunflower", "sweet_pepper", "table", "tank", "telephone",
    "television", "tiger", "tractor", "train", "trout", "tulip", "turtle",
    "wardrobe", "whale", "willow_tree", "wolf", "woman", "worm",
]

CIFAR100_COARSE_NAMES = [
    "aquatic_mammals", "fish", "flowers", "food_containers",
    "fruit_and_vegetables", "household_electrical_devices",
    "household_furniture", "insects", "large_carnivores",
    "large_man-made_outdoor_things", "large_natural_outdoor_scenes",
    "large_omnivores_and_herbivores", "medium_mammals",
    "non-insect_invertebrates", "people", "reptiles", "small_mammals",
    "trees", "vehicles_1", "vehicles_2",
]

# fine id -> coarse id, from the dataset metadata (each coarse class has
# exactly five fine children)
CIFAR100_FINE_TO_COARSE = [
    4, 1, 14, 8, 0, 6, 7, 7, 18, 3,
    3, 14, 9, 18, 7, 11, 3, 9, 7, 11,
    6, 11, 5, 10, 7, 6, 13, 15, 3, 15,
    0, 11, 1, 10, 12, 14, 16, 9, 11, 5,
    5, 19, 8, 8, 15, 13, 14, 17, 18, 10,
    16, 4, 17, 4, 2, 0, 17, 4, 18, 17,
    10, 3, 2, 12, 12, 16, 12, 1, 9, 19,
    2, 10, 0, 1, 16, 12, 9, 13, 15, 13,
    16, 19, 2, 4, 6, 19, 5, 5, 8, 19,
    18, 1, 2, 15, 6, 0, 17, 8, 14, 13,
]

assert len(CIFAR100_FINE_NAMES) == 100
assert len(CIFAR100_COARSE_NAMES) == 20
assert len(CIFAR100_FINE_TO_COARSE) == 100
assert all(CIFAR100_FINE_TO_COARSE.count(c) == 5 for c in range(20))


def make_cifar_records(n: int, seed: int) -> bytes:
    """Random-pixel records in the 3074-byte layout with consistent labels.

    Fine labels cycle 0..99 so every class appears when n >= 100.
    """
    rng = np.random.default_rng(seed)
    recs = np.empty((n, 3074), dtype=np.uint8)
    fine = np.arange(n, dtype=np.int64) % 100
    rng.shuffle(fine)
    coarse = np.asarray(CIFAR100_FINE_TO_COARSE, dtype=np.int64)[fine]
    recs[:, 0] = coarse.astype(np.uint8)
    recs[:, 1] = fine.astype(np.uint8)
    recs[:, 2:] = rng.integers(0, 256, size=(n, 3072), dtype=np.uint8)
    return recs.tobytes()


def build_cifar_dir(directory, n_train: int = 500, n_test: int = 200,
                    seed: int = 0):
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "train.bin").write_bytes(make_cifar_records(n_train, seed))
    (directory / "test.bin").write_bytes(make_cifar_records(n_test, seed + 1))
    (directory / "fine_label_names.txt").write_text(
        "\n".join(CIFAR100_FINE_NAMES) + "\n")
    (directory / "coarse_label_names.txt").write_text(
        "\n".join(CIFAR100_COARSE_NAMES) + "\n")
    return directory


@pytest.fixture
def cifar_dir(tmp_path):
    return build_cifar_dir(tmp_path / "cifar", n_train=500, n_test=200)


@pytest.fixture
def tiny_tax():
    # 4 fine classes in 2 coarse blocks
    return generate_synthetic_taxonomy(4, 2)


def micro_engraf_config(num_fine: int = 4, num_coarse: int = 2,
                        variant: str = "engraf", graft_size: int = 2,
                        input_size: int = 16,
                        widths=(8, 16)) -> EngrafConfig:
    """Small but real model; trains in seconds on CPU."""
    return EngrafConfig(
        variant=variant, num_fine=num_fine, num_coarse=num_coarse,
        backbone_depth=18, graft_size=graft_size, input_size=input_size,
        stem="cifar", stage_widths=tuple(widths),
        blocks_per_stage=(1,) * len(widths),
    )
