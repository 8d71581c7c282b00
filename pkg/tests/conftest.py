import numpy as np
import pytest
from PIL import Image

from dermx.dataset import LesionRecord
from dermx.labels import CLASS_NAMES, ClassLabel
from dermx.models import ModelConfig, build_classifier

#: canonical HAM10000 class frequencies (AKIEC..VASC) and the published
#: per-class train/validation/test counts they must split into
CANONICAL_TOTALS = {
    "AKIEC": 327, "BCC": 514, "BKL": 1099, "DF": 115,
    "MEL": 1113, "NV": 6705, "VASC": 142,
}
PUBLISHED_SPLIT = {
    "AKIEC": (264, 30, 33),
    "BCC": (417, 46, 51),
    "BKL": (890, 99, 110),
    "DF": (93, 10, 12),
    "MEL": (902, 100, 111),
    "NV": (5430, 604, 671),
    "VASC": (115, 13, 14),
}

METADATA_HEADER = "lesion_id,image_id,dx,dx_type,age,sex,localization"


def make_metadata_csv(totals: dict[str, int]) -> str:
    """Synthesize a metadata CSV with the given per-class record counts."""
    lines = [METADATA_HEADER]
    counter = 0
    for name, total in totals.items():
        dx = name.lower()
        for _ in range(total):
            counter += 1
            lines.append(
                f"HAM_{counter:07d},ISIC_{counter:07d},{dx},histo,45.0,male,back"
            )
    return "\n".join(lines) + "\n"


def make_records(totals: dict[str, int], image_root="images") -> list[LesionRecord]:
    from dermx.dataset import parse_metadata

    return parse_metadata(make_metadata_csv(totals), image_root)


def class_colored_images(n_per_class: int, side: int, seed: int = 0,
                         num_classes: int = 7, noise: float = 0.05):
    """Synthetic batch where each class has a distinctive mean color."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for c in range(num_classes):
        base = np.zeros((side, side, 3), dtype=np.float64)
        base[..., c % 3] = 0.25 + 0.6 * (c // 3) / 2.0
        base[..., (c + 1) % 3] = 0.15 + 0.1 * c / num_classes
        for _ in range(n_per_class):
            img = np.clip(base + rng.normal(0, noise, base.shape), 0, 1)
            images.append(img.astype(np.float32))
            labels.append(c)
    return np.stack(images), np.asarray(labels, dtype=np.int64)


def save_rgb(path, array_uint8):
    Image.fromarray(array_uint8, mode="RGB").save(path)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def toy_handle():
    """Small fixed-weight model for read-only inference/XAI tests."""
    config = ModelConfig(backbone="toy_cnn", input_side=32, epochs=1,
                         batch_size=8, seed=7)
    return build_classifier(config, weights="random")


@pytest.fixture(scope="session")
def toy_handle_double():
    """Float64 twin for oracle comparisons, where float32 batch-order noise
    would drown the 1e-6 tolerances."""
    config = ModelConfig(backbone="toy_cnn", input_side=32, epochs=1,
                         batch_size=8, seed=7)
    return build_classifier(config, weights="random").to_double()


@pytest.fixture()
def fresh_toy_handle():
    """Function-scoped model safe to train/mutate."""
    config = ModelConfig(backbone="toy_cnn", input_side=32, epochs=2,
                         batch_size=8, seed=11)
    return build_classifier(config, weights="random")


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """A miniature on-disk dataset: metadata.csv + images/ with real JPEG files."""
    root = tmp_path_factory.mktemp("tiny_ham")
    image_dir = root / "images"
    image_dir.mkdir()
    rules = np.random.default_rng(42)
    totals = {"AKIEC": 4, "BCC": 4, "BKL": 5, "DF": 4, "MEL": 4, "NV": 6, "VASC": 4}
    lines = [METADATA_HEADER]
    counter = 0
    for name, total in totals.items():
        c = CLASS_NAMES.index(name)
        for _ in range(total):
            counter += 1
            image_id = f"ISIC_{counter:07d}"
            lines.append(f"HAM_{counter:07d},{image_id},{name.lower()},histo,50.0,female,face")
            base = np.full((45, 60, 3), 30 * (c + 1), dtype=np.uint8)
            noise = rules.integers(0, 25, size=base.shape, dtype=np.uint8)
            save_rgb(image_dir / f"{image_id}.jpg", base + noise)
    (root / "metadata.csv").write_text("\n".join(lines) + "\n")
    return root
