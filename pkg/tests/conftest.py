import pytest
import torch

from refground.geometry import BoxXYWH, GridSpec, center_cell, encode_box
from refground.grounder import GroundingNet

MICRO = dict(image_size=12, embed_dim=6, hidden=4, widths=(4, 8), attr_hidden=8)
MICRO_VOCAB = 12
MICRO_ATTR = 5
MICRO_TMAX = 5


def micro_model(seed: int = 0, **overrides) -> GroundingNet:
    torch.manual_seed(seed)
    kw = dict(MICRO, **overrides)
    return GroundingNet(MICRO_VOCAB, MICRO_ATTR, **kw).double()


def micro_batch(seed: int = 0, boxes=None, attr_rows=None) -> dict[str, torch.Tensor]:
    """Two samples on a 12x12 image with a 3x3 grid."""
    g = torch.Generator().manual_seed(seed)
    grid = GridSpec.from_image(12, 3)
    boxes = boxes or [BoxXYWH(1, 2, 5, 6), BoxXYWH(3, 3, 6, 6)]
    attr_rows = attr_rows or [[1, 0, 1, 0, 0], [0, 0, 0, 0, 0]]
    cells = [center_cell(b, grid) for b in boxes]
    ids = torch.randint(2, MICRO_VOCAB, (len(boxes), MICRO_TMAX), generator=g)
    ids[0, 3:] = 0
    return {
        "images": torch.rand(len(boxes), 3, 12, 12, generator=g, dtype=torch.float64),
        "ids": ids,
        "boxes": torch.tensor([b.to_list() for b in boxes], dtype=torch.float64),
        "targets": torch.tensor([encode_box(b, grid) for b in boxes], dtype=torch.float64),
        "centers": torch.tensor([r * 3 + c for c, r in cells]),
        "attr_labels": torch.tensor(attr_rows, dtype=torch.float64),
    }


@pytest.fixture
def micro():
    return micro_model()


TINY_SCENES = dict(canvas=32, small=(6, 8), large=(10, 12), max_objects=3)


def tiny_setup(seed: int = 0, n_train: int = 12, n_val: int = 4):
    """A few 32 px scenes, their encodings, and a small float32 model (S=8)."""
    from refground.data import SceneConfig, extract_attribute_vocab, generate_dataset
    from refground.text import Vocabulary
    from refground.training import encode_samples

    manifest = generate_dataset(seed, SceneConfig(**TINY_SCENES), {"train": n_train, "val": n_val, "test": 0})
    train, val = manifest.split("train"), manifest.split("val")
    vocab = Vocabulary.build(s.expression for s in train)
    attr_vocab = extract_attribute_vocab(train)
    torch.manual_seed(seed)
    model = GroundingNet(len(vocab), len(attr_vocab), image_size=32, embed_dim=6, hidden=4, widths=(4, 8))
    grid = model.grid
    return model, encode_samples(train, vocab, attr_vocab, grid), encode_samples(val, vocab, attr_vocab, grid), attr_vocab


# -- acceptance summary --------------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record_acceptance(criterion: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (title, ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[criterion]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {criterion}. {title}: {detail}")
