import pytest

from dermx.errors import MetadataError
from dermx.labels import CLASS_NAMES, CLASS_ORDER, NUM_CLASSES, ClassLabel


def test_seven_classes_in_alphabetical_order():
    assert NUM_CLASSES == 7
    assert CLASS_NAMES == ("AKIEC", "BCC", "BKL", "DF", "MEL", "NV", "VASC")
    assert [int(label) for label in CLASS_ORDER] == list(range(7))


def test_code_index_bijection():
    for label in ClassLabel:
        assert ClassLabel.from_index(int(label)) is label
        assert ClassLabel.from_dx(label.dx) is label


@pytest.mark.parametrize("dx,expected", [
    ("akiec", ClassLabel.AKIEC), ("bcc", ClassLabel.BCC), ("bkl", ClassLabel.BKL),
    ("df", ClassLabel.DF), ("mel", ClassLabel.MEL), ("nv", ClassLabel.NV),
    ("vasc", ClassLabel.VASC),
])
def test_dx_mapping(dx, expected):
    assert ClassLabel.from_dx(dx) is expected
    assert ClassLabel.from_dx(dx.upper()) is expected


def test_unknown_dx_rejected():
    with pytest.raises(MetadataError, match="unknown diagnosis code 'xyz'"):
        ClassLabel.from_dx("xyz")
