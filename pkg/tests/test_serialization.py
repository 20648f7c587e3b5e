import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from hcrn import serialization
from hcrn.serialization import FormatError

arrays = st.dictionaries(
    st.text(st.characters(codec="utf-8", exclude_categories=("Cs",)), min_size=1, max_size=12),
    st.one_of(
        hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)),
        hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)),
        hnp.arrays(np.int64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)),
    ),
    max_size=5,
)


@settings(max_examples=60, deadline=None)
@given(arrays)
def test_round_trip_is_exact(data):
    blob = serialization.dumps(data)
    back = serialization.loads(blob)
    assert list(back) == list(data)
    for k in data:
        assert back[k].dtype == data[k].dtype and back[k].shape == data[k].shape
        np.testing.assert_array_equal(back[k], data[k])
    assert serialization.dumps(back) == blob


def test_file_round_trip(tmp_path):
    data = {"w": np.arange(6.0).reshape(2, 3)}
    serialization.save(tmp_path / "x.tdmp", data)
    np.testing.assert_array_equal(serialization.load(tmp_path / "x.tdmp")["w"], data["w"])


@pytest.mark.parametrize(
    "mutate",
    [
        lambda b: b"XXXXXXXX" + b[8:],
        lambda b: b[:8] + (99).to_bytes(4, "little") + b[12:],
        lambda b: b[:-3],
        lambda b: b + b"\0",
    ],
    ids=["magic", "version", "truncated", "trailing"],
)
def test_corrupt_blobs_rejected(mutate):
    blob = serialization.dumps({"a": np.ones((2, 2))})
    with pytest.raises(FormatError):
        serialization.loads(mutate(blob))
