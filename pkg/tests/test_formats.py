import math
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ibau import formats
from ibau import tensor_core as tc
from ibau.formats import FormatError
from ibau.model import MlpSpec, Params, init_params
from ibau.poison import PoisonEntry, PoisonPlan, TriggerSpec, patch_trigger


def _params(dims=(5, 4, 3), seed=0):
    return init_params(MlpSpec(dims), tc.make_rng(seed))


def test_checkpoint_layout():
    p = _params((2, 3, 2))
    raw = formats.checkpoint_bytes(p)
    assert raw[:4] == b"IBAU"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 4
    name_len = int.from_bytes(raw[12:16], "little")
    assert raw[16:16 + name_len] == b"W0"
    # W0: rank 2, dims 2 x 3, then 6 LE doubles
    pos = 16 + name_len
    assert int.from_bytes(raw[pos:pos + 4], "little") == 2
    assert np.frombuffer(raw[pos + 4:pos + 20], "<u8").tolist() == [2, 3]
    np.testing.assert_array_equal(np.frombuffer(raw[pos + 20:pos + 68], "<f8"), p.tensors["W0"].ravel())


def test_checkpoint_file_round_trip(tmp_path):
    p = _params()
    path = tmp_path / "m.ckpt"
    formats.save_checkpoint(p, path)
    q = formats.load_checkpoint(path)
    assert q.bitwise_equal(p)
    assert q.spec.layer_dims == (5, 4, 3)
    assert formats.load_checkpoint(path, "sigmoid").spec.activation == "sigmoid"
    with pytest.raises(FileNotFoundError):
        formats.load_checkpoint(tmp_path / "missing.ckpt")


@settings(max_examples=40, deadline=None)
@given(dims=st.lists(st.integers(1, 6), min_size=2, max_size=4), classes=st.integers(2, 5), data=st.data())
def test_checkpoint_round_trip_is_bitwise(dims, classes, data):
    dims = dims + [classes]
    spec = MlpSpec(tuple(dims))
    tensors = {}
    for i in range(spec.num_layers):
        shape_w, shape_b = (dims[i], dims[i + 1]), (dims[i + 1],)
        elems = st.floats(allow_nan=False, width=64)
        tensors[f"W{i}"] = data.draw(hnp.arrays(np.float64, shape_w, elements=elems))
        tensors[f"b{i}"] = data.draw(hnp.arrays(np.float64, shape_b, elements=elems))
    p = Params(spec, tensors)
    q = formats.params_from_bytes(formats.checkpoint_bytes(p))
    assert q.bitwise_equal(p)


def test_checkpoint_corruption():
    raw = formats.checkpoint_bytes(_params())
    with pytest.raises(FormatError, match="bad magic"):
        formats.params_from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="version"):
        formats.params_from_bytes(raw[:4] + (7).to_bytes(4, "little") + raw[8:])
    with pytest.raises(FormatError, match="truncated"):
        formats.params_from_bytes(raw[:-3])
    with pytest.raises(FormatError, match="trailing"):
        formats.params_from_bytes(raw + b"\0")
    with pytest.raises(FormatError, match="truncated"):
        formats.params_from_bytes(b"IB")


def test_plan_round_trip(tmp_path):
    trig = TriggerSpec("blend", np.linspace(0, 1, 7), np.full(7, 1 / 3), 0.1)
    plan = PoisonPlan("multi_trigger", [PoisonEntry(trig, 2), PoisonEntry(patch_trigger(7, [0]), 1)], 0.15, 4)
    path = tmp_path / "t.txt"
    formats.save_plan(plan, path)
    back = formats.load_plan(path)
    assert back.mode == plan.mode and back.seed == 4 and back.poison_ratio == 0.15
    for a, b in zip(back.entries, plan.entries):
        assert a.target == b.target and a.trigger.kind == b.trigger.kind
        assert a.trigger.blend_alpha == b.trigger.blend_alpha
        assert a.trigger.mask.tobytes() == b.trigger.mask.tobytes()
        assert a.trigger.pattern.tobytes() == b.trigger.pattern.tobytes()


def test_plan_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        formats.load_plan(tmp_path / "none.txt")
    with pytest.raises(FormatError, match="missing field"):
        formats.parse_plan("mode = single_target\nentries = 1\n")
    with pytest.raises(FormatError, match="key = value"):
        formats.parse_plan("garbage")


def test_results_csv_and_json(tmp_path):
    rec = dict(round=0, delta_norm=1.5, h_before=0.1, h_after=2.0, direct_norm=3.0, indirect_norm=0.5,
               residual_norm=1e-3, fallback_used=False, wall_time=0.01,
               eval={"acc": 0.9, "asr": 0.1, "asr_per_entry": [0.1, 0.2]})
    cols = formats.round_columns(2)
    assert cols[:len(formats.ROUND_COLUMNS)] == list(formats.ROUND_COLUMNS)
    assert cols[-2:] == ["asr_0", "asr_1"]
    formats.write_csv(tmp_path / "r.csv", cols, formats.round_rows([rec], 2))
    header, rows = formats.read_csv(tmp_path / "r.csv")
    assert header == cols and float(rows[0][cols.index("asr_1")]) == 0.2
    formats.write_json(tmp_path / "r.json", {"rounds": [rec], "bad": float("nan")})
    doc = formats.read_json(tmp_path / "r.json")
    assert doc["format_version"] == formats.RESULTS_VERSION and doc["bad"] is None
    assert doc["rounds"][0]["eval"]["asr_per_entry"] == [0.1, 0.2]


@settings(max_examples=100, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_csv_floats_are_exact(x):
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "x.csv"
        formats.write_csv(path, ["x"], [[x]])
        _, rows = formats.read_csv(path)
    assert float(rows[0][0]) == x and math.copysign(1, float(rows[0][0])) == math.copysign(1, x)
