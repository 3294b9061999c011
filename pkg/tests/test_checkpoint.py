import json

import numpy as np
import pytest

from ffnfusion import (
    CorruptCalibrationError,
    CorruptCheckpointError,
    FusionPlan,
    InvalidPlanError,
    ParallelPlan,
    generate_calibration,
    load_calibration,
    load_model,
    model_forward,
    save_calibration,
    save_model,
)
from ffnfusion.checkpoint import (
    deserialize_model,
    format_csv,
    parse_calibration,
    parse_plan,
    read_csv,
    serialize_model,
)
from ffnfusion.rng import SplitMix64
from helpers import make_model, tensor_region

SPECS = [(True, 6), (False, 5), (True, 0), (False, 0), (True, 3)]


def flat_weights(model):
    parts = []
    for b in model.blocks:
        if b.attn is not None:
            parts += [b.norm1.s, b.attn.wq, b.attn.wk, b.attn.wv, b.attn.wo]
        if b.ffn is not None:
            parts += [b.norm2.s, b.ffn.w1, b.ffn.w2, b.ffn.w3]
    return np.concatenate([np.ravel(p) for p in parts])


class TestModelRoundTrip:
    def test_bitwise(self, tmp_path):
        model = make_model(SPECS, seed=11)
        path = tmp_path / "m.ffnf"
        save_model(model, path)
        back = load_model(path)
        assert back.config == model.config
        assert back.stages == model.stages
        assert flat_weights(back).tobytes() == flat_weights(model).tobytes()
        assert serialize_model(back) == path.read_bytes()

    def test_stages_survive(self):
        model = make_model(SPECS, seed=1)
        model.stages = [[0], [1, 2], [3, 4]]
        assert deserialize_model(serialize_model(model)).stages == [[0], [1, 2], [3, 4]]

    def test_header_layout(self):
        data = serialize_model(make_model(SPECS, seed=1))
        assert data[:4] == b"FFNF"
        assert int.from_bytes(data[4:8], "little") == 1
        length = int.from_bytes(data[8:16], "little")
        doc = json.loads(data[16 : 16 + length])
        assert doc["d_e"] == 8 and doc["dtype"] == "f64"
        assert [b["ffn_hidden"] for b in doc["blocks"]] == [6, 5, 0, 0, 3]

    def test_f32_narrowing(self, rng):
        model = make_model(SPECS, seed=2)
        narrow = deserialize_model(serialize_model(model, dtype="f32"))
        assert narrow.config.dtype == "f32"
        a, b = flat_weights(model), flat_weights(narrow).astype(np.float64)
        assert np.all(np.abs(a - b) <= np.abs(a) * 2.0**-24)
        X = rng.standard_normal((3, 8))
        assert np.allclose(model_forward(narrow, X)[0], model_forward(model, X)[0], rtol=1e-4, atol=1e-5)

    def test_f32_round_trip_is_bitwise(self):
        model = make_model(SPECS, seed=2, dtype="f32")
        data = serialize_model(model)
        assert serialize_model(deserialize_model(data)) == data

    def test_byte_flip_changes_one_weight(self):
        model = make_model(SPECS, seed=3)
        data = bytearray(serialize_model(model))
        offset = len(data) - len(tensor_region(bytes(data))) + 8 * 17 + 3
        data[offset] ^= 0x40
        changed = flat_weights(deserialize_model(bytes(data))) != flat_weights(model)
        assert np.flatnonzero(changed).tolist() == [17]


class TestCorruptCheckpoints:
    @pytest.fixture
    def data(self):
        return serialize_model(make_model(SPECS, seed=4))

    def test_truncated(self, data):
        for cut in (0, 3, 15, 20, len(data) - 1):
            with pytest.raises(CorruptCheckpointError):
                deserialize_model(data[:cut])

    def test_trailing_bytes(self, data):
        with pytest.raises(CorruptCheckpointError):
            deserialize_model(data + b"\0")

    def test_bad_magic(self, data):
        with pytest.raises(CorruptCheckpointError):
            deserialize_model(b"FFNX" + data[4:])

    def test_bad_version(self, data):
        with pytest.raises(CorruptCheckpointError):
            deserialize_model(data[:4] + (2).to_bytes(4, "little") + data[8:])

    def test_garbage_header(self, data):
        length = int.from_bytes(data[8:16], "little")
        bad = data[:16] + b"{" * length + data[16 + length :]
        with pytest.raises(CorruptCheckpointError):
            deserialize_model(bad)

    def test_bad_stages(self):
        model = make_model([(True, 2)] * 3)
        model.stages = [[0], [1], [2]]
        data = serialize_model(model)
        bad = data.replace(b'"stages":[[0],[1],[2]]', b'"stages":[[0],[2],[1]]')
        assert bad != data
        with pytest.raises(CorruptCheckpointError):
            deserialize_model(bad)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_model(tmp_path / "absent.ffnf")


class TestCalibration:
    def test_deterministic(self):
        a = generate_calibration(5, 3, 4, 6)
        b = generate_calibration(5, 3, 4, 6)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
        assert all(np.all((x >= -1) & (x < 1)) for x in a)

    def test_stream_values(self):
        (X,) = generate_calibration(9, 1, 2, 3)
        ref = SplitMix64(9)
        expected = [(ref.next_u64() >> 11) * 2.0**-53 * 2.0 - 1.0 for _ in range(6)]
        assert X.ravel().tolist() == expected

    def test_round_trip(self, tmp_path):
        samples = generate_calibration(1, 3, 5, 4)
        save_calibration(samples, tmp_path / "c.bin")
        back = load_calibration(tmp_path / "c.bin")
        assert len(back) == 3
        assert all(x.tobytes() == y.tobytes() for x, y in zip(samples, back))

    def test_mixed_n_allowed(self, tmp_path):
        samples = generate_calibration(1, 1, 2, 4) + generate_calibration(2, 1, 7, 4)
        save_calibration(samples, tmp_path / "c.bin")
        assert [x.shape for x in load_calibration(tmp_path / "c.bin")] == [(2, 4), (7, 4)]

    def test_d_e_mismatch(self, tmp_path):
        samples = generate_calibration(1, 1, 2, 4) + generate_calibration(2, 1, 2, 5)
        save_calibration(samples, tmp_path / "c.bin")
        with pytest.raises(CorruptCalibrationError):
            load_calibration(tmp_path / "c.bin")

    def test_truncated(self, tmp_path):
        save_calibration(generate_calibration(1, 2, 3, 4), tmp_path / "c.bin")
        data = (tmp_path / "c.bin").read_bytes()
        for cut in (0, 5, 8 + 8 * 12 + 3, len(data) - 1):
            with pytest.raises(CorruptCalibrationError):
                parse_calibration(data[:cut])


class TestCsv:
    def test_zero_matrix(self):
        assert format_csv(np.zeros((1, 1))) == "0\n"

    def test_identity(self):
        assert format_csv(np.eye(2)) == "1,0\n0,1\n"

    def test_vector_is_a_column(self):
        assert format_csv([0.5, 2.0]) == "0.5\n2\n"

    def test_parse_back_exact(self, tmp_path, rng):
        M = rng.standard_normal((4, 3)) * 10.0 ** rng.integers(-300, 300, (4, 3))
        path = tmp_path / "m.csv"
        path.write_text(format_csv(M))
        assert read_csv(path).tobytes() == M.tobytes()

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            format_csv([np.nan])


class TestPlanFiles:
    def test_fusion_plan(self):
        plan = FusionPlan([(1, 3), (5, 6)], exclude_last=True, scale_mode="folded")
        assert parse_plan(plan.to_text()) == plan

    def test_empty_fusion_plan(self):
        plan = FusionPlan([])
        assert parse_plan(plan.to_text()) == plan

    def test_parallel_plan(self):
        plan = ParallelPlan([(4, 7), (0, 3)], w=4)
        assert parse_plan(plan.to_text()) == plan

    @pytest.mark.parametrize(
        "text",
        ["", "nonsense\n", "exclude_last=2 scale_mode=literal\n", "exclude_last=0 scale_mode=literal\n1\n",
         "exclude_last=0 scale_mode=literal\n2 1\n", "kind=parallel\n0 1\n"],
    )
    def test_malformed(self, text):
        with pytest.raises(InvalidPlanError):
            parse_plan(text)
