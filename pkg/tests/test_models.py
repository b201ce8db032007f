import json

import numpy as np
import pytest

from meltfusion import models as M
from meltfusion import tensor as T
from meltfusion.models import (ChecksumError, ShapeMismatchError, VersionError, build_model,
                               load_checkpoint, save_checkpoint)

KINDS = ("cnn", "rnn", "fused", "student")


def random_inputs(model, batch, seed=0):
    rng = np.random.default_rng(seed)
    return {port: rng.random((batch, *shape)).astype(np.float32) for port, shape in model.inputs.items()}


@pytest.fixture(scope="module")
def built():
    return {kind: build_model(kind, seed=0) for kind in KINDS}


# ------------------------------------------------------------------- shapes

def test_cnn_shape_chain(built):
    trace = built["cnn"].shape_trace["image"]
    spatial = [s[0] for s in trace if len(s) == 3]
    # input, then conv / batchnorm / pool per block
    assert spatial[0] == 128
    assert [spatial[i] for i in range(3, len(spatial), 3)] == [64, 32, 16, 8]
    pools = [s for s, layer in zip(trace[1:], built["cnn"].branches["image"]) if layer.kind == "maxpool2"]
    assert pools[-1] == (8, 8, 256)


def test_cnn_recipe_constants(built):
    layers = built["cnn"].branches["image"]
    assert [layer.filters for layer in layers if layer.kind == "conv2d"] == [32, 64, 128, 256]
    dense = [layer for layer in layers if layer.kind == "dense"]
    assert [d.units for d in dense] == [512, 1]
    assert [layer.rate for layer in layers if layer.kind == "dropout"] == [0.2]


def test_rnn_widths(built):
    trace = built["rnn"].shape_trace["absorptivity"]
    assert trace[1] == (1, 256)
    assert built["rnn"].inputs["absorptivity"] == (1, 1)
    heads = [layer for layer in built["rnn"].branches["absorptivity"] if layer.kind == "attention"]
    assert (heads[0].heads, heads[0].key_dim) == (4, 16)


def test_fused_widths(built):
    m = built["fused"]
    assert (32, 32, 32) in m.shape_trace["image"]
    assert m.shape_trace["image"][-2] == (32 * 32 * 32,)
    assert m.shape_trace["image"][-1] == (64,)
    assert m.shape_trace["absorptivity"][-1] == (32,)
    assert m.shape_trace["head"][0] == (96,)


def test_student_parameter_count(built):
    assert built["student"].inputs["absorptivity"] == (5, 1)
    assert built["student"].num_parameters() == 4 * (1 + 32 + 1) * 32 + 32 * 64 + 64 + 64 * 1 + 1 == 6529


def test_parameter_counts(built):
    counts = {k: m.num_parameters() for k, m in built.items()}
    assert counts == {"cnn": 520897, "rnn": 676929, "fused": 2113121, "student": 6529}


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("batch", [1, 3])
def test_output_shape(built, kind, batch):
    out = built[kind].predict(random_inputs(built[kind], batch))
    assert out.shape == (batch,) and np.all(np.isfinite(out))
    assert built[kind].forward(random_inputs(built[kind], batch)).shape == (batch, 1)


def test_missing_port_named(built):
    with pytest.raises(KeyError, match="image"):
        built["fused"].forward({"absorptivity": np.zeros((2, 1), np.float32)})


def test_wrong_port_shape(built):
    with pytest.raises(T.ShapeError):
        built["student"].forward({"absorptivity": np.zeros((2, 4, 1), np.float32)})


def test_unknown_model():
    with pytest.raises(ValueError, match="unknown model"):
        build_model("transformer")


def test_seeded_builds_identical():
    a, b = build_model("student", seed=3), build_model("student", seed=3)
    assert all(np.array_equal(x, y) for x, y in zip(a.get_weights(), b.get_weights()))
    c = build_model("student", seed=4)
    assert not np.array_equal(a.get_weights()[0], c.get_weights()[0])


# ------------------------------------------------------------ trainability

def dead_parameters(model, seed=1):
    batch = random_inputs(model, 4, seed=seed)
    y = np.random.default_rng(seed).standard_normal((4, 1))
    T.backward(T.mse(model.forward(batch, training=True), y))
    return [n for n, p in model.named_parameters() if p.grad is None or not np.any(p.grad)]


@pytest.mark.parametrize("kind", KINDS)
def test_every_parameter_receives_gradient(kind):
    # the rnn gets a real sequence: at T=1 some weights cannot matter (below)
    model = build_model(kind, seed=1, **({"seq_len": 3} if kind == "rnn" else {}))
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names))
    assert dead_parameters(model) == []
    buffers = {id(b) for _, b in model.named_buffers()}
    assert not buffers & {id(p.data) for p in model.parameters()}


def test_single_step_rnn_structural_zeros():
    # one time step: zero initial state hides the recurrent kernels and the
    # single-token softmax is constant, so query/key projections drop out
    dead = dead_parameters(build_model("rnn", seed=1))
    assert sorted(n.rsplit(".", 1)[1] for n in dead) == sorted(
        ["fwd_recurrent", "bwd_recurrent"] * 2 + ["query_kernel", "query_bias", "key_kernel", "key_bias"])


@pytest.mark.parametrize("kind", KINDS)
def test_single_step_descends(kind):
    drops = []
    for seed in range(5):
        model = build_model(kind, seed=seed)
        batch = random_inputs(model, 4, seed=seed)
        y = np.random.default_rng(seed).standard_normal((4, 1))
        state = model.rng.bit_generator.state  # same dropout mask before and after
        loss = T.mse(model.forward(batch, training=True), y)
        T.backward(loss)
        norm = np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in model.parameters()))
        for p in model.parameters():
            p.data -= (1e-4 / norm) * p.grad  # fixed-length step along -gradient
        model.rng.bit_generator.state = state
        with T.no_grad():
            after = T.mse(model.forward(batch, training=True), y).item()
        drops.append(loss.item() - after)
    assert np.mean(drops) > 0
    assert all(d > 0 for d in drops)


# -------------------------------------------------------------- checkpoints

@pytest.mark.parametrize("kind", KINDS)
def test_checkpoint_round_trip_bitwise(tmp_path, kind):
    model = build_model(kind, seed=5)
    model.metadata["target"] = "kh_ratio"
    batch = random_inputs(model, 3, seed=5)
    if kind in ("cnn", "rnn"):  # non-trivial running statistics
        model.forward(batch, training=True)
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    back = load_checkpoint(path)
    assert back.metadata == {"target": "kh_ratio"}
    assert back.spec() == model.spec()
    for (n1, a), (n2, b) in zip(model.state_arrays(), back.state_arrays()):
        assert n1 == n2 and a.tobytes() == b.tobytes()
    assert model.predict(batch).tobytes() == back.predict(batch).tobytes()
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_truncated_checkpoint(tmp_path):
    path = save_checkpoint(build_model("student"), tmp_path / "m.ckpt")
    raw = path.read_bytes()
    path.write_bytes(raw[:-100])
    with pytest.raises(ChecksumError):
        load_checkpoint(path)


def test_corrupted_payload(tmp_path):
    path = save_checkpoint(build_model("student"), tmp_path / "m.ckpt")
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_checkpoint(path)


def test_manifest_shape_edit_names_parameter(tmp_path):
    path = save_checkpoint(build_model("student"), tmp_path / "m.ckpt")
    manifest, payload = M.read_manifest(path)
    entry = next(a for a in manifest["arrays"] if a["name"].endswith("dense.kernel"))
    entry["shape"] = [entry["shape"][1], entry["shape"][0]]
    M.write_manifest(path, manifest, payload)
    with pytest.raises(ShapeMismatchError, match=entry["name"].replace(".", r"\.")):
        load_checkpoint(path)


def test_version_mismatch(tmp_path):
    path = save_checkpoint(build_model("student"), tmp_path / "m.ckpt")
    manifest, payload = M.read_manifest(path)
    manifest["format_version"] = 99
    M.write_manifest(path, manifest, payload)
    with pytest.raises(VersionError):
        load_checkpoint(path)


def test_errors_are_distinct():
    kinds = {ChecksumError, VersionError, ShapeMismatchError}
    assert len(kinds) == 3 and all(issubclass(k, M.CheckpointError) for k in kinds)


def test_not_a_checkpoint(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_text(json.dumps({"hello": 1}))
    with pytest.raises(M.CheckpointError):
        load_checkpoint(p)


def test_save_leaves_no_temp_files(tmp_path):
    save_checkpoint(build_model("student"), tmp_path / "m.ckpt")
    assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]
