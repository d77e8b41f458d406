import struct

import numpy as np
import pytest

from gaussnet.layers import build_network
from gaussnet.serialize import MAGIC, load_network, pack, read_container, save_network, unpack, write_container
from gaussnet.train import AdamState, adam_step, loss_and_grad
from gaussnet.data import synth_shapes

DESC = {"in_channels": 1, "classes": 3, "pooling": "global-average",
        "layers": [{"kind": "gauss-sub", "out_channels": 3, "d": 2, "sigma": 1.1},
                   {"kind": "pixel-antialias-sub", "out_channels": 2, "d": 2, "sigma": 0.7},
                   {"kind": "gauss-residual", "out_channels": 4, "has_skip": True}]}


def test_container_layout():
    blob = pack({"kind": "x"}, [("a", np.arange(3, dtype=np.float32)), ("b", np.ones((2, 2)))])
    assert blob[:8] == MAGIC
    version, hlen = struct.unpack("<II", blob[8:16])
    assert version == 1
    assert blob[16 + hlen:16 + hlen + 12] == np.arange(3, dtype="<f4").tobytes()
    header, blocks = unpack(blob)
    assert header["kind"] == "x" and [b["name"] for b in header["blocks"]] == ["a", "b"]
    np.testing.assert_array_equal(blocks["b"], np.ones((2, 2)))


def test_container_errors():
    blob = pack({}, [("a", np.zeros(4))])
    with pytest.raises(ValueError):
        unpack(b"NOTAPACK" + blob[8:])
    with pytest.raises(ValueError):
        unpack(blob[:-1])
    with pytest.raises(ValueError):
        unpack(blob + b"\0")
    with pytest.raises(ValueError):
        unpack(blob[:8] + struct.pack("<II", 9, 0) + blob[16:])


def test_atomic_write_leaves_no_temp_files(tmp_path):
    write_container(tmp_path / "c.bin", {"k": 1}, [("a", np.zeros(2))])
    write_container(tmp_path / "c.bin", {"k": 2}, [("a", np.ones(2))])
    assert [p.name for p in tmp_path.iterdir()] == ["c.bin"]
    assert read_container(tmp_path / "c.bin")[0]["k"] == 2


def test_network_roundtrip_with_adam(tmp_path):
    net = build_network(DESC, seed=3)
    data = synth_shapes(6, size=16, classes=3, seed=0)
    _, tape = loss_and_grad(net, data.images, data.labels)
    net, state = adam_step(net, tape, AdamState.for_network(net, lr=0.01))
    save_network(tmp_path / "n.gnet", net, state, meta={"note": "x"})
    back, back_state, meta = load_network(tmp_path / "n.gnet")
    assert meta == {"note": "x"}
    for k, v in net.parameters().items():
        np.testing.assert_array_equal(back.parameters()[k], v)
        np.testing.assert_array_equal(back_state.first_moment[k], state.first_moment[k])
    assert back_state.step == 1 and back_state.lr == 0.01
    assert [layer.kind for layer in back.layers] == [layer.kind for layer in net.layers]
    save_network(tmp_path / "again.gnet", back, back_state, meta={"note": "x"})
    assert (tmp_path / "again.gnet").read_bytes() == (tmp_path / "n.gnet").read_bytes()


def test_load_rejects_other_containers(tmp_path):
    write_container(tmp_path / "d.gnet", {"kind": "dataset"}, [])
    with pytest.raises(ValueError):
        load_network(tmp_path / "d.gnet")
