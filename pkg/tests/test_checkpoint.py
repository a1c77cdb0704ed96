"""Checkpoint container: bitwise round trips, corruption rejection,
behavioral equality after reload."""

import struct

import numpy as np
import pytest

from fna import checkpoint as ckpt
from fna.arch import TaskProfile, build_mbconv_space, make_mbconv_seed
from fna.blocks import Network
from fna.errors import CheckpointError
from fna.remap import remap_seed_to_supernet
from fna.supernet import SuperNet
from fna.tensor import Tensor


def seed_arch():
    return make_mbconv_seed(1, 4, 4, (8,), (1,), (1,), "classification:2")


def supernet_with_state(tmp_seed=11):
    seed = seed_arch()
    profile = TaskProfile("custom", (2,), (1,), head="dense:2")
    space = build_mbconv_space(seed, profile)
    net = SuperNet(space, rng_seed=tmp_seed)
    state = Network(seed, rng=np.random.default_rng(tmp_seed)).state_dict()
    remapped, _ = remap_seed_to_supernet(seed, state, space)
    net.load_state_dict(remapped)
    for a in net.alphas():
        a.data = np.random.default_rng(tmp_seed).standard_normal(a.shape[0])
    return net


class TestContainer:
    def test_state_round_trip_is_bitwise(self, tmp_path, rng):
        state = {
            "a.weight": rng.standard_normal((3, 2, 3, 3)).astype(np.float32),
            "b.gamma": rng.standard_normal(7),
        }
        path = tmp_path / "x.ckpt"
        ckpt.save_checkpoint(path, "network", state, meta={"note": "test"})
        loaded = ckpt.load_checkpoint(path)
        assert loaded.kind == "network"
        assert loaded.meta["note"] == "test"
        assert set(loaded.state) == set(state)
        for k in state:
            assert loaded.state[k].dtype == state[k].dtype
            assert np.array_equal(loaded.state[k], state[k])

    def test_truncated_file_rejected(self, tmp_path, rng):
        path = tmp_path / "x.ckpt"
        ckpt.save_checkpoint(path, "network", {"w": rng.standard_normal(8)})
        raw = path.read_bytes()
        path.write_bytes(raw[:-9])
        with pytest.raises(CheckpointError, match="truncated"):
            ckpt.load_checkpoint(path)

    def test_corrupted_manifest_rejected(self, tmp_path, rng):
        path = tmp_path / "x.ckpt"
        ckpt.save_checkpoint(path, "network", {"w": rng.standard_normal(8)})
        raw = bytearray(path.read_bytes())
        (mlen,) = struct.unpack("<Q", bytes(raw[:8]))
        raw[12] = 0xFF  # stomp inside the manifest JSON
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="manifest"):
            ckpt.load_checkpoint(path)

    def test_version_mismatch_rejected(self, tmp_path, rng):
        path = tmp_path / "x.ckpt"
        ckpt.save_checkpoint(path, "network", {"w": rng.standard_normal(8)})
        raw = path.read_bytes()
        patched = raw.replace(b"fna_ckpt_v1", b"fna_ckpt_v9")
        path.write_bytes(patched)
        with pytest.raises(CheckpointError, match="version"):
            ckpt.load_checkpoint(path)


class TestNetworkCheckpoint:
    def test_forward_outputs_bitwise_after_reload(self, tmp_path, rng):
        arch = seed_arch()
        net = Network(arch, rng=np.random.default_rng(5))
        x = rng.standard_normal((2, 1, 8, 8)).astype(np.float32)
        before = net.forward(Tensor(x), training=False).data
        path = tmp_path / "net.ckpt"
        ckpt.save_network(path, arch, net)
        arch2, net2 = ckpt.load_network(path)
        assert arch2 == arch
        after = net2.forward(Tensor(x), training=False).data
        assert np.array_equal(before, after)


class TestSupernetCheckpoint:
    def test_round_trip_preserves_forward_and_sampling(self, tmp_path, rng):
        net = supernet_with_state()
        x = rng.standard_normal((2, 1, 8, 8)).astype(np.float32)
        before_fwd = net.forward_mixed(Tensor(x), training=False).data
        path = tmp_path / "sup.ckpt"
        ckpt.save_supernet(path, net)
        before_seq = [net.sample_path() for _ in range(20)]

        net2 = ckpt.load_supernet(path)
        after_fwd = net2.forward_mixed(Tensor(x), training=False).data
        assert np.array_equal(before_fwd, after_fwd)
        after_seq = [net2.sample_path() for _ in range(20)]
        assert before_seq == after_seq

    def test_alphas_round_trip_exactly(self, tmp_path):
        net = supernet_with_state()
        path = tmp_path / "sup.ckpt"
        ckpt.save_supernet(path, net)
        net2 = ckpt.load_supernet(path)
        for a, b in zip(net.alphas(), net2.alphas()):
            assert np.array_equal(a.data, b.data)

    def test_wrong_kind_rejected(self, tmp_path, rng):
        arch = seed_arch()
        net = Network(arch, rng=np.random.default_rng(5))
        path = tmp_path / "net.ckpt"
        ckpt.save_network(path, arch, net)
        with pytest.raises(CheckpointError, match="kind"):
            ckpt.load_supernet(path)
