import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anflow.errors import FormatError
from anflow.flow import MixerConfig, calibrate_batchnorm, init_weights, sample_batch
from anflow.io import (decode_checkpoint, decode_ensemble, encode_checkpoint, encode_ensemble,
                       read_checkpoint, read_ensemble, write_checkpoint, write_ensemble)
from anflow.samplers import Ensemble

CFG = MixerConfig(lattice=(4, 4), channels=8, token_hidden=4, channel_hidden=16, timesteps=2)


def random_ensemble(seed, n=7, dims=(3, 5), with_q=True):
    rng = np.random.default_rng(seed)
    return Ensemble(rng.normal(size=(n, *dims)) * 10.0 ** rng.integers(-5, 5),
                    rng.normal(size=n) / 3, rng.random(n) < 0.5, rng.integers(0, 100, n),
                    rng.normal(size=n) if with_q else None, "flow_mh", seed,
                    {"action": "phi4", "action_params": {"m2": -4.0, "lambda": 5.0}})


def same_ensemble(a, b):
    assert a.configs.tobytes() == b.configs.tobytes()
    assert a.actions.tobytes() == b.actions.tobytes()
    assert np.array_equal(a.accepted, b.accepted)
    assert np.array_equal(a.proposal_index, b.proposal_index)
    assert (a.log_q is None) == (b.log_q is None)
    if a.log_q is not None:
        assert a.log_q.tobytes() == b.log_q.tobytes()
    assert (a.sampler, a.seed, a.meta) == (b.sampler, b.seed, b.meta)


class TestEnsembleFormat:
    @given(st.integers(0, 10_000), st.booleans())
    @settings(max_examples=25, deadline=None)
    def test_round_trip(self, seed, with_q):
        ens = random_ensemble(seed, with_q=with_q)
        same_ensemble(ens, decode_ensemble(encode_ensemble(ens)))

    def test_reencode_bitwise(self):
        buf = encode_ensemble(random_ensemble(1))
        assert encode_ensemble(decode_ensemble(buf)) == buf

    def test_file(self, tmp_path):
        ens = random_ensemble(2)
        write_ensemble(tmp_path / "e.lftc", ens)
        same_ensemble(ens, read_ensemble(tmp_path / "e.lftc"))

    def test_header(self):
        buf = encode_ensemble(random_ensemble(3, n=4, dims=(2, 6)))
        assert buf[:4] == b"LFTC"
        assert struct.unpack("<IIIIQ", buf[4:28]) == (1, 2, 2, 6, 4)

    def test_special_values(self):
        ens = random_ensemble(4)
        ens.actions[0] = -0.0
        ens.actions[1] = 5e-324
        same_ensemble(ens, decode_ensemble(encode_ensemble(ens)))

    def test_version_mismatch(self):
        buf = bytearray(encode_ensemble(random_ensemble(5)))
        buf[4:8] = struct.pack("<I", 2)
        with pytest.raises(FormatError, match="version 2"):
            decode_ensemble(bytes(buf))

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            decode_ensemble(b"XXXX" + bytes(40))

    def test_truncated(self):
        buf = encode_ensemble(random_ensemble(6))
        with pytest.raises(FormatError):
            decode_ensemble(buf[:30] + buf[-8:])


class TestCheckpointFormat:
    def weights(self):
        w = init_weights(CFG, seed=3, out_scale=0.5)
        calibrate_batchnorm(w, 256, 0)
        w.provenance["note"] = "test"
        return w

    def test_round_trip_bitwise(self):
        w = self.weights()
        w2 = decode_checkpoint(encode_checkpoint(w))
        assert w2.config == w.config and w2.provenance == w.provenance
        for k in w.names():
            assert w2.tags[k] == w.tags[k]
            assert w2.tensors[k].data.tobytes() == w.tensors[k].data.tobytes()
        for k, st_ in w.bn.items():
            assert w2.bn[k].running_mean.tobytes() == st_.running_mean.tobytes()
            assert w2.bn[k].running_var.tobytes() == st_.running_var.tobytes()

    def test_reencode_bitwise(self):
        buf = encode_checkpoint(self.weights())
        assert encode_checkpoint(decode_checkpoint(buf)) == buf

    def test_samples_identical_after_reload(self, tmp_path):
        w = self.weights()
        write_checkpoint(tmp_path / "m.lftw", w)
        w2 = read_checkpoint(tmp_path / "m.lftw")
        a, b = sample_batch(w, 16, 4), sample_batch(w2, 16, 4)
        assert a.phi.tobytes() == b.phi.tobytes() and a.log_q.tobytes() == b.log_q.tobytes()

    def test_version_mismatch(self):
        buf = bytearray(encode_checkpoint(self.weights()))
        buf[4:8] = struct.pack("<I", 7)
        with pytest.raises(FormatError, match="version 7"):
            decode_checkpoint(bytes(buf))

    def test_wrong_kind(self):
        with pytest.raises(FormatError):
            decode_checkpoint(encode_ensemble(random_ensemble(0)))
