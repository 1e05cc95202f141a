import math

import numpy as np
import pytest

from snmm import encoders as E
from snmm import tensor as T


def small_batch(n=3, horizon=5, d_x=2, d_a=2, seed=0, lengths=None):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, horizon, d_x))
    a = (rng.random((n, horizon, d_a)) > 0.5).astype(float)
    y = rng.normal(size=(n, horizon))
    if lengths is None:
        lengths = np.full(n, horizon)
    return E.HistoryBatch.from_arrays(x, a, y, np.asarray(lengths))


class TestHistoryBatch:
    def test_first_step_slots_zero(self):
        batch = small_batch()
        d_x = 2
        np.testing.assert_array_equal(batch.inputs[:, 0, d_x:], 0.0)

    def test_width(self):
        assert small_batch().width == 2 + 2 + 1

    def test_padded_rows_zero(self):
        batch = small_batch(lengths=[5, 3, 2])
        np.testing.assert_array_equal(batch.inputs[1, 3:], 0.0)
        np.testing.assert_array_equal(batch.mask[2], [1, 1, 0, 0, 0])


class TestEncoder:
    def test_dead_network_emits_zero(self):
        cfg = E.EncoderConfig(hidden=4, rep_width=3)
        enc = E.RecurrentEncoder(5, cfg, np.random.default_rng(0))
        for p in enc.parameters():
            p.values[:] = 0.0
        reps = enc.encode(small_batch())
        for r in reps:
            np.testing.assert_array_equal(r.values, 0.0)

    def test_causality_perturbation(self):
        cfg = E.EncoderConfig(hidden=6, rep_width=4)
        enc = E.RecurrentEncoder(5, cfg, np.random.default_rng(1))
        batch = small_batch(seed=3)
        base = [r.values.copy() for r in enc.encode(batch)]
        poked = E.HistoryBatch(batch.inputs.copy(), batch.lengths, batch.mask)
        poked.inputs[:, 3, :] += 10.0
        after = [r.values for r in enc.encode(poked)]
        for t in range(3):
            assert np.array_equal(base[t], after[t])
        assert not np.array_equal(base[3], after[3])

    def test_one_step_scalar_cell_hand_unrolled(self):
        # Hand evaluation of the gate equations for a single scalar step.
        cfg = E.EncoderConfig(hidden=1, rep_width=1)
        enc = E.RecurrentEncoder(1, cfg, np.random.default_rng(0))
        enc.layers[0]["w_x"].values[:] = np.array([[1.0, 2.0, -1.0, 0.5]])
        enc.layers[0]["w_h"].values[:] = 0.0
        enc.layers[0]["b"].values[:] = np.array([[0.1, -0.2, 0.3, 0.0]])
        enc.w_rep.values[:] = 1.0
        enc.b_rep.values[:] = 0.0

        batch = E.HistoryBatch(inputs=np.array([[[0.5]]]), lengths=np.array([1]), mask=np.ones((1, 1)))
        got = enc.encode(batch)[0].values[0, 0]

        sig = lambda v: 1.0 / (1.0 + math.exp(-v))
        gate_in = sig(0.5 * 1.0 + 0.1)
        gate_out = sig(0.5 * -1.0 + 0.3)
        cell = gate_in * math.tanh(0.5 * 0.5)
        expected = gate_out * math.tanh(cell)  # positive, so ELU is identity
        assert got == pytest.approx(expected, abs=1e-12)

    def test_padding_neutrality(self):
        cfg = E.EncoderConfig(hidden=5, rep_width=3)
        enc = E.RecurrentEncoder(5, cfg, np.random.default_rng(2))
        batch = small_batch(n=2, horizon=4, lengths=[4, 4])
        reps = [r.values.copy() for r in enc.encode(batch)]
        padded_inputs = np.concatenate([batch.inputs, np.zeros((2, 3, 5))], axis=1)
        padded = E.HistoryBatch(padded_inputs, batch.lengths, (np.arange(7)[None, :] < 4).astype(float).repeat(2, 0))
        reps_padded = [r.values for r in enc.encode(padded)]
        for t in range(4):
            assert np.array_equal(reps[t], reps_padded[t])

    def test_dropout_off_at_inference(self):
        cfg = E.EncoderConfig(hidden=4, rep_width=3, dropout=0.5)
        enc = E.RecurrentEncoder(5, cfg, np.random.default_rng(5))
        batch = small_batch()
        first = [r.values for r in enc.encode(batch)]
        second = [r.values for r in enc.encode(batch)]
        for a, b in zip(first, second):
            assert np.array_equal(a, b)

    def test_dropout_active_in_training(self):
        cfg = E.EncoderConfig(hidden=16, rep_width=8, dropout=0.5)
        enc = E.RecurrentEncoder(5, cfg, np.random.default_rng(5))
        batch = small_batch()
        a = [r.values for r in enc.encode(batch, train_rng=np.random.default_rng(1))]
        b = [r.values for r in enc.encode(batch, train_rng=np.random.default_rng(2))]
        assert not np.array_equal(a[-1], b[-1])

    def test_width_mismatch(self):
        cfg = E.EncoderConfig(hidden=4, rep_width=3)
        enc = E.RecurrentEncoder(9, cfg, np.random.default_rng(0))
        with pytest.raises(T.ShapeError):
            enc.encode(small_batch())


class TestHead:
    def test_identity_degenerate_head(self):
        rng = np.random.default_rng(0)
        head = E.MLPHead(3, 3, 3, rng)
        head.w1.values[:] = np.eye(3)
        head.b1.values[:] = 0.0
        head.w2.values[:] = np.eye(3)
        head.b2.values[:] = 0.0
        z = T.tensor(np.abs(rng.normal(size=(4, 3))) + 0.1)
        np.testing.assert_allclose(head(z).values, z.values)

    def test_binary_head_range(self):
        rng = np.random.default_rng(1)
        head = E.MLPHead(4, 8, 2, rng, binary=True)
        out = head(T.tensor(rng.normal(size=(50, 4)))).values
        assert np.all(out > 0.0) and np.all(out < 1.0)

    def test_head_gradcheck(self):
        rng = np.random.default_rng(2)
        head = E.MLPHead(3, 5, 2, rng)
        z = T.tensor(rng.normal(size=(6, 3)))
        target = T.tensor(rng.normal(size=(6, 2)))

        def f():
            return T.mean(T.square(T.sub(head(z), target)))

        for p in head.parameters():
            p.grad = None
        T.backward(f())
        h = 1e-5
        for p in head.parameters():
            flat = p.values.ravel()
            gflat = p.grad.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                fd = (fp - fm) / (2 * h)
                assert abs(fd - gflat[i]) < 1e-6 * max(1.0, abs(fd))

    def test_width_mismatch(self):
        head = E.MLPHead(3, 5, 2, np.random.default_rng(0))
        with pytest.raises(T.ShapeError):
            head(T.tensor(np.ones((2, 7))))


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        cfg = E.EncoderConfig(hidden=4, rep_width=3)
        enc = E.RecurrentEncoder(5, cfg, np.random.default_rng(7))
        head = E.MLPHead(3, 4, 2, np.random.default_rng(8))
        named = {**enc.named_parameters(), **head.named_parameters("head0")}
        path = tmp_path / "model.ckpt"
        E.save_checkpoint(str(path), named, {"kind": "test", "tau": 2})
        arrays, meta = E.load_checkpoint(str(path))
        assert meta == {"kind": "test", "tau": 2}
        for name, p in named.items():
            assert np.array_equal(arrays[name], p.values)

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "bogus.json"
        path.write_text('{"format": "other"}')
        with pytest.raises(ValueError):
            E.load_checkpoint(str(path))

    def test_digest_stable(self, tmp_path):
        cfg = E.EncoderConfig(hidden=2, rep_width=2)
        enc = E.RecurrentEncoder(3, cfg, np.random.default_rng(0))
        path = tmp_path / "m.ckpt"
        E.save_checkpoint(str(path), enc.named_parameters(), {})
        assert E.checkpoint_digest(str(path)) == E.checkpoint_digest(str(path))
