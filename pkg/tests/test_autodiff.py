import numpy as np
import pytest

from tokmri import autodiff as ad
from tokmri.autodiff import Tape
from tokmri.errors import TapeConsistencyError
from tokmri.fourier import forward_fft, inverse_fft
from tokmri.tokenizer import Codebook

RNG = np.random.default_rng(2024)


def central_diff(f, x, i, h):
    xp = x.copy()
    xp.flat[i] += h
    xm = x.copy()
    xm.flat[i] -= h
    return (f(xp) - f(xm)) / (2 * h)


def check_vjp(f_forward, f_vjp_input, x, h=1e-6, tol=1e-6, n_probe=20):
    """Compare the adjoint against central differences on a random scalar
    projection of the output (the Jacobian-vector contract)."""
    out0 = f_forward(x)
    v = RNG.standard_normal(out0.shape)

    def scalar(xq):
        return float(np.sum(f_forward(xq) * v))

    g = f_vjp_input(x, v)
    idxs = RNG.choice(x.size, size=min(n_probe, x.size), replace=False)
    for i in idxs:
        fd = central_diff(scalar, x, i, h)
        an = g.flat[i]
        assert abs(fd - an) <= tol * max(abs(fd), abs(an), 1.0), (fd, an)


class TestPrimitiveAdjoints:
    def test_affine_input_grad(self):
        w = RNG.standard_normal((5, 7))
        b = RNG.standard_normal(7)
        check_vjp(
            lambda x: ad.affine_forward(x, w, b),
            lambda x, v: ad.affine_vjp(x, w, v)[0],
            RNG.standard_normal((4, 5)),
        )

    def test_affine_weight_and_bias_grads(self):
        x = RNG.standard_normal((4, 5))
        b = RNG.standard_normal(7)
        w0 = RNG.standard_normal((5, 7))
        out0 = ad.affine_forward(x, w0, b)
        v = RNG.standard_normal(out0.shape)
        _, gw, gb = ad.affine_vjp(x, w0, v)
        for i in RNG.choice(w0.size, size=10, replace=False):
            fd = central_diff(
                lambda wq: float(np.sum(ad.affine_forward(x, wq, b) * v)),
                w0, i, 1e-6,
            )
            assert abs(fd - gw.flat[i]) < 1e-6 * max(abs(fd), 1.0)
        assert np.allclose(gb, v.sum(axis=0))

    def test_layer_norm_grads(self):
        gamma = RNG.standard_normal(6) + 1.5
        beta = RNG.standard_normal(6)

        def fwd(x):
            return ad.layer_norm_forward(x, gamma, beta)[0]

        def vjp_in(x, v):
            _, cache = ad.layer_norm_forward(x, gamma, beta)
            return ad.layer_norm_vjp(cache, gamma, v)[0]

        check_vjp(fwd, vjp_in, RNG.standard_normal((5, 6)))

    def test_layer_norm_affine_grads(self):
        x = RNG.standard_normal((5, 6))
        gamma = RNG.standard_normal(6) + 1.5
        beta = RNG.standard_normal(6)
        out0, cache = ad.layer_norm_forward(x, gamma, beta)
        v = RNG.standard_normal(out0.shape)
        _, ggamma, gbeta = ad.layer_norm_vjp(cache, gamma, v)
        for i in range(6):
            fd = central_diff(
                lambda gq: float(np.sum(ad.layer_norm_forward(x, gq, beta)[0] * v)),
                gamma, i, 1e-6,
            )
            assert abs(fd - ggamma[i]) < 1e-6 * max(abs(fd), 1.0)
        assert np.allclose(gbeta, v.sum(axis=0))

    def test_channel_norm_grad(self):
        def fwd(x):
            return ad.channel_norm_forward(x, 1e-12)[0]

        def vjp_in(x, v):
            _, cache = ad.channel_norm_forward(x, 1e-12)
            return ad.channel_norm_vjp(cache, v)

        check_vjp(fwd, vjp_in, RNG.standard_normal((6, 6)) * 2 + 1)

    def test_softmax_grad(self):
        def vjp_in(x, v):
            return ad.softmax_vjp(ad.softmax(x), v)

        check_vjp(ad.softmax, vjp_in, RNG.standard_normal((4, 9)))

    def test_softmax_extreme_logits_stable(self):
        z = np.array([[1e3, -1e3, 0.0], [1e3, 1e3, 1e3]])
        p = ad.softmax(z)
        assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(np.isfinite(p))

    def test_softmax_shift_invariance(self):
        z = RNG.standard_normal((3, 7))
        assert np.allclose(ad.softmax(z), ad.softmax(z + 123.456), atol=1e-12)

    def test_gelu_grad(self):
        check_vjp(
            ad.gelu_forward,
            lambda x, v: ad.gelu_vjp(x, v),
            RNG.standard_normal((8, 3)),
        )

    def test_attention_grads_all_inputs(self):
        L, E, heads = 5, 8, 2
        y = RNG.standard_normal((L, E))
        params = [RNG.standard_normal((E, E)) * 0.5 for _ in range(4)]
        biases = [RNG.standard_normal(E) * 0.2 for _ in range(4)]
        wq, wk, wv, wo = params
        bq, bk, bv, bo = biases

        def fwd_all(yq, wqq, wkq, wvq, woq):
            out, _ = ad.attention_forward(yq, wqq, bq, wkq, bk, wvq, bv,
                                          woq, bo, heads)
            return out

        out0 = fwd_all(y, wq, wk, wv, wo)
        v = RNG.standard_normal(out0.shape)
        _, cache = ad.attention_forward(y, wq, bq, wk, bk, wv, bv, wo, bo, heads)
        grads = ad.attention_vjp(cache, wq, wk, wv, wo, v)
        tensors = {
            0: (y, lambda t: fwd_all(t, wq, wk, wv, wo)),
            1: (wq, lambda t: fwd_all(y, t, wk, wv, wo)),
            3: (wk, lambda t: fwd_all(y, wq, t, wv, wo)),
            5: (wv, lambda t: fwd_all(y, wq, wk, t, wo)),
            7: (wo, lambda t: fwd_all(y, wq, wk, wv, t)),
        }
        for gi, (tensor, f) in tensors.items():
            g = grads[gi]
            for i in RNG.choice(tensor.size, size=8, replace=False):
                fd = central_diff(lambda t: float(np.sum(f(t) * v)), tensor, i, 1e-6)
                assert abs(fd - g.flat[i]) <= 1e-6 * max(abs(fd), abs(g.flat[i]), 1.0)

    def test_attention_batched_matches_loop(self):
        L, E, heads, B = 4, 8, 2, 3
        y = RNG.standard_normal((B, L, E))
        ps = [RNG.standard_normal((E, E)) * 0.5 for _ in range(4)]
        bs = [RNG.standard_normal(E) * 0.2 for _ in range(4)]
        out_b, _ = ad.attention_forward(y, ps[0], bs[0], ps[1], bs[1],
                                        ps[2], bs[2], ps[3], bs[3], heads)
        for b in range(B):
            out_1, _ = ad.attention_forward(y[b], ps[0], bs[0], ps[1], bs[1],
                                            ps[2], bs[2], ps[3], bs[3], heads)
            assert np.allclose(out_b[b], out_1, atol=1e-12)

    def test_ffn_grads(self):
        E, F = 6, 10
        w1 = RNG.standard_normal((E, F)) * 0.5
        b1 = RNG.standard_normal(F) * 0.2
        w2 = RNG.standard_normal((F, E)) * 0.5
        b2 = RNG.standard_normal(E) * 0.2

        def fwd(z):
            return ad.ffn_forward(z, w1, b1, w2, b2)[0]

        def vjp_in(z, v):
            _, cache = ad.ffn_forward(z, w1, b1, w2, b2)
            return ad.ffn_vjp(cache, w1, w2, v)[0]

        check_vjp(fwd, vjp_in, RNG.standard_normal((5, E)))

    def test_entropy_sum_grad(self):
        z0 = RNG.standard_normal((4, 6))

        def fwd(z):
            return np.float64(ad.entropy_sum_from_logits(z)[0])

        _, cache = ad.entropy_sum_from_logits(z0)
        g = ad.entropy_sum_vjp(cache, 1.0)
        for i in RNG.choice(z0.size, size=12, replace=False):
            fd = central_diff(lambda z: float(fwd(z)), z0, i, 1e-6)
            assert abs(fd - g.flat[i]) <= 1e-6 * max(abs(fd), abs(g.flat[i]), 1.0)

    def test_cross_entropy_grad(self):
        z0 = RNG.standard_normal((5, 7))
        targets = RNG.integers(0, 7, size=5)

        def fwd(z):
            return ad.cross_entropy_from_logits(z, targets)[0]

        _, cache = ad.cross_entropy_from_logits(z0, targets)
        g = ad.cross_entropy_vjp(cache, 1.0)
        for i in RNG.choice(z0.size, size=12, replace=False):
            fd = central_diff(fwd, z0, i, 1e-6)
            assert abs(fd - g.flat[i]) <= 1e-6 * max(abs(fd), abs(g.flat[i]), 1.0)

    def test_ifft_adjoint_matches_fd(self):
        # real scalar loss through the complex ifft node; both partials
        y0 = RNG.standard_normal((4, 4)) + 1j * RNG.standard_normal((4, 4))
        w = RNG.standard_normal((4, 4)) + 1j * RNG.standard_normal((4, 4))

        def loss(y):
            x = inverse_fft(y)
            return float(np.sum(x.real * w.real + x.imag * w.imag))

        g = forward_fft(w)  # adjoint rule under the re/im convention
        h = 1e-6
        for flat in RNG.choice(16, size=8, replace=False):
            r, c = divmod(int(flat), 4)
            for part, get in ((1.0, np.real), (1j, np.imag)):
                yp = y0.copy()
                yp[r, c] += h * part
                ym = y0.copy()
                ym[r, c] -= h * part
                fd = (loss(yp) - loss(ym)) / (2 * h)
                assert abs(fd - get(g[r, c])) < 1e-8


class TestTape:
    def _small_graph(self):
        tape = Tape()
        x = tape.source(RNG.standard_normal((3, 4)), "x")
        w = tape.source(RNG.standard_normal((4, 5)), "w")
        b = tape.source(RNG.standard_normal(5), "b")
        h = ad.t_affine(tape, x, w, b)
        g1 = tape.source(np.ones(5), "gamma")
        b1 = tape.source(np.zeros(5), "beta")
        out = ad.t_layer_norm(tape, h, g1, b1)
        loss = ad.t_entropy_sum(tape, out)
        return tape, x, loss

    def test_replay_bit_identical(self):
        tape, _, _ = self._small_graph()
        tape.replay_check()  # must not raise

    def test_replay_detects_tampering(self):
        tape, _, loss = self._small_graph()
        tape._values[loss] = tape._values[loss] + 1.0
        with pytest.raises(TapeConsistencyError):
            tape.replay_check()

    def test_backward_linearity(self):
        # backward of a*L1 + b*L2 == a*backward(L1) + b*backward(L2)
        x0 = RNG.standard_normal((2, 5))
        w1 = RNG.standard_normal((5, 5))
        w2 = RNG.standard_normal((5, 5))
        bias = np.zeros(5)

        def grads_of(seed1, seed2):
            tape = Tape()
            x = tape.source(x0, "x")
            wa = tape.source(w1)
            wb = tape.source(w2)
            bb = tape.source(bias)
            l1 = ad.t_entropy_sum(tape, ad.t_affine(tape, x, wa, bb))
            l2 = ad.t_entropy_sum(tape, ad.t_affine(tape, x, wb, bb))
            g1 = tape.backward(l1, seed=np.float64(seed1))[x]
            g2 = tape.backward(l2, seed=np.float64(seed2))[x]
            return g1 + g2

        a, b = 2.5, -1.25
        combined = grads_of(a, b)
        separate = a * grads_of(1.0, 0.0) + b * grads_of(0.0, 1.0)
        assert np.allclose(combined, separate, atol=1e-10)

    def test_gradient_accumulates_over_fanout(self):
        tape = Tape()
        x0 = RNG.standard_normal((2, 3))
        x = tape.source(x0, "x")
        y = ad.t_add(tape, x, x)  # y = 2x
        loss = ad.t_entropy_sum(tape, y)
        g = tape.backward(loss)[x]
        tape2 = Tape()
        x2 = tape2.source(2.0 * x0, "x2")
        loss2 = ad.t_entropy_sum(tape2, x2)
        g2 = tape2.backward(loss2)[x2]
        assert np.allclose(g, 2.0 * g2, atol=1e-12)


class TestSTENode:
    def test_forward_snaps_backward_passes_through(self):
        cb = Codebook(RNG.standard_normal((6, 3)))
        tape = Tape()
        lat = tape.source(RNG.standard_normal((4, 3)), "lat")
        indices, q = ad.t_ste_quantize(tape, lat, cb)
        assert np.array_equal(tape.val(q), cb.entries[indices])
        g_out = RNG.standard_normal((4, 3))
        grads = tape.backward(q, seed=g_out)
        assert np.array_equal(grads[lat], g_out)

    def test_matches_identity_backward_on_snapped_input(self):
        # with latents already on codebook entries the STE tape and a plain
        # identity tape share forward values; backwards must agree exactly
        cb = Codebook(RNG.standard_normal((6, 3)))
        lat0 = cb.entries[[0, 3, 5]]
        w = RNG.standard_normal((3, 4))
        b = RNG.standard_normal(4)

        tape = Tape()
        lat = tape.source(lat0, "lat")
        _, q = ad.t_ste_quantize(tape, lat, cb)
        out = ad.t_affine(tape, q, tape.source(w), tape.source(b))
        loss = ad.t_entropy_sum(tape, out)
        g_ste = tape.backward(loss)[lat]

        tape2 = Tape()
        lat2 = tape2.source(lat0, "lat")
        out2 = ad.t_affine(tape2, lat2, tape2.source(w), tape2.source(b))
        loss2 = ad.t_entropy_sum(tape2, out2)
        g_id = tape2.backward(loss2)[lat2]
        assert np.array_equal(g_ste, g_id)

    def test_frozen_shift_reproduces_snapped_values(self):
        cb = Codebook(RNG.standard_normal((6, 3)))
        tape = Tape()
        lat0 = RNG.standard_normal((4, 3))
        lat = tape.source(lat0, "lat")
        _, q = ad.t_ste_quantize(tape, lat, cb)
        offset = tape.val(q) - lat0
        tape2 = Tape()
        lat2 = tape2.source(lat0, "lat")
        q2 = ad.t_frozen_shift(tape2, lat2, offset)
        assert np.allclose(tape2.val(q2), tape.val(q), atol=1e-15)
