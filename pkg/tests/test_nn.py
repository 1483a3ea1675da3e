import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdfrecon.nn import (
    AdamState,
    Linear,
    Mlp,
    ReconNets,
    Tape,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    bce_mean,
    combine,
    curve_to_csv,
    gradient_check,
    load_checkpoint,
    loss_eikonal,
    loss_occupancy,
    loss_surface,
    mean_abs,
    mean_row_norm,
    occupancy_forward,
    pipeline_forward,
    save_checkpoint,
    sesdf_forward,
    sub_const,
    total_loss,
    train,
)


def tiny_nets(seed=0, variant="full"):
    return ReconNets.create(variant=variant, seed=seed, hidden=(24, 16, 12))


def fake_batch(rng, n=8, n_views=3, variant="full"):
    batch = {
        "raw2d": rng.normal(size=(n_views, n, 6)),
        "raw3d": rng.normal(size=(n, 23)),
        "d_body": 0.1 * rng.normal(size=n),
        "denc": rng.normal(size=(n, 13)),
        "normal": rng.normal(size=(n_views, n, 3)),
        "z": rng.normal(size=(n_views, n, 1)),
        "n_gt_view": rng.normal(size=(n_views, n, 3)),
    }
    return batch


class TestForward:
    def test_zero_final_layer_outputs_zero(self):
        nets = tiny_nets()
        nets.f_sd.layers[-1].weight[:] = 0.0
        nets.f_sd.layers[-1].bias[:] = 0.0
        rng = np.random.default_rng(0)
        d, n = sesdf_forward(nets,
                             rng.normal(size=(5, 256)), rng.normal(size=(5, 128)),
                             rng.normal(size=(5, 13)), rng.normal(size=(5, 3)))
        assert np.all(d == 0.0)
        assert np.all(n == 0.0)

    def test_zero_final_layer_occupancy_half(self):
        nets = tiny_nets()
        nets.f_o.layers[-1].weight[:] = 0.0
        nets.f_o.layers[-1].bias[:] = 0.0
        rng = np.random.default_rng(1)
        occ = occupancy_forward(nets,
                                rng.normal(size=(4, 256)), rng.normal(size=(4, 128)),
                                rng.normal(size=(4, 13)), rng.normal(size=(4, 3)),
                                rng.normal(size=(4, 1)))
        assert np.allclose(occ, 0.5)

    def test_known_logit(self):
        # Pre-activation ln(2) maps through the logistic to 2/3.
        assert 1.0 / (1.0 + np.exp(-0.6931471805599453)) == pytest.approx(2.0 / 3.0, abs=1e-9)

    def test_monotone_in_final_bias(self):
        nets = tiny_nets()
        rng = np.random.default_rng(2)
        args = (rng.normal(size=(3, 256)), rng.normal(size=(3, 128)),
                rng.normal(size=(3, 13)), rng.normal(size=(3, 3)), rng.normal(size=(3, 1)))
        lo = occupancy_forward(nets, *args)
        nets.f_o.layers[-1].bias[:] += 1.0
        hi = occupancy_forward(nets, *args)
        assert (hi > lo).all()

    def test_reproducible(self):
        rng = np.random.default_rng(3)
        args = (rng.normal(size=(2, 256)), rng.normal(size=(2, 128)),
                rng.normal(size=(2, 13)), rng.normal(size=(2, 3)))
        a = sesdf_forward(tiny_nets(seed=7), *args)
        b = sesdf_forward(tiny_nets(seed=7), *args)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_input_dims(self):
        nets = ReconNets.create(seed=0)
        assert nets.f_sd.n_in == 256 + 128 + 13 + 3
        assert nets.f_o.n_in == 256 + 128 + 13 + 3 + 1

    def test_dim_mismatch_raises(self):
        nets = tiny_nets()
        with pytest.raises(ValueError):
            sesdf_forward(nets, np.zeros((2, 25)), np.zeros((2, 128)),
                          np.zeros((2, 13)), np.zeros((2, 3)))

    def test_no_de_dims(self):
        nets = ReconNets.create(variant="no_de", seed=0)
        assert nets.f_sd.n_in == 256 + 128 + 1 + 3
        assert nets.f_o.n_in == 256 + 128 + 1 + 3 + 1

    def test_single_view_requires_no_weights(self):
        nets = tiny_nets()
        batch = fake_batch(np.random.default_rng(0), n_views=1)
        occ, d, n = pipeline_forward(nets, Tape(), batch)
        assert occ.value.shape == (8, 1)

    def test_multi_view_requires_weights(self):
        nets = tiny_nets()
        batch = fake_batch(np.random.default_rng(0))
        with pytest.raises(ValueError):
            pipeline_forward(nets, Tape(), batch)


class TestLosses:
    def test_surface_zero(self):
        n = np.array([[0.0, 0, 1]])
        assert loss_surface(np.zeros(1), n, n) == 0.0

    def test_surface_worked(self):
        # d = 0.2, ||n - n_gt|| = 0.1, unit weights -> 0.3.
        n = np.array([[0.1, 0.0, 1.0]])
        n_gt = np.array([[0.0, 0.0, 1.0]])
        assert loss_surface(np.array([0.2]), n, n_gt) == pytest.approx(0.3)

    def test_surface_batch_mean(self):
        d = np.array([0.3, 0.1])
        n = np.zeros((2, 3))
        assert loss_surface(d, n, n, lambda_n=0.0) == pytest.approx(0.2)

    def test_bce_half(self):
        assert loss_occupancy([0.5, 0.5], [0.0, 1.0]) == pytest.approx(np.log(2.0))

    def test_bce_clamped_perfect(self):
        assert loss_occupancy([1.0], [1.0]) == pytest.approx(1e-7, abs=1e-8)

    def test_bce_wrong(self):
        assert loss_occupancy([0.9], [0.0]) == pytest.approx(-np.log(0.1))

    def test_eikonal(self):
        assert loss_eikonal([[1.0, 0, 0]]) == 0.0
        assert loss_eikonal([[0.0, 0, 0]]) == 1.0
        assert loss_eikonal([[2.0, 0, 0]]) == 1.0

    def test_total(self):
        assert total_loss(0, 0, 0) == 0.0
        assert total_loss(0.3, 0.7, 0.1, 1, 1, 1) == pytest.approx(1.1)
        a = total_loss(0.3, 0.7, 0.1, 1, 1, 1)
        b = total_loss(0.3, 0.7, 0.1, 1, 2, 1)
        assert b - a == pytest.approx(0.7)

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=8),
           st.integers(0, 100))
    @settings(max_examples=100, deadline=None)
    def test_losses_non_negative(self, preds, seed):
        rng = np.random.default_rng(seed)
        labels = (rng.random(len(preds)) > 0.5).astype(float)
        assert loss_occupancy(preds, labels) >= 0.0
        normals = rng.normal(size=(len(preds), 3))
        assert loss_eikonal(normals) >= 0.0
        d = rng.normal(size=len(preds))
        assert loss_surface(d, normals, rng.normal(size=(len(preds), 3))) >= 0.0


class TestGradients:
    def test_small_net_oracle(self):
        rng = np.random.default_rng(0)
        m = Mlp([13, 32, 1], rng, skip_at=None)
        err, worst = gradient_check(m, rng.normal(size=(4, 13)), eps=1e-4)
        assert err < 1e-4
        assert worst  # worst parameter index is reported

    def test_linear_net_exact(self):
        rng = np.random.default_rng(1)
        m = Mlp([5, 3], rng, skip_at=None)
        err, _ = gradient_check(m, rng.normal(size=(2, 5)), eps=1e-4)
        assert err < 1e-8

    def test_default_architectures(self):
        rng = np.random.default_rng(2)
        for nets in (ReconNets.create(seed=3),):
            for mlp in (nets.f_sd, nets.f_o):
                err, _ = gradient_check(mlp, rng.normal(size=(2, mlp.n_in)), eps=1e-4,
                                        max_per_tensor=60)
                assert err < 1e-4

    def test_end_to_end_flow(self):
        # Perturbing a refinement weight must change the total loss: the
        # occupancy head consumes the refined distance and normal.
        nets = tiny_nets(seed=4)
        rng = np.random.default_rng(4)
        batch = fake_batch(rng)
        w = np.full((8, 3), 1 / 3)
        labels = (rng.random(8) > 0.5).astype(float)

        def loss_value():
            tape = Tape()
            occ, d, n = pipeline_forward(nets, tape, batch, weights=w)
            return bce_mean(tape, occ, labels[:, None]).value

        base = loss_value()
        nets.f_sd.layers[0].weight[0, 0] += 1e-3
        assert loss_value() != base


class TestAdam:
    def test_zero_gradient_no_change(self):
        layer = Linear(3, 2, np.random.default_rng(0))
        before = layer.weight.copy()
        adam_step([("l", layer)], AdamState(), lr=0.1)
        assert np.array_equal(layer.weight, before)

    def test_quadratic_decreases(self):
        layer = Linear(1, 1, zero=True)
        layer.weight[0, 0] = 1.0
        state = AdamState()
        layer.grad_weight[0, 0] = 2.0 * layer.weight[0, 0]
        adam_step([("l", layer)], state, lr=0.1)
        assert abs(layer.weight[0, 0]) < 1.0

    def test_deterministic_training(self):
        def run():
            rng = np.random.default_rng(0)
            nets = tiny_nets(seed=1)
            batch = fake_batch(rng, n=16)
            batch["weights"] = np.full((16, 3), 1 / 3)
            batch["labels"] = (rng.random(16) > 0.5).astype(float)
            scene = {"surface": fake_batch(rng, n=16), "occupancy": batch}
            scene["surface"]["n_gt_view"] = rng.normal(size=(3, 16, 3))
            cfg = TrainConfig(epochs=3, batch_size=8, lr=1e-3)
            curve = train(nets, [scene], cfg)
            return curve, nets.f_o.layers[0].weight.copy()

        c1, w1 = run()
        c2, w2 = run()
        assert c1 == c2
        assert np.array_equal(w1, w2)

    def test_lr_schedule(self):
        cfg = TrainConfig(epochs=12, lr=1e-4)
        assert cfg.lr_at(0) == 1e-4
        assert cfg.lr_at(3) == 1e-4
        assert cfg.lr_at(4) == pytest.approx(1e-5)
        assert cfg.lr_at(8) == pytest.approx(1e-6)

    def test_divergence_aborts(self):
        nets = tiny_nets(seed=2)
        rng = np.random.default_rng(1)
        occ = fake_batch(rng, n=4)
        occ["weights"] = np.full((4, 3), 1 / 3)
        occ["labels"] = np.zeros(4)
        occ["raw3d"][0, 0] = np.nan
        scene = {"surface": fake_batch(rng, n=0), "occupancy": occ}
        scene["surface"]["n_gt_view"] = np.zeros((3, 0, 3))
        with pytest.raises(TrainingDiverged):
            train(nets, [scene], TrainConfig(epochs=1))

    def test_curve_csv(self):
        csv = curve_to_csv([(0, 0.1, 0.2, 0.3, 0.63)])
        assert csv.splitlines()[0] == "epoch,L_s,L_o,L_r,total"
        assert csv.splitlines()[1].startswith("0,0.1,0.2,0.3")


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        nets = tiny_nets(seed=5)
        p = tmp_path / "net.sesw"
        save_checkpoint(p, nets)
        back = load_checkpoint(p)
        assert back.variant == nets.variant
        for (na, la), (nb, lb) in zip(nets.parameters(), back.parameters()):
            assert na == nb
            assert np.array_equal(la.weight, lb.weight)
            assert np.array_equal(la.bias, lb.bias)

    def test_roundtrip_no_sesdf(self, tmp_path):
        nets = tiny_nets(seed=6, variant="no_sesdf")
        p = tmp_path / "net.sesw"
        save_checkpoint(p, nets)
        back = load_checkpoint(p)
        assert back.f_sd is None
        assert back.variant == "no_sesdf"

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.sesw"
        p.write_bytes(b"XXXX")
        with pytest.raises(ValueError):
            load_checkpoint(p)


class TestInferencePath:
    def test_matches_tape_forward(self):
        # The eager inference twin must agree bit-for-bit with the tape path.
        from sdfrecon.nn import pipeline_infer

        for variant in ("full", "no_sesdf", "no_de"):
            nets = tiny_nets(seed=8, variant=variant)
            rng = np.random.default_rng(9)
            batch = fake_batch(rng, n=5, n_views=3)
            w = rng.uniform(0.1, 1.0, size=(5, 3))
            w /= w.sum(axis=1, keepdims=True)
            tape = Tape()
            occ_t, d_t, n_t = pipeline_forward(nets, tape, batch, weights=w)
            occ_i, d_i, n_i = pipeline_infer(nets, batch, weights=w)
            assert np.array_equal(occ_t.value[:, 0], occ_i)
            if variant != "no_sesdf":
                assert np.array_equal(d_t.value.reshape(3, 5), d_i)
                assert np.array_equal(n_t.value.reshape(3, 5, 3), n_i)

    def test_single_view(self):
        from sdfrecon.nn import pipeline_infer

        nets = tiny_nets(seed=10)
        batch = fake_batch(np.random.default_rng(11), n=4, n_views=1)
        tape = Tape()
        occ_t, _, _ = pipeline_forward(nets, tape, batch)
        occ_i, _, _ = pipeline_infer(nets, batch)
        assert np.array_equal(occ_t.value[:, 0], occ_i)
