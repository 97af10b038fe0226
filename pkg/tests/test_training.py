import json

import numpy as np
import pytest

from mkd.channel import SystemConfig, dft_pilots, draw_channels, generate_dataset, simulate_pilot_rx
from mkd.errors import ConfigError, TrainingDivergedError
from mkd.linalg import rng_stream
from mkd.neural import AdamState, adam_step, build_networks, load_checkpoint, save_checkpoint
from mkd.precoder import per_user_rates, sum_rate
from mkd.training import (TrainConfig, _check_divergence, dnn_precoders, evaluate, loss_aux, loss_main,
                          train_joint_kd)

from gradutil import check_network_gradients, tiny_batch


def short_cfg(**kw):
    base = dict(iterations=3, batch_size=16, lr_boundaries=(), eval_every=2, validation_size=20, test_size=20)
    base.update(kw)
    return TrainConfig(**base)


def checksum(arrays):
    return tuple(float(np.sum(a)) + float(np.sum(a * a)) for a in arrays)


class TestTrainConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.iterations, c.batch_size, c.lr, c.lr_boundaries) == (50000, 1000, 2e-4, (30000, 40000))
        assert c.eval_every == 500 and c.validation_size == 100000

    def test_desk(self):
        c = TrainConfig.desk_scale()
        assert (c.iterations, c.batch_size, c.lr_boundaries, c.validation_size) == (5000, 256, (3000, 4000), 10000)

    @pytest.mark.parametrize("kw", [dict(iterations=0), dict(batch_size=-1), dict(mode="x"),
                                    dict(iterations=10, lr_boundaries=(20,)), dict(power_mode="sampled")])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


class TestLosses:
    def test_loss_equals_rate(self, tiny_cfg):
        nets = build_networks(tiny_cfg, rng_stream(0, "init"))
        h, y = tiny_batch(tiny_cfg, 32)
        res = loss_main(nets, h, y, 10.0, need_grad=False)
        v = dnn_precoders(nets, y, 10.0, tiny_cfg.M, tiny_cfg.N)
        assert -res.loss == pytest.approx(sum_rate(h, v, 10.0).sum, abs=1e-12)

    def test_zero_channels(self, tiny_cfg):
        nets = build_networks(tiny_cfg, rng_stream(0, "init"))
        _, y = tiny_batch(tiny_cfg, 8)
        h = np.zeros((8, 2, 2, 1), complex)
        assert loss_main(nets, h, y, 10.0).loss == 0
        assert loss_aux(nets, h, y, 10.0).loss == 0

    def test_aux_gradients_sampled(self, tiny_cfg):
        reps = check_network_gradients(tiny_cfg, "raw", indices_per_array=60)
        assert reps.pop("idle_unchanged")
        bad = {k: r.max_rel_error for k, r in reps.items() if not r.passed}
        assert not bad

    def test_main_smooth_twin_gradients_sampled(self, tiny_cfg):
        reps = check_network_gradients(tiny_cfg, "tanh", indices_per_array=60)
        assert reps.pop("idle_unchanged")
        bad = {k: r.max_rel_error for k, r in reps.items() if not r.passed}
        assert not bad

    def test_aux_transmitter_untouched_by_main(self, tiny_cfg):
        nets = build_networks(tiny_cfg, rng_stream(0, "init"))
        h, y = tiny_batch(tiny_cfg, 8)
        main = loss_main(nets, h, y, 10.0)
        aux = loss_aux(nets, h, y, 10.0)
        assert len(main.grads_tx) == len(nets.transmitter.arrays())
        assert len(aux.grads_tx) == len(nets.auxiliary.arrays())

    def test_saturation(self, tiny_cfg):
        nets = build_networks(tiny_cfg, rng_stream(1, "init"))
        signs = np.array([[1.0, -1.0, 1.0], [-1.0, -1.0, 1.0]])
        for k, rx in enumerate(nets.receivers):
            rx.weights[-1][...] = 0
            rx.biases[-1][...] = 20.0 * signs[k]
        # auxiliary net sees u = 20 sign(u); scaling its input columns makes it the main net on sign(u)
        aux = nets.transmitter.copy()
        aux.weights[0][:, :-1] /= 20.0
        nets.auxiliary = aux
        h, y = tiny_batch(tiny_cfg, 16)
        hard = loss_main(nets, h, y, 10.0, need_grad=False).loss
        soft = loss_main(nets, h, y, 10.0, need_grad=False, hard=False).loss
        teacher = loss_aux(nets, h, y, 10.0, need_grad=False).loss
        assert abs(hard - soft) <= 1e-3
        assert abs(hard - teacher) <= 1e-3


class TestTrainingLoop:
    def test_update_order_and_disjointness(self, tiny_cfg):
        log = []
        state = {}

        def sums(nets):
            return (checksum(nets.receiver_arrays()), checksum(nets.transmitter.arrays()),
                    checksum(nets.auxiliary.arrays()))

        def hook(step, it, nets):
            rx, tx, aux = sums(nets)
            prev_rx, prev_tx, prev_aux = state["prev"]
            log.append((step, it, rx != prev_rx, tx != prev_tx, aux != prev_aux))
            state["prev"] = (rx, tx, aux)

        nets = build_networks(tiny_cfg, rng_stream(0, "init"))
        state["prev"] = sums(nets)
        train_joint_kd(short_cfg(), tiny_cfg, nets=nets, hook=hook)
        assert [(s, i) for s, i, *_ in log] == [("aux", 0), ("main", 0), ("aux", 1), ("main", 1),
                                                ("aux", 2), ("main", 2)]
        for step, _, rx_moved, tx_moved, aux_moved in log:
            assert rx_moved
            assert tx_moved == (step == "main")
            assert aux_moved == (step == "aux")

    def test_no_kd_matches_plain_ste(self, tiny_cfg):
        cfg = short_cfg(mode="no_kd", iterations=4)
        rep = train_joint_kd(cfg, tiny_cfg)
        # reference plain STE loop
        nets = build_networks(tiny_cfg, rng_stream(cfg.seed, "init"))
        ch, nz = rng_stream(cfg.seed, "channel"), rng_stream(cfg.seed, "noise")
        params = nets.receiver_arrays() + nets.transmitter.arrays()
        opt = AdamState.zeros_like(params, cfg.schedule())
        losses = []
        for _ in range(cfg.iterations):
            h = draw_channels(tiny_cfg, ch, (cfg.batch_size,))
            y = simulate_pilot_rx(h, dft_pilots(tiny_cfg), tiny_cfg, nz).received
            res = loss_main(nets, h, y, 10.0)
            adam_step(params, res.flat_rx() + res.grads_tx, opt)
            losses.append(res.loss)
        assert [l for _, l, _ in rep.loss_curve] == losses
        final = rep.final_checkpoint.nets
        for a, b in zip(final.transmitter.arrays(), nets.transmitter.arrays()):
            assert a.tobytes() == b.tobytes()
        assert rep.aux_loss_curve == []

    def test_reproducible(self, tiny_cfg, tmp_path):
        val = generate_dataset(tiny_cfg, 20, 9, "validation")
        a = train_joint_kd(short_cfg(iterations=4), tiny_cfg, val, out_dir=tmp_path / "a")
        b = train_joint_kd(short_cfg(iterations=4), tiny_cfg, val, out_dir=tmp_path / "b")
        assert a.loss_curve == b.loss_curve
        for name in ("loss_curve.csv", "validation.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_best_checkpoint(self, tiny_cfg):
        val = generate_dataset(tiny_cfg, 50, 9, "validation")
        rep = train_joint_kd(short_cfg(iterations=12, eval_every=3), tiny_cfg, val)
        assert [i for i, _ in rep.validation_curve] == [3, 6, 9, 12]
        best_it, best_val = max(rep.validation_curve, key=lambda t: t[1])
        assert rep.best_iteration == best_it
        score = evaluate(rep.best_checkpoint, val, [10.0])[0].sum
        assert score == pytest.approx(best_val, abs=1e-12)

    def test_learning_progress(self, tiny_cfg):
        cfg = TrainConfig(iterations=200, batch_size=64, lr=1e-3, lr_boundaries=(), eval_every=1000)
        rep = train_joint_kd(cfg, tiny_cfg)
        losses = np.array([l for _, l, _ in rep.loss_curve])
        assert losses[-50:].mean() < losses[:50].mean()

    def test_divergence_dump(self, tmp_path):
        with pytest.raises(TrainingDivergedError):
            _check_divergence(float("nan"), 7, "main", tmp_path)
        info = json.loads((tmp_path / "divergence.json").read_text())
        assert info["iteration"] == 7 and info["step"] == "main"
        with pytest.raises(TrainingDivergedError):
            _check_divergence(-2e6, 1, "aux", None)


class TestEvaluate:
    def test_hand_average(self, tiny_cfg):
        nets = build_networks(tiny_cfg, rng_stream(4, "init"))
        ds = generate_dataset(tiny_cfg, 4, 2, "test")
        rep = evaluate(nets, ds, [10.0], tiny_cfg)[0]
        total = 0.0
        for s in range(4):
            v = dnn_precoders(nets, ds.Y[s:s + 1], 10.0, 2, 1)[0]
            total += per_user_rates(ds.H[s], v, 10.0).sum()
        assert rep.sum == pytest.approx(total / 4, abs=1e-12)
        assert rep.sample_count == 4

    def test_deterministic_and_round_trip(self, tiny_cfg, tmp_path):
        rep = train_joint_kd(short_cfg(), tiny_cfg)
        ds = generate_dataset(tiny_cfg, 30, 2, "test")
        a = evaluate(rep.final_checkpoint, ds, [0.0, 10.0])
        b = evaluate(rep.final_checkpoint, ds, [0.0, 10.0])
        assert [r.sum for r in a] == [r.sum for r in b]
        save_checkpoint(tmp_path / "m.mkd", rep.final_checkpoint)
        c = evaluate(load_checkpoint(tmp_path / "m.mkd"), ds, [0.0, 10.0])
        assert [r.sum for r in a] == [r.sum for r in c]

    def test_mismatch(self, tiny_cfg):
        rep = train_joint_kd(short_cfg(), tiny_cfg)
        other = SystemConfig(M=4, N=1, K=2, B=3, L=4)
        with pytest.raises(ConfigError):
            evaluate(rep.final_checkpoint, generate_dataset(other, 5, 1, "test"), [10.0])
