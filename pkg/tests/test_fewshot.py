import csv

import numpy as np
import pytest

from nsl.autodiff import Tensor
from nsl.data import SynthSpec, synth_dataset
from nsl.errors import ConfigurationError, TrainingError
from nsl.fewshot import (
    FewshotConfig, MetaConfig, adapt, dynamic_fewshot, episode_loss, head_names, head_only_fewshot,
    mean_ci, meta_gradient, meta_inner_step, meta_objective, meta_setup, meta_test, meta_train,
    sample_episode, sign_test, similarity_names, static_fewshot, write_results, episode_stream,
)
from nsl.gradcheck import finite_diff_check
from nsl.network import BatchNorm, Conv, Linear, MaxPool, Network, NetworkSpec, PredictorConfig, ReLU
from nsl.training import TrainConfig, train


def backbone(kind="none", mode="static", classes=6):
    return NetworkSpec((1, 8, 8), classes, [
        Conv(4, 3, similarity=kind, mode=mode), BatchNorm(), ReLU(), MaxPool(),
        Conv(4, 3, similarity=kind, mode=mode), ReLU(), MaxPool(), Linear(None),
    ], PredictorConfig(hidden=4))


@pytest.fixture(scope="module")
def base():
    return synth_dataset(SynthSpec(classes=6, per_class=12, size=8), 0)


@pytest.fixture(scope="module")
def novel():
    return synth_dataset(SynthSpec(classes=5, per_class=12, size=8, first_class=6), 1)


@pytest.fixture(scope="module")
def pretrained(base):
    plain = Network(backbone(), 0)
    train(plain, base, TrainConfig(epochs=3, batch_size=12, lr=0.05))
    nsn = Network(backbone("diagonal"), 0)
    nsn.load_matching(plain.state())
    return nsn


@pytest.fixture(scope="module")
def dynamic(base):
    net = Network(backbone("diagonal", "dynamic"), 1)
    train(net, base, TrainConfig(epochs=2, batch_size=12, lr=0.05))
    return net


class TestEpisodes:
    def test_sizes(self, novel):
        ep = sample_episode(novel, 5, 2, 3, np.random.default_rng(0))
        assert len(ep.support) == 10 and len(ep.query) == 15
        assert sorted(np.bincount(ep.support.labels)) == [2] * 5

    def test_deterministic(self, novel):
        a = sample_episode(novel, 3, 2, 2, np.random.default_rng(4))
        b = sample_episode(novel, 3, 2, 2, np.random.default_rng(4))
        assert a.classes == b.classes and np.array_equal(a.support_index, b.support_index)
        assert np.array_equal(a.query_index, b.query_index)

    def test_exhaustive_split(self, novel):
        ep = sample_episode(novel, 5, 4, 8, np.random.default_rng(2))
        sup, qry = set(ep.support_index.tolist()), set(ep.query_index.tolist())
        assert not sup & qry and sup | qry == set(range(len(novel)))

    def test_disjoint_and_consistent(self, novel):
        rng = np.random.default_rng(3)
        for _ in range(500):
            ep = sample_episode(novel, 3, 2, 3, rng)
            assert not set(ep.support_index.tolist()) & set(ep.query_index.tolist())
            for new, orig in enumerate(ep.classes):
                assert (novel.labels[ep.support_index[ep.support.labels == new]] == orig).all()
                assert (novel.labels[ep.query_index[ep.query.labels == new]] == orig).all()

    @pytest.mark.parametrize("args", [(6, 1, 1), (2, 10, 3), (0, 1, 1)])
    def test_insufficient(self, novel, args):
        with pytest.raises(ValueError):
            sample_episode(novel, *args, np.random.default_rng(0))


def snapshot(net, groups):
    return {n: net.params[n].data.copy() for n in net.names(*groups)}


def same(a, b):
    return a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)


def chance_ok(accs, N, q):
    n = len(accs) * q
    p = 1 / N
    return abs(np.mean(accs) - p) <= 3 * np.sqrt(p * (1 - p) / n)


class TestStatic:
    def test_backbone_bitwise_frozen(self, pretrained, novel):
        ep = sample_episode(novel, 3, 2, 2, np.random.default_rng(0))
        res = static_fewshot(pretrained, ep, FewshotConfig(epochs=5))
        assert same(snapshot(pretrained, ["backbone"]), snapshot(res.model, ["backbone"]))
        assert all(np.array_equal(res.model.buffers[k], pretrained.buffers[k]) for k in pretrained.buffers)
        assert not same(snapshot(pretrained, ["similarity"]), snapshot(res.model, ["similarity"]))

    def test_zero_epochs_chance(self, pretrained, novel):
        rng = np.random.default_rng(1)
        accs = []
        for i in range(50):
            ep = sample_episode(novel, 5, 1, 4, rng)
            accs.append(static_fewshot(pretrained, ep, FewshotConfig(epochs=0, head_init="random", seed=i)).accuracy)
        assert chance_ok(accs, 5, 20)

    def test_support_equals_query(self, pretrained, novel):
        ep = sample_episode(novel, 3, 4, 1, np.random.default_rng(2))
        ep.query = ep.support
        untuned = static_fewshot(pretrained, ep, FewshotConfig(epochs=0)).accuracy
        tuned = static_fewshot(pretrained, ep, FewshotConfig(epochs=30, lr=0.1)).accuracy
        assert tuned >= untuned

    def test_requires_static(self, novel):
        ep = sample_episode(novel, 2, 1, 1, np.random.default_rng(0))
        with pytest.raises(ConfigurationError):
            static_fewshot(Network(backbone()), ep)

    def test_bn_update_knob(self, pretrained, novel):
        ep = sample_episode(novel, 3, 2, 2, np.random.default_rng(0))
        res = static_fewshot(pretrained, ep, FewshotConfig(epochs=1, bn_stats="update"))
        assert not np.array_equal(res.model.buffers["layer1.running_mean"], pretrained.buffers["layer1.running_mean"])


class TestDynamic:
    def test_theta_frozen(self, dynamic, novel):
        ep = sample_episode(novel, 3, 2, 2, np.random.default_rng(0))
        res = dynamic_fewshot(dynamic, ep, FewshotConfig(epochs=5))
        assert same(snapshot(dynamic, ["backbone", "predictor"]), snapshot(res.model, ["backbone", "predictor"]))

    def test_zero_retraining_chance(self, dynamic, novel):
        rng = np.random.default_rng(5)
        accs = [dynamic_fewshot(dynamic, sample_episode(novel, 5, 1, 4, rng),
                                FewshotConfig(epochs=0, head_init="random", seed=i)).accuracy for i in range(50)]
        assert chance_ok(accs, 5, 20)

    def test_zero_predictor_matches_identity(self, dynamic, novel):
        net = dynamic.copy()
        for n in net.names("predictor"):
            net.params[n].data[...] = 0
        ident = Network(backbone("identity"), 0)
        ident.load_matching(net.state())
        ep = sample_episode(novel, 3, 2, 3, np.random.default_rng(1))
        a = dynamic_fewshot(net, ep, FewshotConfig(epochs=10))
        b = head_only_fewshot(ident, ep, FewshotConfig(epochs=10))
        assert a.accuracy == b.accuracy and a.query_loss == b.query_loss

    def test_requires_dynamic(self, pretrained, novel):
        ep = sample_episode(novel, 2, 1, 1, np.random.default_rng(0))
        with pytest.raises(ConfigurationError):
            dynamic_fewshot(pretrained, ep)


def leaf(net, names):
    return {n: Tensor(net.params[n].data.copy(), requires_grad=True, name=n) for n in names}


class TestInnerStep:
    def test_toy_closed_form(self):
        A = np.array([[1.0, 2.0], [0.5, -1.0]])
        M = {"M": Tensor(np.eye(2), requires_grad=True)}
        toy = lambda net, P, data: ((P["M"] - A) * (P["M"] - A)).sum() * 0.5
        out = meta_inner_step(M, None, 0.3, None, loss_fn=toy)
        np.testing.assert_allclose(out["M"].data, np.eye(2) - 0.3 * (np.eye(2) - A), atol=1e-15)

    def test_zero_gradient(self, pretrained, novel):
        net = meta_setup(pretrained, 3)
        ep = sample_episode(novel, 3, 2, 2, np.random.default_rng(0))
        # a zero head makes every logit 0, so the similarity gradient vanishes
        P = leaf(net, similarity_names(net))
        out = meta_inner_step(P, ep.support, 0.5, net)
        assert all(np.array_equal(out[n].data, P[n].data) for n in P)

    @pytest.mark.parametrize("head_steps", [0, 2])
    def test_outer_gradient_finite_differences(self, pretrained, novel, head_steps):
        net = meta_setup(pretrained, 3)
        ep = sample_episode(novel, 3, 2, 2, np.random.default_rng(1))
        P = leaf(net, similarity_names(net) + head_names(net))
        rng = np.random.default_rng(2)
        for t in P.values():
            t.data += 0.1 * rng.normal(size=t.shape)
        report = finite_diff_check(lambda: meta_objective(net, P, ep, 0.2, 1, head_steps), P, tol=1e-5)
        assert report.passed, report.errors

    def test_first_order_differs(self, pretrained, novel):
        net = meta_setup(pretrained, 3)
        ep = sample_episode(novel, 3, 2, 2, np.random.default_rng(1))
        P = leaf(net, similarity_names(net) + head_names(net))
        P[head_names(net)[0]].data += 0.1
        _, g2 = meta_gradient(net, P, ep, 0.5, 2)
        _, g1 = meta_gradient(net, P, ep, 0.5, 2, first_order=True)
        name = similarity_names(net)[0]
        assert np.isfinite(g1[name]).all() and not np.allclose(g1[name], g2[name])

    def test_eta_zero_collapses(self, pretrained, novel):
        net = meta_setup(pretrained, 3)
        ep = sample_episode(novel, 3, 2, 2, np.random.default_rng(1))
        P = leaf(net, similarity_names(net) + head_names(net))
        P[head_names(net)[0]].data += 0.1
        loss, g = meta_gradient(net, P, ep, 0.0, 3, 4)
        from nsl.autodiff import grad
        plain = episode_loss(net, P, ep.query)
        ref = grad(plain, list(P.values()))
        assert loss == float(plain.data)
        for n, r in zip(P, ref):
            np.testing.assert_allclose(g[n], r.data, atol=1e-14)


class TestMeta:
    def test_zero_outer_is_identity(self, pretrained):
        net = meta_setup(pretrained, 3)
        state = meta_train(net, iter(()), MetaConfig(outer_steps=0))
        for n in similarity_names(net):
            assert np.array_equal(state.init[n], np.ones_like(state.init[n]))

    def test_counters_and_determinism(self, pretrained, base, novel):
        net = meta_setup(pretrained, 3)
        state = meta_train(net, episode_stream(base, 3, 1, 2, 0), MetaConfig(outer_steps=2, lr=1e-2, head_steps=2))
        state.head_steps = 20
        ep = sample_episode(novel, 3, 2, 2, np.random.default_rng(0))
        a, b = meta_test(state, ep), meta_test(state, ep)
        assert (a.similarity_updates, a.head_updates) == (5, 25)
        assert a == b

    def test_meta_train_deterministic(self, pretrained, base):
        net = meta_setup(pretrained, 3)
        cfg = MetaConfig(outer_steps=2, inner_steps=1, head_steps=1, lr=1e-2)
        a = meta_train(net, episode_stream(base, 3, 1, 2, 7), cfg)
        b = meta_train(net, episode_stream(base, 3, 1, 2, 7), cfg)
        assert all(a.init[n].tobytes() == b.init[n].tobytes() for n in a.init)
        assert same(snapshot(net, ["similarity"]), {n: np.ones_like(v) for n, v in snapshot(net, ["similarity"]).items()})

    def test_zero_steps_chance(self, pretrained, novel):
        net = meta_setup(pretrained, 5)
        state = meta_train(net, iter(()), MetaConfig(outer_steps=0))
        state.joint_steps = state.head_steps = 0
        rng = np.random.default_rng(0)
        res = [meta_test(state, sample_episode(novel, 5, 1, 2, rng)) for _ in range(20)]
        assert all(r.accuracy == 0.2 for r in res)

    def test_inner_loop_only_moves_similarity_and_head(self, pretrained, novel):
        net = meta_setup(pretrained, 3)
        before = snapshot(net, ["backbone", "similarity", "head"])
        ep = sample_episode(novel, 3, 2, 2, np.random.default_rng(0))
        ad = adapt(net, leaf(net, similarity_names(net)), ep.support, 0.2, 2, 2, create_graph=False)
        assert set(ad.params) == set(similarity_names(net) + head_names(net))
        assert same(before, snapshot(net, ["backbone", "similarity", "head"]))

    def test_nonfinite_aborts(self, pretrained, base):
        net = meta_setup(pretrained, 3)
        net.params[similarity_names(net)[0]].data[0] = np.nan
        with pytest.raises(TrainingError) as info:
            meta_train(net, episode_stream(base, 3, 1, 2, 0), MetaConfig(outer_steps=2))
        assert info.value.iteration == 0

    def test_kinds_checked(self, pretrained):
        net = meta_setup(pretrained, 3)
        state = meta_train(net, iter(()), MetaConfig(outer_steps=0))
        state.kinds = {0: "block", 4: "block"}
        with pytest.raises(ConfigurationError):
            state.validate()

    def test_unknown_meta_key(self):
        with pytest.raises(ConfigurationError):
            MetaConfig.from_dict({"outer": 3})


class TestReporting:
    def test_mean_ci(self):
        m, h = mean_ci([0.5, 0.7, 0.6, 0.8])
        assert m == pytest.approx(0.65)
        assert h == pytest.approx(1.959963984540054 * np.std([0.5, 0.7, 0.6, 0.8], ddof=1) / 2)

    def test_sign_test(self):
        wins, n, p = sign_test([0, 0, 0, 0, 0, 1], [1, 1, 1, 1, 1, 1])
        assert (wins, n) == (5, 5) and p == pytest.approx(1 / 32)

    def test_results_csv(self, tmp_path):
        path = tmp_path / "r.csv"
        write_results(path, [{"episode_id": 0, "strategy": "static", "accuracy": 0.4}])
        assert list(csv.reader(path.open())) == [["episode_id", "strategy", "accuracy"], ["0", "static", "0.4"]]
