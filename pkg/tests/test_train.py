import numpy as np
import pytest

from rectseg import synthdata as sd
from rectseg.evaluation import evaluate_checkpoint
from rectseg.pseudo import generate_pseudo_labels, threshold_filter
from rectseg.train import (ExperimentConfig, History, TrainingDiverged, adapt, config_items, poly_lr,
                           pretrain_source)

TINY = dict(widths=(8, 8, 8), aux_tap=1, n_source=16, n_target=16, batch_size=2, crop_h=12, crop_w=12,
            source_iters=6, adapt_iters=8, base_lr=0.01)



@pytest.fixture(scope="module")
def data():
    src, tgt = sd.preset("default")
    small = dict(height=16, width=16, size_range=(2.0, 5.0))
    from dataclasses import replace
    return sd.gen_domain(1, 16, replace(src, **small)), sd.gen_domain(2, 16, replace(tgt, **small))


@pytest.fixture(scope="module")
def cfg():
    return ExperimentConfig(**TINY)


@pytest.fixture(scope="module")
def source_net(data, cfg):
    return pretrain_source(data[0], cfg)[0]


def _params(net):
    return {k: v.data.copy() for k, v in net.params.items()}


def _same(a, b):
    return all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


class TestPoly:
    def test_examples(self):
        assert poly_lr(0, 100, 1e-4) == 1e-4
        assert poly_lr(100, 100, 1e-4) == 0
        assert poly_lr(50, 100, 1e-4) == pytest.approx(1e-4 * 0.5 ** 0.9)
        assert poly_lr(50, 100, 1e-4) == pytest.approx(5.359e-5, abs=1e-8)

    def test_nonincreasing(self):
        lrs = [poly_lr(i, 37, 0.3) for i in range(38)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    @pytest.mark.parametrize("it,total", [(101, 100), (-1, 100), (0, 0)])
    def test_rejects(self, it, total):
        with pytest.raises(ValueError):
            poly_lr(it, total, 1.0)


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(early_stop=0.0), dict(early_stop=1.5), dict(batch_size=0),
                                     dict(loss="focal"), dict(distance="l1"), dict(pseudo_source="oracle"),
                                     dict(source_iters=-1)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            ExperimentConfig(**bad)

    def test_defaults(self):
        c = ExperimentConfig()
        assert (c.source_iters, c.adapt_iters, c.early_stop, c.batch_size) == (3000, 2000, 0.5, 8)
        assert c.adapt_steps == 1000 and (c.alpha, c.beta) == (1.0, 0.5)
        assert len(config_items(c)) > 20


class TestPretrain:
    def test_zero_iterations_is_init(self, data, cfg):
        from rectseg.model import init_params
        net, hist, _ = pretrain_source(data[0], cfg.replace(source_iters=0))
        assert _same(net, init_params(cfg.seed, cfg.arch)) and not hist.rows

    def test_deterministic(self, data, cfg, source_net):
        assert _same(pretrain_source(data[0], cfg)[0], source_net)
        assert not _same(pretrain_source(data[0], cfg.replace(seed=1))[0], source_net)

    def test_snapshots(self, data, cfg, source_net):
        net, hist, snaps = pretrain_source(data[0], cfg, snapshot_at=(0, 3, 6))
        assert sorted(snaps) == [0, 3, 6] and _same(snaps[6], net)
        assert len(hist.rows) == 6 and [r[0] for r in hist.rows] == list(range(6))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reported(self, data, cfg, monkeypatch):
        import rectseg.train as tr
        real = tr.init_params

        def poisoned(seed, arch):
            net = real(seed, arch)
            net.params["trunk0.w"].data[0, 0, 0, 0] = np.inf
            return net

        monkeypatch.setattr(tr, "init_params", poisoned)
        with pytest.raises(TrainingDiverged, match="pretrain_source"):
            pretrain_source(data[0], cfg)

    def test_learns_above_chance(self, data):
        c = ExperimentConfig(**{**TINY, "source_iters": 250, "batch_size": 4})
        net = pretrain_source(data[0], c)[0]
        assert evaluate_checkpoint(net, data[0]).miou > 1 / 5


@pytest.fixture(scope="module")
def target(data, source_net):
    x = np.stack([d.image for d in data[1]])
    return x, generate_pseudo_labels(source_net, x, "strong")


class TestAdapt:
    def test_zero_iterations_identity(self, source_net, target, cfg):
        net, hist = adapt(source_net, *target, cfg.replace(adapt_iters=0))
        assert _same(net, source_net) and net is not source_net

    def test_does_not_touch_inputs(self, source_net, target, cfg):
        before = _params(source_net)
        fp = target[1].fingerprint()
        net, hist = adapt(source_net, *target, cfg)
        assert fp == target[1].fingerprint()
        assert all(np.array_equal(before[k], source_net.params[k].data) for k in before)
        assert not _same(net, source_net)
        assert len(hist.rows) == cfg.adapt_steps == 4

    @pytest.mark.parametrize("loss", ["rectified", "plain_ce", "thresholded"])
    def test_deterministic(self, source_net, target, cfg, loss):
        c = cfg.replace(loss=loss)
        a, ha = adapt(source_net, *target, c)
        b, hb = adapt(source_net, *target, c)
        assert _same(a, b) and ha.rows == hb.rows

    def test_forced_equal_heads_matches_plain_ce(self, source_net, target, cfg):
        rect, hr = adapt(source_net, *target, cfg.replace(loss="rectified"), force_equal_heads=True)
        plain, hp = adapt(source_net, *target, cfg.replace(loss="plain_ce"))
        assert _same(rect, plain)
        assert [r[2] for r in hr.rows] == [r[2] for r in hp.rows]
        assert all(r[4] == 0 for r in hr.rows)

    def test_plain_ce_leaves_aux_head(self, source_net, target, cfg):
        net, _ = adapt(source_net, *target, cfg.replace(loss="plain_ce"))
        assert np.array_equal(net.params["aux.w"].data, source_net.params["aux.w"].data)
        net, _ = adapt(source_net, *target, cfg.replace(loss="rectified"))
        assert not np.array_equal(net.params["aux.w"].data, source_net.params["aux.w"].data)

    def test_empty_masks(self, source_net, target, cfg):
        x, pl = target
        with pytest.raises(TrainingDiverged, match="empty"):
            adapt(source_net, x, threshold_filter(pl, 1.0), cfg.replace(loss="thresholded"))

    def test_some_batches_skipped(self, source_net, target, cfg):
        x, pl = target
        valid = np.zeros_like(pl.valid)
        valid[0] = True
        from dataclasses import replace
        sparse = replace(pl, valid=valid)
        _, hist = adapt(source_net, x, sparse, cfg.replace(loss="thresholded", adapt_iters=40))
        assert hist.skipped > 0 and len(hist.rows) + hist.skipped == 20

    def test_length_mismatch(self, source_net, target, cfg):
        with pytest.raises(ValueError):
            adapt(source_net, target[0][:3], target[1], cfg)


def test_history_csv(tmp_path):
    h = History()
    h.add(0, 0.1, 1.5, 1.0, 0.5)
    h.add(1, 0.05, 1.25, 1.0, 0.25)
    h.write_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "iter,lr,loss,ce_term,var_term" and lines[2] == "1,0.05,1.25,1.0,0.25"
