"""Corruption sampling, target construction, and the four objectives."""

from __future__ import annotations

import numpy as np
import pytest

from vrdu.autodiff import Tensor
from vrdu.model import DocModel, ModelConfig
from vrdu.pretrain import (
    CorruptionConfig,
    build_pretrain_example,
    build_rop_targets,
    compute_losses,
    donor_features,
    mvlm_loss,
    rop_loss,
    rrp_loss,
    sample_mvlm,
    sample_rrp,
    sample_tia,
    tia_loss,
)
from vrdu.rng import RngStream

CFG = CorruptionConfig()


class TestRopTargets:
    def test_chain_with_terminal_self_loop(self):
        g, valid = build_rop_targets([1, 3, 2], 5)
        assert g[1, 3] == 1 and g[3, 2] == 1 and g[2, 2] == 1
        np.testing.assert_array_equal(valid, [False, True, True, True, False])
        np.testing.assert_array_equal(g.sum(axis=1)[valid], 1.0)
        np.testing.assert_array_equal(g[~valid], 0.0)

    def test_empty_order(self):
        g, valid = build_rop_targets([], 4)
        assert g.sum() == 0 and not valid.any()

    def test_single_position_points_to_itself(self):
        g, valid = build_rop_targets([2], 4)
        assert g[2, 2] == 1 and valid.sum() == 1


class TestClosedForms:
    def test_rop_uniform_rows_is_n_log_n(self):
        n = 13
        g, valid = build_rop_targets(range(n), n)
        loss = rop_loss([[Tensor(np.zeros((n, n)))]], g, valid)
        assert loss.item() == pytest.approx(n * np.log(n), abs=1e-9)

    def test_rop_perfect_prediction_is_zero(self):
        n = 6
        g, valid = build_rop_targets(range(n), n)
        loss = rop_loss([[Tensor(1e4 * g)]], g, valid)
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_rrp_at_half_is_49_log_2(self, tiny_model):
        model = DocModel(tiny_model.cfg, seed=99)
        model.rrp_w.data[...] = 0.0
        model.rrp_b.data[...] = 0.0
        fake = type("R", (), {})()
        fake.final = Tensor(np.random.default_rng(0).normal(size=(5, model.cfg.d)))
        labels = np.random.default_rng(1).integers(0, 2, 49).astype(float)
        loss = rrp_loss(fake, model, labels)
        assert loss.item() == pytest.approx(49 * np.log(2), abs=1e-9)

    def test_mvlm_uniform_logits_is_log_k(self, tiny_model):
        fake = type("R", (), {})()
        fake.final = Tensor(np.zeros((4, tiny_model.cfg.d)))
        targets = [(1, 7), (2, 19), (3, 3)]
        loss = mvlm_loss(fake, tiny_model, targets)
        assert loss.item() == pytest.approx(np.log(tiny_model.cfg.vocab_size), abs=1e-9)

    def test_tia_zero_at_perfect_prediction(self, tiny_model):
        model = DocModel(tiny_model.cfg, seed=98)
        model.tia_w.data[...] = 0.0
        model.tia_b.data[...] = 50.0  # sigmoid -> 1 to machine precision
        fake = type("R", (), {})()
        fake.final = Tensor(np.zeros((3, model.cfg.d)))
        labels = np.ones(3)
        include = np.ones(3, dtype=bool)
        assert tia_loss(fake, model, labels, include).item() == pytest.approx(0.0, abs=1e-9)


class TestRopRelabeling:
    def test_loss_invariant_under_consistent_permutation(self):
        rng = np.random.default_rng(3)
        n = 9
        a = rng.normal(size=(n, n))
        order = [1, 4, 2, 6, 3]
        g, valid = build_rop_targets(order, n)
        base = rop_loss([[Tensor(a)]], g, valid).item()
        sigma = rng.permutation(n)
        a2 = a[np.ix_(sigma, sigma)]
        inv = np.argsort(sigma)
        order2 = [int(inv[p]) for p in order]
        g2, valid2 = build_rop_targets(order2, n)
        relabeled = rop_loss([[Tensor(a2)]], g2, valid2).item()
        assert relabeled == pytest.approx(base, rel=1e-12)


class TestSampleMvlm:
    def test_count_and_targets(self, vocab):
        ids = list(np.random.default_rng(0).integers(5, 60, size=40))
        out, targets = sample_mvlm(ids, vocab, RngStream(0, "m"), CFG)
        assert len(targets) == round(0.15 * 40)
        for pos, gold in targets:
            assert gold == ids[pos]
        touched = {pos for pos, _ in targets}
        for i, tid in enumerate(out):
            if i not in touched:
                assert tid == ids[i]
            else:
                assert tid not in (vocab.pad_id, vocab.cls_id, vocab.sep_id, vocab.unk_id)

    def test_corruption_mix(self, vocab):
        # over many draws the 80/10/10 split shows up in aggregate
        ids = list(range(5, 105))
        n_mask = n_keep = n_rand = 0
        for trial in range(40):
            out, targets = sample_mvlm(ids, vocab, RngStream(trial, "mix"), CFG)
            for pos, gold in targets:
                if out[pos] == vocab.mask_id:
                    n_mask += 1
                elif out[pos] == gold:
                    n_keep += 1
                else:
                    n_rand += 1
        total = n_mask + n_keep + n_rand
        assert n_mask / total == pytest.approx(0.8, abs=0.08)
        assert n_keep / total == pytest.approx(0.1, abs=0.06)
        assert n_rand / total == pytest.approx(0.1, abs=0.06)

    def test_zero_ratio(self, vocab):
        cfg = CorruptionConfig(mvlm_ratio=0.0)
        out, targets = sample_mvlm([6, 7, 8], vocab, RngStream(0, "m"), cfg)
        assert out == [6, 7, 8] and targets == []

    def test_deterministic(self, vocab):
        ids = list(range(5, 45))
        a = sample_mvlm(ids, vocab, RngStream(4, "m"), CFG)
        b = sample_mvlm(ids, vocab, RngStream(4, "m"), CFG)
        assert a == b


class TestSampleTia(object):
    def test_covered_words_blacked_out(self, vocab):
        from vrdu.synth import SyntheticSpec, gen_synthetic_corpus

        doc = gen_synthetic_corpus(
            SyntheticSpec(family="single_column", tokens_per_doc=60), 1,
            seed=17, vocab=vocab)[0]
        image, covered = sample_tia(doc, range(len(doc.words)),
                                    RngStream(1, "t"), CFG)
        assert covered  # 15% of many lines rounds to at least one
        for w in covered:
            x0, y0, x1, y1 = doc.pixel_boxes[w]
            assert (image[y0:y1, x0:x1] == 0).all()
        assert doc.image.max() == 255  # original untouched

    def test_no_included_words(self, small_corpus):
        image, covered = sample_tia(small_corpus[0], [], RngStream(1, "t"), CFG)
        assert covered == set()
        np.testing.assert_array_equal(image, small_corpus[0].image)


class TestSampleRrp:
    def test_five_of_49_replaced(self):
        rng = np.random.default_rng(5)
        patches = rng.normal(size=(49, 8))
        donors = [rng.normal(size=(49, 8)) for _ in range(3)]
        out, labels = sample_rrp(patches, RngStream(2, "r"), donors, CFG)
        assert labels.sum() == round(0.10 * 49) == 5
        for i in range(49):
            if labels[i]:
                assert any(np.array_equal(out[i], d[i]) for d in donors)
            else:
                np.testing.assert_array_equal(out[i], patches[i])

    def test_requires_donors(self):
        with pytest.raises(ValueError):
            sample_rrp(np.zeros((49, 8)), RngStream(0, "r"), [], CFG)


@pytest.fixture(scope="module")
def example(tiny_model, small_corpus, vocab):
    donors = donor_features(small_corpus, tiny_model)
    return build_pretrain_example(small_corpus[2], vocab, tiny_model, CFG,
                                  seed=7, example_id="0/2", donor_pool=donors)


class TestBuildExample:
    def test_invariants(self, example):
        n = example.seq.n_text
        assert example.rop_g.shape == (n, n)
        valid = example.rop_valid
        np.testing.assert_array_equal(example.rop_g.sum(axis=1)[valid], 1.0)
        assert not valid[0] and not valid[n - 1]  # specials excluded
        assert example.rrp_labels.shape == (49,)
        assert example.tia_labels.shape == (n,)
        # corruption-selected tokens are excluded from the alignment loss
        for pos, _ in example.mvlm_targets:
            assert not example.tia_include[pos]
        assert not example.tia_include[0] and not example.tia_include[n - 1]

    def test_deterministic_and_id_sensitive(self, tiny_model, small_corpus, vocab):
        donors = donor_features(small_corpus, tiny_model)

        def build(eid):
            return build_pretrain_example(small_corpus[2], vocab, tiny_model,
                                          CFG, seed=7, example_id=eid,
                                          donor_pool=donors)

        a, b, c = build("0/2"), build("0/2"), build("1/2")
        np.testing.assert_array_equal(a.seq.token_ids, b.seq.token_ids)
        np.testing.assert_array_equal(a.rrp_labels, b.rrp_labels)
        np.testing.assert_array_equal(a.seq.patches, b.seq.patches)
        assert a.mvlm_targets == b.mvlm_targets
        different = (
            not np.array_equal(a.rrp_labels, c.rrp_labels)
            or a.mvlm_targets != c.mvlm_targets
            or not np.array_equal(a.tia_labels, c.tia_labels)
        )
        assert different

    def test_streams_independent(self, tiny_model, small_corpus, vocab):
        # the RRP draw must not depend on how much the MVLM stream consumed
        donors = donor_features(small_corpus, tiny_model)
        base = build_pretrain_example(small_corpus[2], vocab, tiny_model, CFG,
                                      seed=7, example_id="x", donor_pool=donors)
        no_mvlm = CorruptionConfig(mvlm_ratio=0.0)
        other = build_pretrain_example(small_corpus[2], vocab, tiny_model,
                                       no_mvlm, seed=7, example_id="x",
                                       donor_pool=donors)
        np.testing.assert_array_equal(base.rrp_labels, other.rrp_labels)
        np.testing.assert_array_equal(base.tia_labels, other.tia_labels)


class TestComputeLosses:
    def test_parts_positive_and_total_sums(self, tiny_model, example):
        total, report = compute_losses(tiny_model, example)
        assert report.rop > 0 and report.rrp > 0
        assert report.mvlm > 0 and report.tia >= 0
        assert total.item() == pytest.approx(report.total, rel=1e-12)
        d = report.as_dict()
        assert d["total"] == pytest.approx(report.total)

    def test_eval_deterministic(self, tiny_model, example):
        a = compute_losses(tiny_model, example)[1]
        b = compute_losses(tiny_model, example)[1]
        assert a == b

    def test_rop_aggregation_all_layers(self, tiny_model, example):
        _, final_only = compute_losses(tiny_model, example)
        _, all_layers = compute_losses(tiny_model, example, rop_aggregation="all")
        assert final_only.rop != all_layers.rop
        assert (final_only.rrp, final_only.mvlm, final_only.tia) == (
            all_layers.rrp, all_layers.mvlm, all_layers.tia)

    def test_unknown_aggregation_rejected(self, example):
        with pytest.raises(ValueError):
            rop_loss([[Tensor(np.zeros((3, 3)))]], np.eye(3), np.ones(3, bool),
                     aggregation="bogus")


class TestGradientsThroughModel:
    def test_total_loss_fd_check(self, vocab, small_corpus):
        # tiny model, few probed parameters; the acceptance suite widens this
        cfg = ModelConfig(layers=2, d=8, heads=2, ffn_dim=16, vocab_size=200,
                          max_text_len=64, k_1d=8, k_2d=4)
        model = DocModel(cfg, seed=21)
        donors = donor_features(small_corpus[:2], model)
        ex = build_pretrain_example(small_corpus[0], vocab, model, CFG,
                                    seed=3, example_id="fd", donor_pool=donors)
        from conftest import rel_err

        params = model.parameters()
        for p in params:
            p.zero_grad()
        total, _ = compute_losses(model, ex)
        from vrdu.autodiff import backward

        backward(total)
        rng = np.random.default_rng(0)
        eps = 1e-6
        checked = 0
        for p in rng.choice(params, size=6, replace=False):
            flat = p.data.reshape(-1)
            grad = p.grad.reshape(-1)
            for i in rng.choice(flat.size, size=min(3, flat.size), replace=False):
                orig = flat[i]
                flat[i] = orig + eps
                hi = compute_losses(model, ex)[0].item()
                flat[i] = orig - eps
                lo = compute_losses(model, ex)[0].item()
                flat[i] = orig
                fd = (hi - lo) / (2 * eps)
                # central differences cannot resolve gradients below their
                # roundoff floor (~1e-8 for a loss of order ten)
                if abs(grad[i]) > 1e-6:
                    assert rel_err(fd, grad[i]) < 1e-4
                else:
                    assert abs(fd - grad[i]) < 1e-6
                checked += 1
        assert checked >= 15
