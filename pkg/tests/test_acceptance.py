"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Criteria 6 and 7 train full desk-scale models and take several minutes on CPU.
"""
import csv
import filecmp
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from helpers import (
    criterion, fd_check, four_blobs, oracle_ari, oracle_calinski_harabasz, oracle_davies_bouldin, oracle_mi,
    oracle_silhouette, random_clustering_instance, rel_err,
)
from patternid.ablation import CONDITIONS, AblationTable, mark_row, region_ablate, render_ablation_report, \
    run_ablation, visible_mask
from patternid.analytics import (
    adjusted_rand_index, calinski_harabasz_score, davies_bouldin_score, kmeans, mutual_information,
    silhouette_score,
)
from patternid.classifier import ClassifierSchedule, attach_head, encoder_checksum, evaluate, train_classifier
from patternid.cli import main
from patternid.data import (
    ManifestRecord, apply_mask, build_classification_dataset, build_inpainting_dataset, complement,
    concat_mask_channel, save_image_png, save_mask_png, write_manifest,
)
from patternid.encoder import Encoder, build_encoder, isolate_encoder
from patternid.gradcam import gradcam
from patternid.inpainting.losses import generator_loss
from patternid.inpainting.models import ARCHS, build_model, composite, forward_inpaint, model_input
from patternid.inpainting.train import InpaintSchedule, train_inpainting
from patternid.synthetic import generate_dataset

SEEDS = (0, 1, 2)


# ------------------------------------------------------------------ 1

def test_criterion_01_metric_oracles():
    with criterion(1, "clustering metrics equal from-definition oracles within 1e-9") as c:
        rng = np.random.default_rng(2024)
        worst = 0.0
        t0 = time.perf_counter()
        for _ in range(20):
            x, labels, true = random_clustering_instance(rng)
            assert len(x) <= 60 and x.shape[1] <= 8 and len(set(labels)) <= 4
            pairs = [
                (adjusted_rand_index(true, labels), oracle_ari(list(true), list(labels))),
                (mutual_information(true, labels), oracle_mi(list(true), list(labels))),
                (silhouette_score(x, labels), oracle_silhouette(x, list(labels))),
                (davies_bouldin_score(x, labels), oracle_davies_bouldin(x, list(labels))),
                (calinski_harabasz_score(x, labels), oracle_calinski_harabasz(x, list(labels))),
            ]
            worst = max(worst, *(abs(a - b) for a, b in pairs))
        c.detail = f"max abs diff {worst:.2e}"
        assert worst <= 1e-9
        assert time.perf_counter() - t0 < 30


# ------------------------------------------------------------------ 2

def test_criterion_02_kmeans():
    with criterion(2, "k-means monotone inertia, 4-blob recovery, determinism"):
        t0 = time.perf_counter()
        rng = np.random.default_rng(7)
        for i in range(100):
            x = rng.normal(size=(int(rng.integers(4, 80)), int(rng.integers(1, 9))))
            x += rng.integers(0, 4, (len(x), 1)) * 3.0
            k = int(rng.integers(1, min(6, len(x)) + 1))
            r = kmeans(x, k, seed=i)
            assert all(b <= a + 1e-9 * max(a, 1) for a, b in zip(r.history, r.history[1:])), r.history
        x, true = four_blobs(0)
        r = kmeans(x, 4, seed=0)
        assert adjusted_rand_index(true, r.assignments) == 1.0
        again = kmeans(x, 4, seed=0)
        assert np.array_equal(r.assignments, again.assignments)
        assert np.array_equal(r.centroids, again.centroids) and r.inertia == again.inertia
        assert time.perf_counter() - t0 < 30


# ------------------------------------------------------------------ 3

def test_criterion_03_masking_plumbing():
    with criterion(3, "apply_mask / concat / composite properties on 100 pairs"):
        t0 = time.perf_counter()
        rng = np.random.default_rng(3)
        model = build_model("aotgan", seed=0)
        for i in range(100):
            h, w = (int(v) for v in rng.integers(8, 33, 2) // 4 * 4)
            img = rng.random((h, w, 3)).astype(np.float32)
            mask = (rng.random((h, w)) < rng.random()).astype(np.float32)
            assert np.array_equal(apply_mask(img, np.zeros((h, w))), img)
            assert np.array_equal(apply_mask(img, mask) + apply_mask(img, complement(mask)), img)
            x = concat_mask_channel(apply_mask(img, mask), mask)
            assert np.array_equal(x[..., :3], apply_mask(img, mask)) and np.array_equal(x[..., 3], mask)
            keep = mask == 0
            raw = torch.rand(1, 3, h, w)
            comp = composite(raw, torch.from_numpy(img).permute(2, 0, 1)[None], torch.from_numpy(mask)[None, None])
            assert np.array_equal(comp[0].permute(1, 2, 0).numpy()[keep], img[keep])
            if i % 10 == 0:
                out = forward_inpaint(model, img, mask)
                assert np.array_equal(out[keep], img[keep])
        assert time.perf_counter() - t0 < 10


# ------------------------------------------------------------------ 4

def test_criterion_04_gradient_checks():
    with criterion(4, "L1 and cross-entropy gradients match central differences (1e-3 rel)") as c:
        t0 = time.perf_counter()
        worst = 0.0
        g = torch.Generator().manual_seed(0)
        for arch in ARCHS:
            model = build_model(arch, seed=0).double().eval()
            img = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
            mask = (torch.rand(1, 1, 8, 8, generator=g) < 0.5).double()

            def l1():
                out = composite(model.generator(model_input(img, mask)), img, mask)
                return generator_loss(out, img, mask, None, {"l1": 1.0}).tensor

            params = list(model.generator.parameters())
            for p in params[:: max(1, len(params) // 4)]:
                worst = max(worst, rel_err(*fd_check(l1, p, 4)).max())

            enc = build_encoder(arch, input_size=(8, 8), seed=0)
            clf = attach_head(enc, 4, seed=0).double().eval()
            x = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)
            y = torch.tensor([1, 3])
            ce = lambda: F.cross_entropy(clf(x), y)
            for p in (clf.head.weight, clf.head.bias, next(clf.encoder.parameters())):
                worst = max(worst, rel_err(*fd_check(ce, p, 4)).max())
        c.detail = f"max rel err {worst:.1e}"
        assert worst < 1e-3
        assert time.perf_counter() - t0 < 120


# ------------------------------------------------------------------ 5

def test_criterion_05_shallow_freeze():
    with criterion(5, "shallow mode freezes the encoder, deep mode trains it"):
        t0 = time.perf_counter()
        ds = generate_dataset(6, 20, seed=5)
        splits = build_classification_dataset(ds.classification, 5)
        enc = build_encoder("lama", seed=5)
        before = encoder_checksum(enc.net)
        clf = attach_head(enc, 6, seed=5)
        head0 = clf.head.weight.detach().clone()
        hist = train_classifier(clf, splits, "shallow", ClassifierSchedule(epochs=15), seed=5)
        assert hist.checksum_before == hist.checksum_after
        assert encoder_checksum(clf.encoder.net) == before
        assert not torch.equal(head0, clf.head.weight)
        clf = attach_head(enc, 6, seed=5)
        hist = train_classifier(clf, splits, "deep", ClassifierSchedule(epochs=15), seed=5)
        assert hist.checksum_before != hist.checksum_after
        assert not torch.equal(head0, clf.head.weight)
        assert time.perf_counter() - t0 < 300


# ------------------------------------------------------------------ 6 and 7

_CACHE = {}


def pretrained(seed):
    """(inpainting-pretrained encoder, same-seed untrained encoder, classification splits) for ``seed``."""
    if seed not in _CACHE:
        ds = generate_dataset(6, 100, seed)
        model = build_model("lama", seed=seed)
        untrained = isolate_encoder(model)
        train_inpainting(model, build_inpainting_dataset(ds.inpainting, seed), InpaintSchedule(epochs=10), seed=seed)
        _CACHE[seed] = (isolate_encoder(model), untrained, build_classification_dataset(ds.classification, seed))
    return _CACHE[seed]


@pytest.mark.slow
def test_criterion_06_end_to_end_learnability():
    with criterion(6, "LaMa pretrain 10 epochs + deep fine-tune 15 epochs: test acc >= 0.80") as c:
        t0 = time.perf_counter()
        enc, _, splits = pretrained(0)
        # chance level: untrained heads on the pretrained encoder, averaged over head seeds
        chance = np.mean([evaluate(attach_head(enc, 6, seed=s), splits.test).accuracy for s in range(10)])
        assert abs(chance - 1 / 6) <= 0.05, chance
        clf = attach_head(enc, 6, seed=0)
        acc = train_classifier(clf, splits, "deep", ClassifierSchedule(epochs=15), seed=0).test.accuracy
        c.detail = f"test acc {acc:.3f}, untrained-head chance {chance:.3f}"
        assert acc >= 0.80
        assert time.perf_counter() - t0 < 7200


@pytest.mark.slow
def test_criterion_07_pretraining_beats_random_init():
    with criterion(7, "pretrained shallow beats random-init shallow by >= 0.10 (3 seeds)") as c:
        pre, rand = [], []
        for seed in SEEDS:
            enc, untrained, splits = pretrained(seed)
            for e, out in ((enc, pre), (untrained, rand)):
                clf = attach_head(e, 6, seed=seed)
                out.append(train_classifier(clf, splits, "shallow", ClassifierSchedule(epochs=15), seed=seed)
                           .test.accuracy)
        c.detail = f"pretrained {np.round(pre, 3).tolist()} vs random {np.round(rand, 3).tolist()}"
        assert np.mean(pre) - np.mean(rand) >= 0.10


# ------------------------------------------------------------------ 8

def test_criterion_08_ablation_harness():
    with criterion(8, "region ablation pixel-exact, grid complete, marking matches fixture"):
        t0 = time.perf_counter()
        ds = generate_dataset(6, 12, seed=8)
        for s, r in zip(ds.classification, ds.regions):
            for cond in CONDITIONS:
                out = region_ablate(s.image, r, cond)
                assert np.array_equal(out.any(axis=2), visible_mask(r, cond))
        backbones = {a: build_encoder(a, seed=8) for a in ARCHS}
        backbones["baseline"] = None
        table = run_ablation(backbones, ["shallow", "deep"], ds.classification, ds.regions,
                             ClassifierSchedule(epochs=1), seed=8, per_class=10)
        assert table.is_complete() and len(table.accuracy) == len(backbones) * 2 * 7
        fixture = AblationTable(backbones=["A", "B"], modes=["deep"])
        for b, vals in {"A": [0.50, 0.70, 0.60, 0.90, 0.80, 0.80, 0.95], "B": [0.40] * 7}.items():
            fixture.accuracy.update({(b, "deep", c): v for c, v in zip(CONDITIONS, vals)})
        lines = render_ablation_report(fixture).splitlines()
        assert lines[4] == "| A | *0.50* | **0.70** | 0.60 | **0.90** | *0.80* | *0.80* | 0.95 |"
        assert lines[5] == "| B |" + " ***0.40*** |" * 7
        assert mark_row([0.89, 0.96, 0.93, 0.99, 0.98, 0.94, 0.99])["fish"] == {"bold"}
        assert time.perf_counter() - t0 < 1200


# ------------------------------------------------------------------ 9

def test_criterion_09_gradcam_sanity():
    with criterion(9, "GradCAM invariants on 50 inputs; left-half toy >= 90% mass on the left"):
        t0 = time.perf_counter()
        rng = np.random.default_rng(9)
        clf = attach_head(build_encoder("lama", seed=9), 6, seed=9)
        for i in range(50):
            hm = gradcam(clf, rng.random((64, 64, 3)).astype(np.float32), i % 6)
            assert hm.values.shape == (64, 64)
            assert hm.values.min() >= 0 and hm.values.max() <= 1
            assert hm.all_zero or hm.values.min() == 0 or hm.values.max() == 1

        class LeftHalf(torch.nn.Module):
            def forward(self, x):
                return torch.cat([x[..., :8], torch.zeros_like(x[..., 8:])], -1)

        conv = torch.nn.Conv2d(4, 1, 1, bias=False)
        torch.nn.init.constant_(conv.weight, 1.0)
        toy = attach_head(Encoder("toy", torch.nn.Sequential(torch.nn.Sequential(conv, LeftHalf())), (16, 16)), 2)
        torch.nn.init.constant_(toy.head.weight, 1.0)
        for _ in range(10):
            hm = gradcam(toy, rng.random((16, 16, 3)).astype(np.float32), 0)
            assert hm.values[:, :8].sum() >= 0.9 * hm.values.sum()
        assert time.perf_counter() - t0 < 60


# ------------------------------------------------------------------ 10 and 11

PIPELINE = """\
[experiment]
archs = lama, aotgan
[data]
n_individuals = 3
n_per_individual = 16
[inpainting]
epochs = 2
[classification]
epochs = 2
[ablation]
backbones = lama, baseline
modes = shallow
per_class = 10
epochs = 1
[analytics]
k = 3
"""


def _csvs(root):
    return sorted(p.relative_to(root) for p in root.rglob("*.csv"))


@pytest.mark.slow
def test_criterion_10_reproducibility(tmp_path):
    with criterion(10, "two identical-seed pipeline runs give byte-identical metric and embedding CSVs") as c:
        (tmp_path / "c.ini").write_text(PIPELINE)
        roots = [tmp_path / "a", tmp_path / "b"]
        for r in roots:
            assert main(["run-all", "--config", str(tmp_path / "c.ini"), "--out", str(r), "--seed", "3"]) == 0
        files = _csvs(roots[0])
        assert files == _csvs(roots[1])
        wanted = [f for f in files if f.parts[0] in ("classifier", "embeddings", "clustering", "ablation", "report")]
        assert any(f.parts[0] == "embeddings" for f in wanted) and any(f.name == "metrics.csv" for f in wanted)
        diff = [str(f) for f in files if not filecmp.cmp(roots[0] / f, roots[1] / f, shallow=False)]
        c.detail = f"{len(files)} CSVs compared"
        assert not diff, diff


@pytest.mark.slow
def test_criterion_11_real_data_mode(tmp_path):
    with criterion(11, "user manifest produces the ablation and clustering table schemas"):
        ds = generate_dataset(3, 16, seed=11)
        user = tmp_path / "user"
        for d in ("img", "masks", "regions"):
            (user / d).mkdir(parents=True)
        records = []
        for i, (s, r) in enumerate(zip(ds.classification, ds.regions)):
            save_image_png(user / "img" / f"{i}.png", s.image)
            regions = {}
            for name in ("background", "fish", "pattern"):
                regions[name] = f"regions/{i}_{name}.png"
                save_mask_png(user / regions[name], getattr(r, name))
            records.append(ManifestRecord(f"img/{i}.png", "", s.label, f"fish{i}", "", regions))
        write_manifest(user / "classification.csv", records)
        irecords = []
        for i, s in enumerate(ds.inpainting):
            save_image_png(user / "img" / f"p{i}.png", s.image)
            save_mask_png(user / "masks" / f"p{i}.png", s.mask)
            irecords.append(ManifestRecord(f"img/p{i}.png", f"masks/p{i}.png", None, f"pair{i}"))
        write_manifest(user / "inpainting.csv", irecords)
        cfg = PIPELINE.replace("[data]\nn_individuals = 3\nn_per_individual = 16\n",
                               f"[data]\nsource = manifest\nclassification_manifest = {user / 'classification.csv'}\n"
                               f"inpainting_manifest = {user / 'inpainting.csv'}\n")
        (tmp_path / "c.ini").write_text(cfg)
        out = tmp_path / "run"
        assert main(["run-all", "--config", str(tmp_path / "c.ini"), "--out", str(out)]) == 0
        with open(out / "ablation" / "ablation.csv") as fh:
            header = next(csv.reader(fh))
        assert header == ["backbone", "mode", "Background", "Fish", "Pattern", "No background", "No fish",
                          "No pattern", "All"]
        with open(out / "clustering" / "clustering.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["encoder", "AdjRand", "MutInfo", "Silhouette", "daviesBouldin", "calinskiHarabasz"]
        assert [r["encoder"] for r in rows] == ["lama", "ref-lama", "aotgan", "ref-aotgan"]
