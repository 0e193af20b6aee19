import numpy as np
import pytest

from qadapt.config import RunConfig
from qadapt.pipeline import eval_classes, pretrained_query_encoder
from qadapt.store import load_store, load_ground_truth
from qadapt.synth import SynthConfig, generate, write_benchmark


def archive_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


class TestGenerate:
    def test_same_seed_bit_identical_archives(self, tmp_path):
        cfg = SynthConfig(n_adapt_scenes=2, n_eval_scenes=1, segments_per_scene=20)
        write_benchmark(cfg, tmp_path / "a")
        write_benchmark(cfg, tmp_path / "b")
        assert archive_bytes(tmp_path / "a") == archive_bytes(tmp_path / "b")

    def test_different_seed_differs(self, tmp_path):
        cfg1 = SynthConfig(n_adapt_scenes=1, n_eval_scenes=1, segments_per_scene=10, seed=1)
        cfg2 = SynthConfig(n_adapt_scenes=1, n_eval_scenes=1, segments_per_scene=10, seed=2)
        write_benchmark(cfg1, tmp_path / "a")
        write_benchmark(cfg2, tmp_path / "b")
        assert (
            (tmp_path / "a" / "adapt" / "embeddings.bin").read_bytes()
            != (tmp_path / "b" / "adapt" / "embeddings.bin").read_bytes()
        )

    def test_distractor_count_exact(self):
        cfg = SynthConfig(
            n_adapt_scenes=1, n_eval_scenes=1, segments_per_scene=1000,
            distractor_fraction=0.7,
        )
        res = generate(cfg)
        class_captions = {f"a photo of a {c}" for c in cfg.classes}
        n_targets = sum(
            1 for s in res.adapt_store.iter_segments() if s.caption in class_captions
        )
        assert n_targets == 300
        assert res.adapt_store.n_segments - n_targets == 700

    def test_scene_counts(self):
        cfg = SynthConfig(segments_per_scene=12)
        res = generate(cfg)
        assert len(res.adapt_store.scenes) == 8
        assert len(res.eval_store.scenes) == 2
        assert set(res.gt_by_scene) == set(res.eval_store.scene_ids)

    def test_archives_pass_store_validation(self, tmp_path):
        cfg = SynthConfig(n_adapt_scenes=2, n_eval_scenes=1, segments_per_scene=15)
        write_benchmark(cfg, tmp_path / "bench")
        adapt = load_store(tmp_path / "bench" / "adapt")
        eval_store = load_store(tmp_path / "bench" / "eval")
        assert adapt.n_segments == 30
        gt = load_ground_truth(tmp_path / "bench" / "eval", eval_store)
        assert set(gt) == set(eval_store.scene_ids)
        for scene_id, g in gt.items():
            assert len(g.labels) == g.points.shape[0]

    def test_embeddings_unit_norm(self):
        res = generate(SynthConfig(n_adapt_scenes=1, n_eval_scenes=1, segments_per_scene=25))
        for store in (res.adapt_store, res.eval_store):
            norms = np.linalg.norm(store.embeddings.astype(np.float64), axis=1)
            assert np.abs(norms - 1.0).max() <= 1e-4

    def test_tasks_reference_eval_scenes_and_targets(self):
        cfg = SynthConfig(segments_per_scene=12)
        res = generate(cfg)
        assert res.tasks
        for task in res.tasks:
            assert task["scene_id"] in res.eval_store.scene_ids
            assert set(task["relevant_classes"]) <= set(cfg.classes)

    def test_identity_shift_perfect_pretrained_recall(self):
        cfg = SynthConfig(
            shift_angle_deg=0.0, shift_bias=0.0, noise_sigma=0.0, segments_per_scene=30
        )
        res = generate(cfg)
        run_cfg = RunConfig()
        enc = pretrained_query_encoder(res.eval_store, run_cfg, list(cfg.classes))
        report = eval_classes(res.eval_store, res.gt_by_scene, list(cfg.classes), enc)
        assert report.recall_at_1 == 1.0

    def test_gt_labels_match_generating_class(self):
        cfg = SynthConfig(
            n_adapt_scenes=1, n_eval_scenes=1, segments_per_scene=20, noise_sigma=0.0
        )
        res = generate(cfg)
        from qadapt.evaluation import assign_gt_label

        scene_id = res.eval_store.scene_ids[0]
        gt = res.gt_by_scene[scene_id]
        for seg in res.eval_store.scene_segments(scene_id):
            name = seg.caption.removeprefix("a photo of a ")
            label = assign_gt_label(seg, res.eval_store.points_of(seg), gt)
            assert label == name

    def test_invalid_fraction_rejected(self):
        with pytest.raises(ValueError):
            SynthConfig(distractor_fraction=1.0)
