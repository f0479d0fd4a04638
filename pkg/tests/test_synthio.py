import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_CFG
from protodet.errors import DataFormatError
from protodet.evaluation import GroundTruthBox, evaluate
from protodet.features import FeatureMap
from protodet.geometry import BinaryMask, BoundingBox, mask_coverage
from protodet.postproc import ScoredDetection
from protodet.synthio import (
    GeneratorConfig,
    export_run,
    generate_dataset,
    load_dataset,
    load_detections,
    planted_prototypes,
    read_feature_map,
    write_feature_map,
)


def _dir_digest(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _write_manifest(tmp_path, manifest=None, supports=(), proposals=(), gts=(), images=None):
    if images is None:
        images = [{"id": "q0", "width": 8, "height": 8}]
    doc = {
        "format_version": 1,
        "num_classes": 1,
        "shots": 1,
        "images": images,
        "supports": "supports.jsonl",
        "proposals": "proposals.jsonl",
        "ground_truth": "ground_truth.jsonl",
        "feature_maps": {},
    }
    if manifest:
        doc.update(manifest)
    for name, rows in (
        ("supports.jsonl", supports),
        ("proposals.jsonl", proposals),
        ("ground_truth.jsonl", gts),
    ):
        (tmp_path / name).write_text("".join(json.dumps(r) + "\n" for r in rows))
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc))
    return path


def _proposal_row(score, image_id="q0", w=8, h=8, runs=None, feature=(1.0, 0.0)):
    return {
        "image_id": image_id,
        "box": [0.0, 0.0, 4.0, 4.0],
        "score": score,
        "mask": {"w": w, "h": h, "counts": runs if runs is not None else [0, w * h]},
        "feature": list(feature),
    }


class TestFeatureMapBlob:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        data = rng.standard_normal((5, 3, 4)).astype(np.float32).astype(np.float64)
        fm = FeatureMap(data=data, image_w=40, image_h=30)
        path = tmp_path / "x.fmap"
        write_feature_map(path, fm)
        assert path.stat().st_size == 16 + 4 * 5 * 3 * 4
        back = read_feature_map(path, 40, 30)
        np.testing.assert_array_equal(back.data, data)
        assert (back.image_w, back.image_h) == (40, 30)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "x.fmap"
        path.write_bytes(b"JUNK" + b"\0" * 28)
        with pytest.raises(DataFormatError):
            read_feature_map(path, 4, 4)

    def test_truncated_body_rejected(self, tmp_path):
        rng = np.random.default_rng(0)
        fm = FeatureMap(data=rng.standard_normal((2, 2, 2)), image_w=4, image_h=4)
        path = tmp_path / "x.fmap"
        write_feature_map(path, fm)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(DataFormatError):
            read_feature_map(path, 4, 4)


class TestGeneratorConfig:
    def test_score_ranges_must_be_separated(self):
        with pytest.raises(ValueError):
            GeneratorConfig(fragment_score_range=(0.05, 0.6), whole_score_range=(0.55, 0.95))
        GeneratorConfig(
            fragment_score_range=(0.05, 0.6),
            whole_score_range=(0.55, 0.95),
            allow_score_overlap=True,
        )

    def test_ranges_must_respect_score_floor(self):
        with pytest.raises(ValueError):
            GeneratorConfig(fragment_score_range=(0.001, 0.4))

    def test_bad_counts_rejected(self):
        with pytest.raises(ValueError):
            GeneratorConfig(objects_per_image=(0, 3))
        with pytest.raises(ValueError):
            GeneratorConfig(fragments_per_object=(4, 2))


class TestGenerate:
    def test_fixed_seed_is_byte_identical(self, tmp_path):
        cfg = GeneratorConfig(seed=123, images=6)
        generate_dataset(cfg, tmp_path / "a")
        generate_dataset(cfg, tmp_path / "b")
        assert _dir_digest(tmp_path / "a") == _dir_digest(tmp_path / "b")

    def test_different_seeds_differ(self, tmp_path):
        generate_dataset(GeneratorConfig(seed=1, images=3), tmp_path / "a")
        generate_dataset(GeneratorConfig(seed=2, images=3), tmp_path / "b")
        assert _dir_digest(tmp_path / "a") != _dir_digest(tmp_path / "b")

    def test_load_after_generate_is_clean(self, tmp_path, caplog):
        manifest = generate_dataset(GeneratorConfig(seed=5, images=5), tmp_path / "ds")
        with caplog.at_level("WARNING"):
            ds = load_dataset(manifest)
        assert caplog.text == ""
        assert ds.num_classes == 3 and ds.shots == 1
        assert len(ds.supports) == 3
        assert len(ds.query_image_ids()) == 5

    def test_seed17_corpus_statistics_audit(self, acceptance_manifest):
        """Re-parse the acceptance corpus and check every count against the
        configured ranges; identify wholes by score band, fragments by full
        coverage under a whole."""
        cfg = ACCEPTANCE_CFG
        ds = load_dataset(acceptance_manifest)
        gt_by_image = {}
        for g in ds.ground_truth:
            gt_by_image.setdefault(g.image_id, []).append(g)
        assert len(gt_by_image) == cfg.images
        for image_id in ds.query_image_ids():
            gts = gt_by_image[image_id]
            assert cfg.objects_per_image[0] <= len(gts) <= cfg.objects_per_image[1]
            recs = ds.proposals[image_id]
            wholes = [r for r in recs if r.upn_score >= cfg.whole_score_range[0]]
            rest = [r for r in recs if r.upn_score < cfg.whole_score_range[0]]
            assert len(wholes) == len(gts)
            for w in wholes:  # whole proposals reuse the gt boxes exactly
                assert any(w.box == g.box for g in gts)
            frag_counts = {id(w): 0 for w in wholes}
            distractors = 0
            for r in rest:
                parents = [w for w in wholes if mask_coverage(r.mask, w.mask) == 1.0]
                if parents:
                    assert len(parents) == 1  # objects are disjoint
                    frag_counts[id(parents[0])] += 1
                else:
                    distractors += 1
            lo, hi = cfg.fragments_per_object
            for count in frag_counts.values():
                assert lo <= count <= hi
            dlo, dhi = cfg.distractors_per_image
            assert dlo <= distractors <= dhi

    def test_fragment_scores_sit_below_whole_scores(self, acceptance_dataset):
        cfg = ACCEPTANCE_CFG
        for recs in acceptance_dataset.proposals.values():
            for r in recs:
                in_frag = cfg.fragment_score_range[0] <= r.upn_score <= cfg.fragment_score_range[1]
                in_whole = cfg.whole_score_range[0] <= r.upn_score <= cfg.whole_score_range[1]
                assert in_frag or in_whole

    def test_planted_prototypes_are_deterministic_units(self):
        cfg = GeneratorConfig(seed=9)
        p1 = planted_prototypes(cfg)
        p2 = planted_prototypes(cfg)
        np.testing.assert_array_equal(p1, p2)
        np.testing.assert_allclose(np.linalg.norm(p1, axis=1), 1.0, atol=1e-12)

    def test_query_feature_map_mode_emits_maps_not_vectors(self, tmp_path):
        cfg = GeneratorConfig(seed=4, images=3, query_feature_maps=True)
        ds = load_dataset(generate_dataset(cfg, tmp_path / "ds"))
        for image_id in ds.query_image_ids():
            assert image_id in ds.feature_maps
            assert all(r.feature is None for r in ds.proposals[image_id])


class TestLoadValidation:
    def test_empty_query_set_is_fine(self, tmp_path):
        support = {
            "image_id": "q0",
            "class_id": 0,
            "box": [0.0, 0.0, 4.0, 4.0],
            "mask": {"w": 8, "h": 8, "counts": [0, 64]},
        }
        path = _write_manifest(tmp_path, supports=[support])
        ds = load_dataset(path)
        assert ds.proposals == {} and ds.query_image_ids() == []

    def test_score_floor_filters_proposals(self, tmp_path):
        path = _write_manifest(
            tmp_path, proposals=[_proposal_row(0.005), _proposal_row(0.5)]
        )
        ds = load_dataset(path)
        assert len(ds.proposals["q0"]) == 1
        assert ds.proposals["q0"][0].upn_score == 0.5

    def test_proposals_truncated_to_500_best(self, tmp_path):
        rows = [_proposal_row(0.2 + 0.001 * (i % 600)) for i in range(600)]
        path = _write_manifest(tmp_path, proposals=rows)
        ds = load_dataset(path)
        recs = ds.proposals["q0"]
        assert len(recs) == 500
        dropped = sorted(r["score"] for r in rows)[:100]
        assert min(r.upn_score for r in recs) >= max(dropped)

    def test_bad_rle_names_file_and_line(self, tmp_path):
        path = _write_manifest(
            tmp_path, proposals=[_proposal_row(0.5), _proposal_row(0.6, runs=[3, 3])]
        )
        with pytest.raises(DataFormatError, match=r"proposals\.jsonl:2"):
            load_dataset(path)

    def test_empty_mask_substituted_with_box_raster(self, tmp_path, caplog):
        path = _write_manifest(tmp_path, proposals=[_proposal_row(0.5, runs=[64])])
        with caplog.at_level("WARNING"):
            ds = load_dataset(path)
        assert "substituted" in caplog.text
        rec = ds.proposals["q0"][0]
        assert rec.mask.area == 16  # 4x4 box rasterized

    def test_unsupported_version_rejected(self, tmp_path):
        path = _write_manifest(tmp_path, manifest={"format_version": 2})
        with pytest.raises(DataFormatError, match="format_version"):
            load_dataset(path)

    def test_missing_file_reported(self, tmp_path):
        path = _write_manifest(tmp_path)
        (tmp_path / "ground_truth.jsonl").unlink()
        with pytest.raises(DataFormatError, match="ground_truth"):
            load_dataset(path)

    def test_unknown_image_id_rejected(self, tmp_path):
        path = _write_manifest(tmp_path, proposals=[_proposal_row(0.5, image_id="nope")])
        with pytest.raises(DataFormatError, match="nope"):
            load_dataset(path)

    def test_score_out_of_range_rejected(self, tmp_path):
        path = _write_manifest(tmp_path, proposals=[_proposal_row(1.5)])
        with pytest.raises(DataFormatError, match="score"):
            load_dataset(path)

    def test_inconsistent_feature_dims_rejected(self, tmp_path):
        path = _write_manifest(
            tmp_path,
            proposals=[_proposal_row(0.5, feature=(1.0, 0.0)),
                       _proposal_row(0.6, feature=(1.0, 0.0, 0.0))],
        )
        with pytest.raises(DataFormatError, match="feature dimensions"):
            load_dataset(path)


class TestExport:
    def _detections(self):
        return {
            "img_b": [
                ScoredDetection(box=BoundingBox(0.5, 1.25, 3.75, 9.5), class_id=1, score=0.875),
            ],
            "img_a": [
                ScoredDetection(box=BoundingBox(1, 2, 3, 4), class_id=0, score=1 / 3),
                ScoredDetection(box=BoundingBox(0, 0, 7, 3), class_id=2, score=0.1),
            ],
        }

    def test_empty_detections_writes_header_only(self, tmp_path):
        paths = export_run({}, None, tmp_path / "out")
        text = paths["detections"].read_text()
        assert text == "image_id\tclass_id\tscore\tx1\ty1\tx2\ty2\n"

    def test_roundtrip_is_bit_exact(self, tmp_path):
        dets = self._detections()
        paths = export_run(dets, None, tmp_path / "out")
        back = load_detections(paths["detections"])
        assert set(back) == set(dets)
        for image_id in dets:
            assert len(back[image_id]) == len(dets[image_id])
            for orig, loaded in zip(dets[image_id], back[image_id]):
                assert loaded.box == orig.box
                assert loaded.score == orig.score
                assert loaded.class_id == orig.class_id

    def test_report_files_written(self, tmp_path):
        gts = [GroundTruthBox(image_id="img_a", box=BoundingBox(1, 2, 3, 4), class_id=0)]
        report = evaluate(self._detections(), gts)
        paths = export_run(self._detections(), report, tmp_path / "out")
        assert paths["report_txt"].read_text().startswith("nAP=")
        doc = json.loads(paths["report_json"].read_text())
        assert doc["nAP"] == report.nap

    def test_bad_header_rejected_on_load(self, tmp_path):
        bad = tmp_path / "dets.tsv"
        bad.write_text("nope\n")
        with pytest.raises(DataFormatError):
            load_detections(bad)
