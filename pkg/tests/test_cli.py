import json

import numpy as np
import pytest
from PIL import Image

from carigen.backbones import toy_backbone
from carigen.cli import main
from carigen.concepts import ConceptKind, init_concept, load_concept, save_concept


@pytest.fixture()
def sketch_file(tmp_path):
    arr = np.zeros((64, 64), dtype=np.uint8)
    arr[12:52, 31] = 255
    path = tmp_path / "sketch.png"
    Image.fromarray(arr, mode="L").save(path)
    return path


@pytest.fixture()
def concept_file(tmp_path):
    bb = toy_backbone(seed=0)
    concept = init_concept("man", ConceptKind.IDENTITY, bb)
    path = tmp_path / "man.dcc"
    save_concept(concept, path)
    return path


class TestArguments:
    def test_unknown_subcommand_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exit_info:
            main(["frobnicate"])
        assert exit_info.value.code == 2
        assert "usage" in capsys.readouterr().err.lower()

    def test_missing_required_argument_exits_2(self):
        with pytest.raises(SystemExit) as exit_info:
            main(["generate", "--out", "x.png"])
        assert exit_info.value.code == 2

    def test_runtime_failure_exits_1_naming_stage(self, tmp_path, capsys):
        code = main(
            ["generate", "--id", str(tmp_path / "missing.dcc"), "--out", str(tmp_path / "o.png")]
        )
        assert code == 1
        assert "error during generate" in capsys.readouterr().err


class TestFinetune:
    def test_produces_loadable_concept(self, train_image_file, tmp_path):
        import time

        out = tmp_path / "c.dcc"
        start = time.monotonic()
        code = main([
            "finetune", "--image", str(train_image_file), "--superclass", "man",
            "--kind", "id", "--out", str(out),  # default 40 identity steps
        ])
        elapsed = time.monotonic() - start
        assert code == 0
        assert elapsed < 120.0  # desk-scale finetune stays CPU-friendly
        concept = load_concept(out, toy_backbone(seed=0))
        assert concept.kind is ConceptKind.IDENTITY
        assert concept.training_meta["steps"] == 40

    def test_style_kind(self, train_image_file, tmp_path):
        out = tmp_path / "s.dcc"
        code = main([
            "finetune", "--image", str(train_image_file), "--superclass", "comics",
            "--kind", "style", "--steps", "2", "--out", str(out),
        ])
        assert code == 0
        assert load_concept(out, toy_backbone(seed=0)).kind is ConceptKind.STYLE


class TestGenerate:
    def test_generate_with_sketch(self, concept_file, sketch_file, tmp_path):
        out = tmp_path / "out.png"
        code = main([
            "generate", "--id", str(concept_file), "--sketch", str(sketch_file),
            "--steps", "4", "--seed", "3", "--out", str(out),
        ])
        assert code == 0
        assert Image.open(out).size == (64, 64)

    def test_generate_without_sketch(self, concept_file, tmp_path):
        out = tmp_path / "out.png"
        code = main([
            "generate", "--id", str(concept_file), "--steps", "4", "--out", str(out)
        ])
        assert code == 0
        assert out.exists()

    def test_scale_zero_ignores_learned_outputs(self, tmp_path, sketch_file):
        # two concepts identical except o*; at s=0 they must render identically
        bb = toy_backbone(seed=0)
        base = init_concept("man", ConceptKind.IDENTITY, bb)
        other = init_concept("man", ConceptKind.IDENTITY, bb)
        other.outputs = [
            (np.full(l.d_l, 3.0, np.float32), np.full(l.d_l, -2.0, np.float32))
            for l in bb.cross_attention_layers
        ]
        path_a, path_b = tmp_path / "a.dcc", tmp_path / "b.dcc"
        save_concept(base, path_a)
        save_concept(other, path_b)
        outs = []
        for path in (path_a, path_b):
            out = tmp_path / f"{path.stem}.png"
            code = main([
                "generate", "--id", str(path), "--sketch", str(sketch_file),
                "--scale", "0", "--steps", "4", "--seed", "7", "--out", str(out),
            ])
            assert code == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_id_plus_style(self, tmp_path, train_image_file):
        bb = toy_backbone(seed=0)
        ident = init_concept("man", ConceptKind.IDENTITY, bb)
        style = init_concept("comics", ConceptKind.STYLE, bb)
        pi, ps = tmp_path / "i.dcc", tmp_path / "s.dcc"
        save_concept(ident, pi)
        save_concept(style, ps)
        out = tmp_path / "o.png"
        code = main([
            "generate", "--id", str(pi), "--style", str(ps), "--scale", "1.2",
            "--style-scale", "0.9", "--steps", "3", "--out", str(out),
        ])
        assert code == 0
        assert out.exists()


class TestEvaluate:
    def test_writes_report_and_prints_table(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        paths = {}
        for name in ("identity", "caricature"):
            arr = (rng.uniform(0, 1, size=(64, 64, 3)) * 255).astype(np.uint8)
            p = tmp_path / f"{name}.png"
            Image.fromarray(arr).save(p)
            paths[name] = str(p)
        sk = np.zeros((64, 64), dtype=np.uint8)
        sk[30, 5:60] = 255
        sketch_path = tmp_path / "sk.png"
        Image.fromarray(sk, mode="L").save(sketch_path)
        manifest = tmp_path / "manifest.json"
        manifest.write_text(json.dumps([
            {"identity": paths["identity"], "sketch": str(sketch_path),
             "caricature": paths["caricature"]},
        ]))
        report_path = tmp_path / "report.json"
        code = main(["evaluate", "--manifest", str(manifest), "--out", str(report_path)])
        assert code == 0
        report = json.loads(report_path.read_text())
        assert report["rows"][0]["id_score"] is not None
        out = capsys.readouterr().out
        assert "ID" in out and "mean" in out
