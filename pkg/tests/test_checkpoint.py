import zipfile

import pytest
import torch

from distillfss import ModelConfig, MulticlassStudent, TeacherModel
from distillfss.checkpoint import (
    load_checkpoint,
    read_config_text,
    read_history,
    read_manifest,
    save_checkpoint,
)


@pytest.fixture(scope="module")
def teacher_model():
    return TeacherModel(ModelConfig(num_classes=2, seed=9))


class TestRoundtrip:
    def test_save_load_exact_equality(self, tmp_path, teacher_model):
        path = save_checkpoint(teacher_model, tmp_path / "t.ckpt", "lr = 0.001\n")
        loaded = load_checkpoint(path)
        for k, v in teacher_model.state_dict().items():
            assert torch.equal(v, loaded.state_dict()[k]), k
        assert read_config_text(path) == "lr = 0.001\n"

    def test_identical_state_gives_identical_bytes(self, tmp_path, teacher_model):
        a = save_checkpoint(teacher_model, tmp_path / "a.ckpt", "cfg")
        b = save_checkpoint(teacher_model, tmp_path / "b.ckpt", "cfg")
        assert a.read_bytes() == b.read_bytes()

    def test_history_roundtrip(self, tmp_path, teacher_model):
        history = {"records": [{"epoch": 1, "miou": 0.5}], "best_epoch": 1}
        path = save_checkpoint(teacher_model, tmp_path / "h.ckpt", "", history)
        assert read_history(path) == history

    def test_manifest_structure(self, tmp_path, teacher_model):
        path = save_checkpoint(teacher_model, tmp_path / "m.ckpt", "")
        manifest = read_manifest(path)
        assert manifest["model"] == "teacher"
        names = {b["name"] for b in manifest["blocks"]}
        assert names == set(teacher_model.state_dict().keys())
        for block in manifest["blocks"]:
            assert block["dtype"] == "float32"


class TestStudentExport:
    def test_student_checkpoint_loads_standalone(self, tmp_path):
        student = MulticlassStudent(ModelConfig(num_classes=2, seed=1))
        path = save_checkpoint(student, tmp_path / "s.ckpt", "")
        loaded = load_checkpoint(path, expect="multiclass_student")
        with torch.no_grad():
            probs, pred = loaded(torch.rand(3, 64, 64))
        assert probs.shape == (2, 64, 64)

    def test_teacher_checkpoint_rejected_as_student(self, tmp_path, teacher_model):
        path = save_checkpoint(teacher_model, tmp_path / "t.ckpt", "")
        with pytest.raises(ValueError, match="missing blocks.*banks"):
            load_checkpoint(path, expect="multiclass_student")

    def test_student_blocks_have_no_attention(self, tmp_path):
        student = MulticlassStudent(ModelConfig(num_classes=2, seed=1))
        path = save_checkpoint(student, tmp_path / "s.ckpt", "")
        names = {b["name"] for b in read_manifest(path)["blocks"]}
        assert not any(n.startswith("attention") for n in names)


class TestErrors:
    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope.ckpt")

    def test_corrupt_file(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"this is not a zip archive")
        with pytest.raises(ValueError, match="corrupt"):
            load_checkpoint(bad)

    def test_foreign_zip_rejected(self, tmp_path):
        other = tmp_path / "other.zip"
        with zipfile.ZipFile(other, "w") as zf:
            zf.writestr("manifest.json", "{\"format\": \"something-else\"}")
        with pytest.raises(ValueError):
            load_checkpoint(other)

    def test_truncated_blocks_detected(self, tmp_path, teacher_model):
        path = save_checkpoint(teacher_model, tmp_path / "t.ckpt", "")
        # rewrite without one block
        with zipfile.ZipFile(path) as zf:
            names = zf.namelist()
            keep = [n for n in names if "classifier" not in n]
            data = {n: zf.read(n) for n in keep}
        cut = tmp_path / "cut.ckpt"
        with zipfile.ZipFile(cut, "w") as zf:
            for n, d in data.items():
                zf.writestr(n, d)
        with pytest.raises((ValueError, KeyError)):
            load_checkpoint(cut)
