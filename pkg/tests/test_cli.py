import threading
import time

import pytest
import torch
import uvicorn
from click.testing import CliRunner

from distillfss import ModelConfig, MulticlassStudent, TeacherModel, save_dataset, synth_shapes
from distillfss.checkpoint import save_checkpoint
from distillfss.cli import main
from distillfss.service import create_app


@pytest.fixture(scope="module")
def server_url():
    config = uvicorn.Config(
        create_app(), host="127.0.0.1", port=0, log_level="error"
    )
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 15
    while not server.started:
        if time.time() > deadline:
            raise RuntimeError("service did not start")
        time.sleep(0.05)
    port = server.servers[0].sockets[0].getsockname()[1]
    yield f"http://127.0.0.1:{port}"
    server.should_exit = True
    thread.join(timeout=10)


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = synth_shapes(4, 64, 2, seed=9, split="test")
    save_dataset(corpus, root / "data")
    teacher = TeacherModel(ModelConfig(num_classes=2, seed=0))
    save_checkpoint(teacher, root / "teacher.ckpt", "")
    student = MulticlassStudent(ModelConfig(num_classes=2, seed=0))
    save_checkpoint(student, root / "student.ckpt", "")
    return root


def invoke(server_url, *args):
    runner = CliRunner()
    return runner.invoke(main, ["--server", server_url, *args], obj={})


class TestSynthCommand:
    def test_writes_corpus_and_echoes_config(self, server_url, tmp_path):
        result = invoke(
            server_url,
            "synth", "--out", str(tmp_path / "c"), "--num-train", "3",
            "--num-test", "2", "--seed", "5",
        )
        assert result.exit_code == 0, result.output
        assert "num_train = 3" in result.output
        assert "seed = 5" in result.output
        assert (tmp_path / "c" / "train" / "images").is_dir()

    def test_invalid_image_size_fails_nonzero(self, server_url, tmp_path):
        result = invoke(
            server_url, "synth", "--out", str(tmp_path / "c"), "--image-size", "8"
        )
        assert result.exit_code != 0
        assert "image_size" in result.output


class TestConfigFile:
    def test_config_file_supplies_defaults(self, server_url, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("[synth]\nnum_train = 2\nnum_test = 1\n")
        result = invoke(
            server_url, "--config", str(cfg), "synth", "--out", str(tmp_path / "c")
        )
        assert result.exit_code == 0, result.output
        assert "num_train = 2" in result.output

    def test_explicit_flag_overrides_config_file(self, server_url, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("[synth]\nnum_train = 2\nnum_test = 1\n")
        result = invoke(
            server_url, "--config", str(cfg), "synth", "--out", str(tmp_path / "c"),
            "--num-train", "4",
        )
        assert result.exit_code == 0, result.output
        assert "num_train = 4" in result.output


class TestEvalCommand:
    def test_student_eval_support_free(self, server_url, artifacts):
        result = invoke(
            server_url,
            "eval", str(artifacts / "student.ckpt"), str(artifacts / "data"),
        )
        assert result.exit_code == 0, result.output
        assert "miou =" in result.output

    def test_student_eval_with_support_dir_fails(self, server_url, artifacts):
        result = invoke(
            server_url,
            "eval", str(artifacts / "student.ckpt"), str(artifacts / "data"),
            "--support-dir", str(artifacts / "data"),
        )
        assert result.exit_code != 0
        assert "support-free" in result.output

    def test_teacher_eval_with_support(self, server_url, artifacts):
        result = invoke(
            server_url,
            "eval", str(artifacts / "teacher.ckpt"), str(artifacts / "data"),
            "--support-dir", str(artifacts / "data"), "--support-size", "2",
        )
        assert result.exit_code == 0, result.output

    def test_missing_checkpoint_fails(self, server_url, artifacts):
        result = invoke(
            server_url, "eval", str(artifacts / "nope.ckpt"), str(artifacts / "data")
        )
        assert result.exit_code != 0


class TestSegmentCommand:
    def test_segment_writes_mask(self, server_url, artifacts, tmp_path):
        image = next((artifacts / "data" / "images").iterdir())
        out = tmp_path / "mask.png"
        result = invoke(
            server_url,
            "segment", str(artifacts / "student.ckpt"), str(image),
            "--out", str(out),
        )
        assert result.exit_code == 0, result.output
        assert out.is_file()
        from PIL import Image

        assert Image.open(out).size == (64, 64)

    def test_teacher_checkpoint_rejected(self, server_url, artifacts, tmp_path):
        image = next((artifacts / "data" / "images").iterdir())
        result = invoke(
            server_url,
            "segment", str(artifacts / "teacher.ckpt"), str(image),
            "--out", str(tmp_path / "m.png"),
        )
        assert result.exit_code != 0
        assert "support-free" in result.output


class TestBenchCommand:
    def test_bench_two_checkpoints(self, server_url, artifacts, tmp_path):
        result = invoke(
            server_url,
            "bench",
            "--ckpt", f"teacher={artifacts / 'teacher.ckpt'}",
            "--ckpt", f"student={artifacts / 'student.ckpt'}",
            "--k-values", "1,2",
            "--repeats", "2",
            "--warmup", "1",
            "--out", str(tmp_path / "report"),
        )
        assert result.exit_code == 0, result.output
        assert (tmp_path / "report" / "benchmarks.csv").is_file()
        assert (tmp_path / "report" / "run_config.txt").is_file()

    def test_malformed_ckpt_argument(self, server_url):
        result = invoke(server_url, "bench", "--ckpt", "nolabel")
        assert result.exit_code != 0
        assert "label=path" in result.output


class TestServerUnreachable:
    def test_connection_error_is_clean_failure(self, artifacts):
        result = invoke(
            "http://127.0.0.1:9",  # nothing listens on the discard port
            "eval", str(artifacts / "student.ckpt"), str(artifacts / "data"),
        )
        assert result.exit_code != 0
