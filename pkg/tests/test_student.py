import inspect

import pytest
import torch

from distillfss import ModelConfig, MulticlassStudent, StudentModel
from distillfss import complexity
from distillfss.student import ConvDist, support_free_signature


class TestConvDist:
    def test_initial_output_is_exactly_half(self):
        head = ConvDist(32)
        with torch.no_grad():
            head.conv3.weight.zero_()  # zero everything: logit is the zero bias
            out = head(torch.zeros(32, 8, 8))
        assert torch.equal(out, torch.full((8, 8), 0.5))

    def test_default_init_starts_at_half_for_any_input(self):
        gen = torch.Generator().manual_seed(0)
        head = ConvDist(32, generator=gen)
        with torch.no_grad():
            out = head(torch.randn(32, 8, 8, generator=gen))
        assert torch.allclose(out, torch.full((8, 8), 0.5))

    def test_output_strictly_inside_unit_interval(self):
        gen = torch.Generator().manual_seed(1)
        head = ConvDist(16, generator=gen)
        with torch.no_grad():
            head.conv1.weight.normal_(0, 1, generator=gen)
            out = head(torch.randn(16, 6, 6, generator=gen))
        assert out.min() > 0.0
        assert out.max() < 1.0

    def test_spatial_size_preserved(self):
        head = ConvDist(16)
        assert head(torch.zeros(16, 5, 7)).shape == (5, 7)

    def test_channel_mismatch_rejected(self):
        head = ConvDist(16)
        with pytest.raises(ValueError, match="16"):
            head(torch.zeros(8, 4, 4))


class TestStudentForward:
    def test_forward_takes_query_alone(self):
        assert support_free_signature(StudentModel(ModelConfig())) == ["query_image"]
        assert support_free_signature(MulticlassStudent(ModelConfig())) == [
            "query_image"
        ]

    def test_no_parameter_mentions_support(self):
        for cls in (StudentModel, MulticlassStudent):
            params = inspect.signature(cls.forward).parameters
            assert not any("support" in name for name in params)

    def test_logit_map_matches_query_size(self):
        student = StudentModel(ModelConfig(seed=4))
        with torch.no_grad():
            maps, logits = student(torch.rand(3, 64, 64))
        assert logits.shape == (64, 64)
        assert len(maps.maps) == 6

    def test_flops_never_reference_shot_count(self):
        student = MulticlassStudent(ModelConfig(num_classes=2))
        sig = inspect.signature(complexity.student_forward_flops)
        assert "k" not in "".join(sig.parameters)
        assert complexity.student_forward_flops(
            student, 64
        ) == complexity.student_forward_flops(student, 64)

    def test_per_class_cost_exactly_linear_in_ways(self):
        costs = []
        for n in (1, 2, 3):
            student = MulticlassStudent(ModelConfig(num_classes=n))
            costs.append(complexity.student_forward_flops(student, 64))
        assert costs[2] - costs[1] == costs[1] - costs[0]

    def test_multiclass_prediction_shape(self):
        student = MulticlassStudent(ModelConfig(num_classes=3, seed=2))
        with torch.no_grad():
            probs, pred = student(torch.rand(3, 64, 64))
        assert probs.shape == (3, 64, 64)
        assert pred.grid.shape == (64, 64)
        assert pred.num_classes == 3

    def test_fresh_student_predicts_background_with_zero_decoder(self):
        student = MulticlassStudent(ModelConfig(num_classes=2, seed=0))
        with torch.no_grad():
            for p in student.decoder.parameters():
                p.zero_()
            probs, pred = student(torch.rand(3, 64, 64))
        # sigmoid(0) = 0.5 never exceeds the 0.5 threshold
        assert torch.allclose(probs, torch.full_like(probs, 0.5))
        assert pred.grid.sum() == 0

    def test_shared_modules_from_teacher_are_same_objects(self, teacher):
        student = MulticlassStudent.from_teacher(teacher)
        assert student.backbone is teacher.backbone
        assert student.decoder is teacher.decoder

    def test_parameter_inventory_contains_no_support_state(self):
        student = MulticlassStudent(ModelConfig(num_classes=2))
        names = [n for n, _ in student.named_parameters()]
        assert all("support" not in n and "attention" not in n for n in names)
        groups = {n.split(".")[0] for n in names}
        assert groups == {"backbone", "banks", "decoder"}
