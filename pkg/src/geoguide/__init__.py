"""Layer-wise gated injection of geometric encoder features into a toy decoder."""

from .alignment import AlignmentPlan, MergeProjector, merge_project, plan_alignment, resize_bilinear
from .autograd import DiffTensor, backward, tensor, tensor_op
from .decoder import DecoderConfig, GateBank, GuideDecoder, anchor_input, global_gate, inject, semantic_gate
from .encoder import FeatureStack, InjectionSchedule, MockGeometryEncoder, encode, sample_layers
from .estimator import GuideClassifier
from .gradcheck import finite_difference_check
from .optim import OptimizerState, adam_step, lr_at
from .scene import SceneConfig, SyntheticScene, generate_scene
from .streams import FeatureBatch, GuideFeaturizer
from .tasks import TaskInstance, make_task_batch

__version__ = "0.1.0"

__all__ = [
    "AlignmentPlan", "MergeProjector", "merge_project", "plan_alignment", "resize_bilinear",
    "DiffTensor", "backward", "tensor", "tensor_op",
    "DecoderConfig", "GateBank", "GuideDecoder", "anchor_input", "global_gate", "inject", "semantic_gate",
    "FeatureStack", "InjectionSchedule", "MockGeometryEncoder", "encode", "sample_layers",
    "GuideClassifier", "finite_difference_check", "OptimizerState", "adam_step", "lr_at",
    "SceneConfig", "SyntheticScene", "generate_scene", "FeatureBatch", "GuideFeaturizer",
    "TaskInstance", "make_task_batch",
]
