"""Class-incremental learning with distillation and Grad-CAM attention distillation."""
from .config import ExperimentConfig, load_config, parse_config
from .datastream import (AccessLog, ClassSchedule, LabeledImageSet, load_cifar_binary, split_classes,
                         synth_shapes)
from .errors import (CheckpointVersionError, ClassRangeError, ConfigurationError, FormatError,
                     FrozenModelError, InputShapeError, LwmError, NumericalFailure, ScheduleViolation,
                     ShapeError)
from .evaluation import evaluate_step, single_headed_accuracy
from .gradcam import attention_distillation_loss, grad_cam, normalize_vectorize
from .losses import ExperimentId, LossWeights, classification_loss, combined_loss, distillation_loss
from .netcore import (ModelSnapshot, MomentumSGD, NetworkModel, extend_head, forward, grad, load_checkpoint,
                      save_checkpoint, snapshot)
from .protocol import incremental_step, run_schedule, train_initial_teacher
from .runner import execute_run, load_data, make_schedule

__version__ = "0.1.0"
