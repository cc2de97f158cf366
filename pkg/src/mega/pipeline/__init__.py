from .config import ConfigError, HeadParams, MegaParams, PipelineConfig
from .detection import Detection, apply_deltas, detect_head, head_forward, iou, nms
from .inference import FrameStore, PipelineObserver, run_video
from .metrics import average_precision, mean_ap
from .stages import (Rows, StageObserver, enhanced_local_stage, global_stage, local_stage,
                     run_global_stage, run_local_stage)
from .synth import SceneModel, Track, make_codebook, make_scene, synth_video
from .training import (TrainingInstance, TrainingVideo, build_training_memory, detection_loss,
                       sample_training_instance, train, train_step, training_loss)
