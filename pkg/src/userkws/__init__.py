"""Speaker-adaptive keyword spotting with on-device-style embedding updates.

A DS-CNN backbone produces a pooled channel vector that is fused with a learned
per-speaker embedding before the classifier. New speakers are adapted by
training only their embedding row. ``userkws.cost`` accounts parameters, FLOPs,
peak training memory and energy for each update strategy.
"""
from .audio import FeatureExtractor, FeatureStats, MfccConfig, load_wav, mfcc, pad_or_crop, standardize
from .cost import (VEGA, CostReport, SocProfile, UpdateStrategy, cost_report, count_inference_ops, count_params,
                   energy, fits_on, peak_training_memory, training_flops)
from .dataset import (GSC10, GSC35, SessionSpec, UtteranceRecord, Vocabulary, get_vocabulary, index_gsc,
                      make_session, pretrain_split, speaker_split)
from .model import (KwsModel, ModelConfig, apply_policy, build_model, fuse, load_checkpoint, read_checkpoint,
                    save_checkpoint)
from .training import (ExperimentGrid, LabeledSet, SessionResult, TrainConfig, adapt_speaker, build_set, evaluate,
                       pretrain, run_grid)

__version__ = "0.1.0"
