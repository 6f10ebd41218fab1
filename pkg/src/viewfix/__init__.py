"""Reference-guided coarse-to-fine fixing of degraded synthesized views."""

from .analysis import (ClusterSummary, DegradationEmbedding, PatchTokenGrid, PooledEmbedding,
                       ToyPatchExtractor, cluster_summaries, degradation_embedding,
                       extract_patch_tokens, image_degradation_embedding, mean_embedding_norm,
                       pool_embedding, project_2d)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, derive_seed, fixer_config, load_config, parse_config
from .degrade import get_degrader
from .errors import (ConfigError, DataError, FlowEstimationError, TrainingDivergedError,
                     ViewfixError)
from .fileio import (SceneData, load_scene, read_flo, read_pfm, read_png, read_scene_manifest,
                     write_flo, write_pfm, write_png)
from .image import Image, from_tensor, luminance, to_tensor
from .metrics import EvaluationSummary, PairMetrics, evaluate_pairs, psnr, ssim
from .model import (AttentionBlock, FixerConfig, FixerModel, LatentGrid, MultiScaleFeatures,
                    OffsetField, decode, deformable_sample, encode, fix, fuse_features,
                    gated_fusion, predict_offsets, reference_mixed_attention)
from .training import (LossConfig, OptimConfig, TrainingSample, TrainResult, curate_pairs,
                       middle_reference_index, perceptual_distance, register_perceptual_backend,
                       total_loss, train)
from .warp import (CameraIntrinsics, CameraPose, DepthPose, Disparity, Flow, FlowField,
                   backward_warp, disparity_to_flow, estimate_flow, pre_align, project_points,
                   register_flow_estimator, relative_pose, set_default_flow_estimator,
                   softmax_splat)

__version__ = "0.1.0"
