"""Few-shot neural radiance fields regularized by depth-guided warping
consistency between rendered and warped views."""

from .field import EncodingSpec, RadianceField, make_field
from .geometry import (Camera, OcclusionMask, PoseSampler, RayPatch,
                       bilinear_sample, downsample_mask, make_patch_rays,
                       occlusion_mask, reproject, sample_novel_pose,
                       warp_image)
from .renderer import (RenderResult, SampleSet, hierarchical_resample,
                       render_patch, render_rays, stratified_samples)
from .consistency import (FeaturePyramid, disparity_smoothness,
                          feature_extract, masked_consistency_loss,
                          pixel_loss)
from .datasets import (SceneDataset, load_blender, load_llff,
                       make_synthetic_scene)
from .metrics import MetricsRow, avg_err, psnr, ssim
from .trainer import (LossReport, TrainConfig, Trainer, TrainingDiverged,
                      cons_weight_at, lr_at, train)

__version__ = "0.1.0"
