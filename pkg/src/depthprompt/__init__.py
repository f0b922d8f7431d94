"""Depth-prompted semantic segmentation with a frozen ViT backbone.

A lightweight adapter tunes frozen encoder features, a DPT-style branch
decodes depth under teacher pseudo-label supervision, and the resulting
depth prompts are fused into the segmentation decoder.
"""

from .adapter import Adapter, adapter_param_count
from .backbone import (
    Backbone,
    BackboneConfig,
    FeaturePyramid,
    backbone_config,
    build_backbone,
    encoder_param_count,
    expected_level_shapes,
    extract_features,
    load_weight_file,
    parameter_checksum,
    parameter_report,
    save_weight_file,
)
from .data import (
    CLASS_NAMES,
    ClassSchema,
    ImageTile,
    Sample,
    SceneSpec,
    default_scene_spec,
    generate_scene,
    generate_scene_full,
    load_sample,
    read_split_manifest,
    split_spatial,
    write_scene_files,
    write_split_manifest,
)
from .depth_branch import (
    DepthDecoder,
    FilePseudoLabelProvider,
    OraclePseudoLabelProvider,
    PseudoLabel,
    PseudoLabelProvider,
    fetch_pseudo_label,
    normalize_depth,
    resize_area,
)
from .errors import (
    ConfigError,
    ContractError,
    DepthPromptError,
    DivergenceError,
    IllegalClassError,
    InputError,
    MissingLabelError,
    ShapeMismatchError,
    UndefinedMetricError,
    UnreadableFileError,
)
from .losses import LossReport, SsimParams, class_loss, depth_loss, ssim, total_loss
from .metrics import (
    ConfusionMatrix,
    MetricReport,
    accumulate,
    binary_kappa,
    compute_report,
    report_from_text,
    report_to_text,
)
from .model import DepthPromptSegmenter, ModelConfig, build_model
from .prompter import Prompter, PromptPyramid, encode_prompts, prompt_channels
from .seg_decoder import SegDecoder, decode_semantics, predict_mask
from .trainer import (
    AblationTable,
    TrainConfig,
    TrainResult,
    evaluate,
    load_checkpoint,
    lr_at,
    read_config,
    restore_model,
    run_ablation,
    save_checkpoint,
    train,
    write_config,
)

__version__ = "0.1.0"
