"""Interactive guidance for frozen segmentation networks: a guiding
block spliced between head and tail, driven either by gradient descent
on pixel hints or by a trained natural-language guide."""

from .backbone import (BackboneModel, ModelConfig, build_model,
                       load_checkpoint, save_checkpoint)
from .backprop import (DEFAULT_HINT_MODE, GuideOptConfig, OptimizeResult,
                       PixelHint, ProtocolTrace, optimize_guidance,
                       run_question_protocol, select_query_pixel)
from .dataset import (CLASS_NAMES, IGNORE_LABEL, SceneConfig, ShapesData,
                      generate_scene, read_dataset, write_dataset)
from .evaluation import (ABLATION_AXES, MIOU_CONVENTION, AblationReport,
                         EvalResult, accumulate, evaluate_guided,
                         evaluate_unguided, export_gamma_vectors,
                         guidance_heatmap, miou, new_confusion,
                         per_class_iou, pixel_accuracy, run_ablation,
                         save_heatmap_png)
from .guiding import (GuideMode, GuidingParams, ResidualGuideBlock,
                      apply_channel_guidance, apply_full_guidance,
                      apply_guidance, resample_spatial_vectors)
from .language import (EmbeddingTable, GuideModel, encode_query,
                       guide_with_text, load_embeddings, load_guide,
                       project_guidance, save_guide, tokenize)
from .queries import (REGIMES, QueryGenConfig, QuerySpec, build_weight_map,
                      enumerate_errors, parse_hint, render_text,
                      sample_query, sample_regime_query)
from .service import (class_legend, create_app, replay_record, rle_decode,
                      rle_encode)
from .training import (TrainConfig, iterative_guide, query_config_for,
                       reweighted_loss, train_backbone, train_guide,
                       train_step)

__version__ = "0.1.0"
