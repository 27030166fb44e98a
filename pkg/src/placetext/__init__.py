"""Place recognition by global-descriptor retrieval with scene-text re-ranking."""
from .aggregator import BoqConfig, BoqParams, aggregate
from .dataset import (
    DatasetManifest,
    GroundTruth,
    ImageRecord,
    PartitionParams,
    PlaceClass,
    assign_class,
    build_ground_truth,
    group_classes,
    load_manifest,
    save_manifest,
    select_text_queries,
)
from .evaluation import EvalConfig, EvalReport, latency_report, recall_at_k, run_pipeline
from .featuremap import FeatureMap, read_feature_map, write_feature_map
from .fusion import BridgeParams, Region, adapter, bridge_fuse, crop_regions
from .loss import LabeledBatch, LossHyperparams, cosine_similarity, ms_loss, ms_loss_grad
from .numerics import AttentionParams, finite_diff_grad, linear, mha, softmax_rows
from .retrieval import DescriptorIndex, RetrievalResult, build_index, knn, load_index, save_index
from .textverify import (
    FilterKind,
    TextAnnotation,
    normalize_text,
    rerank,
    rule_filter,
    text_similarity,
)

__version__ = "0.1.0"
