"""Training-free few-shot image classification by template retrieval.

Support images are described region by region by a multimodal chat model
(steered by visually similar reference images from other classes), each
description is embedded and fused with the image embedding into a gallery
key, and queries classify by exponential cosine affinity against the
gallery — no parameter updates anywhere.
"""

from .captioner import (
    Captioner,
    ChatBackendDescriptor,
    DescriptionCache,
    NaiveCaptioner,
    PromptTemplates,
    StructuredDescription,
    description_key,
    make_chat_backend,
    parse_region_list,
)
from .encoders import (
    EmbeddingVector,
    EncoderDescriptor,
    MockEncoder,
    PrecomputedEncoder,
    BagOfTokensEncoder,
    RemoteEncoder,
    batch_embed,
    cosine,
    make_encoder,
    normalize,
)
from .errors import MMGalleryError
from .gallery import (
    FusionConfig,
    Gallery,
    GalleryBuildConfig,
    GalleryEntry,
    GalleryMetadata,
    build_gallery,
    fuse,
    insert_category,
    load_gallery,
    save_gallery,
)
from .harness import (
    EvalReport,
    ExperimentConfig,
    GridResult,
    evaluate,
    run_ablation,
    sample_k_shot,
    sweep,
)
from .manifest import DatasetManifest, ManifestRecord, load_manifest, save_manifest
from .pipeline import ABLATION_MODES, QueryPipeline, make_captioner
from .retrieval import (
    AffinityResult,
    RetrievalConfig,
    affinity,
    brute_force_oracle,
    classify,
)
from .selector import (
    ClassCenter,
    ReferenceSet,
    compute_class_centers,
    select_references,
)
from .server import GalleryService, make_server, serve
from .synth import SynthWorld, SynthWorldConfig, generate_world

__version__ = "0.1.0"

__all__ = [
    "ABLATION_MODES",
    "AffinityResult",
    "BagOfTokensEncoder",
    "Captioner",
    "ChatBackendDescriptor",
    "ClassCenter",
    "DatasetManifest",
    "DescriptionCache",
    "EmbeddingVector",
    "EncoderDescriptor",
    "EvalReport",
    "ExperimentConfig",
    "FusionConfig",
    "Gallery",
    "GalleryBuildConfig",
    "GalleryEntry",
    "GalleryMetadata",
    "GalleryService",
    "GridResult",
    "MMGalleryError",
    "ManifestRecord",
    "MockEncoder",
    "NaiveCaptioner",
    "PrecomputedEncoder",
    "PromptTemplates",
    "QueryPipeline",
    "ReferenceSet",
    "RemoteEncoder",
    "RetrievalConfig",
    "StructuredDescription",
    "SynthWorld",
    "SynthWorldConfig",
    "affinity",
    "batch_embed",
    "brute_force_oracle",
    "build_gallery",
    "classify",
    "compute_class_centers",
    "cosine",
    "description_key",
    "evaluate",
    "fuse",
    "generate_world",
    "insert_category",
    "load_gallery",
    "load_manifest",
    "make_chat_backend",
    "make_encoder",
    "make_server",
    "normalize",
    "parse_region_list",
    "run_ablation",
    "sample_k_shot",
    "save_gallery",
    "save_manifest",
    "select_references",
    "serve",
    "sweep",
    "__version__",
]
