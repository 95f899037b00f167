"""Metadata-informed time series forecasting with Transformer token fusion."""

from .config import (
    AggregationStrategy,
    ModelConfig,
    long_term_config,
    long_term_run_matrix,
    short_term_config,
)
from .data import (
    DatasetDescriptor,
    SplitSpec,
    TimeWindowSample,
    ingest,
    load_csv,
    load_registry,
    split_and_normalize,
    window_count,
    window_stream,
)
from .encoding import (
    EmbeddingCache,
    HashStubBackend,
    MetaEmbedder,
    ModalAlign,
    RouterAggregator,
    ServiceBackend,
    aggregate,
    encode_text,
    meta_embed,
)
from .evaluation import (
    AttentionMap,
    ForecastMetrics,
    compute_metrics,
    export_meta_representations,
    extract_attention,
    result_table,
)
from .metadata import (
    MetadataBundle,
    SampleStats,
    TaskDescriptor,
    meta_parse,
    render_dataset_text,
    render_sample_text,
    render_task_text,
)
from .model import (
    MetaTST,
    informative_concat,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from .tokens import TokenBlock
from .training import (
    ForecastDataset,
    SampleSet,
    build_forecast_dataset,
    build_sample_set,
    l2_loss,
    linear_probe,
    mixed_batch_sampler,
    promotion,
    train_individual,
    train_joint,
    zero_shot_eval,
)

__version__ = "0.1.0"
