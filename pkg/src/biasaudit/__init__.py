"""Jury-based bias audit pipeline for textbook page images."""

from .backends import (
    BackendHandle,
    BackendPrice,
    CostEntry,
    CostLedger,
    HttpChatBackend,
    ModelRequest,
    ModelResponse,
    PriceTable,
    RetryingBackend,
    ScriptedBackend,
    Stage,
)
from .domain import (
    Attribution,
    FinalVerdict,
    JurorVerdict,
    SEVERITY_SCALE,
    Strategy,
    TaxonomyCategory,
    TaxonomyDomain,
    TaxonomyRegistry,
    severity_label,
    severity_score,
    validate_juror_verdict,
)
from .jury import JuryRecord, adjudicate_excerpt, parse_juror_output, retry_schema
from .meta import (
    AggregationConfig,
    aggregate_deliberative,
    aggregate_heuristic,
    confidence_weighted_severity,
    high_confidence_consensus,
    plurality_category,
    round_severity,
    severity_range,
)
from .report import (
    agreement_stats,
    attribution_split,
    build_summary,
    category_table,
    render_report,
    severity_distribution,
)
from .screening import (
    DocumentManifest,
    FlaggedExcerpt,
    PageBatch,
    make_batches,
    parse_screening_output,
    screen_batch,
)

__version__ = "0.1.0"
