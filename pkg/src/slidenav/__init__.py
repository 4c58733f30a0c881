"""slidenav: budgeted surprise-guided navigation over precomputed slide tiles.

An online reconstruction memory scans low-magnification tile features and
marks slide-atypical regions; distance-based NMS builds a compact ROI pool;
question relevance reranks within the pool; fresh per-ROI local memories pick
high-magnification evidence under strict budgets. The terminal artifacts are
a trajectory report and an adjudication packet for a downstream answerer.
"""

from .archive import ArchiveIndex, add_case, load_archive, retrieve, save_archive, slide_embedding
from .core import (
    DeterministicRng,
    EngineConfig,
    FeatureStream,
    QuestionSpec,
    TileRecord,
    derive_substream,
    validate_stream,
)
from .memory import (
    MemoryState,
    SurpriseResult,
    batch_score_surprise,
    forward,
    huber_loss,
    init_memory,
    observe_tile,
    score_surprise,
    summary_stats,
)
from .pipeline import PipelineError, TrajectoryReport, run, scan_for_slide
from .readout import (
    AdjudicationPacket,
    EvidenceSet,
    assemble_evidence,
    build_packet,
    local_neighborhood,
    render_navigation_summary,
    select_local_evidence,
)
from .router import (
    KeywordTable,
    RoutingDecision,
    categorize,
    default_keyword_table,
    load_keyword_table,
    route,
    split_rounds,
)
from .scan import RoiPool, SurpriseField, nms_pool, scan_slide
from .search import (
    RankedTargets,
    RelevanceSource,
    cosine_similarity,
    fuse_and_select,
    minmax_normalize,
    relevance_scores,
)

__version__ = "0.1.0"
