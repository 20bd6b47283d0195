"""Open-world tracking evaluation over NDJSON track files."""

from .matching import iou, iou_matrix, match_frame
from .metric import (
    SPLITS,
    AlphaResult,
    OwtaConfig,
    OwtaError,
    OwtaResult,
    compute_owta,
    default_alphas,
    parse_alphas,
    split_gt,
)
from .records import (
    TrackFileError,
    TrackRecord,
    TrackSet,
    dumps_track_set,
    parse_track_file,
    parse_track_lines,
    write_track_file,
)

__all__ = [
    "SPLITS", "AlphaResult", "OwtaConfig", "OwtaError", "OwtaResult", "TrackFileError", "TrackRecord",
    "TrackSet", "compute_owta", "default_alphas", "dumps_track_set", "iou", "iou_matrix", "match_frame",
    "parse_alphas", "parse_track_file", "parse_track_lines", "split_gt", "write_track_file",
]
