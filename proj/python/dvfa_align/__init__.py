"""Visual speech forced alignment toolkit."""

from ._dvfa import (  # noqa: F401
    DataError,
    ModelError,
    ShapeError,
    align,
    boundary_mae_frames,
    ctc_segment,
    decode_alignment,
    evaluate,
    export_srt,
    frame_accuracy,
    gen_data,
    train,
)

__all__ = [
    "DataError",
    "ModelError",
    "ShapeError",
    "align",
    "boundary_mae_frames",
    "ctc_segment",
    "decode_alignment",
    "evaluate",
    "export_srt",
    "frame_accuracy",
    "gen_data",
    "train",
]
