"""No-reference point cloud quality assessment."""

from ._core import (
    DataError,
    Error,
    NumericError,
    UsageError,
    census,
    extract_features,
    farthest_point_sample,
    fft,
    fftshift,
    gradcheck,
    init_checkpoint,
    knn_patch,
    load_ply,
    make_splits,
    normalize_unit_sphere,
    plcc,
    predict,
    rmse,
    smooth_l1,
    srocc,
    write_ply,
)

__all__ = [
    "DataError",
    "Error",
    "NumericError",
    "UsageError",
    "census",
    "extract_features",
    "farthest_point_sample",
    "fft",
    "fftshift",
    "gradcheck",
    "init_checkpoint",
    "knn_patch",
    "load_ply",
    "make_splits",
    "normalize_unit_sphere",
    "plcc",
    "predict",
    "rmse",
    "smooth_l1",
    "srocc",
    "write_ply",
]
