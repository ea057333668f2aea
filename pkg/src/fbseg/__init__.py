"""Feedback segmentation: a recurrent error-correcting U-Net on synthetic polygons."""

__version__ = "0.1.0"


def __getattr__(name):
    # estimators pull in scikit-learn; keep plain imports of fbseg light
    if name in ("FeedbackSegmenter", "FeedforwardSegmenter"):
        from fbseg import estimators

        return getattr(estimators, name)
    raise AttributeError(f"module 'fbseg' has no attribute {name!r}")
