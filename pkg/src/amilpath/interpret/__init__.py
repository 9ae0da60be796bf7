"""Attention heat maps and nucleus-morphometry feature importance."""

from .feature_bags import (
    NucleusFeatureBag,
    NucleusHistogramTransformer,
    SlideMorphometry,
    build_feature_bags,
    load_feature_bags,
    save_feature_bags,
)
from .heatmap import HeatmapLayer, heatmap_export, patch_origin, render_overlay
from .importance import ImportanceReport, rank_feature_importance
from .nuclei import (
    FEATURES,
    ClassicalNucleusSegmenter,
    NucleusRecord,
    nucleus_morphometry,
    patch_morphometry,
    segment_nuclei,
    write_nucleus_csv,
)
