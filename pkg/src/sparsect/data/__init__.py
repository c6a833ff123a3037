from .io import Dataset, export_detections, import_detections, save_dataset
from .synthetic import (
    CategorySpec,
    Episode,
    InsufficientInstances,
    Scene,
    SyntheticConfig,
    default_categories,
    generate_scene,
    generate_scenes,
    sample_episode,
    split_classes,
)
from .voc import VocAnnotation, VocErrorCode, VocObject, VocParseError, load_voc_dir, parse_voc_xml
