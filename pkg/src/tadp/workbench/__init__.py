from .config import ConfigError, ExperimentConfig, load_config
from .datasets import DatasetAdapter, DatasetError, Sample, open_dataset
from .synth import synth_dataset
