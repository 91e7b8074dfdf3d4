"""Binary convolutional encoder-decoder network for pixel-wise character salience."""

from .bintensor import BitTensor, pack, to_pm, unpack, xnor_popcount_dot
from .netgraph import NetConfig, Network, build, default_config, forward, parse_config, small_config
from .textgen import LabeledSample, RenderParams, render_dataset, render_sample

__version__ = "0.1.0"

__all__ = [
    "BitTensor",
    "LabeledSample",
    "NetConfig",
    "Network",
    "RenderParams",
    "build",
    "default_config",
    "forward",
    "pack",
    "parse_config",
    "render_dataset",
    "render_sample",
    "small_config",
    "to_pm",
    "unpack",
    "xnor_popcount_dot",
]
