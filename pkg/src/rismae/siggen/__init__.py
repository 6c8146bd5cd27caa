from .channel import ChannelConfig, apply_cfo_phase, apply_channel, awgn, rayleigh_taps
from .dataset import (
    NOISE_FREE_I16,
    SPLITS,
    Dataset,
    DatasetManifest,
    IQFrame,
    filter_snr_grid,
    frame_channel,
    generate_dataset,
    generate_frame,
    split_counts,
    write_dataset,
)
from .modulation import (
    SCHEME_NAMES,
    SCHEMES,
    ModulationScheme,
    get_scheme,
    map_symbols,
    rrc_taps,
    upsample_and_shape,
)

__all__ = [
    "ChannelConfig", "apply_cfo_phase", "apply_channel", "awgn", "rayleigh_taps",
    "NOISE_FREE_I16", "SPLITS", "Dataset", "DatasetManifest", "IQFrame",
    "filter_snr_grid", "frame_channel", "generate_dataset", "generate_frame", "split_counts",
    "write_dataset", "SCHEME_NAMES", "SCHEMES", "ModulationScheme", "get_scheme",
    "map_symbols", "rrc_taps", "upsample_and_shape",
]
