"""spikekit: spiking transformers (SSA attention, SPS/SCS stems, masked pretraining) on numpy."""
__version__ = "0.1.0"
