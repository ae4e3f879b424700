"""seldkit: sound event localization and detection, from scratch in NumPy.

Subpackages cover feature extraction (dsp), the layer zoo with manual
backpropagation (nn), the SELDnet and SELD-TCN assemblies (models), the
segment/DOA metric suite (metrics), synthetic ambisonics scenes (synth),
and the operator CLI (cli).
"""

__version__ = "0.1.0"
