"""cimrag: a bit-accurate, cycle-approximate simulator of a ReRAM
compute-in-memory retrieval accelerator, with a harness for measuring how
quantization, read errors, bit remapping, and sum-based error detection
affect retrieval quality, latency, and energy."""

__version__ = "0.1.0"
