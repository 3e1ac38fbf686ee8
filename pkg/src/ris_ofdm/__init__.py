"""RIS-aided uplink MIMO-OFDM: simulation, state evolution and power-minimising optimizers."""

__version__ = "0.1.0"
