"""Software model of an MQ-6 gas alarm: sensor chain, alarm firmware,
GSM/AT modem emulation and a telemetry gateway, driven by leak scenarios."""

from gasguard.sensor import GasSpecies, SensorModel, SensorReading, default_model

__all__ = ["GasSpecies", "SensorModel", "SensorReading", "default_model"]
__version__ = "0.1.0"
