from .image import (COIL, DISCRETE_INPUT, HOLDING_REGISTER, INPUT_REGISTER, AddressError,
                    LadderAddress, RegisterBank, counts_to_volts, map_address, serve_modbus,
                    volts_to_counts)
from .ladder import LadderError, LadderProgram, scan

__all__ = [
    "COIL", "DISCRETE_INPUT", "HOLDING_REGISTER", "INPUT_REGISTER", "AddressError",
    "LadderAddress", "LadderError", "LadderProgram", "RegisterBank", "counts_to_volts",
    "map_address", "scan", "serve_modbus", "volts_to_counts",
]
