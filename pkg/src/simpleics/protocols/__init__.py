from .modbus import ModbusError, ModbusFrame, modbus_decode, modbus_encode
from .mqtt import MqttError, MqttPacket, mqtt_decode, mqtt_encode
from .broker import Broker, topic_matches

__all__ = [
    "Broker", "ModbusError", "ModbusFrame", "MqttError", "MqttPacket",
    "modbus_decode", "modbus_encode", "mqtt_decode", "mqtt_encode", "topic_matches",
]
