"""worldhook: an event-trigger gateway between virtual worlds and devices.

World scripts POST a string payload to a unique URL; the gateway decodes the
trigger envelope, runs the registered handler, and answers with a normalized
JSON response. Simulated devices, a mock smart-home cloud, and a deterministic
world harness make every interaction pattern reproducible without hardware.
"""

from .devices import (
    DeviceFaultError,
    DeviceKind,
    DeviceRegistry,
    Doorbell,
    Fan,
    FanState,
    Level,
    PresenceLamp,
    ToneSpeaker,
    VirtualGpioBank,
)
from .envelope import (
    ErrorCode,
    GatewayError,
    HandlerResponse,
    ResponseStatus,
    SmartHomeRequest,
    TriggerEnvelope,
    canonical_json,
    decode_envelope,
    encode_envelope,
    parse_smarthome_request,
    serialize_error,
    serialize_response,
)
from .gateway import (
    GatewayApp,
    GatewayConfig,
    GatewayStartupError,
    HandlerRegistration,
    RegistrationError,
    RequestLog,
    RequestRecord,
    ServerHandle,
    run,
)
from .smarthome import (
    CommandRequest,
    DeviceStatus,
    DeviceType,
    Fixture,
    SmartHomeClient,
    SmartHomeError,
    default_workshop_fixture,
    dispatch,
    make_gateway_handler,
    start_mock,
)
from .tunnel import (
    TokenRegistry,
    TunnelEndpoint,
    TunnelError,
    TunnelMode,
    close_tunnel,
    open_tunnel,
)
from .world import (
    AttachedScript,
    RateLimiter,
    Scenario,
    ScenarioError,
    ScenarioEvent,
    ScenarioParseError,
    SimulatedUser,
    World,
    WorldItem,
    WorldReport,
    load_scenario,
    parse_scenario,
    run_scenario,
)

__version__ = "0.1.0"

__all__ = [
    "AttachedScript",
    "CommandRequest",
    "DeviceFaultError",
    "DeviceKind",
    "DeviceRegistry",
    "DeviceStatus",
    "DeviceType",
    "Doorbell",
    "ErrorCode",
    "Fan",
    "FanState",
    "Fixture",
    "GatewayApp",
    "GatewayConfig",
    "GatewayError",
    "GatewayStartupError",
    "HandlerRegistration",
    "HandlerResponse",
    "Level",
    "PresenceLamp",
    "RateLimiter",
    "RegistrationError",
    "RequestLog",
    "RequestRecord",
    "ResponseStatus",
    "Scenario",
    "ScenarioError",
    "ScenarioEvent",
    "ScenarioParseError",
    "ServerHandle",
    "SimulatedUser",
    "SmartHomeClient",
    "SmartHomeError",
    "SmartHomeRequest",
    "TokenRegistry",
    "ToneSpeaker",
    "TriggerEnvelope",
    "TunnelEndpoint",
    "TunnelError",
    "TunnelMode",
    "VirtualGpioBank",
    "World",
    "WorldItem",
    "WorldReport",
    "canonical_json",
    "close_tunnel",
    "decode_envelope",
    "default_workshop_fixture",
    "dispatch",
    "encode_envelope",
    "load_scenario",
    "make_gateway_handler",
    "open_tunnel",
    "parse_scenario",
    "parse_smarthome_request",
    "run",
    "run_scenario",
    "serialize_error",
    "serialize_response",
    "start_mock",
]
