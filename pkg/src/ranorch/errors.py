"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto its
contract: 1 validation failure, 2 execution failure, 3 infrastructure error.
"""

from __future__ import annotations


class RanOrchError(Exception):
    exit_code = 2


# -- validation (exit 1) -----------------------------------------------------

class ValidationFailure(RanOrchError):
    exit_code = 1


class CatalogError(ValidationFailure):
    """A component name or id does not resolve against the catalog."""


class UnknownComponent(CatalogError):
    pass


class DuplicateId(CatalogError):
    pass


class UnknownPeer(CatalogError):
    pass


class ConfigError(ValidationFailure):
    pass


class SchemaError(ConfigError):
    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path


class ConfigTypeError(ConfigError, TypeError):
    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path


class RangeError(ConfigError, ValueError):
    pass


class ParamMismatch(ConfigError):
    pass


class DuplicateSerial(ConfigError):
    pass


class BadImsi(ConfigError):
    pass


class IncompatibleScenario(ConfigError):
    def __init__(self, report):
        super().__init__(report.message)
        self.report = report


class AgentFailure(ValidationFailure):
    pass


class BudgetExhausted(AgentFailure):
    pass


class WallTimeout(AgentFailure):
    pass


# -- execution (exit 2) ------------------------------------------------------

class ExecutionError(RanOrchError):
    exit_code = 2


class NoFeasibleNode(ExecutionError):
    def __init__(self, message: str, reasons: dict[str, str] | None = None):
        self.reasons = dict(reasons or {})
        if self.reasons:
            detail = "; ".join(f"{k}: {v}" for k, v in sorted(self.reasons.items()))
            message = f"{message} ({detail})"
        super().__init__(message)


class VfExhausted(ExecutionError):
    pass


class UnknownRu(ExecutionError):
    pass


class MissingParent(ExecutionError):
    pass


class NoPoolNode(ExecutionError):
    pass


class WrongPool(ExecutionError):
    pass


class UnknownImage(ExecutionError):
    pass


class StartTimeout(ExecutionError):
    pass


class UnknownUe(ExecutionError):
    pass


class DeploymentNotReady(ExecutionError):
    pass


class AlreadyDeployed(ExecutionError):
    pass


class UnknownProfile(ExecutionError):
    pass


class NoHistory(ExecutionError):
    pass


class StorageError(ExecutionError):
    pass


# -- infrastructure (exit 3) -------------------------------------------------

class InfrastructureError(RanOrchError):
    exit_code = 3


class BackendUnavailable(InfrastructureError):
    pass


class UnknownNode(InfrastructureError):
    pass


class UnknownPool(InfrastructureError):
    pass


class UnknownNic(InfrastructureError):
    pass


class DuplicateNode(InfrastructureError):
    pass


class NodeFailed(InfrastructureError):
    pass


class InvalidTransition(InfrastructureError):
    pass


class ProfileError(InfrastructureError):
    pass
