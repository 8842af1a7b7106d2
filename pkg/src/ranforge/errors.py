"""Error taxonomy shared by every module.

Each error carries a stable machine ``code`` (used as the ``code`` field of the
HTTP error body), an HTTP status, and a CLI exit code. Exit codes are grouped
by error class so scripts can branch on them without parsing output.
"""

from __future__ import annotations

from typing import Any

# CLI exit codes, one per error class
EXIT_GENERIC = 1
EXIT_USAGE = 2
EXIT_INVALID = 3
EXIT_NOT_FOUND = 4
EXIT_CONFLICT = 5
EXIT_RESOURCES = 6
EXIT_TEST = 7
EXIT_STORAGE = 8
EXIT_UNREACHABLE = 9


class RanforgeError(Exception):
    code = "internal_error"
    http_status = 500
    exit_code = EXIT_GENERIC
    retryable = False

    def __init__(self, message: str = "", detail: Any = None):
        super().__init__(message or self.code)
        self.message = message or self.code
        self.detail = detail

    def to_dict(self) -> dict:
        return {"code": self.code, "message": self.message, "detail": self.detail}


# -- invalid input ----------------------------------------------------------


class InvalidInput(RanforgeError):
    code = "invalid_input"
    http_status = 422
    exit_code = EXIT_INVALID


class SpecSyntaxError(InvalidInput):
    code = "spec_syntax"
    http_status = 400


class ValidationError(InvalidInput):
    """A document parsed but violates an invariant; ``field`` names the culprit."""

    code = "validation_failed"

    def __init__(self, field: str, message: str = ""):
        super().__init__(f"{field}: {message}" if message else field, detail={"field": field})
        self.field = field


class UnsupportedBand(InvalidInput):
    code = "unsupported_band"


class InvalidCron(InvalidInput):
    code = "invalid_cron"


class ConfigInvalid(InvalidInput):
    code = "config_invalid"


class ConfigMismatch(InvalidInput):
    code = "config_mismatch"
    http_status = 409


class MixedConfig(InvalidInput):
    code = "mixed_config"


class EmptyHistory(InvalidInput):
    code = "empty_history"
    http_status = 409


# -- not found --------------------------------------------------------------


class NotFound(RanforgeError):
    code = "not_found"
    http_status = 404
    exit_code = EXIT_NOT_FOUND


class PlanNotFound(NotFound):
    code = "plan_not_found"


class RunNotFound(NotFound):
    code = "run_not_found"


class TaskNotFound(NotFound):
    code = "task_not_found"


class ImageNotFound(NotFound):
    code = "image_not_found"


class PlacementNotFound(NotFound):
    code = "placement_not_found"


class DeploymentNotFound(NotFound):
    code = "deployment_not_found"


class BaselineNotFound(NotFound):
    code = "baseline_not_found"


class VerdictNotFound(NotFound):
    code = "verdict_not_found"


class NoTags(NotFound):
    code = "no_tags"


class NoData(NotFound):
    code = "no_data"


# -- conflicts / state ------------------------------------------------------


class Conflict(RanforgeError):
    code = "conflict"
    http_status = 409
    exit_code = EXIT_CONFLICT


class ConcurrentRunRejected(Conflict):
    code = "concurrent_run_rejected"


class PredecessorNotSatisfied(Conflict):
    code = "predecessor_not_satisfied"


class InvalidTransition(Conflict):
    code = "invalid_transition"


class TagConflict(Conflict):
    code = "tag_conflict"


class VerdictAlreadyRecorded(Conflict):
    code = "verdict_already_recorded"


class NotActive(Conflict):
    code = "placement_not_active"


class PlacementMissing(Conflict):
    code = "placement_missing"


class ArtifactMissing(Conflict):
    code = "artifact_missing"


class PlacementBusy(Conflict):
    code = "placement_busy"


class UeNotConnected(Conflict):
    code = "ue_not_connected"


# -- resources --------------------------------------------------------------


class ResourceError(RanforgeError):
    code = "resources_unavailable"
    http_status = 409
    exit_code = EXIT_RESOURCES


class NoFeasibleNode(ResourceError):
    code = "no_feasible_node"


class BandExhausted(ResourceError):
    code = "band_exhausted"


# -- build / test execution -------------------------------------------------


class ExecutionError(RanforgeError):
    code = "execution_failed"
    http_status = 500
    exit_code = EXIT_TEST


class PatchConflict(ExecutionError):
    code = "patch_conflict"
    http_status = 422

    def __init__(self, patch: str, message: str = ""):
        super().__init__(f"patch {patch} does not apply: {message}", detail={"patch": patch})
        self.patch = patch


class BuildFailed(ExecutionError):
    code = "build_failed"

    def __init__(self, message: str, log: str = ""):
        super().__init__(message, detail={"log": log})
        self.log = log


class TaskFailed(ExecutionError):
    code = "task_failed"


class AttachTimeout(ExecutionError):
    code = "attach_timeout"
    http_status = 504
    retryable = True


class NoCore(ExecutionError):
    code = "no_core"
    http_status = 409


class NoTrafficServer(ExecutionError):
    code = "no_traffic_server"
    http_status = 409


class ServerStuck(ExecutionError):
    code = "server_stuck"
    http_status = 504
    retryable = True

    def __init__(self, message: str = "", test_run: Any = None):
        super().__init__(message or "traffic server stuck")
        self.test_run = test_run


# -- storage / reachability -------------------------------------------------


class StorageFailure(RanforgeError):
    code = "storage_failure"
    http_status = 503
    exit_code = EXIT_STORAGE
    retryable = True


class VaultUnavailable(StorageFailure):
    code = "vault_unavailable"


class DigestMismatch(StorageFailure):
    code = "digest_mismatch"
    http_status = 500
    retryable = False


class CorruptRecord(StorageFailure):
    code = "corrupt_record"
    http_status = 500
    retryable = False


class Unreachable(RanforgeError):
    code = "unreachable"
    http_status = 502
    exit_code = EXIT_UNREACHABLE
    retryable = True


class RepoUnreachable(Unreachable):
    code = "repo_unreachable"


class RegistryUnreachable(Unreachable):
    code = "registry_unreachable"


class BindFailure(Unreachable):
    code = "bind_failure"
    retryable = False


def all_error_classes() -> list[type[RanforgeError]]:
    seen: list[type[RanforgeError]] = []
    stack = [RanforgeError]
    while stack:
        cls = stack.pop()
        seen.append(cls)
        stack.extend(cls.__subclasses__())
    return seen
