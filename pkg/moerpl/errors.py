import json


# __Author__: pablo-chacon
# __Version__: 2.0.0
# __Date__: 2026-09-14

"""Exceptions raised by the compression lab.

Every error carries a stable ``kind`` so the CLI can print one machine-parseable
JSON line on stderr."""


class MoerplError(Exception):
    kind = 'error'

    def __init__(self, message, **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self):
        payload = {'error': self.kind, 'message': self.message}
        for key, value in self.details.items():
            payload[key] = value
        return payload

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, default=str)


class ContractViolation(MoerplError):
    kind = 'contract_violation'


class PreconditionError(MoerplError):
    kind = 'precondition'


class ConfigError(MoerplError):
    kind = 'config'


class NonFiniteLossError(MoerplError):
    kind = 'non_finite_loss'

    # The partial loss trace rides along so callers can inspect the divergence.
    def __init__(self, message, trace=None, **details):
        super().__init__(message, **details)
        self.trace = trace


class CheckpointError(MoerplError):
    kind = 'checkpoint'


class CheckpointVersionError(CheckpointError):
    kind = 'checkpoint_version'


class CheckpointBoundsError(CheckpointError):
    kind = 'checkpoint_bounds'


class InfeasibleTargetError(MoerplError):
    kind = 'target_infeasible'

    def __init__(self, message, max_rho, **details):
        super().__init__(message, max_rho=max_rho, **details)
        self.max_rho = max_rho


class MissingArtifactError(MoerplError):
    kind = 'missing_artifact'

    def __init__(self, artifact, phase):
        super().__init__(f"Phase '{phase}' needs {artifact}, run the earlier phase first",
                         artifact=str(artifact), phase=phase)
        self.artifact = artifact
