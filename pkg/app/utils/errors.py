"""
Exception hierarchy shared by every pipeline stage.

Each error carries a short machine-readable code; the command layer turns it
into a JSON error response and a non-zero exit status.
"""


class PipelineError(Exception):
    code = 'PROCESSING_ERROR'

    def __init__(self, message, code=None):
        super().__init__(message)
        self.message = message
        if code is not None:
            self.code = code


class ConfigError(PipelineError):
    code = 'CONFIG_ERROR'


class MissingInputError(PipelineError):
    code = 'MISSING_INPUT'


class SchemaError(PipelineError):
    code = 'SCHEMA_MISMATCH'

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DimensionError(PipelineError):
    code = 'DIMENSION_MISMATCH'

    def __init__(self, message, layer_index=None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class NonFiniteError(PipelineError):
    code = 'NON_FINITE'


class TrainingDivergedError(PipelineError):
    code = 'TRAINING_DIVERGED'

    def __init__(self, message, last_good_state=None):
        super().__init__(message)
        # state dict of the last finite model, restorable with load_state_dict
        self.last_good_state = last_good_state
