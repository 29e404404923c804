"""
Exception hierarchy shared by every module.
Each class also refines a builtin so plain `except ValueError` callers keep working.
"""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class MrascError(Exception):
    exit_code = EXIT_RUNTIME


class UsageError(MrascError):
    exit_code = EXIT_USAGE


class ValidationError(MrascError, ValueError):
    exit_code = EXIT_VALIDATION


class ManifestParseError(ValidationError):
    def __init__(self, line, message):
        super().__init__(f"manifest line {line}: {message}")
        self.line = line


class LabelError(ValidationError):
    pass


class ConfigurationError(ValidationError):
    pass


class IncompleteStoreError(ValidationError):
    def __init__(self, missing):
        self.missing = list(missing)
        shown = ', '.join(self.missing[:10])
        more = f" (+{len(self.missing) - 10} more)" if len(self.missing) > 10 else ''
        super().__init__(f"segment store is missing {len(self.missing)} tuples: {shown}{more}")


class InfeasibleFoldsError(ValidationError):
    def __init__(self, class_label, n_locations, fold_count):
        super().__init__(
            f"class '{class_label}' has {n_locations} locations, fewer than {fold_count} folds")
        self.class_label = class_label


class AudioFormatError(MrascError, ValueError):
    pass


class UnsupportedFormatError(AudioFormatError):
    pass


class CorruptFileError(AudioFormatError):
    pass


class InsufficientInputError(MrascError, ValueError):
    pass


class ShapeError(MrascError, ValueError):
    pass


class ModelBuildError(ShapeError):
    pass


class InputError(MrascError, ValueError):
    pass


class TrainingDivergedError(MrascError, FloatingPointError):
    def __init__(self, epoch, batch, layer):
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch}; first non-finite layer: {layer}")
        self.epoch = epoch
        self.batch = batch
        self.layer = layer
